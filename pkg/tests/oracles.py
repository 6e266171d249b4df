"""Slow, loop-based reference implementations used only by tests.

Everything here is written longhand (explicit loops, direct formulas,
no shared code with the package) so that agreement with the vectorized
engine is evidence of correctness rather than of shared bugs.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# similarity / candidate selection


def oracle_cosine(u, v) -> float:
    nu = math.sqrt(sum(float(x) * float(x) for x in u))
    nv = math.sqrt(sum(float(x) * float(x) for x in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return sum(float(a) * float(b) for a, b in zip(u, v)) / (nu * nv)


def oracle_modality_similarity(fm_i, fm_j, fmbar_i, fmbar_j, alpha) -> float:
    return alpha * oracle_cosine(fm_i, fm_j) + (1 - alpha) * oracle_cosine(
        fmbar_i, fmbar_j
    )


def oracle_adjacent(i, n_views, cyclic):
    if cyclic:
        neighbors = {(i - 1) % n_views, (i + 1) % n_views} - {i}
    else:
        neighbors = {j for j in (i - 1, i + 1) if 0 <= j < n_views}
    return sorted(neighbors)


def oracle_select_candidates(features, alpha, k, cyclic=True):
    """Per view: {"2d": [(j, q), ...] per patch, "3d": ...} via explicit loops.

    features: per view a (f2d, f3d) pair of arrays.  Candidate order is
    adjacent views ascending, then score descending with lower q first.
    """
    n_views = len(features)
    n_patches = features[0][0].shape[0]
    k = min(k, n_patches)
    out = []
    for i in range(n_views):
        entry = {}
        for m_idx, m in enumerate(("2d", "3d")):
            mbar_idx = 1 - m_idx
            per_patch = []
            for p in range(n_patches):
                pairs = []
                for j in oracle_adjacent(i, n_views, cyclic):
                    scored = []
                    for q in range(n_patches):
                        s = oracle_modality_similarity(
                            features[i][m_idx][p],
                            features[j][m_idx][q],
                            features[i][mbar_idx][p],
                            features[j][mbar_idx][q],
                            alpha,
                        )
                        scored.append((s, q))
                    top = sorted(scored, key=lambda sq: (-sq[0], sq[1]))[:k]
                    pairs.extend((j, q) for _, q in top)
                per_patch.append(pairs)
            entry[m] = per_patch
        out.append(entry)
    return out


# ---------------------------------------------------------------------------
# attention


def oracle_attention(f_query, cand_lists, w_q, w_k, w_v):
    """Per-query scaled dot-product attention with explicit loops.

    cand_lists: per patch p, a list of candidate feature vectors.
    Softmax is evaluated directly (no max shift); fine at test scales.
    """
    n_patches, d = f_query.shape
    refined = np.zeros((n_patches, d))
    for p in range(n_patches):
        q_vec = w_q @ f_query[p]
        logits = []
        values = []
        for g in cand_lists[p]:
            k_vec = w_k @ np.asarray(g)
            logits.append(float(q_vec @ k_vec) / math.sqrt(d))
            values.append(w_v @ np.asarray(g))
        exps = [math.exp(z) for z in logits]
        denom = sum(exps)
        for e, v in zip(exps, values):
            refined[p] += (e / denom) * v
    return refined


# ---------------------------------------------------------------------------
# contrastive alignment (direct formulas)


def oracle_normalize_rows(mat):
    out = np.zeros_like(np.asarray(mat, dtype=np.float64))
    for p in range(out.shape[0]):
        norm = math.sqrt(float(sum(x * x for x in mat[p])))
        if norm > 0:
            out[p] = np.asarray(mat[p], dtype=np.float64) / norm
    return out


def oracle_similarity_matrix(f2d, f3d):
    a = oracle_normalize_rows(f2d)
    b = oracle_normalize_rows(f3d)
    n = a.shape[0]
    sim = np.zeros((n, n))
    for p in range(n):
        for q in range(n):
            sim[p, q] = float(sum(a[p] * b[q]))
    return sim


def oracle_infonce(sim) -> float:
    """Direct -(1/P) sum_p [S_pp - ln sum_q exp(S_pq)], no stability trick."""
    n = sim.shape[0]
    total = 0.0
    for p in range(n):
        denom = sum(math.exp(float(sim[p, q])) for q in range(n))
        total += float(sim[p, p]) - math.log(denom)
    return -total / n


def oracle_contrastive_loss(refined):
    """(l_view, l_diff, l_total) over per-view (2d, 3d) refined arrays."""
    n_views = len(refined)
    view_terms = [
        oracle_infonce(oracle_similarity_matrix(refined[i][0], refined[i][1]))
        for i in range(n_views)
    ]
    l_view = sum(view_terms) / n_views
    diff_terms = []
    for i in range(n_views - 1):
        d2 = np.asarray(refined[i + 1][0], dtype=np.float64) - np.asarray(
            refined[i][0], dtype=np.float64
        )
        d3 = np.asarray(refined[i + 1][1], dtype=np.float64) - np.asarray(
            refined[i][1], dtype=np.float64
        )
        diff_terms.append(oracle_infonce(oracle_similarity_matrix(d2, d3)))
    l_diff = sum(diff_terms) / len(diff_terms) if diff_terms else None
    l_total = l_view + (l_diff if l_diff is not None else 0.0)
    return l_view, l_diff, l_total


# ---------------------------------------------------------------------------
# geometric alignment


def oracle_geometric_loss(refined, corr):
    """Mean pair distance per (i,j), modalities averaged, loops throughout."""
    n_views = corr.n_views
    total = 0.0
    for i0 in range(n_views):
        neighbor_terms = []
        for (a, b), pq in sorted(corr.pairs.items()):
            if a != i0 or len(pq) == 0:
                continue
            mod_means = []
            for m_idx in (0, 1):
                dist_sum = 0.0
                for p, q in pq:
                    delta = np.asarray(
                        refined[a][m_idx][p], dtype=np.float64
                    ) - np.asarray(refined[b][m_idx][q], dtype=np.float64)
                    dist_sum += math.sqrt(float(sum(delta * delta)))
                mod_means.append(dist_sum / len(pq))
            neighbor_terms.append(sum(mod_means) / len(mod_means))
        if neighbor_terms:
            total += sum(neighbor_terms) / len(neighbor_terms)
    return total / n_views


# ---------------------------------------------------------------------------
# metrics


def oracle_auroc(scores, labels) -> float:
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def _oracle_regions_4c(mask):
    """4-connected components by breadth-first search."""
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    regions = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            members = []
            while stack:
                y, x = stack.pop()
                members.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            regions.append(members)
    return regions


def oracle_aupro(maps, masks, limit) -> float:
    """Exhaustive threshold enumeration of the PRO-vs-FPR curve."""
    regions = []
    neg_scores = []
    all_scores = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask) > 0
        for members in _oracle_regions_4c(mask):
            regions.append([float(amap[y, x]) for y, x in members])
        for y in range(mask.shape[0]):
            for x in range(mask.shape[1]):
                if not mask[y, x]:
                    neg_scores.append(float(amap[y, x]))
                all_scores.append(float(amap[y, x]))
    thresholds = sorted(set(all_scores), reverse=True)
    fpr = [0.0]
    pro = [0.0]
    for t in thresholds:
        fpr.append(sum(1 for s in neg_scores if s >= t) / len(neg_scores))
        pro.append(
            sum(
                sum(1 for s in region if s >= t) / len(region) for region in regions
            )
            / len(regions)
        )
    area = 0.0
    for a in range(1, len(fpr)):
        x0, x1 = fpr[a - 1], fpr[a]
        y0, y1 = pro[a - 1], pro[a]
        if x1 <= limit:
            area += 0.5 * (y0 + y1) * (x1 - x0)
        elif x0 < limit:
            y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            area += 0.5 * (y0 + y_at) * (limit - x0)
            break
        else:
            break
    return area / limit


def oracle_coreset(entries, keep):
    """Greedy farthest-point selection with explicit loops."""
    entries = np.asarray(entries, dtype=np.float64)
    m = len(entries)
    centroid = entries.mean(axis=0)
    best, best_d = 0, -1.0
    for idx in range(m):
        d = math.sqrt(float(sum((entries[idx] - centroid) ** 2)))
        if d > best_d:
            best, best_d = idx, d
    selected = [best]
    while len(selected) < keep:
        cand, cand_d = None, -1.0
        for idx in range(m):
            d_min = min(
                math.sqrt(float(sum((entries[idx] - entries[s]) ** 2)))
                for s in selected
            )
            if d_min > cand_d:
                cand, cand_d = idx, d_min
        selected.append(cand)
    return sorted(selected)


# ---------------------------------------------------------------------------
# camera geometry (longhand, for correspondence audits)


def oracle_pixel_ray(camera, u, v):
    """(origin, unit direction) of the ray through continuous pixel (u, v)."""
    rot = np.asarray(camera.rotation, dtype=np.float64)
    t = np.asarray(camera.translation, dtype=np.float64)
    origin = -rot.T @ t
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    d_world = rot.T @ d_cam
    return origin, d_world / math.sqrt(float(d_world @ d_world))


def oracle_project(camera, point):
    """(u, v, z) of a world point in the camera, computed longhand."""
    rot = np.asarray(camera.rotation, dtype=np.float64)
    t = np.asarray(camera.translation, dtype=np.float64)
    x = rot @ np.asarray(point, dtype=np.float64) + t
    return (
        camera.fx * x[0] / x[2] + camera.cx,
        camera.fy * x[1] / x[2] + camera.cy,
        float(x[2]),
    )


def oracle_sphere_hit(origin, direction, radius):
    """Smallest positive ray parameter hitting the origin-centered sphere."""
    b = float(np.dot(direction, origin))
    c = float(np.dot(origin, origin)) - radius * radius
    disc = b * b - c
    if disc < 0:
        return None
    root = math.sqrt(disc)
    for t in (-b - root, -b + root):
        if t > 1e-9:
            return t
    return None


def oracle_sphere_visibility(camera, point, radius, tol=1e-6) -> bool:
    """Re-cast toward ``point`` from the camera center of view j.

    Visible iff the first sphere hit along that ray is the point itself
    (within tolerance), i.e. no nearer surface occludes it.
    """
    rot = np.asarray(camera.rotation, dtype=np.float64)
    t = np.asarray(camera.translation, dtype=np.float64)
    origin = -rot.T @ t
    to_point = np.asarray(point, dtype=np.float64) - origin
    dist = math.sqrt(float(to_point @ to_point))
    direction = to_point / dist
    first = oracle_sphere_hit(origin, direction, radius)
    if first is None:
        return False
    return abs(first - dist) <= tol * max(1.0, dist)
