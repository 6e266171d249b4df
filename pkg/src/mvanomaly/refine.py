"""Selective cross-view feature refinement.

For every patch we score patches of adjacent views with a blend of
same-modality and other-modality cosine similarity, keep the top-k per
adjacent view, and rebuild the patch feature as scaled dot-product
attention over those candidates.  Candidate selection has no trainable
parameters; only the q/k/v projections learn.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datamodel import FeatureMap
from .errors import ConfigError, DataError, DegenerateInputWarning, EngineWarning
from .tensorio import read_tensor, write_tensor

MODALITIES = ("2d", "3d")


@dataclass
class ProjectionParams:
    """Named square q/k/v projection matrices, float64.

    ``roles[modality]`` maps each of "q", "k", "v" to a tensor name in
    ``tensors``.  With sharing enabled both modalities point at the same
    names, so there is exactly one array per role.
    """

    tensors: dict
    roles: dict

    def __post_init__(self):
        for modality, mapping in self.roles.items():
            for role in ("q", "k", "v"):
                name = mapping[role]
                if name not in self.tensors:
                    raise ConfigError(f"role {modality}/{role} -> missing tensor {name}")
        for name, arr in self.tensors.items():
            if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
                raise ConfigError(f"tensor {name} is not square: {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"tensor {name} has non-finite entries")

    @classmethod
    def initial(cls, dims: dict, seed: int = 0, noise: float = 0.01,
                shared: bool = False) -> "ProjectionParams":
        """Identity plus small Gaussian noise, one q/k/v triple per modality.

        ``dims`` maps modality to feature dim.  ``shared=True`` uses a single
        triple for all modalities (requires equal dims).
        """
        rng = np.random.default_rng(seed)
        tensors = {}
        roles = {}
        if shared:
            first = next(iter(dims.values()))
            if any(d != first for d in dims.values()):
                raise ConfigError("shared projections require equal modality dims")
            for role in ("q", "k", "v"):
                tensors[role] = np.eye(first) + noise * rng.standard_normal((first, first))
            for modality in dims:
                roles[modality] = {"q": "q", "k": "k", "v": "v"}
        else:
            for modality, d in dims.items():
                roles[modality] = {}
                for role in ("q", "k", "v"):
                    name = f"{modality}.{role}"
                    tensors[name] = np.eye(d) + noise * rng.standard_normal((d, d))
                    roles[modality][role] = name
        return cls(tensors=tensors, roles=roles)

    def matrix(self, modality: str, role: str) -> np.ndarray:
        return self.tensors[self.roles[modality][role]]

    def zero_grads(self) -> dict:
        return {name: np.zeros_like(arr) for name, arr in self.tensors.items()}

    def copy(self) -> "ProjectionParams":
        return ProjectionParams(
            tensors={n: a.copy() for n, a in self.tensors.items()},
            roles={m: dict(r) for m, r in self.roles.items()},
        )


def save_projection_params(params: ProjectionParams, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in params.tensors.items():
        fname = name.replace(".", "_") + ".ft32"
        write_tensor(directory / fname, arr)
        files[name] = fname
    manifest = {"tensors": files, "roles": params.roles}
    (directory / "params.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_projection_params(directory) -> ProjectionParams:
    directory = Path(directory)
    manifest_path = directory / "params.json"
    if not manifest_path.is_file():
        raise DataError(f"no params.json under {directory}")
    manifest = json.loads(manifest_path.read_text())
    tensors = {
        name: read_tensor(directory / fname).astype(np.float64)
        for name, fname in manifest["tensors"].items()
    }
    return ProjectionParams(tensors=tensors, roles=manifest["roles"])


# ---------------------------------------------------------------------------
# candidate selection


@dataclass(frozen=True)
class CandidateSet:
    """Per view and modality: int array (P, n_cand, 2) of (view_j, patch_q).

    ``by_view`` is a tuple over views (0-based) of dicts keyed by modality.
    Candidate count is k per adjacent view; adjacent views are ordered by
    ascending index and the k entries per view by descending score with
    ties broken toward the lower patch index.
    """

    by_view: tuple
    k: int
    cyclic: bool


def adjacent_views(i: int, n_views: int, cyclic: bool = True) -> tuple:
    """0-based neighbor indices of view ``i``, ascending, never containing i."""
    if cyclic:
        neighbors = {(i - 1) % n_views, (i + 1) % n_views}
    else:
        neighbors = {j for j in (i - 1, i + 1) if 0 <= j < n_views}
    neighbors.discard(i)
    return tuple(sorted(neighbors))


def _feature_array(entry) -> np.ndarray:
    if isinstance(entry, FeatureMap):
        return np.asarray(entry.features, dtype=np.float64)
    return np.asarray(entry, dtype=np.float64)


def _split_modalities(features: Sequence) -> dict:
    """features: per view, a (2d, 3d) pair of FeatureMap or array."""
    per_mod = {m: [] for m in MODALITIES}
    for pair in features:
        f2d, f3d = pair
        per_mod["2d"].append(_feature_array(f2d))
        per_mod["3d"].append(_feature_array(f3d))
    return per_mod


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return np.where(norms > 0, a / np.where(norms > 0, norms, 1.0), 0.0)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine with zero vectors contributing similarity 0."""
    return _unit_rows(np.asarray(a, dtype=np.float64)) @ _unit_rows(
        np.asarray(b, dtype=np.float64)
    ).T


def modality_aware_similarity(fm_i, fm_j, fmbar_i, fmbar_j, alpha: float = 0.8) -> float:
    """Blend of same-modality and other-modality cosine for one patch pair."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0,1], got {alpha}")

    def _cos(u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        nu = np.linalg.norm(u)
        nv = np.linalg.norm(v)
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return float(u @ v / (nu * nv))

    return alpha * _cos(fm_i, fm_j) + (1.0 - alpha) * _cos(fmbar_i, fmbar_j)


def select_candidates(
    features: Sequence, alpha: float = 0.8, k: int = 8, cyclic: bool = True
) -> CandidateSet:
    """Top-k adjacent-view candidates per (view, patch, modality).

    Scores blend same- and other-modality cosine with weight ``alpha`` on
    the modality being refined.  Ties keep the lower patch index.  k is
    clamped to P with a warning when oversized.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0,1], got {alpha}")
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    n_views = len(features)
    if n_views < 2:
        raise DataError("candidate selection needs at least 2 views")
    per_mod = _split_modalities(features)
    n_patches = per_mod["2d"][0].shape[0]
    if k > n_patches:
        warnings.warn(
            f"k={k} exceeds patch count P={n_patches}; clamping", EngineWarning
        )
        k = n_patches
    unit = {m: [_unit_rows(f) for f in per_mod[m]] for m in MODALITIES}

    by_view = []
    for i in range(n_views):
        neighbors = adjacent_views(i, n_views, cyclic)
        entry = {}
        for m in MODALITIES:
            mbar = "3d" if m == "2d" else "2d"
            chunks = []
            for j in neighbors:
                cos_same = unit[m][i] @ unit[m][j].T
                cos_other = unit[mbar][i] @ unit[mbar][j].T
                scores = alpha * cos_same + (1.0 - alpha) * cos_other
                # stable sort on negated scores keeps the lower index on ties
                order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
                pair = np.stack(
                    [np.full_like(order, j), order], axis=2
                )
                chunks.append(pair)
            if chunks:
                entry[m] = np.concatenate(chunks, axis=1)
            else:
                entry[m] = np.zeros((n_patches, 0, 2), dtype=np.int64)
        by_view.append(entry)
    return CandidateSet(by_view=tuple(by_view), k=k, cyclic=cyclic)


# ---------------------------------------------------------------------------
# attention


def gather_candidates(per_view_features: Sequence[np.ndarray], pairs: np.ndarray) -> np.ndarray:
    """(P, C, d) candidate feature rows for pair indices (P, C, 2)."""
    stacked = np.stack([np.asarray(f, dtype=np.float64) for f in per_view_features])
    return stacked[pairs[:, :, 0], pairs[:, :, 1]]


def attention_forward(
    f_query: np.ndarray,
    cand: np.ndarray,
    w_q: np.ndarray,
    w_k: np.ndarray,
    w_v: np.ndarray,
) -> tuple:
    """Scaled dot-product attention of each query over its candidate rows.

    f_query: (P, d); cand: (P, C, d).  Returns (refined (P, d), cache)
    where the cache carries every intermediate needed for the backward
    pass.  Softmax subtracts the row max before exponentiation.
    """
    f_query = np.asarray(f_query, dtype=np.float64)
    cand = np.asarray(cand, dtype=np.float64)
    d = f_query.shape[1]
    q = f_query @ w_q.T
    k = cand @ w_k.T
    v = cand @ w_v.T
    logits = np.einsum("pd,pcd->pc", q, k) / np.sqrt(d)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    weights = expl / expl.sum(axis=1, keepdims=True)
    refined = np.einsum("pc,pcd->pd", weights, v)
    cache = {
        "f_query": f_query, "cand": cand, "q": q, "k": k, "v": v,
        "weights": weights, "scale": 1.0 / np.sqrt(d),
    }
    return refined, cache


def refine_sample(
    features: Sequence,
    candidates: CandidateSet,
    params: ProjectionParams,
    residual: bool = False,
) -> list:
    """Refined (2d, 3d) FeatureMap pairs for one sample.

    Falls back to W_v applied to the query feature (with a warning) for
    queries with no candidates, which only happens for single-view input.
    """
    per_mod = _split_modalities(features)
    out = []
    for i, pair in enumerate(features):
        maps = {}
        for m, source in zip(MODALITIES, pair):
            feats = per_mod[m][i]
            pairs = candidates.by_view[i][m]
            if pairs.shape[1] == 0:
                warnings.warn(
                    f"view {i}: no candidates for modality {m}; "
                    "falling back to value projection of the query",
                    DegenerateInputWarning,
                )
                refined = feats @ params.matrix(m, "v").T
            else:
                cand = gather_candidates(per_mod[m], pairs)
                refined, _ = attention_forward(
                    feats, cand,
                    params.matrix(m, "q"), params.matrix(m, "k"),
                    params.matrix(m, "v"),
                )
            if residual:
                refined = refined + feats
            template = source if isinstance(source, FeatureMap) else None
            if template is None:
                raise ConfigError("refine_sample needs FeatureMap inputs")
            maps[m] = FeatureMap(
                view_index=template.view_index,
                modality=m,
                grid=template.grid,
                features=refined.astype(np.float32),
                refined=True,
            )
        out.append((maps["2d"], maps["3d"]))
    return out
