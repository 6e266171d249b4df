"""Optimization of the q/k/v projections on normal samples.

The total objective is lambda_contrast * (view term + differential term)
plus lambda_geometric * the correspondence penalty.  Gradients are
derived by hand and propagated in float64 through the attention, the
row normalizations, both InfoNCE terms, and the pairwise distances;
candidate sets and correspondence sets are geometry/similarity
artifacts with no trainable parameters, so they are treated as
constants.  Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .contrast import AlignmentLossReport, contrastive_loss
from .datamodel import ViewSet
from .errors import ConfigError, DimensionMismatchError, EngineWarning, NumericError
from .features import FeatureConfig, extract_viewset_features
from .geomalign import (
    CorrespondenceSet,
    compute_correspondences,
    geometric_loss,
    neighbor_set,
)
from .refine import (
    MODALITIES,
    CandidateSet,
    ProjectionParams,
    attention_forward,
    gather_candidates,
    select_candidates,
)

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.8
    k: int = 8
    n_neighbors: int = 2
    lambda_contrast: float = 1.0
    lambda_geometric: float = 2.0
    steps: int = 200
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    cyclic: bool = True
    depth_tol: float = 0.02
    init_noise: float = 0.01
    shared_projections: bool = False
    residual: bool = False
    use_view_term: bool = True
    use_diff_term: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0,1], got {self.alpha}")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.n_neighbors < 1:
            raise ConfigError("n_neighbors must be at least 1")
        if self.lambda_contrast < 0 or self.lambda_geometric < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class SamplePrep:
    """Constant per-sample training inputs: features, candidates, geometry."""

    sample_id: str
    features: list  # per view: (f2d, f3d) float64 arrays
    candidates: CandidateSet
    corr: CorrespondenceSet


@dataclass
class TrainState:
    params: ProjectionParams
    step: int = 0
    moments: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def prepare_sample(
    viewset: ViewSet, feat_config: FeatureConfig, config: TrainConfig
) -> SamplePrep:
    """Extract features and freeze candidate/correspondence structure."""
    fmaps = extract_viewset_features(viewset, feat_config)
    features = [
        (
            np.asarray(a.features, dtype=np.float64),
            np.asarray(b.features, dtype=np.float64),
        )
        for a, b in fmaps
    ]
    contrast_on = config.lambda_contrast > 0 and (
        config.use_view_term or config.use_diff_term
    )
    if contrast_on and features[0][0].shape[1] != features[0][1].shape[1]:
        raise DimensionMismatchError(
            "contrastive alignment requires equal 2D and 3D feature dims; "
            f"got {features[0][0].shape[1]} and {features[0][1].shape[1]}"
        )
    candidates = select_candidates(
        features, alpha=config.alpha, k=config.k, cyclic=config.cyclic
    )
    grid = fmaps[0][0].grid
    corr = compute_correspondences(
        viewset,
        grid,
        n_neighbors=config.n_neighbors,
        depth_tol=config.depth_tol,
        cyclic=config.cyclic,
    )
    return SamplePrep(
        sample_id=viewset.sample_id,
        features=features,
        candidates=candidates,
        corr=corr,
    )


# ---------------------------------------------------------------------------
# forward


def _forward_refine(prep: SamplePrep, params: ProjectionParams, residual: bool):
    """Refined maps per modality plus attention caches for the backward pass."""
    per_mod = {
        "2d": [pair[0] for pair in prep.features],
        "3d": [pair[1] for pair in prep.features],
    }
    refined = {m: [] for m in MODALITIES}
    caches = {}
    for i in range(len(prep.features)):
        for m in MODALITIES:
            feats = per_mod[m][i]
            pairs = prep.candidates.by_view[i][m]
            if pairs.shape[1] == 0:
                out = feats @ params.matrix(m, "v").T
                caches[(i, m)] = {"fallback": True, "f_query": feats}
            else:
                cand = gather_candidates(per_mod[m], pairs)
                out, cache = attention_forward(
                    feats,
                    cand,
                    params.matrix(m, "q"),
                    params.matrix(m, "k"),
                    params.matrix(m, "v"),
                )
                caches[(i, m)] = cache
            if residual:
                out = out + feats
            refined[m].append(out)
    return refined, caches


def _effective_contrast(report: AlignmentLossReport, config: TrainConfig) -> float:
    value = 0.0
    if config.use_view_term:
        value += report.l_view
    if config.use_diff_term and report.l_diff is not None:
        value += report.l_diff
    return value


def total_loss(
    prep: SamplePrep, params: ProjectionParams, config: TrainConfig
) -> tuple:
    """(total, contrast report, geometric scalar) for one sample."""
    refined, _ = _forward_refine(prep, params, config.residual)
    pairs = list(zip(refined["2d"], refined["3d"]))
    report = contrastive_loss(pairs)
    l_geom = geometric_loss(pairs, prep.corr)
    total = (
        config.lambda_contrast * _effective_contrast(report, config)
        + config.lambda_geometric * l_geom
    )
    return total, report, l_geom


# ---------------------------------------------------------------------------
# backward


def _unit_rows_with_norms(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > _NORM_FLOOR, norms, 1.0)
    unit = np.where(norms > _NORM_FLOOR, x / safe, 0.0)
    return unit, norms


def _norm_rows_backward(x: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Backprop through row-wise L2 normalization (zero rows get zero grad)."""
    unit, norms = _unit_rows_with_norms(x)
    inner = (d_unit * unit).sum(axis=1, keepdims=True)
    grad = (d_unit - inner * unit) / np.where(norms > _NORM_FLOOR, norms, 1.0)
    return np.where(norms > _NORM_FLOOR, grad, 0.0)


def _row_softmax(sim: np.ndarray) -> np.ndarray:
    shifted = sim - sim.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _infonce_pair_grads(a_raw, b_raw, coef):
    """Gradients of coef * rowwise-InfoNCE(normalize(a) @ normalize(b).T)."""
    ua, _ = _unit_rows_with_norms(a_raw)
    ub, _ = _unit_rows_with_norms(b_raw)
    sim = ua @ ub.T
    n = sim.shape[0]
    d_sim = coef * (_row_softmax(sim) - np.eye(n)) / n
    d_ua = d_sim @ ub
    d_ub = d_sim.T @ ua
    return _norm_rows_backward(a_raw, d_ua), _norm_rows_backward(b_raw, d_ub)


def _attention_backward(cache: dict, d_out: np.ndarray):
    """(dWq, dWk, dWv) for one view/modality given d(refined)."""
    if cache.get("fallback"):
        f = cache["f_query"]
        d = f.shape[1]
        return (
            np.zeros((d, d)),
            np.zeros((d, d)),
            np.einsum("pd,pe->de", d_out, f),
        )
    f = cache["f_query"]
    cand = cache["cand"]
    q, k, v = cache["q"], cache["k"], cache["v"]
    w = cache["weights"]
    scale = cache["scale"]
    d_w = np.einsum("pd,pcd->pc", d_out, v)
    d_v = w[:, :, None] * d_out[:, None, :]
    d_z = w * (d_w - (w * d_w).sum(axis=1, keepdims=True))
    d_q = scale * np.einsum("pc,pcd->pd", d_z, k)
    d_k = scale * d_z[:, :, None] * q[:, None, :]
    return (
        np.einsum("pd,pe->de", d_q, f),
        np.einsum("pcd,pce->de", d_k, cand),
        np.einsum("pcd,pce->de", d_v, cand),
    )


def loss_and_grads(
    prep: SamplePrep, params: ProjectionParams, config: TrainConfig
) -> tuple:
    """(total, contrast report, geometric scalar, grads by tensor name)."""
    refined, caches = _forward_refine(prep, params, config.residual)
    pairs = list(zip(refined["2d"], refined["3d"]))
    report = contrastive_loss(pairs)
    l_geom = geometric_loss(pairs, prep.corr)
    total = (
        config.lambda_contrast * _effective_contrast(report, config)
        + config.lambda_geometric * l_geom
    )

    n_views = len(prep.features)
    d_ref = {
        m: [np.zeros_like(refined[m][i]) for i in range(n_views)] for m in MODALITIES
    }

    lam_c = config.lambda_contrast
    if lam_c > 0 and config.use_view_term:
        coef = lam_c / n_views
        for i in range(n_views):
            g2, g3 = _infonce_pair_grads(refined["2d"][i], refined["3d"][i], coef)
            d_ref["2d"][i] += g2
            d_ref["3d"][i] += g3
    if lam_c > 0 and config.use_diff_term and n_views >= 2:
        coef = lam_c / (n_views - 1)
        for i in range(n_views - 1):
            delta2 = refined["2d"][i + 1] - refined["2d"][i]
            delta3 = refined["3d"][i + 1] - refined["3d"][i]
            g2, g3 = _infonce_pair_grads(delta2, delta3, coef)
            d_ref["2d"][i + 1] += g2
            d_ref["2d"][i] -= g2
            d_ref["3d"][i + 1] += g3
            d_ref["3d"][i] -= g3

    lam_g = config.lambda_geometric
    if lam_g > 0:
        corr = prep.corr
        for i0 in range(n_views):
            neighbors = neighbor_set(i0 + 1, n_views, corr.n_neighbors, corr.cyclic)
            nonempty = [
                j1 - 1
                for j1 in neighbors
                if len(corr.pairs.get((i0, j1 - 1), ())) > 0
            ]
            if not nonempty:
                continue
            for j0 in nonempty:
                pq = corr.pairs[(i0, j0)]
                coef = lam_g / (n_views * len(nonempty) * len(MODALITIES) * len(pq))
                for m in MODALITIES:
                    delta = refined[m][i0][pq[:, 0]] - refined[m][j0][pq[:, 1]]
                    dist = np.linalg.norm(delta, axis=1, keepdims=True)
                    # subgradient 0 at the kink of the norm
                    unit = np.where(dist > _NORM_FLOOR, delta / np.where(
                        dist > _NORM_FLOOR, dist, 1.0), 0.0)
                    np.add.at(d_ref[m][i0], pq[:, 0], coef * unit)
                    np.add.at(d_ref[m][j0], pq[:, 1], -coef * unit)

    grads = params.zero_grads()
    for i in range(n_views):
        for m in MODALITIES:
            d_wq, d_wk, d_wv = _attention_backward(caches[(i, m)], d_ref[m][i])
            roles = params.roles[m]
            grads[roles["q"]] += d_wq
            grads[roles["k"]] += d_wk
            grads[roles["v"]] += d_wv
    return total, report, l_geom, grads


# ---------------------------------------------------------------------------
# optimization


def _apply_update(state: TrainState, grads: dict, config: TrainConfig) -> None:
    params = state.params
    if config.optimizer == "sgd":
        for name, g in grads.items():
            params.tensors[name] -= config.learning_rate * g
        return
    if not state.moments:
        state.moments = {
            "m": {n: np.zeros_like(a) for n, a in params.tensors.items()},
            "v": {n: np.zeros_like(a) for n, a in params.tensors.items()},
        }
    t = state.step + 1
    for name, g in grads.items():
        m = state.moments["m"][name]
        v = state.moments["v"][name]
        m *= _ADAM_B1
        m += (1.0 - _ADAM_B1) * g
        v *= _ADAM_B2
        v += (1.0 - _ADAM_B2) * g * g
        m_hat = m / (1.0 - _ADAM_B1**t)
        v_hat = v / (1.0 - _ADAM_B2**t)
        params.tensors[name] -= config.learning_rate * m_hat / (
            np.sqrt(v_hat) + _ADAM_EPS
        )


def train(
    preps: Sequence[SamplePrep],
    config: TrainConfig,
    log_path: Optional[Path] = None,
) -> TrainState:
    """Run ``config.steps`` updates cycling over the prepared samples.

    The per-step log records every loss component; it is returned in
    ``TrainState.history`` and optionally written as JSON lines.
    """
    if not preps:
        raise ConfigError("training needs at least one prepared sample")
    if config.lambda_contrast == 0 and config.lambda_geometric == 0:
        warnings.warn(
            "both loss weights are zero; parameters will not change",
            EngineWarning,
        )
    dims = {
        "2d": preps[0].features[0][0].shape[1],
        "3d": preps[0].features[0][1].shape[1],
    }
    params = ProjectionParams.initial(
        dims, seed=config.seed, noise=config.init_noise,
        shared=config.shared_projections,
    )
    state = TrainState(params=params)
    for step in range(config.steps):
        prep = preps[step % len(preps)]
        total, report, l_geom, grads = loss_and_grads(prep, params, config)
        if not np.isfinite(total):
            raise NumericError(
                f"loss diverged at step {step} on sample {prep.sample_id}"
            )
        _apply_update(state, grads, config)
        state.step += 1
        state.history.append(
            {
                "step": state.step,
                "sample_id": prep.sample_id,
                "l_view": report.l_view,
                "l_diff": report.l_diff,
                "l_contrast": _effective_contrast(report, config),
                "l_geom": l_geom,
                "total": total,
            }
        )
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with log_path.open("w") as fh:
            for entry in state.history:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return state
