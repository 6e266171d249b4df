"""End-to-end experiment orchestration behind the CLI.

One run directory holds everything a command produces: the resolved
config snapshot, trained parameters, the training log, the memory bank,
per-sample results, and the evaluation report.  Outputs carry no
timestamps and all JSON is key-sorted, so identical configs and seeds
reproduce byte-identical trees.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .datamodel import ViewSet, list_sample_dirs, load_sample_meta, load_viewset
from .errors import ConfigError, DataError
from .features import FeatureConfig
from .metrics import EvalReport, build_report
from .refine import load_projection_params, save_projection_params
from .scoring import (
    AnomalyResult,
    build_bank,
    load_bank,
    save_bank,
    save_result,
    score_sample,
)
from .tensorio import read_tensor
from .training import TrainConfig, prepare_sample, train


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = ""
    out: str = ""
    # features
    patch_px: int = 8
    dim_2d: int = 16
    dim_3d: int = 16
    feature_seed: int = 7
    # refinement / losses / optimization
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
    # scoring
    coreset_ratio: float = 1.0
    sigma: float = 4.0
    modality: str = "fused"
    write_pgm: bool = False
    # evaluation
    limits: tuple = (0.3, 0.01)
    voxel_size: float = 0.05
    # execution
    threads: int = 1

    def __post_init__(self):
        if self.modality not in ("fused", "2d", "3d"):
            raise ConfigError(f"unknown scoring modality {self.modality!r}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            patch_px=self.patch_px,
            dim_2d=self.dim_2d,
            dim_3d=self.dim_3d,
            seed=self.feature_seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            k=self.k,
            n_neighbors=self.n_neighbors,
            lambda_contrast=self.lambda_contrast,
            lambda_geometric=self.lambda_geometric,
            steps=self.steps,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            seed=self.seed,
            cyclic=self.cyclic,
            depth_tol=self.depth_tol,
            init_noise=self.init_noise,
            shared_projections=self.shared_projections,
            residual=self.residual,
            use_view_term=self.use_view_term,
            use_diff_term=self.use_diff_term,
        )

    def to_json_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["limits"] = list(self.limits)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "limits" in data:
            data = dict(data)
            data["limits"] = tuple(data["limits"])
        return cls(**data)

    def override(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


def write_config_snapshot(config: ExperimentConfig, out_dir: Path, force: bool) -> None:
    """Persist the resolved config; refuse silent divergence from a prior run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    payload = json.dumps(config.to_json_dict(), indent=2, sort_keys=True)
    if path.exists() and path.read_text() != payload and not force:
        raise ConfigError(
            f"{path} exists with a different config; rerun with force to replace"
        )
    path.write_text(payload)


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists; rerun with force to replace")


def load_split(dataset_dir, split: str) -> list:
    """All ViewSets of ``<dataset>/<split>``, ordered by sample directory."""
    root = Path(dataset_dir) / split
    if not root.is_dir():
        raise DataError(f"split directory not found: {root}")
    dirs = list_sample_dirs(root)
    if not dirs:
        raise DataError(f"no samples under {root}")
    return [load_viewset(d) for d in dirs]


def _split_categories(dataset_dir, split: str) -> dict:
    root = Path(dataset_dir) / split
    out = {}
    for d in list_sample_dirs(root):
        meta = load_sample_meta(d)
        if meta.get("category") and meta.get("label") != "normal":
            out[meta["sample_id"]] = meta["category"]
    return out


# ---------------------------------------------------------------------------
# commands


def run_train(config: ExperimentConfig, force: bool = False):
    out_dir = Path(config.out)
    write_config_snapshot(config, out_dir, force)
    _refuse_overwrite(out_dir / "params", force)
    train_sets = load_split(config.dataset, "train")
    feat_config = config.feature_config()
    train_config = config.train_config()
    preps = [prepare_sample(vs, feat_config, train_config) for vs in train_sets]
    state = train(preps, train_config, log_path=out_dir / "train_log.jsonl")
    save_projection_params(state.params, out_dir / "params")
    return state


def run_score(config: ExperimentConfig, force: bool = False) -> list:
    out_dir = Path(config.out)
    write_config_snapshot(config, out_dir, force)
    _refuse_overwrite(out_dir / "results", force)
    params = load_projection_params(out_dir / "params")
    feat_config = config.feature_config()
    shared_kwargs = dict(
        alpha=config.alpha,
        k=config.k,
        cyclic=config.cyclic,
        residual=config.residual,
        modality=config.modality,
    )
    bank_dir = out_dir / "bank"
    if bank_dir.is_dir() and (bank_dir / "bank.json").is_file() and not force:
        bank = load_bank(bank_dir)
    else:
        train_sets = load_split(config.dataset, "train")
        bank = build_bank(
            train_sets, params, feat_config,
            coreset_ratio=config.coreset_ratio, **shared_kwargs,
        )
        save_bank(bank, bank_dir)
    test_sets = load_split(config.dataset, "test")

    def _score(viewset: ViewSet) -> AnomalyResult:
        return score_sample(
            viewset, bank, params, feat_config,
            sigma=config.sigma, **shared_kwargs,
        )

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_score, test_sets))
    else:
        results = [_score(vs) for vs in test_sets]
    for result in results:
        save_result(result, out_dir / "results" / result.sample_id,
                    write_pgm=config.write_pgm)
    summary = {
        r.sample_id: {"label": r.label, "score": r.score} for r in results
    }
    (out_dir / "results" / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True)
    )
    return results


def load_results(config: ExperimentConfig, viewsets: Sequence[ViewSet]) -> list:
    """Rehydrate scored results written by run_score, in viewset order."""
    out_dir = Path(config.out) / "results"
    results = []
    for viewset in viewsets:
        sample_dir = out_dir / viewset.sample_id
        scores_path = sample_dir / "scores.json"
        if not scores_path.is_file():
            raise DataError(f"no scores for sample {viewset.sample_id!r}; run score first")
        payload = json.loads(scores_path.read_text())
        maps = tuple(
            read_tensor(sample_dir / f"map_view_{v.view_index:02d}.ft32")
            for v in viewset.views
        )
        results.append(
            AnomalyResult(
                sample_id=payload["sample_id"],
                label=payload["label"],
                patch_scores=(),
                maps=maps,
                view_scores=tuple(payload["view_scores"]),
                score=payload["score"],
            )
        )
    return results


def run_eval(config: ExperimentConfig, force: bool = False) -> EvalReport:
    out_dir = Path(config.out)
    write_config_snapshot(config, out_dir, force)
    _refuse_overwrite(out_dir / "report.json", force)
    test_sets = load_split(config.dataset, "test")
    results = load_results(config, test_sets)
    categories = _split_categories(config.dataset, "test")
    report = build_report(
        test_sets, results,
        limits=config.limits,
        voxel_size=config.voxel_size,
        categories=categories,
    )
    (out_dir / "report.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
    )
    return report


SWEEP_AXES = {
    "k": (2, 4, 6, 8, 10),
    "n": (1, 2, 3, 4),
    "losses": ("base", "view", "diff", "both"),
}

_LOSS_ROWS = {
    "base": {"use_view_term": False, "use_diff_term": False},
    "view": {"use_view_term": True, "use_diff_term": False},
    "diff": {"use_view_term": False, "use_diff_term": True},
    "both": {"use_view_term": True, "use_diff_term": True},
}


def run_sweep(config: ExperimentConfig, axis: str, force: bool = False) -> list:
    """Train/score/eval once per grid point of the chosen axis.

    Returns the table rows and writes sweep.json / sweep.csv under
    ``<out>/sweep_<axis>/``.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(
            f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}"
        )
    sweep_dir = Path(config.out) / f"sweep_{axis}"
    _refuse_overwrite(sweep_dir / "sweep.json", force)
    rows = []
    for value in SWEEP_AXES[axis]:
        if axis == "k":
            overrides = {"k": int(value)}
        elif axis == "n":
            overrides = {"n_neighbors": int(value)}
        else:
            overrides = dict(_LOSS_ROWS[value])
        run_cfg = config.override(
            out=str(sweep_dir / str(value)), **overrides
        )
        state = run_train(run_cfg, force=force)
        run_score(run_cfg, force=force)
        report = run_eval(run_cfg, force=force)
        row = {
            "axis": axis,
            "value": value,
            "i_auroc": report.i_auroc,
            "p_auroc": report.p_auroc,
            "final_total_loss": state.history[-1]["total"],
        }
        for limit, val in report.aupro_at.items():
            row[f"aupro@{limit}"] = val
        for limit, val in report.pv_aupro_at.items():
            row[f"pv_aupro@{limit}"] = val
        rows.append(row)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    (sweep_dir / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    columns = sorted(rows[0].keys())
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in columns))
    (sweep_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    return rows
