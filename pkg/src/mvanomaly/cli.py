"""Command line interface.

Subcommands: generate, train, score, eval, sweep.  All experiment
commands are config-file-first: ``--config run.json`` loads an
ExperimentConfig and any explicit flag overrides it.  Exit codes:
0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericError
from .experiment import (
    ExperimentConfig,
    run_eval,
    run_score,
    run_sweep,
    run_train,
)
from .synth import RingSpec, SceneSpec, ShapeSpec, TextureSpec, generate_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_CONFIG_FLAGS = (
    ("--dataset", str, "dataset root (train/ + test/)"),
    ("--out", str, "run output directory"),
    ("--patch-px", int, "patch edge length in pixels"),
    ("--dim-2d", int, "2D feature dimension"),
    ("--dim-3d", int, "3D feature dimension"),
    ("--feature-seed", int, "seed of the random feature projection"),
    ("--alpha", float, "same-modality weight in candidate scoring"),
    ("--k", int, "candidates kept per adjacent view"),
    ("--n-neighbors", int, "neighbor views per side for geometric alignment"),
    ("--lambda-contrast", float, "weight of the contrastive alignment loss"),
    ("--lambda-geometric", float, "weight of the geometric alignment loss"),
    ("--steps", int, "optimizer steps"),
    ("--learning-rate", float, "optimizer learning rate"),
    ("--optimizer", str, "adam or sgd"),
    ("--seed", int, "master seed"),
    ("--depth-tol", float, "relative occlusion tolerance"),
    ("--init-noise", float, "projection init noise scale"),
    ("--coreset-ratio", float, "memory bank coreset ratio (1.0 keeps all)"),
    ("--sigma", float, "Gaussian smoothing sigma for anomaly maps"),
    ("--modality", str, "scoring features: fused, 2d, or 3d"),
    ("--voxel-size", float, "voxel edge for point-projected metrics"),
    ("--threads", int, "worker cap for scoring"),
)

_CONFIG_BOOL_FLAGS = (
    ("--non-cyclic", "cyclic", False, "treat the view sequence as non-cyclic"),
    ("--shared-projections", "shared_projections", True,
     "share q/k/v matrices across modalities"),
    ("--residual", "residual", True, "add the query feature to the refined row"),
    ("--no-view-term", "use_view_term", False, "drop the per-view contrast term"),
    ("--no-diff-term", "use_diff_term", False, "drop the differential contrast term"),
    ("--write-pgm", "write_pgm", True, "also write PGM heatmaps"),
)


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None,
                        help="JSON config file; flags override its values")
    parser.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
    for flag, typ, help_text in _CONFIG_FLAGS:
        parser.add_argument(flag, type=typ, default=None, help=help_text)
    for flag, _, value, help_text in _CONFIG_BOOL_FLAGS:
        parser.add_argument(flag, action="store_const", const=value, default=None,
                            dest=flag.lstrip("-").replace("-", "_"),
                            help=help_text)
    parser.add_argument("--limits", type=str, default=None,
                        help="comma-separated AUPRO integration limits")


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        data.update(json.loads(path.read_text()))
    for flag, _, _ in _CONFIG_FLAGS:
        key = flag.lstrip("-").replace("-", "_")
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    for flag, key, _, _ in _CONFIG_BOOL_FLAGS:
        value = getattr(args, flag.lstrip("-").replace("-", "_"))
        if value is not None:
            data[key] = value
    if args.limits is not None:
        data["limits"] = tuple(float(x) for x in args.limits.split(","))
    config = ExperimentConfig.from_dict(data)
    if not config.dataset:
        raise ConfigError("no dataset given (flag --dataset or config key)")
    if not config.out:
        raise ConfigError("no output directory given (flag --out or config key)")
    return config


def _cmd_generate(args: argparse.Namespace) -> int:
    if args.scene_config:
        payload = json.loads(Path(args.scene_config).read_text())
        scene = SceneSpec(
            shape=ShapeSpec(**payload.get("shape", {})),
            texture=TextureSpec(**payload.get("texture", {})),
            ring=RingSpec(**payload.get("ring", {})),
            resolution=payload.get("resolution", 64),
            seed=payload.get("seed", 0),
        )
    else:
        scene = SceneSpec(
            shape=ShapeSpec(kind=args.scene),
            texture=TextureSpec(seed=args.seed),
            ring=RingSpec(count=args.views),
            resolution=args.resolution,
            seed=args.seed,
        )
    out = Path(args.out)
    if (out / "dataset_meta.json").exists() and not args.force:
        raise ConfigError(f"{out} already holds a dataset; use --force to replace")
    manifest = generate_dataset(
        scene,
        n_normal=args.normal,
        n_anomalous=args.anomalous,
        out_dir=out,
        seed=args.seed,
        n_test_normal=args.test_normal,
    )
    print(f"wrote {len(manifest['train'])} train / {len(manifest['test'])} test "
          f"samples to {out}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    state = run_train(config, force=args.force)
    last = state.history[-1]
    print(f"trained {config.steps} steps; final total loss {last['total']:.6f} "
          f"(params under {config.out}/params)")
    return EXIT_OK


def _cmd_score(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    results = run_score(config, force=args.force)
    for result in results:
        print(f"{result.sample_id}\t{result.label}\t{result.score:.6f}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    report = run_eval(config, force=args.force)
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    rows = run_sweep(config, axis=args.axis, force=args.force)
    for row in rows:
        print(f"{row['axis']}={row['value']}\ti_auroc={row['i_auroc']:.4f}")
    print(f"table under {config.out}/sweep_{args.axis}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvanomaly",
        description="multi-view multimodal anomaly detection experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="render a synthetic dataset")
    gen.add_argument("--scene", choices=("sphere", "cylinder", "box"),
                     default="sphere")
    gen.add_argument("--scene-config", type=str, default=None,
                     help="JSON file with full shape/texture/ring settings")
    gen.add_argument("--views", type=int, default=12)
    gen.add_argument("--resolution", type=int, default=64)
    gen.add_argument("--normal", type=int, default=1)
    gen.add_argument("--anomalous", type=int, default=6)
    gen.add_argument("--test-normal", type=int, default=None)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", type=str, required=True)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=_cmd_generate)

    for name, func, help_text in (
        ("train", _cmd_train, "optimize projections on the train split"),
        ("score", _cmd_score, "build the bank and score the test split"),
        ("eval", _cmd_eval, "evaluate written scores against ground truth"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        _add_experiment_flags(cmd)
        cmd.set_defaults(func=func)

    sweep = sub.add_parser("sweep", help="run an ablation axis end to end")
    sweep.add_argument("--axis", choices=("k", "n", "losses"), required=True)
    _add_experiment_flags(sweep)
    sweep.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
