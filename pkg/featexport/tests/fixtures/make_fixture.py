"""Regenerate the committed conformance fixture.

    python3 make_fixture.py

Writes ``miniset/`` (a two-view 28x28 dataset in the engine layout,
values from closed-form expressions so regeneration is byte-stable) and
``exported/`` (the exporter's output on it with the default backbone at
12/12 dims). Both directories are committed; the conformance tests
compare fresh exports against them byte for byte.
"""

import json
from pathlib import Path

import numpy as np

from featexport.export import ExportOptions, export_dataset
from featexport.ft32 import write_ft32

HERE = Path(__file__).parent
RES = 28


def view_arrays(k: int):
    yy, xx = np.mgrid[0:RES, 0:RES].astype(np.float64)
    image = np.clip((xx + yy) / (2.0 * (RES - 1)) + 0.1 * k, 0.0, 1.0)
    depth = 2.0 + 0.25 * np.sin(xx / 5.0 + k) + 0.1 * np.cos(yy / 7.0)
    depth[0, 0] = 0.0  # one invalid pixel exercises the valid-mask path
    return image[:, :, None].astype(np.float32), depth.astype(np.float32)


def camera_dict(k: int) -> dict:
    return {
        "fx": 35.0,
        "fy": 35.0,
        "cx": RES / 2.0,
        "cy": RES / 2.0,
        "rotation": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        "translation": [0.1 * (k - 1), 0.0, 3.0],
    }


def write_miniset(root: Path) -> None:
    sample = root / "train" / "fix0"
    for k in (1, 2):
        vdir = sample / f"view_{k:02d}"
        vdir.mkdir(parents=True, exist_ok=True)
        image, depth = view_arrays(k)
        write_ft32(vdir / "image.ft32", image)
        write_ft32(vdir / "depth.ft32", depth)
        (vdir / "camera.json").write_text(
            json.dumps(camera_dict(k), indent=2, sort_keys=True)
        )
    (sample / "meta.json").write_text(
        json.dumps({"I": 2, "label": "normal", "sample_id": "fix0"},
                   indent=2, sort_keys=True)
    )
    (root / "dataset_meta.json").write_text(
        json.dumps(
            {"seed": 0, "test": [],
             "train": [{"label": "normal", "sample_id": "fix0"}]},
            indent=2, sort_keys=True,
        )
    )


def main() -> None:
    miniset = HERE / "miniset"
    write_miniset(miniset)
    export_dataset(miniset, HERE / "exported",
                   ExportOptions(d_2d=12, d_3d=12), splits=("train",))
    print("fixture regenerated under", HERE)


if __name__ == "__main__":
    main()
