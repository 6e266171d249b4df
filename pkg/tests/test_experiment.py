import json
import shutil

import pytest

from mvanomaly.errors import ConfigError, DataError
from mvanomaly.experiment import (
    ExperimentConfig,
    SWEEP_AXES,
    load_results,
    load_split,
    run_eval,
    run_score,
    run_sweep,
    run_train,
    write_config_snapshot,
)


def small_config(dataset, out) -> ExperimentConfig:
    return ExperimentConfig(
        dataset=str(dataset),
        out=str(out),
        patch_px=8,
        dim_2d=6,
        dim_3d=6,
        k=2,
        n_neighbors=1,
        steps=3,
        sigma=1.0,
        voxel_size=0.1,
    )


@pytest.fixture(scope="module")
def finished_run(tiny_dataset, tmp_path_factory):
    root, _, _ = tiny_dataset
    out = tmp_path_factory.mktemp("exp") / "run"
    config = small_config(root, out)
    state = run_train(config)
    results = run_score(config)
    report = run_eval(config)
    return config, state, results, report


# ---------------------------------------------------------------------------
# configuration plumbing


def test_from_dict_round_trip():
    config = ExperimentConfig(dataset="d", out="o", limits=(0.5, 0.1))
    back = ExperimentConfig.from_dict(config.to_json_dict())
    assert back == config
    assert isinstance(back.limits, tuple)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="epochs"):
        ExperimentConfig.from_dict({"epochs": 10})


def test_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(modality="rgb")
    with pytest.raises(ConfigError):
        ExperimentConfig(threads=0)


def test_override_replaces_fields():
    config = ExperimentConfig(dataset="d", out="o")
    other = config.override(k=4, out="elsewhere")
    assert other.k == 4
    assert other.out == "elsewhere"
    assert config.k == 8  # original untouched


def test_snapshot_refuses_divergence(tmp_path):
    config = ExperimentConfig(dataset="d", out=str(tmp_path))
    write_config_snapshot(config, tmp_path, force=False)
    # identical snapshot is fine
    write_config_snapshot(config, tmp_path, force=False)
    changed = config.override(k=4)
    with pytest.raises(ConfigError):
        write_config_snapshot(changed, tmp_path, force=False)
    write_config_snapshot(changed, tmp_path, force=True)
    stored = json.loads((tmp_path / "config.json").read_text())
    assert stored["k"] == 4


def test_load_split_errors(tmp_path):
    with pytest.raises(DataError):
        load_split(tmp_path, "train")
    (tmp_path / "train").mkdir()
    with pytest.raises(DataError):
        load_split(tmp_path, "train")


# ---------------------------------------------------------------------------
# train / score / eval commands


def test_train_outputs(finished_run):
    config, state, _, _ = finished_run
    out = config.out
    assert (json.loads(open(f"{out}/config.json").read()))["steps"] == 3
    assert len(open(f"{out}/train_log.jsonl").read().splitlines()) == 3
    assert (state.params.tensors.keys()) == {"2d.q", "2d.k", "2d.v",
                                             "3d.q", "3d.k", "3d.v"}
    assert len(state.history) == 3


def test_train_refuses_rerun(finished_run):
    config, _, _, _ = finished_run
    with pytest.raises(ConfigError, match="params"):
        run_train(config)


def test_score_outputs(finished_run, tiny_dataset):
    config, _, results, _ = finished_run
    root, _, manifest = tiny_dataset
    test_ids = [s["sample_id"] for s in manifest["test"]]
    assert sorted(r.sample_id for r in results) == sorted(test_ids)
    summary = json.loads(open(f"{config.out}/results/summary.json").read())
    assert sorted(summary) == sorted(test_ids)
    for sid, entry in summary.items():
        assert set(entry) == {"label", "score"}
    for sid in test_ids:
        assert json.loads(
            open(f"{config.out}/results/{sid}/scores.json").read()
        )["sample_id"] == sid


def test_score_reuses_existing_bank(finished_run, tmp_path):
    config, _, _, _ = finished_run
    bank_file = f"{config.out}/bank/bank.ft32"
    import os

    before = os.stat(bank_file).st_mtime_ns
    shutil.rmtree(f"{config.out}/results")
    run_score(config)
    assert os.stat(bank_file).st_mtime_ns == before


def test_eval_report_content(finished_run):
    config, _, _, report = finished_run
    stored = json.loads(open(f"{config.out}/report.json").read())
    assert stored["i_auroc"] == report.i_auroc
    assert 0.0 <= report.i_auroc <= 1.0
    assert 0.0 <= report.p_auroc <= 1.0
    assert set(stored["aupro"]) == {"0.3", "0.01"}
    assert set(stored["pv_aupro"]) == {"0.3", "0.01"}
    assert stored["counts"]["n_samples"] == 6
    assert stored["counts"]["n_anomalous"] == 4
    assert set(report.per_category) == {
        "texture_blotch", "geometric_dent", "geometric_bump"
    }


def test_eval_refuses_rerun(finished_run):
    config, _, _, _ = finished_run
    with pytest.raises(ConfigError, match="report"):
        run_eval(config)


def test_load_results_round_trip(finished_run, tiny_dataset):
    config, _, results, _ = finished_run
    root, _, _ = tiny_dataset
    test_sets = load_split(root, "test")
    loaded = load_results(config, test_sets)
    by_id = {r.sample_id: r for r in results}
    for back in loaded:
        orig = by_id[back.sample_id]
        assert back.score == orig.score
        assert back.view_scores == orig.view_scores
        assert back.label == orig.label
        for a, b in zip(back.maps, orig.maps):
            assert a.tobytes() == b.tobytes()


def test_load_results_missing_sample(finished_run, tiny_dataset, tmp_path):
    config, _, _, _ = finished_run
    root, _, _ = tiny_dataset
    test_sets = load_split(root, "test")
    broken = config.override(out=str(tmp_path / "void"))
    with pytest.raises(DataError):
        load_results(broken, test_sets)


def test_threaded_scoring_matches_serial(finished_run, tiny_dataset, tmp_path):
    config, _, results, _ = finished_run
    root, _, _ = tiny_dataset
    threaded = config.override(out=str(tmp_path / "thr"), threads=2)
    # reuse the trained parameters instead of training again
    shutil.copytree(f"{config.out}/params", f"{threaded.out}/params")
    got = run_score(threaded)
    assert [r.sample_id for r in got] == [r.sample_id for r in results]
    for a, b in zip(got, results):
        assert a.score == b.score


# ---------------------------------------------------------------------------
# sweeps


def test_sweep_axis_validation(tiny_dataset, tmp_path):
    root, _, _ = tiny_dataset
    config = small_config(root, tmp_path / "sw")
    with pytest.raises(ConfigError):
        run_sweep(config, "sigma")


def test_sweep_axes_cover_expected_grids():
    assert SWEEP_AXES["k"] == (2, 4, 6, 8, 10)
    assert SWEEP_AXES["n"] == (1, 2, 3, 4)
    assert SWEEP_AXES["losses"] == ("base", "view", "diff", "both")


def test_loss_sweep_writes_tables(tiny_dataset, tmp_path):
    root, _, _ = tiny_dataset
    config = small_config(root, tmp_path / "sw").override(steps=2)
    rows = run_sweep(config, "losses")
    assert [row["value"] for row in rows] == ["base", "view", "diff", "both"]
    stored = json.loads(open(f"{config.out}/sweep_losses/sweep.json").read())
    assert stored == rows
    csv_lines = open(f"{config.out}/sweep_losses/sweep.csv").read().splitlines()
    assert len(csv_lines) == 5
    header = csv_lines[0].split(",")
    assert header == sorted(header)
    assert "i_auroc" in header and "final_total_loss" in header
    for row in rows:
        assert 0.0 <= row["i_auroc"] <= 1.0
