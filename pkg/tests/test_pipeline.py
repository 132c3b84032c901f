import copy
import json
from pathlib import Path

import numpy as np
import pytest

from updsim import cli
from updsim.pipeline import (
    STAGES,
    ConfigError,
    LockError,
    RunConfig,
    StageError,
    _transmits,
    acquisition_window,
    run,
    tree_digest,
    validate,
)

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "seed": 5,
    "out": "unused",
    "transducer": "matrix-16x16",
    "memory_budget_bytes": 1 << 28,
    "vessel": {"kind": "tube", "start": [-0.001, 0.0, 0.006], "end": [0.001, 0.0, 0.006], "radius": 0.0002,
               "mask_spacing": 5e-05},
    "flow": {"v_mean": 0.01, "spacing": 5e-05},
    "particles": {"count": 100, "n_frames": 4, "frame_rate": 500.0, "warmup": 0.05},
    "tissue": {"lo": [-0.0008, -0.0008, 0.0054], "hi": [0.0008, 0.0008, 0.0066], "density": 2.0},
    "rf": {"angles_deg": [-5.0, 5.0]},
    "beamform": {"lo": [-0.0005, -0.0005, 0.0055], "hi": [0.0005, 0.0005, 0.0065], "dims": [11, 11, 11]},
    "post": {"svd_keep": [2, None]},
    "metrics": {"image": "db"},
}


def tiny(**sections):
    d = copy.deepcopy(TINY)
    for name, patch in sections.items():
        if isinstance(patch, dict):
            d[name].update(patch)
        else:
            d[name] = patch
    return d


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = RunConfig.from_dict(tiny())
    first = run(cfg, out=out)
    return cfg, out, first


# configuration

def test_unknown_top_level_field():
    with pytest.raises(ConfigError, match="colour"):
        RunConfig.from_dict(tiny(colour="red"))


def test_unknown_section_field_named():
    with pytest.raises(ConfigError, match=r"beamform\.f_numbr"):
        RunConfig.from_dict(tiny(beamform={"f_numbr": 2.0}))


def test_undefined_preset_names_field():
    with pytest.raises(ConfigError, match="transducer"):
        RunConfig.from_dict(tiny(transducer="no-such-probe"))


def test_bad_enum_values():
    with pytest.raises(ConfigError, match="metrics.image"):
        RunConfig.from_dict(tiny(metrics={"image": "gamma"}))
    with pytest.raises(ConfigError, match="tissue.motion"):
        RunConfig.from_dict(tiny(tissue={"motion": {"kind": "wobble"}}))


def test_config_roundtrip():
    cfg = RunConfig.from_dict(tiny())
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


# validation

def test_demo_config_validates():
    report = validate(ROOT / "configs" / "demo.json")
    assert report.errors == []


def test_tube_motion_config_validates():
    assert validate(ROOT / "configs" / "tube_motion.json").ok


def test_sampling_below_nyquist():
    fc = RunConfig.from_dict(tiny()).make_transducer().center_frequency
    report = validate(tiny(rf={"fs": fc}))
    assert any("sampling below Nyquist" in e for e in report.errors)


def test_fs_between_nyquist_and_simulator_floor():
    fc = RunConfig.from_dict(tiny()).make_transducer().center_frequency
    report = validate(tiny(rf={"fs": 3 * fc}))
    assert report.errors and not any("Nyquist" in e for e in report.errors)


def test_grid_outside_field_of_view_warns():
    report = validate(tiny(beamform={"lo": [0.004, -0.0005, 0.0055], "hi": [0.005, 0.0005, 0.0065]}))
    assert report.ok
    assert any("field of view" in w for w in report.warnings)


def test_grid_behind_transducer_warns():
    report = validate(tiny(beamform={"lo": [-0.0005, -0.0005, -0.001], "hi": [0.0005, 0.0005, 0.001]}))
    assert any("behind" in w for w in report.warnings)


def test_validate_budget_and_band_errors():
    report = validate(tiny(memory_budget_bytes=8, post={"svd_keep": [2, 9]}))
    assert any("memory_budget_bytes" in e for e in report.errors)
    assert any("svd_keep" in e for e in report.errors)


def test_validate_thin_grid():
    assert any("central slice" in w for w in validate(tiny(beamform={"dims": [11, 11, 3]})).warnings)
    assert any("SSIM" in e for e in validate(tiny(beamform={"dims": [11, 3, 3]})).errors)


def test_validate_reports_schema_error():
    report = validate(tiny(transducer="nope"))
    assert not report.ok and "transducer" in report.errors[0]


# acquisition window

def test_acquisition_window_covers_boxes():
    cfg = RunConfig.from_dict(tiny())
    tr = cfg.make_transducer()
    txs = _transmits(cfg, tr)
    lo, hi = np.array([-1e-3, -1e-3, 5e-3]), np.array([1e-3, 1e-3, 7e-3])
    t0, duration = acquisition_window([(lo, hi)], tr, txs, cfg.rf.c, cfg.fs, 0.0)
    pts = np.random.default_rng(0).uniform(lo, hi, (200, 3))
    back = np.sqrt(((pts[:, None] - tr.element_centers[None]) ** 2).sum(-1)) / cfg.rf.c
    for tx in txs:
        t = tx.arrival_time(pts, cfg.rf.c)[:, None] + back
        assert t.min() >= t0 and t.max() <= t0 + duration
    assert t0 == pytest.approx(round(t0 * cfg.fs) / cfg.fs, abs=1e-15)


# running

def test_run_produces_all_stages(tiny_run):
    _, out, first = tiny_run
    assert first.ran == list(STAGES)
    for name in ("post/pd.fqf", "metrics/metrics.csv", "metrics/metrics.json", "beamform/Frame_0.fqf",
                 "rf/frame_0003_tx1.fqf", "vessel/mask.fqf"):
        assert (out / name).is_file()
    header, line = (out / "metrics" / "metrics.csv").read_text().splitlines()
    assert header == "mse,psnr,ssim" and len(line.split(",")) == 3


def test_rerun_skips_everything(tiny_run):
    cfg, out, _ = tiny_run
    again = run(cfg, out=out)
    assert again.ran == [] and again.skipped == list(STAGES)


def test_config_change_reruns_downstream_only(tmp_path):
    cfg = RunConfig.from_dict(tiny())
    run(cfg, out=tmp_path)
    changed = RunConfig.from_dict(tiny(post={"pd_dr_db": 40.0}))
    result = run(changed, out=tmp_path)
    assert result.ran == ["post", "metrics"]


def test_selected_stages_only(tmp_path):
    cfg = RunConfig.from_dict(tiny())
    run(cfg, stages="vessel,flow,particles,tissue,rf", out=tmp_path)
    result = run(cfg, stages="beamform,post", out=tmp_path)
    assert result.ran == ["beamform", "post"]
    assert not (tmp_path / "metrics").exists()


def test_missing_upstream(tmp_path):
    cfg = RunConfig.from_dict(tiny())
    with pytest.raises(StageError, match="rf"):
        run(cfg, stages="beamform", out=tmp_path)


def test_deleted_intermediate_regenerated(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    before = tree_digest(out)
    victim = out / "beamform" / "Frame_2.fqf"
    victim.unlink()
    result = run(cfg, out=out)
    assert "beamform" in result.ran
    assert tree_digest(out) == before


def test_two_runs_identical(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    run(cfg, out=tmp_path)
    assert tree_digest(tmp_path) == tree_digest(out)


def test_seed_changes_outputs(tiny_run, tmp_path):
    _, out, _ = tiny_run
    run(RunConfig.from_dict(tiny(seed=6)), stages="vessel,flow,particles,tissue", out=tmp_path)
    a, b = tree_digest(out), tree_digest(tmp_path)
    assert a["tissue/cloud.fqf"] != b["tissue/cloud.fqf"]


def test_lock_blocks_second_instance(tmp_path):
    cfg = RunConfig.from_dict(tiny())
    (tmp_path / ".lock").write_text("1")
    with pytest.raises(LockError):
        run(cfg, stages="vessel", out=tmp_path)


# CLI

def write_config(tmp_path, d):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return str(path)


def test_cli_validate_exit_codes(tmp_path, capsys):
    assert cli.main(["validate", "--config", str(ROOT / "configs" / "demo.json")]) == 0
    fc = RunConfig.from_dict(tiny()).make_transducer().center_frequency
    assert cli.main(["validate", "--config", write_config(tmp_path, tiny(rf={"fs": fc}))]) == 2
    assert "sampling below Nyquist" in capsys.readouterr().out


def test_cli_config_error(tmp_path, capsys):
    assert cli.main(["gen-vessel", "--config", write_config(tmp_path, tiny(transducer="x"))]) == 2
    assert "transducer" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 2


def test_cli_stage_failure(tmp_path, capsys):
    path = write_config(tmp_path, tiny())
    assert cli.main(["beamform", "--config", path, "--out", str(tmp_path / "o")]) == 3
    assert "beamform" in capsys.readouterr().err


def test_cli_stage_commands_and_overrides(tmp_path):
    path = write_config(tmp_path, tiny())
    out = tmp_path / "o"
    assert cli.main(["gen-vessel", "--config", path, "--out", str(out), "--seed", "9"]) == 0
    assert cli.main(["gen-flow", "--config", path, "--out", str(out), "--seed", "9"]) == 0
    assert (out / "flow" / "flow.fqf").is_file()
    assert cli.main(["run", "--config", path, "--out", str(out), "--seed", "9", "--stages", "vessel,flow"]) == 0
    assert cli.main(["run", "--config", path, "--out", str(out), "--stages", "bogus"]) == 2


def test_cli_memory_budget_override(tmp_path):
    path = write_config(tmp_path, tiny())
    assert cli.main(["validate", "--config", path, "--memory-budget-bytes", "8"]) == 2
