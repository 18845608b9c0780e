import csv
import json
from pathlib import Path

import numpy as np
import pytest

from stationcast.cli import load_config_file, main
from stationcast.model import load_checkpoint

MICRO_FLAGS = [
    "--lx", "24", "--ly", "6", "--label-len", "6",
    "--d-model", "8", "--d-inner", "16", "--n-heads", "1",
    "--enc-layers", "1", "--dec-layers", "1",
    "--batch-size", "64", "--max-epochs", "1", "--patience", "2",
    "--anchors-per-target", "8",
    "--test-span-hours", "120", "--train-stride", "4", "--eval-stride", "6",
    "--ar-max-lag", "6",
]


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    rc = main(["gen", "--stations", "4", "--hours", "900", "--seed", "5",
               "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, world_dir):
    out = tmp_path_factory.mktemp("ckpt")
    rc = main(["train", "--phase", "backbone", "--data", str(world_dir),
               "--target", "S03", "--out", str(out), "--seed", "1", *MICRO_FLAGS])
    assert rc == 0
    rc = main(["train", "--phase", "transform", "--data", str(world_dir),
               "--target", "S03", "--out", str(out), "--seed", "1",
               "--checkpoint", str(out / "backbone.npz"), *MICRO_FLAGS])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# gen


def test_gen_writes_three_files(world_dir):
    for name in ("observations.csv", "stations.csv", "world.json"):
        assert (world_dir / name).exists()


def test_gen_is_deterministic(tmp_path, world_dir):
    rc = main(["gen", "--stations", "4", "--hours", "900", "--seed", "5",
               "--out", str(tmp_path)])
    assert rc == 0
    for name in ("observations.csv", "stations.csv", "world.json"):
        assert (tmp_path / name).read_bytes() == (world_dir / name).read_bytes()


def test_gen_embeds_version_and_digest(world_dir):
    first = (world_dir / "observations.csv").read_text().splitlines()[0]
    assert first.startswith("#") and "tool_version=" in first and "config_digest=" in first
    doc = json.loads((world_dir / "world.json").read_text())
    assert "tool_version" in doc and "config_digest" in doc


def test_gen_rejects_single_station(tmp_path, capsys):
    rc = main(["gen", "--stations", "1", "--out", str(tmp_path)])
    assert rc == 1
    assert "usage error" in capsys.readouterr().err


def test_gen_paper_scale_hour_count(tmp_path):
    # --years 4 must give the documented 35,064 hourly rows per station
    rc = main(["gen", "--stations", "2", "--years", "4", "--seed", "0",
               "--out", str(tmp_path)])
    assert rc == 0
    with open(tmp_path / "observations.csv") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    assert (len(rows) - 1) == 2 * 35064


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoints_and_logs(trained_dir):
    assert (trained_dir / "backbone.npz").exists()
    assert (trained_dir / "zeroshot.npz").exists()
    for name in ("trainlog_backbone.jsonl", "trainlog_transform.jsonl"):
        lines = [json.loads(l) for l in (trained_dir / name).read_text().splitlines()]
        assert lines[0]["record"] == "meta"
        assert lines[0]["config_digest"]
        assert any(l["record"] == "epoch" for l in lines)


def test_train_rerun_same_seed_identical_digest(tmp_path, world_dir, trained_dir):
    rc = main(["train", "--phase", "backbone", "--data", str(world_dir),
               "--target", "S03", "--out", str(tmp_path), "--seed", "1", *MICRO_FLAGS])
    assert rc == 0
    _, _, m1 = load_checkpoint(tmp_path / "backbone.npz")
    _, _, m2 = load_checkpoint(trained_dir / "backbone.npz")
    assert m1["params_digest"] == m2["params_digest"]


def test_transform_without_checkpoint_refused(world_dir, tmp_path, capsys):
    rc = main(["train", "--phase", "transform", "--data", str(world_dir),
               "--target", "S03", "--out", str(tmp_path), *MICRO_FLAGS])
    assert rc == 2
    assert "requires --checkpoint" in capsys.readouterr().err


def test_transform_with_mismatched_config_refused(world_dir, trained_dir, tmp_path, capsys):
    flags = list(MICRO_FLAGS)
    flags[flags.index("--d-model") + 1] = "16"  # different model size
    rc = main(["train", "--phase", "transform", "--data", str(world_dir),
               "--target", "S03", "--out", str(tmp_path), "--seed", "1",
               "--checkpoint", str(trained_dir / "backbone.npz"), *flags])
    assert rc == 2
    assert "does not match" in capsys.readouterr().err


def test_train_unknown_target_lists_available(world_dir, tmp_path, capsys):
    rc = main(["train", "--phase", "backbone", "--data", str(world_dir),
               "--target", "S99", "--out", str(tmp_path), *MICRO_FLAGS])
    assert rc == 2
    err = capsys.readouterr().err
    assert "S99" in err and "S00" in err and "S03" in err


def test_missing_data_dir_is_contract_error(tmp_path, capsys):
    rc = main(["train", "--phase", "backbone", "--data", str(tmp_path / "nope"),
               "--target", "S00", "--out", str(tmp_path), *MICRO_FLAGS])
    assert rc == 2


def test_env_var_supplies_data_dir(world_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("STATIONCAST_DATA_DIR", str(world_dir))
    rc = main(["train", "--phase", "backbone", "--target", "S03",
               "--out", str(tmp_path), "--seed", "1", *MICRO_FLAGS])
    assert rc == 0


# ---------------------------------------------------------------------------
# eval


def test_eval_produces_table_shaped_csv(world_dir, tmp_path, capsys):
    rc = main(["eval", "--data", str(world_dir), "--target", "S03",
               "--models", "last_value,persistence,ar,backbone",
               "--scenario", "both", "--seeds", "1", "--seed", "3",
               "--out", str(tmp_path), *MICRO_FLAGS])
    assert rc == 0
    with open(tmp_path / "report.csv") as f:
        rows = list(csv.DictReader(f))
    cells = {(r["scenario"], r["model"]) for r in rows}
    for model in ("last_value", "persistence", "ar", "backbone"):
        assert ("full_data", model) in cells and ("zero_shot", model) in cells
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["schema_version"] == 1
    out = capsys.readouterr().out
    assert "zero_shot" in out and "backbone" in out


def test_eval_checkpoint_mode_and_trace(world_dir, trained_dir, tmp_path):
    rc = main(["eval", "--data", str(world_dir),
               "--checkpoint", str(trained_dir / "zeroshot.npz"),
               "--out", str(tmp_path), *MICRO_FLAGS])
    assert rc == 0
    assert (tmp_path / "report.csv").exists()
    with open(tmp_path / "trace.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows and set(rows[0]) == {"timestamp", "truth", "prediction", "model",
                                     "station", "config_digest"}
    assert all(r["station"] == "S03" for r in rows)


def test_eval_curve(world_dir, tmp_path):
    rc = main(["eval", "--data", str(world_dir), "--target", "S03",
               "--curve", "2,3", "--seeds", "2", "--out", str(tmp_path),
               *MICRO_FLAGS])
    assert rc == 0
    with open(tmp_path / "curve.csv") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["n_train_stations"]) for r in rows] == [2, 3]
    assert all(int(r["n_seeds"]) == 2 for r in rows)


def test_eval_reports_are_byte_stable(world_dir, tmp_path):
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        rc = main(["eval", "--data", str(world_dir), "--target", "S03",
                   "--models", "last_value,backbone", "--scenario", "zero_shot",
                   "--seeds", "1", "--seed", "2", "--out", str(out), *MICRO_FLAGS])
        assert rc == 0
        outs.append((out / "report.csv").read_bytes())
    assert outs[0] == outs[1]


def test_eval_rejects_bad_scenario(world_dir, tmp_path, capsys):
    rc = main(["eval", "--data", str(world_dir), "--target", "S03",
               "--scenario", "sideways", "--out", str(tmp_path), *MICRO_FLAGS])
    assert rc == 1


# ---------------------------------------------------------------------------
# forecast


def test_forecast_trace_matches_eval_bitwise(world_dir, trained_dir, tmp_path):
    eval_out, fc_out = tmp_path / "e", tmp_path / "f"
    rc = main(["eval", "--data", str(world_dir),
               "--checkpoint", str(trained_dir / "zeroshot.npz"),
               "--out", str(eval_out), *MICRO_FLAGS])
    assert rc == 0
    rc = main(["forecast", "--data", str(world_dir),
               "--checkpoint", str(trained_dir / "zeroshot.npz"),
               "--span-hours", "120", "--out", str(fc_out), *MICRO_FLAGS])
    assert rc == 0

    def rows(path):
        with open(path) as f:
            return [(r["timestamp"], r["truth"], r["prediction"])
                    for r in csv.DictReader(f)]

    assert rows(eval_out / "trace.csv") == rows(fc_out / "forecast_trace.csv")


def test_forecast_hourly_rows_cover_the_span(world_dir, trained_dir, tmp_path):
    rc = main(["forecast", "--data", str(world_dir),
               "--checkpoint", str(trained_dir / "zeroshot.npz"),
               "--span-hours", "120", "--out", str(tmp_path), *MICRO_FLAGS])
    assert rc == 0
    with open(tmp_path / "forecast_trace.csv") as f:
        rows = list(csv.DictReader(f))
    stamps = [r["timestamp"] for r in rows]
    assert stamps == sorted(stamps)
    assert len(stamps) >= 36  # several non-overlapping 6-hour forecasts


def test_forecast_wrong_target_lists_available(world_dir, trained_dir, tmp_path, capsys):
    rc = main(["forecast", "--data", str(world_dir), "--target", "S98",
               "--checkpoint", str(trained_dir / "zeroshot.npz"),
               "--out", str(tmp_path), *MICRO_FLAGS])
    assert rc == 2
    err = capsys.readouterr().err
    assert "S98" in err and "S00" in err


# ---------------------------------------------------------------------------
# config file


def test_config_file_values_and_flag_override(world_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# experiment settings\n"
        "target = S03\n"
        "test_span_hours = 120\n"
        "train-stride = 4\n"
    )
    parsed = load_config_file(cfg)
    assert parsed == {"target": "S03", "test_span_hours": "120", "train_stride": "4"}

    out = tmp_path / "out"
    rc = main(["eval", "--data", str(world_dir), "--config", str(cfg),
               "--models", "last_value", "--scenario", "zero_shot",
               "--out", str(out), *MICRO_FLAGS])
    assert rc == 0
    with open(out / "report.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["model"] == "last_value"


def test_config_file_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("this is not a key value line\n")
    with pytest.raises(Exception):
        load_config_file(bad)


def test_version_flag():
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
