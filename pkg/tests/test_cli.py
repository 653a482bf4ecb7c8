import csv
import json
import math
from pathlib import Path

import pytest

from radartwin.cli import _config_dict, dispatch
from tests.conftest import fast_pipeline_config


@pytest.fixture()
def config_file(tmp_path):
    cfg = fast_pipeline_config(tmp_path / "run")
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps(_config_dict(cfg)))
    return path, cfg


def test_help_exits_zero(capsys):
    assert dispatch(["--help"]) == 0
    out = capsys.readouterr().out
    for sub in ("simulate", "train", "eval", "phase1", "phase2", "phase3",
                "gan", "report"):
        assert sub in out


def test_subcommand_help_documents_flags(capsys):
    assert dispatch(["simulate", "--help"]) == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--count", "--seed", "--out", "--workers", "--set"):
        assert flag in out


def test_simulate_writes_maps_and_manifest(config_file, tmp_path):
    path, cfg = config_file
    out = tmp_path / "maps"
    code = dispatch(["simulate", "--config", str(path), "--count", "5",
                     "--seed", "42", "--out", str(out)])
    assert code == 0
    assert (out / "manifest.json").exists()
    assert len(list(out.glob("sample_*.f32"))) == 5
    assert len(list(out.glob("sample_*.json"))) == 5


def test_simulate_worker_count_invariant(config_file, tmp_path):
    path, cfg = config_file
    args = ["simulate", "--config", str(path), "--count", "6", "--seed", "3"]
    assert dispatch(args + ["--out", str(tmp_path / "a"), "--workers", "1"]) == 0
    assert dispatch(args + ["--out", str(tmp_path / "b"), "--workers", "8"]) == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert [f["sha256"] for f in a["files"]] == [f["sha256"] for f in b["files"]]


def test_phase2_before_phase1_exits_2(config_file, capsys):
    path, cfg = config_file
    code = dispatch(["phase2", "--config", str(path)])
    assert code == 2
    assert "phase1 report not found" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"master_seed": 1, "frobnicate": True}))
    assert dispatch(["phase1", "--config", str(bad)]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_unknown_section_key_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"radar": {"carrier_freq": 1e10, "bogus": 1}}))
    assert dispatch(["phase1", "--config", str(bad)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_set_overrides_apply(config_file, tmp_path, capsys):
    path, cfg = config_file
    out = tmp_path / "c"
    code = dispatch(["simulate", "--config", str(path), "--count", "2",
                     "--seed", "1", "--out", str(out),
                     "--set", "scenario.rcs=99.0"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["scenario"]["rcs"] == 99.0


def test_missing_config_file_exits_2(capsys):
    assert dispatch(["phase1", "--config", "/does/not/exist.json"]) == 2


def test_runtime_error_exits_3(capsys):
    assert dispatch(["report", "/does/not/exist.json"]) == 3


def test_eval_and_report_csv_round_trip(config_file, tmp_path):
    path, cfg = config_file
    data_dir = tmp_path / "data"
    assert dispatch(["simulate", "--config", str(path), "--count", "8",
                     "--seed", "5", "--out", str(data_dir)]) == 0
    report_json = tmp_path / "eval.json"
    assert dispatch(["eval", "--dataset", str(data_dir),
                     "--algorithms", "argmax,cfar",
                     "--out", str(report_json)]) == 0
    payload = json.loads(report_json.read_text())
    assert set(payload["algorithms"]) == {"argmax", "cfar"}

    report_csv = tmp_path / "eval.csv"
    assert dispatch(["report", "--format", "csv", str(report_json),
                     "--out", str(report_csv)]) == 0
    with open(report_csv, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    by_name = {row[header.index("algorithm")]: row for row in rows[1:]}
    for name, row in by_name.items():
        source = payload["algorithms"][name]
        for col in ("mae_range", "mae_doppler", "sigma_range",
                    "within_1bin_joint", "fp_per_map", "fn_rate"):
            csv_value = float(row[header.index(col)])
            assert math.isclose(csv_value, source[col], rel_tol=1e-12,
                                abs_tol=1e-15)


def test_train_command_writes_models(config_file, tmp_path):
    path, cfg = config_file
    data_dir = tmp_path / "d"
    assert dispatch(["simulate", "--config", str(path), "--count", "9",
                     "--seed", "4", "--out", str(data_dir)]) == 0
    model_dir = tmp_path / "models"
    code = dispatch([
        "train", "--dataset", str(data_dir), "--out", str(model_dir),
        "--folds", "3", "--seed", "1",
        "--localizer-params",
        json.dumps(dict(epochs=1, batch_size=4, input_shape=[48, 32])),
    ])
    assert code == 0
    assert (model_dir / "training.json").exists()
    for k in range(3):
        assert (model_dir / f"fold_{k}" / "model.bin").exists()
        assert (model_dir / f"fold_{k}" / "model.json").exists()


def test_gan_train_and_generate(config_file, tmp_path):
    path, cfg = config_file
    gan_dir = tmp_path / "gan"
    code = dispatch(["gan", "train", "--config", str(path),
                     "--pairs", "6", "--epochs", "1", "--seed", "2",
                     "--out", str(gan_dir)])
    assert code == 0
    assert (gan_dir / "generator.bin").exists()
    assert (gan_dir / "metrics.json").exists()
    gen_dir = tmp_path / "generated"
    code = dispatch(["gan", "generate", "--bundle", str(gan_dir),
                     "--count", "2", "--seed", "3", "--out", str(gen_dir)])
    assert code == 0
    manifest = json.loads((gen_dir / "generated.json").read_text())
    assert manifest["count"] == 2
    assert len(list(gen_dir.glob("clutter_*.f32"))) == 2
