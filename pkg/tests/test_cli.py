import json
import subprocess
import sys
from pathlib import Path

import pytest

REFERENCE = Path(__file__).resolve().parent.parent / "src" / "craft" / "reference.json"


def run_cli(*args, **kwargs):
    return subprocess.run([sys.executable, "-m", "craft", *args],
                          capture_output=True, text=True, **kwargs)


def small_config(tmp_path, **overrides):
    doc = json.loads(REFERENCE.read_text())
    doc["synthetic"].update({"num_classes": 4, "samples_per_class_per_modality": 12,
                             "dim": 8})
    doc["train"].update({"epochs": 2, "shots": 4})
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One gen+train+eval run shared by the cheap assertions below."""
    tmp_path = tmp_path_factory.mktemp("cli")
    config = small_config(tmp_path)
    data = tmp_path / "data"
    ckpt = tmp_path / "adapter.cadp"
    report = tmp_path / "report.json"
    steps = [
        run_cli("gen", "--config", str(config), "--out", str(data)),
        run_cli("anchors", "--data", str(data / "source.cemb"),
                "--out", str(tmp_path / "anchors.cemb"), "--seed", "3"),
        run_cli("train", "--config", str(config), "--data", str(data),
                "--out", str(ckpt)),
        run_cli("eval", "--config", str(config), "--checkpoint", str(ckpt),
                "--data", str(data), "--out", str(report)),
        run_cli("mmd", "--a", str(data / "source.cemb"), "--b", str(data / "target.cemb"),
                "--anchors", str(tmp_path / "anchors.cemb"), "--n-perms", "100", "--seed", "0"),
    ]
    return tmp_path, config, data, ckpt, report, steps


def test_pipeline_succeeds(pipeline):
    *_, steps = pipeline
    for step in steps:
        assert step.returncode == 0, step.stderr
        json.loads(step.stdout)  # every command prints machine-readable JSON


def test_pipeline_artifacts(pipeline):
    tmp_path, config, data, ckpt, report, _ = pipeline
    assert (data / "source.cemb").exists() and (data / "target.cemb").exists()
    assert ckpt.exists()
    assert ckpt.with_suffix(".cadp.history.jsonl").exists()
    doc = json.loads(report.read_text())
    assert doc["kind"] == "base-to-novel"
    assert "base_accuracy" in doc and "timestamp" in doc
    assert report.with_suffix(".txt").exists()
    assert (report.parent / "report_confusion_base.csv").exists()
    assert (report.parent / "report_confusion_novel.csv").exists()


def test_mmd_output_fields(pipeline):
    *_, steps = pipeline
    doc = json.loads(steps[-1].stdout)
    assert {"bandwidth", "mmd2_biased", "mmd2_unbiased", "p_value", "n_perms"} <= doc.keys()
    assert 0.0 < doc["p_value"] <= 1.0


def test_help_lists_flags():
    result = run_cli("--help")
    assert result.returncode == 0
    for sub in ("gen", "anchors", "train", "eval", "mmd"):
        assert sub in result.stdout
    result = run_cli("eval", "--help")
    for flag in ("--config", "--checkpoint", "--data", "--kind", "--mode", "--seed", "--out"):
        assert flag in result.stdout


def test_unknown_config_key_names_key(tmp_path):
    doc = json.loads(REFERENCE.read_text())
    doc["train"]["learning_rrate"] = 0.5
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    result = run_cli("gen", "--config", str(path), "--out", str(tmp_path / "d"))
    assert result.returncode == 2
    err = json.loads(result.stderr)
    assert err["error"] == "ConfigError"
    assert "learning_rrate" in err["message"]


def test_invalid_mode_value(tmp_path):
    doc = json.loads(REFERENCE.read_text())
    doc["train"]["mode"] = "warp-drive"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    result = run_cli("gen", "--config", str(path), "--out", str(tmp_path / "d"))
    assert result.returncode == 2
    assert "warp-drive" in json.loads(result.stderr)["message"]


def test_checkpoint_dimension_mismatch_is_data_error(tmp_path):
    config = small_config(tmp_path)
    data = tmp_path / "data"
    assert run_cli("gen", "--config", str(config), "--out", str(data)).returncode == 0
    ckpt = tmp_path / "wrong.cadp"
    from craft.adapter import Adapter, write_checkpoint
    write_checkpoint(Adapter.zeros(5), ckpt)  # data dim is 8
    result = run_cli("eval", "--config", str(config), "--checkpoint", str(ckpt),
                     "--data", str(data), "--out", str(tmp_path / "r.json"))
    assert result.returncode == 3
    assert json.loads(result.stderr)["error"] == "ShapeError"


def test_nonfinite_checkpoint_is_numeric_error(tmp_path):
    import struct
    config = small_config(tmp_path)
    data = tmp_path / "data"
    assert run_cli("gen", "--config", str(config), "--out", str(data)).returncode == 0
    ckpt = tmp_path / "nan.cadp"
    import numpy as np
    values = np.full(2 * (8 * 8 + 8), np.nan)
    ckpt.write_bytes(struct.pack("<4sII", b"CADP", 1, 8) + values.astype("<f8").tobytes())
    result = run_cli("eval", "--config", str(config), "--checkpoint", str(ckpt),
                     "--data", str(data), "--out", str(tmp_path / "r.json"))
    assert result.returncode == 4
    assert json.loads(result.stderr)["error"] == "NumericError"


def test_anchors_command_idempotent(tmp_path):
    config = small_config(tmp_path)
    data = tmp_path / "data"
    assert run_cli("gen", "--config", str(config), "--out", str(data)).returncode == 0
    a1, a2 = tmp_path / "a1.cemb", tmp_path / "a2.cemb"
    for out in (a1, a2):
        assert run_cli("anchors", "--data", str(data / "source.cemb"),
                       "--out", str(out), "--seed", "5").returncode == 0
    assert a1.read_bytes() == a2.read_bytes()


def test_missing_data_file_is_data_error(tmp_path):
    config = small_config(tmp_path)
    result = run_cli("train", "--config", str(config), "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "a.cadp"))
    assert result.returncode == 3


def test_corrupt_cemb_is_data_error(tmp_path):
    config = small_config(tmp_path)
    data = tmp_path / "data"
    data.mkdir()
    (data / "source.cemb").write_bytes(b"XXXX" + bytes(16))
    result = run_cli("train", "--config", str(config), "--data", str(data),
                     "--out", str(tmp_path / "a.cadp"))
    assert result.returncode == 3
    assert json.loads(result.stderr)["error"] == "FormatError"


def test_seed_flag_overrides_config(tmp_path):
    config = small_config(tmp_path)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    run_cli("gen", "--config", str(config), "--out", str(out_a), "--seed", "100")
    run_cli("gen", "--config", str(config), "--out", str(out_b), "--seed", "101")
    assert (out_a / "source.cemb").read_bytes() != (out_b / "source.cemb").read_bytes()


def test_craft_threads_env_accepted(tmp_path):
    config = small_config(tmp_path)
    result = run_cli("gen", "--config", str(config), "--out", str(tmp_path / "d"),
                     env={"PATH": "/usr/bin:/bin:/usr/local/bin", "CRAFT_THREADS": "1"})
    assert result.returncode == 0


def strip_timestamp(path: Path) -> str:
    doc = json.loads(path.read_text())
    doc.pop("timestamp", None)
    return json.dumps(doc, sort_keys=True)


def test_end_to_end_determinism(tmp_path):
    config = small_config(tmp_path)
    outputs = []
    for tag in ("one", "two"):
        root = tmp_path / tag
        data = root / "data"
        ckpt = root / "adapter.cadp"
        report = root / "report.json"
        for args in (("gen", "--config", str(config), "--out", str(data)),
                     ("train", "--config", str(config), "--data", str(data), "--out", str(ckpt)),
                     ("eval", "--config", str(config), "--checkpoint", str(ckpt),
                      "--data", str(data), "--out", str(report))):
            result = run_cli(*args)
            assert result.returncode == 0, result.stderr
        outputs.append((ckpt.with_suffix(".cadp.history.jsonl").read_bytes(),
                        strip_timestamp(report)))
    assert outputs[0] == outputs[1]
