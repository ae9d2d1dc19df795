import json

import pytest

from vidattr import bundled_schema_path
from vidattr.cli import dispatch


def _toml_config(tmp_path, manifest, steps=4, mode="side", extra=""):
    cfg = f"""
mode = "{mode}"

[schema]
path = "{bundled_schema_path('synthetic_small')}"

[data]
manifest = "{manifest}"

[backbone.vision]
width = 32
depth = 4
heads = 2
patch = 16
tap_layers = [0, 1, 2, 3]
image_size = [32, 32]

[backbone.text]
width = 32
depth = 2
heads = 2
vocab = 258

[side_net]
width = 16
heads = 2
depth = 8
fusion_points = [0, 2, 4, 6]
max_frames = 8

[fusion]
layers = 1
width = 16
heads = 2

[preprocess]
height = 32
width = 32

[train]
lr = 0.001
batch_size = 8
steps = {steps}
seed = 0
frames_per_sample = 6
{extra}
"""
    p = tmp_path / "run.toml"
    p.write_text(cfg)
    return p


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    schema = bundled_schema_path("synthetic_small")
    code = dispatch(
        ["synth-data", "--out", str(out), "--num", "16", "--seed", "5",
         "--schema", str(schema), "--test-fraction", "0.25"]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, cli_data):
    tmp = tmp_path_factory.mktemp("cli_train")
    cfg = _toml_config(tmp, cli_data / "manifest.jsonl", steps=6)
    exp = tmp / "exp"
    code = dispatch(["train", "--config", str(cfg), "--out", str(exp)])
    assert code == 0
    return exp


def test_synth_data_writes_manifest_and_frames(cli_data):
    assert (cli_data / "manifest.jsonl").exists()
    frames = list((cli_data / "frames").rglob("*.png"))
    assert len(frames) >= 16 * 4


def test_synth_data_rerun_is_byte_identical(tmp_path):
    schema = str(bundled_schema_path("synthetic_small"))
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert dispatch(["synth-data", "--out", str(out), "--num", "4", "--seed", "3",
                         "--schema", schema]) == 0
    for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_train_then_eval_flow(trained, tmp_path):
    assert (trained / "ckpt.npz").exists()
    assert (trained / "ckpt.meta.json").exists()
    assert (trained / "config_used.json").exists()
    assert (trained / "log.jsonl").exists()
    assert (trained / "metrics.json").exists()  # test split existed

    out = tmp_path / "eval"
    code = dispatch(["eval", "--checkpoint", str(trained / "ckpt"), "--out", str(out)])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["macro"]) == {"accuracy", "precision", "recall", "f1"}
    table = (out / "metrics_table.txt").read_text()
    assert table.splitlines()[0].startswith("Attribute")
    assert any(l.startswith("Average") for l in table.splitlines())


def test_explain_writes_heatmaps_and_sidecar(trained, tmp_path, cli_data):
    out = tmp_path / "explain"
    code = dispatch(
        ["explain", "--checkpoint", str(trained / "ckpt"), "--tracklet", "synth0000",
         "--attribute", "motion left", "--out", str(out)]
    )
    assert code == 0
    pngs = sorted(out.glob("synth0000_motion_left_f*.png"))
    assert len(pngs) == 6  # one per sampled frame
    sidecar = json.loads((out / "synth0000_motion_left.json").read_text())
    assert sidecar["attribute"] == "motion left"
    assert len(sidecar["frame_indices"]) == 6
    assert 0.0 <= sidecar["probability"] <= 1.0


def test_explain_unknown_attribute_is_validation_error(trained, tmp_path, capsys):
    out = tmp_path / "x"
    code = dispatch(
        ["explain", "--checkpoint", str(trained / "ckpt"), "--tracklet", "synth0000",
         "--attribute", "nonexistent", "--out", str(out)]
    )
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    rec = json.loads(err)
    assert "nonexistent" in rec["message"]


def test_count_params_command(tmp_path, cli_data):
    cfg = _toml_config(tmp_path, cli_data / "manifest.jsonl")
    out = tmp_path / "params"
    code = dispatch(["count-params", "--config", str(cfg), "--out", str(out)])
    assert code == 0
    rep = json.loads((out / "param_report.json").read_text())
    assert rep["by_prefix"]["backbone"]["trainable"] == 0
    assert rep["trainable"] < rep["total"]


def test_compare_peft_command(tmp_path, cli_data):
    cfg = _toml_config(tmp_path, cli_data / "manifest.jsonl", steps=2)
    out = tmp_path / "cmp"
    code = dispatch(
        ["compare-peft", "--config", str(cfg), "--out", str(out), "--variants", "side,lora", "--steps", "2"]
    )
    assert code == 0
    rep = json.loads((out / "peft_comparison.json").read_text())
    assert [r["method"] for r in rep["rows"]] == ["side", "lora"]
    header = (out / "peft_comparison.txt").read_text().splitlines()[0]
    assert "Trainable Params" in header


def test_every_command_has_help():
    for cmd in ("synth-data", "train", "eval", "count-params", "compare-peft", "explain", "convert-manifest"):
        assert dispatch([cmd, "--help"]) == 0
    assert dispatch(["--help"]) == 0


def test_unknown_flag_is_validation_error(capsys):
    assert dispatch(["synth-data", "--bogus", "1"]) == 1


def test_missing_schema_file_is_validation_error(tmp_path, capsys):
    code = dispatch(["synth-data", "--out", str(tmp_path / "o"), "--num", "2", "--seed", "0",
                     "--schema", str(tmp_path / "none.json")])
    assert code == 1
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["error"]


def test_outputs_stay_under_out_dir(tmp_path, monkeypatch):
    workdir = tmp_path / "cwd"
    workdir.mkdir()
    monkeypatch.chdir(workdir)
    out = tmp_path / "artifacts"
    schema = str(bundled_schema_path("synthetic_small"))
    assert dispatch(["synth-data", "--out", str(out), "--num", "2", "--seed", "1", "--schema", schema]) == 0
    assert list(workdir.iterdir()) == []  # nothing leaked into the working directory


def test_convert_manifest_roundtrip(tmp_path, mars_schema):
    csv_path = tmp_path / "src.csv"
    header = "id,split,frames," + ",".join(g.name for g in mars_schema.groups)
    row_vals = []
    for g in mars_schema.groups:
        row_vals.append(g.classes[0] if g.kind == "multi-class" else "1")
    csv_path.write_text(header + "\n" + "t1,train,a.png;b.png," + ",".join(row_vals) + "\n")
    out = tmp_path / "conv"
    code = dispatch(
        ["convert-manifest", "--format", "mars", "--src", str(csv_path),
         "--schema", str(bundled_schema_path("mars_reconstructed")), "--out", str(out)]
    )
    assert code == 0
    line = json.loads((out / "manifest.jsonl").read_text().splitlines()[0])
    assert line["id"] == "t1"
    assert line["group_values"]["hat"] is True


def test_convert_manifest_refuses_wrong_total(tmp_path):
    csv_path = tmp_path / "src.csv"
    csv_path.write_text("id,split,frames\n")
    code = dispatch(
        ["convert-manifest", "--format", "mars", "--src", str(csv_path),
         "--schema", str(bundled_schema_path("synthetic_small")), "--out", str(tmp_path / "o")]
    )
    assert code == 1


def test_train_peft_mode_checkpoint_roundtrip(tmp_path, cli_data):
    cfg = _toml_config(tmp_path, cli_data / "manifest.jsonl", steps=2, mode="lora")
    exp = tmp_path / "exp"
    assert dispatch(["train", "--config", str(cfg), "--out", str(exp)]) == 0
    meta = json.loads((exp / "ckpt.meta.json").read_text())
    assert meta["peft"]["kind"] == "lora"
    out = tmp_path / "ev"
    assert dispatch(["eval", "--checkpoint", str(exp / "ckpt"), "--out", str(out)]) == 0


def test_corrupt_checkpoint_is_runtime_failure(tmp_path, capsys):
    prefix = tmp_path / "ckpt"
    (tmp_path / "ckpt.npz").write_bytes(b"not a zip archive")
    (tmp_path / "ckpt.meta.json").write_text("{}")
    code = dispatch(["eval", "--checkpoint", str(prefix), "--out", str(tmp_path / "o")])
    assert code == 2
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["error"]


def test_train_flag_overrides_file(tmp_path, cli_data):
    cfg = _toml_config(tmp_path, cli_data / "manifest.jsonl", steps=50)
    out = tmp_path / "exp"
    assert dispatch(["train", "--config", str(cfg), "--out", str(out), "--steps", "2"]) == 0
    log = (out / "log.jsonl").read_text().strip().splitlines()
    assert len(log) == 2
    used = json.loads((out / "config_used.json").read_text())
    assert used["train"]["steps"] == 2
