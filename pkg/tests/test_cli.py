"""CLI behavior: strict config validation, reproducible artifacts, manifest
bookkeeping, the two segment input modes, and failure cleanup."""

import json
import os

import numpy as np
import pytest
from PIL import Image

from owpsnet.cli import main, load_config, ConfigError
from owpsnet.data import read_dataset
from owpsnet.losses import LOSS_CURVE_HEADER

TINY_CFG = {
    "data": {"height": 32, "width": 32, "count_range": [2, 2],
             "axis_range": [4.0, 7.0], "overlap_prob": 1.0},
    "model": {"depth": 2, "base_channels": 4, "norm_variant": "IN",
              "refine_enabled": False},
    "train": {"epochs": 1, "batch_size": 2, "seed": 0, "eval_every": 1},
}


def write_cfg(tmp_path, body=None, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(TINY_CFG if body is None else body))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One shared tiny dataset + trained checkpoint for the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root)
    assert main(["gen-data", "--config", cfg, "--out", str(root / "ds"),
                 "--count", "6", "--seed", "1"]) == 0
    assert main(["train", "--config", cfg, "--train-data", str(root / "ds"),
                 "--out", str(root / "run")]) == 0
    return root, cfg


# -- config handling -----------------------------------------------------------


def test_unknown_section_rejected(tmp_path):
    path = write_cfg(tmp_path, {"modle": {}})
    with pytest.raises(ConfigError, match="modle"):
        load_config(path)


def test_unknown_key_names_field_and_section(tmp_path):
    path = write_cfg(tmp_path, {"model": {"depht": 3}})
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert "depht" in str(err.value) and "model" in str(err.value)


def test_unknown_key_exits_2(tmp_path, capsys):
    path = write_cfg(tmp_path, {"train": {"learning_rate": 0.1}})
    code = main(["gen-data", "--config", path, "--out", str(tmp_path / "ds"),
                 "--count", "1"])
    assert code == 2
    assert "learning_rate" in capsys.readouterr().err


def test_invalid_json_exits_2(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["gen-data", "--config", str(path), "--out",
                 str(tmp_path / "ds"), "--count", "1"]) == 2


def test_range_fields_must_be_pairs(tmp_path):
    path = write_cfg(tmp_path, {"data": {"count_range": [2]}})
    assert main(["gen-data", "--config", path, "--out", str(tmp_path / "ds"),
                 "--count", "1"]) == 2


# -- gen-data -----------------------------------------------------------------------


def test_gen_data_reruns_are_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    for sub in ("a", "b"):
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / sub),
                     "--count", "2", "--seed", "7"]) == 0
    for rel in ("images/0000.png", "region/0000.png", "edge/0001.png",
                "instance/0001.png"):
        assert ((tmp_path / "a" / rel).read_bytes()
                == (tmp_path / "b" / rel).read_bytes()), rel


def test_gen_data_writes_run_manifest(workspace):
    root, _ = workspace
    manifest = json.loads((root / "ds" / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["overrides"] == {"seed": 1}
    assert "duration_s" in manifest


def test_generated_dataset_loads_back(workspace):
    root, _ = workspace
    samples = read_dataset(root / "ds")
    assert len(samples) == 6
    assert samples[0].image.shape == (3, 32, 32)


# -- train --------------------------------------------------------------------------


def test_train_outputs_exist(workspace):
    root, _ = workspace
    assert (root / "run" / "model.owps").exists()
    metrics = (root / "run" / "metrics.csv").read_text().strip().split("\n")
    assert metrics[0].startswith("epoch,")
    assert len(metrics) == 2      # header + 1 epoch


def test_train_manifest_records_overrides(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "run2"
    assert main(["train", "--config", cfg, "--train-data", str(root / "ds"),
                 "--out", str(out), "--seed", "3", "--no-refine"]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["overrides"]["seed"] == 3
    assert manifest["overrides"]["no-refine"] is True
    assert sorted(manifest["outputs"]) == ["metrics.csv", "model.owps"]


def test_train_rejects_bad_loss_override(workspace, tmp_path, capsys):
    root, cfg = workspace
    code = main(["train", "--config", cfg, "--train-data", str(root / "ds"),
                 "--out", str(tmp_path / "x"), "--loss-edge", "focal"])
    assert code == 2


def test_failed_train_cleans_up_outputs(workspace, tmp_path):
    root, _ = workspace
    bad_cfg = dict(TINY_CFG)
    bad_cfg["train"] = dict(TINY_CFG["train"], batch_size=999)   # cannot fill a batch
    cfg = write_cfg(tmp_path, bad_cfg)
    out = tmp_path / "doomed"
    code = main(["train", "--config", cfg, "--train-data", str(root / "ds"),
                 "--out", str(out)])
    assert code == 1
    assert not out.exists()      # newly created dir removed with its partials


# -- eval ----------------------------------------------------------------------------


def test_eval_writes_report(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "ev"
    assert main(["eval", "--config", cfg,
                 "--checkpoint", str(root / "run" / "model.owps"),
                 "--data", str(root / "ds"), "--out", str(out)]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert report["n_images"] == 6
    assert 0.0 <= report["particle_dice"] <= 1.0
    assert len(report["per_image_count_match"]) == 6


# -- segment ------------------------------------------------------------------------


def test_segment_checkpoint_mode(workspace, tmp_path, capsys):
    root, _ = workspace
    out = tmp_path / "seg"
    code = main(["segment", "--checkpoint", str(root / "run" / "model.owps"),
                 "--image", str(root / "ds" / "images" / "0000.png"),
                 "--out", str(out)])
    assert code == 0
    printed = capsys.readouterr().out.strip()
    assert printed.isdigit()
    assert (out / "0000_region_prob.png").exists()
    assert (out / "0000_instances.png").exists()
    labels = np.asarray(Image.open(out / "0000_instances.png"))
    assert labels.max() == int(printed)


def test_segment_probability_mode_recovers_oracle_count(workspace, tmp_path, capsys):
    """Ideal probability maps straight from the labels must yield the true
    particle count through the CLI."""
    root, _ = workspace
    samples = read_dataset(root / "ds")
    s = samples[0]
    rp_path = tmp_path / "region.png"
    ep_path = tmp_path / "edge.png"
    Image.fromarray(s.region_mask * np.uint8(255), mode="L").save(rp_path)
    Image.fromarray(s.edge_mask * np.uint8(255), mode="L").save(ep_path)
    out = tmp_path / "seg"
    code = main(["segment", "--region-prob", str(rp_path),
                 "--edge-prob", str(ep_path), "--out", str(out)])
    assert code == 0
    assert int(capsys.readouterr().out.strip()) == s.true_count
    labels = np.asarray(Image.open(out / "instances.png"))
    assert labels.max() == s.true_count


def test_segment_requires_exactly_one_mode(workspace, tmp_path):
    root, _ = workspace
    assert main(["segment", "--out", str(tmp_path / "x")]) == 2
    assert main(["segment", "--checkpoint", str(root / "run" / "model.owps"),
                 "--region-prob", "r.png", "--out", str(tmp_path / "x")]) == 2


def test_segment_pads_non_multiple_inputs(workspace, tmp_path, capsys):
    root, _ = workspace
    src = np.asarray(Image.open(root / "ds" / "images" / "0000.png"))
    odd = tmp_path / "odd.png"
    Image.fromarray(src[:30, :29]).save(odd)    # not a multiple of 2**depth
    out = tmp_path / "seg"
    code = main(["segment", "--checkpoint", str(root / "run" / "model.owps"),
                 "--image", str(odd), "--out", str(out)])
    assert code == 0
    region = np.asarray(Image.open(out / "odd_region_prob.png"))
    assert region.shape == (30, 29)    # cropped back to the input extents


# -- grid and curves ------------------------------------------------------------------


def test_grid_command(workspace, tmp_path):
    root, _ = workspace
    grid_cfg = dict(TINY_CFG)
    grid_cfg["grid"] = {"models": ["U_Net", "OWSNet-without-refine"],
                        "losses": ["CE"], "batches": [2]}
    cfg = write_cfg(tmp_path, grid_cfg)
    out = tmp_path / "grid"
    assert main(["grid", "--config", cfg, "--train-data", str(root / "ds"),
                 "--eval-data", str(root / "ds"), "--out", str(out)]) == 0
    lines = (out / "results.csv").read_text().strip().split("\n")
    rows = [l for l in lines if not l.startswith("#")]
    assert rows[0].startswith("model,")
    assert len(rows) == 3


def test_loss_curves_cover_unit_interval(tmp_path):
    out = tmp_path / "curves.csv"
    assert main(["plot-loss-curves", "--out", str(out)]) == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0] == LOSS_CURVE_HEADER
    assert len(lines) == 100     # header + p = 0.01 .. 0.99
    first = [float(v) for v in lines[1].split(",")]
    assert first[0] == 0.01


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "owps" in capsys.readouterr().out
