import json
from types import SimpleNamespace

import pytest

from pixelret.cli import CANONICAL_PATTERNS, main
from pixelret.layout import parse_layout

FAST_CONFIG = {
    "litho": {"sigma_nm": 3.0, "radius_nm": 9.0, "resist_threshold": 0.5},
    "ilt": {"steps": 8},
    "iip": {
        "num_classes": 5,
        "iik_sigma_nm": 2.0,
        "iik_radius_nm": 6.0,
        "threshold": 0.5,
    },
    "tiling": {
        "interaction_distance": 8.0,
        "px_per_nm": 1.0,
        "compression_factor": 2,
        "row_reducer": "mean",
        "col_reducer": "mean",
    },
    "arch": {
        "conv_blocks": [
            {"filters": 4, "kernel": 3, "stride": 2},
            {"filters": 8, "kernel": 3, "stride": 2},
        ]
    },
    "train": {"epochs": 2, "batch_size": 8, "learning_rate": 0.05},
    "sampling": {"per_class_cap": 40, "split_fractions": [0.6, 0.2, 0.2]},
    "correction": {"workers": 1, "cleanup_min_area": 2.0, "cleanup_min_edge": 0.0},
}

COMMANDS = [
    "gen-patterns", "rasterize", "simulate", "ilt", "prep-data",
    "train", "predict-map", "correct", "evaluate", "bench",
]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "fast.json"
    cfg.write_text(json.dumps(FAST_CONFIG))
    rc = main([
        "gen-patterns", "--config", str(cfg), "--out", str(root / "pat"),
        "--topology", "isolated_line", "--width", "10", "--length", "30",
        "--name", "tiny",
    ])
    assert rc == 0
    return SimpleNamespace(root=root, cfg=str(cfg), layout=str(root / "pat" / "tiny.layout"))


@pytest.fixture(scope="module")
def model_path(ws):
    rc = main([
        "prep-data", "--config", ws.cfg, "--layouts", ws.layout,
        "--out", str(ws.root / "data"),
    ])
    assert rc == 0
    rc = main([
        "train", "--config", ws.cfg, "--data", str(ws.root / "data" / "dataset"),
        "--out", str(ws.root / "model"),
    ])
    assert rc == 0
    return str(ws.root / "model" / "model.bin")


class TestParser:
    @pytest.mark.parametrize("cmd", COMMANDS)
    def test_help_exits_zero(self, cmd, capsys):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--config", "--seed", "--out", "--toy"):
            assert flag in text

    def test_unknown_flag_rejected(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["ilt", "--out", "x", "--layout", "y", "--frobnicate"])
        assert e.value.code == 2

    def test_missing_out_rejected(self):
        with pytest.raises(SystemExit) as e:
            main(["gen-patterns"])
        assert e.value.code == 2

    def test_top_level_help_lists_commands(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        text = capsys.readouterr().out
        for cmd in COMMANDS:
            assert cmd in text


class TestConfig:
    def test_missing_config_file(self, tmp_path, capsys):
        rc = main([
            "gen-patterns", "--config", str(tmp_path / "nope.json"),
            "--out", str(tmp_path / "o"),
        ])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_garbage_config_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = main(["gen-patterns", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "not valid JSON" in capsys.readouterr().err

    def test_class_count_cross_check(self, tmp_path, capsys):
        cfg = dict(FAST_CONFIG)
        cfg["arch"] = dict(FAST_CONFIG["arch"], num_classes=50)
        f = tmp_path / "c.json"
        f.write_text(json.dumps(cfg))
        rc = main(["gen-patterns", "--config", str(f), "--out", str(tmp_path / "o")])
        assert rc == 2
        err = capsys.readouterr().err
        assert "arch.num_classes=50" in err
        assert "iip.num_classes=5" in err

    def test_input_side_cross_check(self, tmp_path, capsys):
        cfg = dict(FAST_CONFIG)
        cfg["arch"] = dict(FAST_CONFIG["arch"], input_side=7)
        f = tmp_path / "c.json"
        f.write_text(json.dumps(cfg))
        rc = main(["gen-patterns", "--config", str(f), "--out", str(tmp_path / "o")])
        assert rc == 2
        err = capsys.readouterr().err
        assert "arch.input_side=7" in err

    def test_config_echoed_with_command(self, ws):
        echoed = json.loads((ws.root / "pat" / "config.json").read_text())
        assert echoed["_command"] == "gen-patterns"
        assert echoed["tiling"]["interaction_distance"] == 8.0

    def test_seed_flag_overrides(self, tmp_path):
        rc = main([
            "gen-patterns", "--seed", "5", "--out", str(tmp_path / "o"),
            "--topology", "square", "--width", "20",
        ])
        assert rc == 0
        echoed = json.loads((tmp_path / "o" / "config.json").read_text())
        assert echoed["seed"] == 5


class TestGenPatterns:
    def test_canonical_set(self, tmp_path):
        rc = main(["gen-patterns", "--toy", "--out", str(tmp_path / "p")])
        assert rc == 0
        for name in CANONICAL_PATTERNS:
            assert (tmp_path / "p" / f"{name}.layout").exists()

    def test_custom_geometry(self, ws):
        p = parse_layout((ws.root / "pat" / "tiny.layout").read_text())
        assert p.bbox == (-5.0, -15.0, 5.0, 15.0)

    def test_bad_topology_params(self, tmp_path, capsys):
        rc = main([
            "gen-patterns", "--out", str(tmp_path / "o"),
            "--topology", "line_space", "--width", "40",
        ])
        assert rc == 2
        assert "error:" in capsys.readouterr().err


class TestStages:
    def test_rasterize(self, ws, tmp_path):
        rc = main([
            "rasterize", "--config", ws.cfg, "--layout", ws.layout,
            "--out", str(tmp_path / "r"),
        ])
        assert rc == 0
        assert (tmp_path / "r" / "raster.pgm").exists()

    def test_simulate(self, ws, tmp_path, capsys):
        rc = main([
            "simulate", "--config", ws.cfg, "--layout", ws.layout,
            "--out", str(tmp_path / "s"),
        ])
        assert rc == 0
        assert (tmp_path / "s" / "aerial.pgm").exists()
        assert (tmp_path / "s" / "printed.pgm").exists()
        assert "IoU" in capsys.readouterr().out

    def test_ilt_outputs_and_determinism(self, ws, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            rc = main([
                "ilt", "--config", ws.cfg, "--layout", ws.layout, "--out", str(out),
            ])
            assert rc == 0
        for name in ("ref_mask.pgm", "ref_mask.layout", "loss.csv"):
            assert (out1 / name).exists()
        assert (out1 / "ref_mask.pgm").read_bytes() == (out2 / "ref_mask.pgm").read_bytes()
        rows = (out1 / "loss.csv").read_text().strip().splitlines()
        assert rows[0] == "step,loss"
        assert len(rows) == 1 + FAST_CONFIG["ilt"]["steps"] + 1

    def test_prep_data_artifacts(self, ws, model_path):
        d = ws.root / "data" / "dataset"
        for f in ("meta", "images.f32", "labels.u16", "coords.i32", "splits.u8"):
            assert (d / f).exists()

    def test_train_artifacts(self, ws, model_path):
        assert (ws.root / "model" / "model.bin").exists()
        rows = (ws.root / "model" / "history.csv").read_text().strip().splitlines()
        assert rows[0] == "epoch,train_loss,val_accuracy"
        assert len(rows) == 1 + FAST_CONFIG["train"]["epochs"]

    def test_predict_map(self, ws, model_path, tmp_path):
        rc = main([
            "predict-map", "--config", ws.cfg, "--layout", ws.layout,
            "--model", model_path, "--out", str(tmp_path / "m"),
        ])
        assert rc == 0
        assert (tmp_path / "m" / "iip.pgm").exists()
        assert (tmp_path / "m" / "iip.pgm.json").exists()

    def test_correct_artifacts(self, ws, model_path, tmp_path):
        rc = main([
            "correct", "--config", ws.cfg, "--layout", ws.layout,
            "--model", model_path, "--out", str(tmp_path / "c"),
        ])
        assert rc == 0
        for name in ("iip.pgm", "threshold.pgm", "cleanup.pgm", "mask.layout"):
            assert (tmp_path / "c" / name).exists()
        parse_layout((tmp_path / "c" / "mask.layout").read_text())

    def test_correct_reproducible(self, ws, model_path, tmp_path):
        outs = []
        for sub in ("c1", "c2"):
            rc = main([
                "correct", "--config", ws.cfg, "--layout", ws.layout,
                "--model", model_path, "--out", str(tmp_path / sub),
            ])
            assert rc == 0
            outs.append((tmp_path / sub / "mask.layout").read_bytes())
        assert outs[0] == outs[1]

    def test_evaluate_metrics(self, ws, model_path, tmp_path):
        rc = main([
            "evaluate", "--config", ws.cfg, "--layout", ws.layout,
            "--model", model_path, "--out", str(tmp_path / "e"),
        ])
        assert rc == 0
        metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
        for key in (
            "iou_vs_reference", "class_accuracy", "within_one_class_accuracy",
            "pixels", "ilt_fidelity",
        ):
            assert key in metrics
        assert 0.0 <= metrics["iou_vs_reference"] <= 1.0
        assert metrics["pixels"] > 0
        assert (tmp_path / "e" / "confusion.csv").exists()

    def test_bench_rejects_small_workload(self, ws, model_path, tmp_path, capsys):
        rc = main([
            "bench", "--config", ws.cfg, "--layout", ws.layout,
            "--model", model_path, "--out", str(tmp_path / "b"),
            "--workers", "1", "--repeats", "1",
        ])
        assert rc == 2
        assert "10000" in capsys.readouterr().err


class TestModelCompat:
    def test_mismatched_tiling_rejected(self, ws, model_path, tmp_path, capsys):
        cfg = dict(FAST_CONFIG)
        cfg["tiling"] = dict(FAST_CONFIG["tiling"], col_reducer="max")
        f = tmp_path / "other.json"
        f.write_text(json.dumps(cfg))
        rc = main([
            "predict-map", "--config", str(f), "--layout", ws.layout,
            "--model", model_path, "--out", str(tmp_path / "o"),
        ])
        assert rc == 2
        err = capsys.readouterr().err
        assert "model/config mismatch" in err
        assert "col_reducer" in err

    def test_mismatched_class_count_rejected(self, ws, model_path, tmp_path, capsys):
        cfg = json.loads(json.dumps(FAST_CONFIG))
        cfg["iip"]["num_classes"] = 4
        f = tmp_path / "other.json"
        f.write_text(json.dumps(cfg))
        rc = main([
            "evaluate", "--config", str(f), "--layout", ws.layout,
            "--model", model_path, "--out", str(tmp_path / "o"),
        ])
        assert rc == 2
        assert "num_classes" in capsys.readouterr().err

    def test_missing_model_file(self, ws, tmp_path, capsys):
        rc = main([
            "predict-map", "--config", ws.cfg, "--layout", ws.layout,
            "--model", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "o"),
        ])
        assert rc == 2
        assert "cannot read model file" in capsys.readouterr().err
