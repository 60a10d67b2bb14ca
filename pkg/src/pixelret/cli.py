"""Command-line surface for the correction flow.

One JSON config file drives every stage; flags override individual fields
and the fully resolved config is echoed into each output directory, so any
produced artifact can be regenerated from the files next to it.

Commands: gen-patterns, rasterize, simulate, ilt, prep-data, train,
predict-map, correct, evaluate, bench.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import classifier as cls
from . import ilt as ilt_mod
from . import iip as iip_mod
from . import layout as layout_mod
from . import litho as litho_mod
from . import pipeline as pipe
from . import tiling as tiling_mod
from .errors import ConfigError, PixelretError
from .grid import write_graymap

# Production-leaning defaults; --toy swaps in a fast profile for CI and
# desk-scale experiments.
DEFAULT_CONFIG: dict = {
    "seed": 0,
    "litho": {"sigma_nm": 25.0, "radius_nm": 75.0, "resist_threshold": 0.5},
    "ilt": {
        "steps": 60,
        "learning_rate": 8.0e5,
        "sigmoid_steepness_resist": 25.0,
        "sigmoid_steepness_mask": 2.0,
        "init_mode": "target_copy",
        "binarize_threshold": 0.5,
    },
    "iip": {
        "num_classes": 100,
        "iik_sigma_nm": 10.0,
        "iik_radius_nm": 30.0,
        "threshold": 0.5,
    },
    "tiling": {
        "interaction_distance": 400.0,
        "px_per_nm": 2.0,
        "compression_factor": 8,
        "row_reducer": "mean",
        "col_reducer": "max",
    },
    "arch": {
        "conv_blocks": [
            {"filters": 8, "kernel": 3, "stride": 2},
            {"filters": 16, "kernel": 3, "stride": 2},
            {"filters": 32, "kernel": 3, "stride": 2},
        ],
        "input_side": None,   # derived from tiling unless set
        "num_classes": None,  # derived from iip unless set
    },
    "train": {"epochs": 15, "batch_size": 32, "learning_rate": 0.05},
    "sampling": {"per_class_cap": 300, "split_fractions": [0.8, 0.1, 0.1]},
    "correction": {"workers": 1, "cleanup_min_area": 25.0, "cleanup_min_edge": 0.0},
}

# The toy profile trades resolution for speed.  Its reducers are mean/mean
# (max saturates on 4nm blocks and caps end-to-end mask IoU) and its net
# ends in a 1x1 feature map, which keeps edge placement sharp where global
# average pooling over a larger map would blur it.
TOY_OVERRIDES: dict = {
    "iip": {"num_classes": 20},
    "tiling": {
        "interaction_distance": 100.0,
        "px_per_nm": 1.0,
        "compression_factor": 4,
        "row_reducer": "mean",
        "col_reducer": "mean",
    },
    "arch": {
        "conv_blocks": [
            {"filters": 8, "kernel": 3, "stride": 2},
            {"filters": 16, "kernel": 3, "stride": 2},
            {"filters": 32, "kernel": 3, "stride": 2},
            {"filters": 64, "kernel": 3, "stride": 1},
            {"filters": 64, "kernel": 3, "stride": 1},
        ],
    },
    "train": {"epochs": 24, "batch_size": 32, "learning_rate": 0.01},
}

CANONICAL_PATTERNS: dict[str, dict] = {
    "iso40": {"topology": "isolated_line", "width": 40, "length": 400},
    "iso60": {"topology": "isolated_line", "width": 60, "length": 400},
    "iso100": {"topology": "isolated_line", "width": 100, "length": 400},
    "iso140": {"topology": "isolated_line", "width": 140, "length": 400},
    "ls40": {"topology": "line_space", "width": 40, "pitch": 80, "count": 5, "length": 400},
    "ls140": {"topology": "line_space", "width": 140, "pitch": 280, "count": 5, "length": 400},
    "sq100": {"topology": "square", "width": 100},
    "sq200": {"topology": "square", "width": 200},
}


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# ---------------------------------------------------------------------------
# Resolved configuration
# ---------------------------------------------------------------------------

class RunConfig:
    """Validated view over the merged config dict with typed accessors."""

    def __init__(self, raw: dict):
        self.raw = raw
        self._validate()

    def _validate(self) -> None:
        c = self.raw
        tiling = self.tiling()
        derived_side = tiling.output_side
        arch_side = c["arch"].get("input_side")
        if arch_side is not None and arch_side != derived_side:
            raise ConfigError(
                f"arch.input_side={arch_side} but tiling yields "
                f"{derived_side} (window {tiling.window_side} / factor "
                f"{tiling.compression_factor}); fix arch.input_side or tiling"
            )
        arch_classes = c["arch"].get("num_classes")
        iip_classes = c["iip"]["num_classes"]
        if arch_classes is not None and arch_classes != iip_classes:
            raise ConfigError(
                f"arch.num_classes={arch_classes} conflicts with "
                f"iip.num_classes={iip_classes}"
            )
        # Construct everything once so invalid fields fail here with names.
        self.litho()
        self.ilt()
        self.iip()
        self.arch()
        self.train()
        fr = c["sampling"]["split_fractions"]
        if len(fr) != 3:
            raise ConfigError(f"sampling.split_fractions needs 3 entries, got {fr}")

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def px_per_nm(self) -> float:
        return float(self.raw["tiling"]["px_per_nm"])

    def litho(self) -> litho_mod.LithoConfig:
        s = self.raw["litho"]
        return litho_mod.LithoConfig(
            sigma_nm=s["sigma_nm"],
            radius_nm=s["radius_nm"],
            resist_threshold=s["resist_threshold"],
        )

    def ilt(self) -> ilt_mod.IltConfig:
        return ilt_mod.IltConfig(**self.raw["ilt"])

    def iik(self) -> litho_mod.Kernel:
        s = self.raw["iip"]
        return iip_mod.make_iik(
            "gaussian", s["iik_sigma_nm"], s["iik_radius_nm"], self.px_per_nm
        )

    def iip(self) -> iip_mod.IipConfig:
        s = self.raw["iip"]
        return iip_mod.IipConfig(
            num_classes=s["num_classes"], iik=self.iik(), threshold=s["threshold"]
        )

    def tiling(self) -> tiling_mod.TilingConfig:
        return tiling_mod.TilingConfig(**self.raw["tiling"])

    def arch(self) -> cls.ArchDescriptor:
        a = self.raw["arch"]
        side = a.get("input_side") or self.tiling().output_side
        classes = a.get("num_classes") or self.raw["iip"]["num_classes"]
        blocks = [cls.ConvBlock(**b) for b in a["conv_blocks"]]
        return cls.ArchDescriptor(int(side), int(classes), blocks)

    def train(self) -> cls.TrainConfig:
        t = self.raw["train"]
        return cls.TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            learning_rate=t["learning_rate"],
            seed=self.seed + 3,
        )

    def correction(
        self, workers: int | None = None, region_filter=None
    ) -> pipe.CorrectionConfig:
        s = self.raw["correction"]
        return pipe.CorrectionConfig(
            tiling=self.tiling(),
            iip=self.iip(),
            workers=workers if workers is not None else int(s["workers"]),
            region_filter=region_filter,
            cleanup=pipe.CleanupRules(
                min_area=s["cleanup_min_area"], min_edge=s["cleanup_min_edge"]
            ),
        )

    # Derived per-stage seeds, so stages decorrelate but stay reproducible.
    @property
    def sampling_seed(self) -> int:
        return self.seed

    @property
    def split_seed(self) -> int:
        return self.seed + 1

    @property
    def init_seed(self) -> int:
        return self.seed + 2


def load_config(path: str | None, toy: bool, overrides: dict) -> RunConfig:
    raw = copy.deepcopy(DEFAULT_CONFIG)
    if toy:
        raw = _deep_merge(raw, TOY_OVERRIDES)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        raw = _deep_merge(raw, user)
    raw = _deep_merge(raw, overrides)
    return RunConfig(raw)


def _echo_config(cfg: RunConfig, outdir: Path, command: str) -> None:
    resolved = dict(cfg.raw)
    resolved["_command"] = command
    (outdir / "config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    )


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_pattern(path: str) -> layout_mod.LayoutPattern:
    return layout_mod.parse_layout(Path(path).read_text())


def _write_pattern(p: layout_mod.LayoutPattern, path: Path, px_per_nm: float) -> None:
    # The file format stores integer nm; grids finer than 1 px/nm can place
    # vertices on sub-nm lattice points, so snap before writing.
    if px_per_nm > 1.0 and not p.is_empty:
        p = layout_mod.snap_pattern(p)
    path.write_text(layout_mod.write_layout(p))


def _ref_mask(cfg: RunConfig, pattern: layout_mod.LayoutPattern):
    tiling = cfg.tiling()
    target = pipe.deployment_raster(pattern, tiling)
    result = ilt_mod.optimize_mask(target, cfg.litho(), cfg.ilt())
    return target, result


def _check_model_compat(model: cls.ModelParams, cfg: RunConfig) -> None:
    """Refuse deployment when the model was trained on differently tiled
    or differently classed data than the active config describes.
    """
    tiling = cfg.tiling()
    current = {
        "interaction_distance": tiling.interaction_distance,
        "px_per_nm": tiling.px_per_nm,
        "compression_factor": tiling.compression_factor,
        "row_reducer": tiling.row_reducer,
        "col_reducer": tiling.col_reducer,
        "num_classes": cfg.raw["iip"]["num_classes"],
    }
    clashes = [
        f"{key}: model trained with {model.train_meta[key]!r}, config has {val!r}"
        for key, val in current.items()
        if key in model.train_meta and model.train_meta[key] != val
    ]
    if clashes:
        raise ConfigError("model/config mismatch; " + "; ".join(clashes))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_patterns(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    if args.topology is not None:
        params = {
            "topology": args.topology,
            "width": args.width,
            "pitch": args.pitch,
            "count": args.count,
            "length": args.length,
        }
        params = {k: v for k, v in params.items() if v is not None}
        names = {args.name or "pattern": params}
    else:
        names = CANONICAL_PATTERNS
    for name, params in names.items():
        p = layout_mod.generate_test_pattern(**params)
        (out / f"{name}.layout").write_text(layout_mod.write_layout(p))
        print(f"wrote {out / f'{name}.layout'}")
    _echo_config(cfg, out, "gen-patterns")
    return 0


def cmd_rasterize(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    p = _read_pattern(args.layout)
    margin = args.margin if args.margin is not None else cfg.tiling().interaction_distance
    g = layout_mod.rasterize(p, cfg.px_per_nm, layout_mod.raster_region(p, margin))
    write_graymap(g, out / "raster.pgm")
    print(f"raster {g.width}x{g.height} px -> {out / 'raster.pgm'}")
    _echo_config(cfg, out, "rasterize")
    return 0


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    p = _read_pattern(args.layout)
    litho = cfg.litho()
    g = layout_mod.rasterize(p, cfg.px_per_nm, layout_mod.raster_region(p, cfg.tiling().interaction_distance))
    kernel = litho.kernel(g.px_per_nm)
    aerial = litho_mod.aerial_image(g, kernel)
    printed = litho_mod.print_image(aerial, litho.resist_threshold)
    write_graymap(aerial, out / "aerial.pgm")
    write_graymap(printed, out / "printed.pgm")
    fidelity = pipe.iou(printed, g)
    print(f"printed-vs-target IoU {fidelity:.4f}; wrote aerial.pgm, printed.pgm")
    _echo_config(cfg, out, "simulate")
    return 0


def cmd_ilt(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    p = _read_pattern(args.layout)
    target, result = _ref_mask(cfg, p)
    write_graymap(result.mask, out / "ref_mask.pgm")
    ilt_mod.save_loss_history(result, out / "loss.csv")
    _write_pattern(layout_mod.vectorize(result.mask), out / "ref_mask.layout", cfg.px_per_nm)
    print(
        f"ILT fidelity {result.final_fidelity:.4f} "
        f"(loss {result.loss_history[0]:.5f} -> {min(result.loss_history):.5f}); "
        f"wrote ref_mask.pgm, ref_mask.layout, loss.csv"
    )
    _echo_config(cfg, out, "ilt")
    return 0


def cmd_prep_data(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    tiling = cfg.tiling()
    iip_cfg = cfg.iip()
    parts = []
    for path in args.layouts:
        p = _read_pattern(path)
        target, result = _ref_mask(cfg, p)
        ds = tiling_mod.build_dataset(
            p,
            result.mask,
            tiling,
            iip_cfg,
            per_class_cap=int(cfg.raw["sampling"]["per_class_cap"]),
            seed=cfg.sampling_seed,
        )
        print(f"{path}: {len(ds)} samples, ILT fidelity {result.final_fidelity:.4f}")
        parts.append(ds)
    merged = parts[0] if len(parts) == 1 else tiling_mod.merge_datasets(parts)
    merged = tiling_mod.split_dataset(
        merged, tuple(cfg.raw["sampling"]["split_fractions"]), cfg.split_seed
    )
    tiling_mod.save_dataset(merged, out / "dataset")
    sizes = {name: int(merged.split_indices(name).size) for name in tiling_mod.SPLIT_NAMES}
    print(f"dataset: {len(merged)} samples {sizes} -> {out / 'dataset'}")
    _echo_config(cfg, out, "prep-data")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    ds = tiling_mod.load_dataset(args.data)
    arch = cfg.arch()
    model0 = cls.init_model(arch, cfg.init_seed)
    model, history = cls.train(model0, ds, cfg.train())
    cls.save_model(model, out / "model.bin")
    with open(out / "history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_accuracy"])
        for i, (tl, va) in enumerate(
            zip(history["train_loss"], history["val_accuracy"])
        ):
            w.writerow([i, f"{tl:.6f}", f"{va:.6f}"])
    print(
        f"best val accuracy {model.train_meta['final_val_accuracy']:.4f} "
        f"(epoch {model.train_meta['best_epoch']}); wrote model.bin, history.csv"
    )
    _echo_config(cfg, out, "train")
    return 0


def cmd_predict_map(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    p = _read_pattern(args.layout)
    model = cls.load_model(args.model)
    _check_model_compat(model, cfg)
    ccfg = cfg.correction(workers=args.workers)
    iip_map = pipe.predict_map(model, p, ccfg)
    iip_mod.export_iip(iip_map, out / "iip.pgm", ccfg.iip.num_classes)
    print(f"predicted map {iip_map.grid.width}x{iip_map.grid.height} -> {out / 'iip.pgm'}")
    _echo_config(cfg, out, "predict-map")
    return 0


def cmd_correct(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    p = _read_pattern(args.layout)
    model = cls.load_model(args.model)
    _check_model_compat(model, cfg)
    ccfg = cfg.correction(workers=args.workers)
    iip_map = pipe.predict_map(model, p, ccfg)
    iip_mod.export_iip(iip_map, out / "iip.pgm", ccfg.iip.num_classes)
    thresholded = iip_mod.threshold_iip(iip_map, ccfg.iip.threshold)
    write_graymap(thresholded, out / "threshold.pgm")
    mask = pipe.cleanup(
        layout_mod.vectorize(thresholded), ccfg.cleanup.min_area, ccfg.cleanup.min_edge
    )
    cleaned = (
        layout_mod.rasterize(mask, thresholded.px_per_nm, thresholded.bbox_nm())
        if not mask.is_empty
        else thresholded.with_values(np.zeros_like(thresholded.values))
    )
    write_graymap(cleaned, out / "cleanup.pgm")
    _write_pattern(mask, out / "mask.layout", cfg.px_per_nm)
    print(
        f"corrected mask: {len(mask.polygons)} polygons -> mask.layout "
        f"(stages: iip.pgm, threshold.pgm, cleanup.pgm)"
    )
    _echo_config(cfg, out, "correct")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    p = _read_pattern(args.layout)
    model = cls.load_model(args.model)
    _check_model_compat(model, cfg)
    ccfg = cfg.correction(workers=args.workers)
    target, result = _ref_mask(cfg, p)
    ref_iip = iip_mod.compute_iip(result.mask, ccfg.iip.iik)
    pred_map = pipe.predict_map(model, p, ccfg)
    cm = pipe.confusion_matrix(pred_map, ref_iip, ccfg.iip.num_classes)
    pipe.write_confusion_csv(cm, out / "confusion.csv")
    thresholded = iip_mod.threshold_iip(pred_map, ccfg.iip.threshold)
    mask_pattern = pipe.cleanup(
        layout_mod.vectorize(thresholded), ccfg.cleanup.min_area, ccfg.cleanup.min_edge
    )
    bbox = thresholded.bbox_nm()
    mask_grid = (
        layout_mod.rasterize(mask_pattern, thresholded.px_per_nm, bbox)
        if not mask_pattern.is_empty
        else thresholded.with_values(np.zeros_like(thresholded.values))
    )
    score = pipe.iou(mask_grid, result.mask)
    metrics = {
        "iou_vs_reference": score,
        "class_accuracy": cm.accuracy(),
        "within_one_class_accuracy": cm.within_one_accuracy(),
        "pixels": cm.total(),
        "ilt_fidelity": result.final_fidelity,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(
        f"IoU vs reference {score:.4f}; class accuracy {cm.accuracy():.4f}; "
        f"within-1 {cm.within_one_accuracy():.4f}; wrote confusion.csv, metrics.json"
    )
    _echo_config(cfg, out, "evaluate")
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    p = _read_pattern(args.layout)
    model = cls.load_model(args.model)
    _check_model_compat(model, cfg)
    counts = [int(x) for x in args.workers.split(",")]
    ccfg = cfg.correction(workers=1)
    report = pipe.bench_scaling(model, p, ccfg, counts, repeats=args.repeats)
    pipe.write_scaling_csv(report, out / "scaling.csv")
    for row in report.rows:
        print(
            f"workers {row['workers']}: {row['wall_seconds']:.3f}s "
            f"speedup {row['speedup']:.2f} efficiency {row['efficiency']:.2f}"
        )
    print(f"outputs bitwise consistent: {report.consistent}")
    _echo_config(cfg, out, "bench")
    return 0 if report.consistent else 1


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON config file; fields override defaults")
    sp.add_argument("--seed", type=int, help="global seed (overrides config)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--toy", action="store_true",
                    help="fast profile: C=20, ID=100nm, 1 px/nm, factor 4")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pixelret",
        description="Pixel-based machine-learning lithography correction flow",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-patterns", help="write canonical or custom test patterns")
    _add_common(sp)
    sp.add_argument("--topology", choices=["isolated_line", "line_space", "square"])
    sp.add_argument("--width", type=int)
    sp.add_argument("--pitch", type=int)
    sp.add_argument("--count", type=int)
    sp.add_argument("--length", type=int)
    sp.add_argument("--name", help="file stem for a custom pattern")
    sp.set_defaults(func=cmd_gen_patterns)

    sp = sub.add_parser("rasterize", help="rasterize a layout to a graymap")
    _add_common(sp)
    sp.add_argument("--layout", required=True)
    sp.add_argument("--margin", type=float, help="region margin in nm (default: interaction distance)")
    sp.set_defaults(func=cmd_rasterize)

    sp = sub.add_parser("simulate", help="aerial image and printed shape of a layout")
    _add_common(sp)
    sp.add_argument("--layout", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("ilt", help="compute the reference mask for a target layout")
    _add_common(sp)
    sp.add_argument("--layout", required=True)
    sp.set_defaults(func=cmd_ilt)

    sp = sub.add_parser("prep-data", help="build a training dataset from target layouts")
    _add_common(sp)
    sp.add_argument("--layouts", nargs="+", required=True)
    sp.set_defaults(func=cmd_prep_data)

    sp = sub.add_parser("train", help="train the classifier on a dataset directory")
    _add_common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict-map", help="predict the IIP map for a layout")
    _add_common(sp)
    sp.add_argument("--layout", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_predict_map)

    sp = sub.add_parser("correct", help="end-to-end correction: layout in, mask out")
    _add_common(sp)
    sp.add_argument("--layout", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_correct)

    sp = sub.add_parser("evaluate", help="confusion matrix and IoU against the ILT reference")
    _add_common(sp)
    sp.add_argument("--layout", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench", help="scaling benchmark over worker counts")
    _add_common(sp)
    sp.add_argument("--layout", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--workers", default="1,2,4", help="comma-separated counts, first must be 1")
    sp.add_argument("--repeats", type=int, default=3)
    sp.set_defaults(func=cmd_bench)

    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = load_config(args.config, args.toy, overrides)
        return args.func(args, cfg)
    except PixelretError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
