"""Command line entry points.

Subcommands: gen-data, train, eval, segment, grid, plot-loss-curves.  Config
files are strict JSON with known sections and keys only; an unknown name is a
hard error (exit 2) so a typo cannot silently fall back to a default. Every
run writes a manifest (resolved config, CLI overrides, output paths, timing)
next to its outputs, and a failed run removes whatever files it had created.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np
from PIL import Image

from . import __version__
from .data import (SyntheticSceneConfig, generate_dataset, read_dataset,
                   write_dataset)
from .losses import LOSS_KINDS, LossConfig, emit_loss_curves
from .model import ModelConfig
from .norm import NORM_VARIANTS, NormConfig
from .postprocess import segment_pipeline
from .tensor import Tensor
from .train import (MODEL_VARIANTS, TrainConfig, evaluate, load_checkpoint,
                    metrics_to_csv, run_grid, save_checkpoint, train)


class ConfigError(ValueError):
    pass


# section -> allowed keys; tuple-valued dataclass fields arrive as JSON arrays
_SECTION_FIELDS = {
    "model": {"depth", "base_channels", "input_channels", "refine_enabled",
              "edge_branch", "norm_variant", "norm_eps", "norm_momentum"},
    "loss": {"region_kind", "edge_kind", "gamma", "smooth_eps"},
    "train": {"lr", "epochs", "batch_size", "seed", "augment", "eval_every"},
    "data": {"height", "width", "count_range", "axis_range", "overlap_prob",
             "background_range", "illumination_max", "foreground_range",
             "color_jitter", "noise_level"},
    "postprocess": {"threshold", "se_size"},
    "grid": {"models", "losses", "batches"},
}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    for section, body in raw.items():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"config {path}: unknown section {section!r}; "
                              f"expected one of {sorted(_SECTION_FIELDS)}")
        if not isinstance(body, dict):
            raise ConfigError(f"config {path}: section {section!r} must be an object")
        for key in body:
            if key not in _SECTION_FIELDS[section]:
                raise ConfigError(f"config {path}: unknown key {key!r} in section "
                                  f"{section!r}; expected one of "
                                  f"{sorted(_SECTION_FIELDS[section])}")
    return raw


def _pair(value, name: str, cast):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{name} must be a two-element array, got {value!r}")
    return (cast(value[0]), cast(value[1]))


def _model_config(body: dict) -> ModelConfig:
    norm = NormConfig(
        variant=body.get("norm_variant", NormConfig.variant),
        eps=float(body.get("norm_eps", NormConfig.eps)),
        momentum=float(body.get("norm_momentum", NormConfig.momentum)),
    )
    return ModelConfig(
        depth=int(body.get("depth", ModelConfig.depth)),
        base_channels=int(body.get("base_channels", ModelConfig.base_channels)),
        input_channels=int(body.get("input_channels", ModelConfig.input_channels)),
        refine_enabled=bool(body.get("refine_enabled", ModelConfig.refine_enabled)),
        edge_branch=bool(body.get("edge_branch", ModelConfig.edge_branch)),
        norm=norm,
    )


def _loss_config(body: dict) -> LossConfig:
    return LossConfig(
        region_kind=body.get("region_kind", LossConfig.region_kind),
        edge_kind=body.get("edge_kind", LossConfig.edge_kind),
        gamma=float(body.get("gamma", LossConfig.gamma)),
        smooth_eps=float(body.get("smooth_eps", LossConfig.smooth_eps)),
    )


def _data_config(body: dict) -> SyntheticSceneConfig:
    cfg = SyntheticSceneConfig()
    for key, value in body.items():
        if key in ("count_range",):
            value = _pair(value, key, int)
        elif key in ("axis_range", "background_range", "foreground_range"):
            value = _pair(value, key, float)
        cfg = replace(cfg, **{key: value})
    return cfg


def _train_config(raw: dict) -> TrainConfig:
    body = raw.get("train", {})
    return TrainConfig(
        model=_model_config(raw.get("model", {})),
        loss=_loss_config(raw.get("loss", {})),
        lr=float(body.get("lr", TrainConfig.lr)),
        epochs=int(body.get("epochs", TrainConfig.epochs)),
        batch_size=int(body.get("batch_size", TrainConfig.batch_size)),
        seed=int(body.get("seed", TrainConfig.seed)),
        augment=bool(body.get("augment", TrainConfig.augment)),
        eval_every=int(body.get("eval_every", TrainConfig.eval_every)),
    )


def _postprocess_params(raw: dict) -> tuple[float, int]:
    body = raw.get("postprocess", {})
    return float(body.get("threshold", 0.5)), int(body.get("se_size", 3))


# -- manifests and output tracking -------------------------------------------------


def _write_json_atomic(path, payload: dict):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


class OutputTracker:
    """Remembers which output paths this run created so a failure can remove
    them instead of leaving half-written results behind."""

    def __init__(self):
        self.created: list[str] = []

    def claim(self, path) -> str:
        path = str(path)
        if not os.path.exists(path):
            self.created.append(path)
        return path

    def claim_dir(self, path) -> str:
        path = str(path)
        if not os.path.exists(path):
            self.created.append(path)
        os.makedirs(path, exist_ok=True)
        return path

    def cleanup(self):
        for path in reversed(self.created):
            if os.path.isfile(path):
                os.remove(path)
            elif os.path.isdir(path):
                for root, dirs, files in os.walk(path, topdown=False):
                    for f in files:
                        os.remove(os.path.join(root, f))
                    for d in dirs:
                        os.rmdir(os.path.join(root, d))
                os.rmdir(path)


def _run_manifest(out_dir, command: str, config: dict, overrides: dict,
                  outputs: list[str], started: float):
    _write_json_atomic(os.path.join(out_dir, "run_manifest.json"), {
        "command": command,
        "version": __version__,
        "config": config,
        "overrides": overrides,
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
        "started_unix": round(started, 3),
        "duration_s": round(time.time() - started, 3),
    })


def _validate_outputs(paths: list[str]):
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise RuntimeError(f"run finished but outputs are missing: {missing}")


# -- image helpers -----------------------------------------------------------------


def _load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.transpose(arr, (2, 0, 1))


def _load_probability(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        arr = np.asarray(img.convert("L"))
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float32) / scale


def _save_probability(path, prob: np.ndarray):
    Image.fromarray(np.round(np.clip(prob, 0.0, 1.0) * 255).astype(np.uint8),
                    mode="L").save(path)


def _save_instances(path, labels: np.ndarray):
    if labels.max() > 65535:
        raise ValueError(f"instance map has {labels.max()} labels; cannot store in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def _pad_to_multiple(image: np.ndarray, multiple: int):
    _, h, w = image.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return image, h, w


# -- subcommands --------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    raw = load_config(args.config) if args.config else {}
    cfg = _data_config(raw.get("data", {}))
    cfg.validate()
    seed = args.seed if args.seed is not None else 0
    tracker = OutputTracker()
    started = time.time()
    out_dir = tracker.claim_dir(args.out)
    try:
        samples = generate_dataset(cfg, args.count, seed)
        write_dataset(samples, out_dir, cfg=cfg, seed=seed)
        outputs = [os.path.join(out_dir, "manifest.json")]
        _validate_outputs(outputs)
        _run_manifest(out_dir, "gen-data", raw, _overrides(args, ("seed",)),
                      outputs, started)
    except Exception:
        tracker.cleanup()
        raise
    print(f"wrote {len(samples)} samples to {out_dir}")
    return 0


def _overrides(args, names: tuple[str, ...]) -> dict:
    out = {}
    for name in names:
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None and value is not False:
            out[name] = value
    return out


def _apply_train_overrides(cfg: TrainConfig, args) -> TrainConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.batch is not None:
        cfg = replace(cfg, batch_size=args.batch)
    if args.loss_edge is not None:
        if args.loss_edge not in LOSS_KINDS:
            raise ConfigError(f"--loss-edge {args.loss_edge!r} not in {sorted(LOSS_KINDS)}")
        cfg = replace(cfg, loss=replace(cfg.loss, edge_kind=args.loss_edge))
    if args.norm is not None:
        if args.norm not in NORM_VARIANTS:
            raise ConfigError(f"--norm {args.norm!r} not in {list(NORM_VARIANTS)}")
        cfg = replace(cfg, model=replace(cfg.model,
                                         norm=replace(cfg.model.norm, variant=args.norm)))
    if args.no_refine:
        cfg = replace(cfg, model=replace(cfg.model, refine_enabled=False))
    return cfg


def _cmd_train(args) -> int:
    raw = load_config(args.config) if args.config else {}
    cfg = _apply_train_overrides(_train_config(raw), args)
    cfg.validate()
    threshold, se_size = _postprocess_params(raw)
    train_samples = read_dataset(args.train_data)
    eval_samples = read_dataset(args.eval_data) if args.eval_data else None
    tracker = OutputTracker()
    started = time.time()
    out_dir = tracker.claim_dir(args.out)
    ckpt = tracker.claim(os.path.join(out_dir, "model.owps"))
    metrics = tracker.claim(os.path.join(out_dir, "metrics.csv"))
    try:
        result = train(cfg, train_samples, eval_samples, threshold, se_size)
        save_checkpoint(result.model, ckpt)
        metrics_to_csv(result.metrics_rows, metrics)
        outputs = [ckpt, metrics]
        _validate_outputs(outputs)
        _run_manifest(out_dir, "train", raw,
                      _overrides(args, ("seed", "batch", "loss-edge", "norm", "no-refine")),
                      outputs, started)
    except Exception:
        tracker.cleanup()
        raise
    last = result.metrics_rows[-1]
    print(f"trained {cfg.epochs} epochs, final loss {last['train_loss']:.6f}; "
          f"checkpoint at {ckpt}")
    if result.final_report is not None:
        print(f"eval: particle_dice {result.final_report.particle_dice:.4f}, "
              f"count_acc {result.final_report.count_accuracy:.4f}")
    return 0


def _cmd_eval(args) -> int:
    raw = load_config(args.config) if args.config else {}
    threshold, se_size = _postprocess_params(raw)
    if args.threshold is not None:
        threshold = args.threshold
    model = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.data)
    tracker = OutputTracker()
    started = time.time()
    out_dir = tracker.claim_dir(args.out)
    report_path = tracker.claim(os.path.join(out_dir, "eval_report.json"))
    try:
        report = evaluate(model, samples, threshold, se_size)
        _write_json_atomic(report_path, {
            "particle_dice": report.particle_dice,
            "boundary_dice": report.boundary_dice,
            "count_accuracy": report.count_accuracy,
            "per_image_particle": report.per_image_particle,
            "per_image_boundary": report.per_image_boundary,
            "per_image_count_match": report.per_image_count_match,
            "n_images": len(samples),
            "threshold": threshold,
            "se_size": se_size,
        })
        _validate_outputs([report_path])
        _run_manifest(out_dir, "eval", raw, _overrides(args, ("threshold",)),
                      [report_path], started)
    except Exception:
        tracker.cleanup()
        raise
    bd = "n/a" if report.boundary_dice is None else f"{report.boundary_dice:.4f}"
    print(f"particle_dice {report.particle_dice:.4f}, boundary_dice {bd}, "
          f"count_acc {report.count_accuracy:.4f}")
    return 0


def _segment_from_model(args, threshold: float, se_size: int, out_dir: str,
                        tracker: OutputTracker) -> list[str]:
    model = load_checkpoint(args.checkpoint)
    multiple = 2 ** model.cfg.depth
    outputs = []
    for path in args.image:
        stem = os.path.splitext(os.path.basename(path))[0]
        image = _load_image(path)
        padded, h, w = _pad_to_multiple(image, multiple)
        region_prob, edge_prob = model.forward(Tensor(padded[None]), train=False)
        rp = region_prob.data[0, 0, :h, :w]
        ep = (edge_prob.data[0, 0, :h, :w] if edge_prob is not None
              else np.zeros_like(rp))
        result = segment_pipeline(rp, ep, threshold, se_size)
        for suffix, writer, payload in (
                ("region_prob.png", _save_probability, result.region_prob),
                ("edge_prob.png", _save_probability, result.edge_prob),
                ("instances.png", _save_instances, result.instance_map)):
            target = tracker.claim(os.path.join(out_dir, f"{stem}_{suffix}"))
            writer(target, payload)
            outputs.append(target)
        print(result.count)
    return outputs


def _segment_from_probabilities(args, threshold: float, se_size: int, out_dir: str,
                                tracker: OutputTracker) -> list[str]:
    rp = _load_probability(args.region_prob)
    ep = (_load_probability(args.edge_prob) if args.edge_prob
          else np.zeros_like(rp))
    if rp.shape != ep.shape:
        raise ValueError(f"probability maps disagree in shape: {rp.shape} vs {ep.shape}")
    result = segment_pipeline(rp, ep, threshold, se_size)
    target = tracker.claim(os.path.join(out_dir, "instances.png"))
    _save_instances(target, result.instance_map)
    print(result.count)
    return [target]


def _cmd_segment(args) -> int:
    raw = load_config(args.config) if args.config else {}
    threshold, se_size = _postprocess_params(raw)
    if args.threshold is not None:
        threshold = args.threshold
    if args.se_size is not None:
        se_size = args.se_size
    if bool(args.checkpoint) == bool(args.region_prob):
        raise ConfigError("segment needs exactly one input mode: "
                          "--checkpoint with --image, or --region-prob")
    if args.checkpoint and not args.image:
        raise ConfigError("segment --checkpoint requires at least one --image")
    tracker = OutputTracker()
    started = time.time()
    out_dir = tracker.claim_dir(args.out)
    try:
        if args.checkpoint:
            outputs = _segment_from_model(args, threshold, se_size, out_dir, tracker)
        else:
            outputs = _segment_from_probabilities(args, threshold, se_size,
                                                  out_dir, tracker)
        _validate_outputs(outputs)
        _run_manifest(out_dir, "segment", raw,
                      _overrides(args, ("threshold", "se-size")), outputs, started)
    except Exception:
        tracker.cleanup()
        raise
    return 0


def _cmd_grid(args) -> int:
    raw = load_config(args.config) if args.config else {}
    grid = raw.get("grid", {})
    models = grid.get("models", list(MODEL_VARIANTS))
    losses = grid.get("losses", ["CE"])
    batches = [int(b) for b in grid.get("batches", [2])]
    base_cfg = _apply_train_overrides(_train_config(raw), args)
    base_cfg.validate()
    threshold, se_size = _postprocess_params(raw)
    train_samples = read_dataset(args.train_data)
    eval_samples = read_dataset(args.eval_data)
    tracker = OutputTracker()
    started = time.time()
    out_dir = tracker.claim_dir(args.out)
    csv_path = tracker.claim(os.path.join(out_dir, "results.csv"))
    try:
        results = run_grid(models, losses, batches, base_cfg, train_samples,
                           eval_samples, csv_path, threshold, se_size)
        _validate_outputs([csv_path])
        _run_manifest(out_dir, "grid", raw,
                      _overrides(args, ("seed", "batch", "loss-edge", "norm", "no-refine")),
                      [csv_path], started)
    except Exception:
        tracker.cleanup()
        raise
    print(f"grid: {len(results)} cells finished, results at {csv_path}")
    return 0


def _cmd_plot_loss_curves(args) -> int:
    raw = load_config(args.config) if args.config else {}
    loss_cfg = _loss_config(raw.get("loss", {}))
    gamma = args.gamma if args.gamma is not None else loss_cfg.gamma
    smooth_eps = loss_cfg.smooth_eps
    tracker = OutputTracker()
    target = tracker.claim(args.out)
    try:
        emit_loss_curves(target, gamma, smooth_eps)
        _validate_outputs([target])
    except Exception:
        tracker.cleanup()
        raise
    print(f"loss curves at {target}")
    return 0


# -- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owps",
        description="overlapping-particle segmentation: data synthesis, "
                    "training, evaluation, and instance extraction")
    parser.add_argument("--version", action="version", version=f"owps {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a labeled dataset")
    p.add_argument("--config", help="JSON config file (data section)")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, help="base seed (default 0)")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--train-data", required=True, help="training dataset directory")
    p.add_argument("--eval-data", help="held-out dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--loss-edge", help="edge-branch loss kind")
    p.add_argument("--norm", help="normalization variant")
    p.add_argument("--no-refine", action="store_true",
                   help="disable the attention refinement stage")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("segment", help="extract instances from images or "
                                       "precomputed probability maps")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--checkpoint", help="model file (image mode)")
    p.add_argument("--image", action="append", default=[],
                   help="input image; repeatable")
    p.add_argument("--region-prob", help="region probability PNG (map mode)")
    p.add_argument("--edge-prob", help="edge probability PNG (map mode)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float)
    p.add_argument("--se-size", type=int)
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("grid", help="train and score a model/loss/batch grid")
    p.add_argument("--config", help="JSON config file (grid section)")
    p.add_argument("--train-data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--loss-edge", help="edge-branch loss kind")
    p.add_argument("--norm", help="normalization variant")
    p.add_argument("--no-refine", action="store_true")
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("plot-loss-curves",
                       help="tabulate every loss kind over prediction values")
    p.add_argument("--config", help="JSON config file (loss section)")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.add_argument("--gamma", type=float, help="exponent for the exp losses")
    p.set_defaults(func=_cmd_plot_loss_curves)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
