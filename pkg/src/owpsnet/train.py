"""Training loop, evaluation metrics, checkpoint format, and the grid runner.

Everything here is seed-deterministic: the parameter init, the per-epoch
shuffle, and the per-sample augmentation draws are all derived from the run
seed, so two runs with the same config produce byte-identical metric logs and
checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Sample, augment
from .losses import LossConfig, compute_loss
from .model import ModelConfig, OWPSNet, build_model
from .norm import NormConfig, NORM_VARIANTS
from .postprocess import segment_pipeline
from .tensor import Tensor, backward


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the epoch index."""

    def __init__(self, epoch: int, value: float):
        super().__init__(f"training diverged at epoch {epoch}: loss = {value}")
        self.epoch = epoch


class CheckpointError(RuntimeError):
    """Raised for unreadable, truncated, or incompatible checkpoint files."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3
    epochs: int = 100            # desk-scale default; full-scale runs used 400
    batch_size: int = 2
    seed: int = 0
    augment: bool = True
    eval_every: int = 10

    def validate(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        self.model.validate()
        self.loss.validate()
        return self


# -- Adam ------------------------------------------------------------------------

class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.named = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for _, t in self.named]
        self.v = [np.zeros_like(t.data) for _, t in self.named]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for (name, p), m, v in zip(self.named, self.m, self.v):
            if p.grad is None:
                raise RuntimeError(f"adam: parameter {name!r} has no gradient; "
                                   "run backward before stepping")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None


# -- metrics ----------------------------------------------------------------------

METRIC_EPS = 1e-6


def _dice_score(pred: np.ndarray, label: np.ndarray) -> float:
    pred = np.asarray(pred).astype(bool)
    label = np.asarray(label).astype(bool)
    inter = float(np.logical_and(pred, label).sum())
    return (2.0 * inter + METRIC_EPS) / (float(pred.sum()) + float(label.sum()) + METRIC_EPS)


def dice_per_case(preds: list[np.ndarray], labels: list[np.ndarray]) -> float:
    """Mean over images of (2|P∩T| + eps) / (|P| + |T| + eps)."""
    if not preds or len(preds) != len(labels):
        raise ValueError(f"dice_per_case: need equal-length non-empty lists, "
                         f"got {len(preds)} and {len(labels)}")
    return float(np.mean([_dice_score(p, l) for p, l in zip(preds, labels)]))


@dataclass
class EvalReport:
    particle_dice: float
    boundary_dice: float | None
    count_accuracy: float
    per_image_particle: list[float]
    per_image_boundary: list[float] | None
    per_image_count_match: list[bool]


def evaluate(model: OWPSNet, samples: list[Sample], threshold: float = 0.5,
             se_size: int = 3) -> EvalReport:
    """Eval-mode metrics: per-image dice for both maps plus exact-count
    accuracy through the segmentation pipeline.  A model without an edge
    branch is scored with an all-zero edge map (no separation)."""
    if not samples:
        raise ValueError("evaluate: empty sample list")
    particle, boundary, matches = [], [], []
    has_edge = model.cfg.edge_branch
    for s in samples:
        x = Tensor(s.image[None].astype(np.float32))
        region_prob, edge_prob = model.forward(x, train=False)
        rp = region_prob.data[0, 0]
        ep = edge_prob.data[0, 0] if edge_prob is not None else np.zeros_like(rp)
        result = segment_pipeline(rp, ep, threshold, se_size)
        particle.append(_dice_score(result.region_mask, s.region_mask))
        if has_edge:
            boundary.append(_dice_score(result.edge_mask, s.edge_mask))
        matches.append(result.count == s.true_count)
    return EvalReport(
        particle_dice=float(np.mean(particle)),
        boundary_dice=float(np.mean(boundary)) if has_edge else None,
        count_accuracy=float(np.mean(matches)),
        per_image_particle=particle,
        per_image_boundary=boundary if has_edge else None,
        per_image_count_match=matches,
    )


# -- training ----------------------------------------------------------------------

METRICS_HEADER = "epoch,train_loss,boundary_dice,particle_dice,count_acc"


@dataclass
class TrainResult:
    model: OWPSNet
    metrics_rows: list[dict]
    final_report: EvalReport | None


def _batch_tensors(batch: list[Sample]):
    x = Tensor(np.stack([s.image for s in batch]).astype(np.float32))
    region_t = Tensor(np.stack([s.region_mask for s in batch])[:, None].astype(np.float32))
    edge_t = Tensor(np.stack([s.edge_mask for s in batch])[:, None].astype(np.float32))
    return x, region_t, edge_t


def train(cfg: TrainConfig, train_samples: list[Sample],
          eval_samples: list[Sample] | None = None,
          threshold: float = 0.5, se_size: int = 3,
          log_fn=None) -> TrainResult:
    """Train a model from scratch; returns the final model (no early stopping,
    the last epoch's parameters are what gets reported and saved) plus one
    metrics row per epoch.  Eval metrics are filled every ``eval_every``
    epochs and on the final epoch when ``eval_samples`` is given.  ``log_fn``
    receives each finished row for progress reporting."""
    cfg.validate()
    if len(train_samples) < cfg.batch_size:
        raise ValueError(f"train: {len(train_samples)} samples cannot fill a "
                         f"batch of {cfg.batch_size}")
    model = build_model(cfg.model, cfg.seed)
    opt = Adam(model.params.named_parameters(), cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    rows: list[dict] = []
    report = None

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        losses = []
        n_batches = len(train_samples) // cfg.batch_size   # drop last partial batch
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = []
            for j in idx:
                s = train_samples[j]
                if cfg.augment:
                    s = augment(s, [cfg.seed, 2, epoch, int(j)])
                batch.append(s)
            x, region_t, edge_t = _batch_tensors(batch)
            region_p, edge_p = model.forward(x, train=True)
            loss = compute_loss(cfg.loss.region_kind, region_p, region_t, cfg.loss)
            if edge_p is not None:
                loss = loss + compute_loss(cfg.loss.edge_kind, edge_p, edge_t, cfg.loss)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, value)
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(value)

        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "boundary_dice": None, "particle_dice": None, "count_acc": None}
        if eval_samples and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report = evaluate(model, eval_samples, threshold, se_size)
            row["boundary_dice"] = report.boundary_dice
            row["particle_dice"] = report.particle_dice
            row["count_acc"] = report.count_accuracy
        rows.append(row)
        if log_fn is not None:
            log_fn(row)

    return TrainResult(model, rows, report)


def metrics_to_csv(rows: list[dict], path):
    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(f"{r['epoch']},{fmt(r['train_loss'])},{fmt(r['boundary_dice'])},"
                     f"{fmt(r['particle_dice'])},{fmt(r['count_acc'])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- checkpoints ---------------------------------------------------------------------

_MAGIC = b"OWPS"
_VERSION = 1
_CONFIG_ENTRY = "config.vector"


def _config_vector(cfg: ModelConfig) -> np.ndarray:
    return np.array([
        cfg.depth, cfg.base_channels, cfg.input_channels,
        1.0 if cfg.refine_enabled else 0.0,
        1.0 if cfg.edge_branch else 0.0,
        NORM_VARIANTS.index(cfg.norm.variant),
        cfg.norm.eps, cfg.norm.momentum,
    ], dtype=np.float32)


def _short_float(value: np.float32) -> float:
    # shortest decimal that round-trips float32, so eps 1e-5 comes back as
    # exactly 1e-5 rather than 9.999999747378752e-06
    return float(str(np.float32(value)))


def _config_from_vector(vec: np.ndarray) -> ModelConfig:
    if vec.shape != (8,):
        raise CheckpointError(f"checkpoint: malformed config entry of shape {vec.shape}")
    return ModelConfig(
        depth=int(vec[0]), base_channels=int(vec[1]), input_channels=int(vec[2]),
        refine_enabled=bool(vec[3]), edge_branch=bool(vec[4]),
        norm=NormConfig(variant=NORM_VARIANTS[int(vec[5])],
                        eps=_short_float(vec[6]), momentum=_short_float(vec[7])),
    )


def save_checkpoint(model: OWPSNet, path):
    """Binary format: magic 'OWPS', version u16, entry count u32, then for
    each entry (name_len u16, name utf-8, rank u8, extents u32 each, values
    f32); all integers and floats little-endian.  Entries are the config
    vector, every learnable parameter, and every running-stat buffer, in
    registration order."""
    entries: list[tuple[str, np.ndarray]] = [(_CONFIG_ENTRY, _config_vector(model.cfg))]
    entries += [(name, t.data) for name, t in model.params.named_parameters()]
    entries += [(name, arr) for name, arr in model.params.named_buffers()]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"checkpoint: truncated file while reading {what}")
    return buf


def load_checkpoint(path) -> OWPSNet:
    """Rebuild a model from a checkpoint; parameters and running statistics
    are restored bit-exactly."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise CheckpointError(f"checkpoint: bad magic in {path}; not a model file")
        version, n_entries = struct.unpack("<HI", _read_exact(fh, 6, "header"))
        if version != _VERSION:
            raise CheckpointError(f"checkpoint: incompatible version {version}, "
                                  f"expected {_VERSION}")
        entries: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
            n_vals = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 4 * n_vals, f"values of {name}"),
                                 dtype="<f4").reshape(shape)
            entries[name] = data.astype(np.float32)
        if fh.read(1):
            raise CheckpointError("checkpoint: trailing bytes after declared entries")

    if _CONFIG_ENTRY not in entries:
        raise CheckpointError("checkpoint: missing config entry")
    cfg = _config_from_vector(entries.pop(_CONFIG_ENTRY))
    model = build_model(cfg, seed=0)
    expected = dict(model.params.named_parameters())
    buffers = dict(model.params.named_buffers())
    for name, arr in entries.items():
        if name in expected:
            target = expected.pop(name).data
        elif name in buffers:
            target = buffers.pop(name)
        else:
            raise CheckpointError(f"checkpoint: unexpected entry {name!r}")
        if target.shape != arr.shape:
            raise CheckpointError(f"checkpoint: shape mismatch for {name!r}: "
                                  f"{arr.shape} vs expected {target.shape}")
        target[...] = arr
    if expected or buffers:
        missing = list(expected) + list(buffers)
        raise CheckpointError(f"checkpoint: missing entries {missing}")
    return model


# -- grid runner -----------------------------------------------------------------------

RESULTS_HEADER = "model,loss_region,loss_edge,batch,boundary_dice,particle_dice,count_acc,epochs,seed"

# Published full-scale results for context when reading desk-scale numbers.
REFERENCE_LINES = (
    "# reference (full-scale study): OWSNet-IN-BN + CE -> boundary_dice 0.0212, particle_dice 0.9190",
    "# reference (full-scale study): OWSNet-IN-BN + square dice -> boundary_dice 0.2863, particle_dice 0.9187",
)

MODEL_VARIANTS = {
    "U_Net": dict(edge_branch=False, refine_enabled=False, variant="BN"),
    "OWSNet-without-refine": dict(edge_branch=True, refine_enabled=False, variant="BN"),
    "OWSNet-IN": dict(edge_branch=True, refine_enabled=True, variant="IN"),
    "OWSNet-BN": dict(edge_branch=True, refine_enabled=True, variant="BN"),
    "OWSNet-IN-BN": dict(edge_branch=True, refine_enabled=True, variant="IN-BN"),
    "OWSNet-BN-IN": dict(edge_branch=True, refine_enabled=True, variant="BN-IN"),
}


def _loss_pair(entry: str) -> tuple[str, str]:
    """Grid loss entry: either one kind for both branches ('dice') or an
    explicit 'region & edge' pair ('CE & square-dice')."""
    if "&" in entry:
        region, edge = (part.strip() for part in entry.split("&", 1))
        return region, edge
    return entry.strip(), entry.strip()


def run_grid(models: list[str], loss_entries: list[str], batches: list[int],
             base_cfg: TrainConfig, train_samples: list[Sample],
             eval_samples: list[Sample], out_csv,
             threshold: float = 0.5, se_size: int = 3) -> list[dict]:
    """Train/evaluate every (model variant, loss, batch) cell with a shared
    base seed and append one CSV row per cell.  A failed cell is recorded as a
    comment line and the run continues."""
    results = []
    lines = list(REFERENCE_LINES) + [RESULTS_HEADER]
    for model_name in models:
        if model_name not in MODEL_VARIANTS:
            raise ValueError(f"run_grid: unknown model variant {model_name!r}; "
                             f"choose from {sorted(MODEL_VARIANTS)}")
    for model_name in models:
        spec = MODEL_VARIANTS[model_name]
        for entry in loss_entries:
            region_kind, edge_kind = _loss_pair(entry)
            for batch in batches:
                cfg = replace(
                    base_cfg,
                    model=replace(base_cfg.model,
                                  edge_branch=spec["edge_branch"],
                                  refine_enabled=spec["refine_enabled"],
                                  norm=replace(base_cfg.model.norm, variant=spec["variant"])),
                    loss=replace(base_cfg.loss, region_kind=region_kind, edge_kind=edge_kind),
                    batch_size=batch,
                )
                try:
                    result = train(cfg, train_samples, eval_samples, threshold, se_size)
                    report = result.final_report or evaluate(
                        result.model, eval_samples, threshold, se_size)
                    row = {
                        "model": model_name, "loss_region": region_kind,
                        "loss_edge": edge_kind if spec["edge_branch"] else "",
                        "batch": batch,
                        "boundary_dice": report.boundary_dice,
                        "particle_dice": report.particle_dice,
                        "count_acc": report.count_accuracy,
                        "epochs": cfg.epochs, "seed": cfg.seed,
                    }
                    results.append(row)
                    bd = "" if row["boundary_dice"] is None else f"{row['boundary_dice']:.6f}"
                    lines.append(f"{model_name},{region_kind},{row['loss_edge']},{batch},"
                                 f"{bd},{row['particle_dice']:.6f},"
                                 f"{row['count_acc']:.6f},{cfg.epochs},{cfg.seed}")
                except Exception as exc:   # record the failure, keep the grid going
                    lines.append(f"# FAILED model={model_name} loss={entry!r} "
                                 f"batch={batch}: {exc}")
    with open(out_csv, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return results
