"""Segmentation losses for probability maps against binary targets.

Besides pixelwise cross-entropy, the family is built around the soft overlap
ratio r = (2*sum(p*t) + eps) / (sum(p^2) + sum(t^2) + eps):

    dice_loss         = 1 - r
    square_dice_loss  = 1 - r2,  r2 = (2*sum((p*t)^2) + eps) / (sum(p^2) + sum(t^2) + eps)
    exp_log_dice      = (-log r)^gamma
    exp_square_dice   = (-log r2)^gamma

The squared-overlap numerator shrinks the reward for half-confident pixels, so
the sparse positive class (particle edges) cannot be bought off by the model
hedging at 0.5 everywhere.  ``analytic_grad`` carries the closed-form
derivatives of the two unsmoothed ratio losses and exists purely as an
independent cross-check of the tape gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, DomainError, ShapeError, backward,  # noqa: F401
                     reduce_sum, square)

LOSS_KINDS = ("CE", "dice", "square-dice", "exp-log-dice", "exp-square-dice")

CE_CLAMP = 1e-7
# Floor on -log(ratio) before the gamma power: keeps the exponent's gradient
# finite at perfect overlap while staying far below every asserted tolerance
# ((1e-14)^0.3 ~ 6e-5).
_NEGLOG_FLOOR = 1e-14


@dataclass
class LossConfig:
    region_kind: str = "CE"
    edge_kind: str = "square-dice"
    gamma: float = 0.3
    smooth_eps: float = 1e-6

    def validate(self):
        for kind in (self.region_kind, self.edge_kind):
            if kind not in LOSS_KINDS:
                raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
        if self.gamma <= 0:
            raise ValueError(f"loss gamma must be > 0, got {self.gamma}")
        if self.smooth_eps <= 0:
            raise ValueError(f"loss smooth_eps must be > 0, got {self.smooth_eps}")
        return self


def _check_pair(p: Tensor, t: Tensor, op: str):
    if p.shape != t.shape:
        raise ShapeError(f"{op}: probability and target shapes differ: {p.shape} vs {t.shape}")


def ce_loss(p: Tensor, t: Tensor) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    _check_pair(p, t, "ce_loss")
    pc = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP)
    n = float(p.size)
    total = reduce_sum(t * pc.log() + (1.0 - t) * (1.0 - pc).log())
    return -(total * (1.0 / n))


def _overlap_ratio(p: Tensor, t: Tensor, smooth_eps: float, squared: bool) -> Tensor:
    overlap = square(p * t) if squared else p * t
    num = reduce_sum(overlap) * 2.0 + smooth_eps
    den = reduce_sum(square(p)) + reduce_sum(square(t)) + smooth_eps
    return num / den


def dice_loss(p: Tensor, t: Tensor, smooth_eps: float = 1e-6) -> Tensor:
    _check_pair(p, t, "dice_loss")
    return 1.0 - _overlap_ratio(p, t, smooth_eps, squared=False)


def square_dice_loss(p: Tensor, t: Tensor, smooth_eps: float = 1e-6) -> Tensor:
    _check_pair(p, t, "square_dice_loss")
    return 1.0 - _overlap_ratio(p, t, smooth_eps, squared=True)


def exp_log_dice_loss(p: Tensor, t: Tensor, gamma: float = 0.3,
                      smooth_eps: float = 1e-6) -> Tensor:
    _check_pair(p, t, "exp_log_dice_loss")
    neglog = -_overlap_ratio(p, t, smooth_eps, squared=False).log()
    return neglog.clamp(_NEGLOG_FLOOR, np.inf).pow(gamma)


def exp_square_dice_loss(p: Tensor, t: Tensor, gamma: float = 0.3,
                         smooth_eps: float = 1e-6) -> Tensor:
    _check_pair(p, t, "exp_square_dice_loss")
    neglog = -_overlap_ratio(p, t, smooth_eps, squared=True).log()
    return neglog.clamp(_NEGLOG_FLOOR, np.inf).pow(gamma)


def compute_loss(kind: str, p: Tensor, t: Tensor, cfg: LossConfig) -> Tensor:
    if kind == "CE":
        return ce_loss(p, t)
    if kind == "dice":
        return dice_loss(p, t, cfg.smooth_eps)
    if kind == "square-dice":
        return square_dice_loss(p, t, cfg.smooth_eps)
    if kind == "exp-log-dice":
        return exp_log_dice_loss(p, t, cfg.gamma, cfg.smooth_eps)
    if kind == "exp-square-dice":
        return exp_square_dice_loss(p, t, cfg.gamma, cfg.smooth_eps)
    raise ValueError(f"unknown loss kind {kind!r}")


def total_loss(region_p: Tensor, region_t: Tensor, edge_p: Tensor, edge_t: Tensor,
               cfg: LossConfig) -> Tensor:
    """Unweighted sum of the region-branch loss and the edge-branch loss."""
    return (compute_loss(cfg.region_kind, region_p, region_t, cfg)
            + compute_loss(cfg.edge_kind, edge_p, edge_t, cfg))


# -- closed-form reference gradients ------------------------------------------

def analytic_grad(kind: str, p: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Closed-form d(loss)/dp for the unsmoothed ratio losses.

    kind "dice":
        -(2*t_j*(sum p^2 + sum t^2) - 4*p_j*sum(p*t)) / (sum p^2 + sum t^2)^2
    kind "square-dice":
        -4*(p_j*t_j^2*(sum p^2 + sum t^2) - p_j*sum((p*t)^2)) / (sum p^2 + sum t^2)^2

    These are reference formulas used to cross-check the tape gradients; they
    are computed in float64 and never enter training.
    """
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"analytic_grad: shapes differ: {p.shape} vs {t.shape}")
    den = float((p * p).sum() + (t * t).sum())
    if den < 1e-300:
        raise DomainError("analytic_grad: all-zero p and t make the ratio undefined")
    if kind == "dice":
        return -(2.0 * t * den - 4.0 * p * (p * t).sum()) / den ** 2
    if kind == "square-dice":
        return -4.0 * (p * t * t * den - p * ((p * t) ** 2).sum()) / den ** 2
    raise ValueError(f"analytic_grad: unsupported kind {kind!r}")


# -- loss-curve export ---------------------------------------------------------

LOSS_CURVE_HEADER = "p,ce,dice,square_dice,exp_log_dice,exp_square_dice"


def loss_curve_rows(gamma: float = 0.3, smooth_eps: float = 1e-6):
    """Single-pixel loss values against target 1 for p = 0.01 .. 0.99.

    Evaluated in float64 through the same loss functions training uses, so the
    exported numbers match direct evaluation of the formulas to well below the
    printing precision.
    """
    rows = []
    t = Tensor(np.ones(1, dtype=np.float64))
    for k in range(1, 100):
        pv = k / 100.0
        p = Tensor(np.array([pv], dtype=np.float64))
        rows.append((
            pv,
            ce_loss(p, t).item(),
            dice_loss(p, t, smooth_eps).item(),
            square_dice_loss(p, t, smooth_eps).item(),
            exp_log_dice_loss(p, t, gamma, smooth_eps).item(),
            exp_square_dice_loss(p, t, gamma, smooth_eps).item(),
        ))
    return rows


def emit_loss_curves(path, gamma: float = 0.3, smooth_eps: float = 1e-6):
    """Write the loss-curve sweep as CSV with 6-decimal fixed-point values."""
    lines = [LOSS_CURVE_HEADER]
    for row in loss_curve_rows(gamma, smooth_eps):
        lines.append(",".join(f"{v:.6f}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
