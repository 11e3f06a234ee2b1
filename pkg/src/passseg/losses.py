"""Loss terms of the segmentor, the discriminators and the shape encoder.

All functions take tensors whose first axis is the minibatch and return a
scalar :class:`~passseg.tensor.Tensor`; per-sample quantities are averaged over
the batch. Discriminator outputs are read as the probability that an
(image, mask) pair was produced by the segmentor, so the discriminator pushes
reference pairs to 0 and predicted pairs to 1 while the segmentor pushes its
own pairs back to 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import ShapeError, Tensor

SIDE_WEIGHTS = (0.125, 0.25, 0.5, 1.0)
LOGIT_CLAMP = 1e-6


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _per_sample_sum(x: Tensor) -> Tensor:
    return T.sum_(x, axis=tuple(range(1, x.ndim))) if x.ndim > 1 else T.sum_(x, axis=0, keepdims=True)


def dice_loss(pred: Tensor, ref: Tensor, eps: float = 1.0) -> Tensor:
    """Smoothed soft Dice loss ``1 - (2 sum(p r) + eps) / (sum p + sum r + eps)``."""
    _same_shape(pred, ref, "dice_loss")
    inter = _per_sample_sum(T.mul(pred, ref))
    denom = T.add(T.add(_per_sample_sum(pred), _per_sample_sum(ref)), eps)
    score = T.div(T.add(T.mul(inter, 2.0), eps), denom)
    return T.mean(T.sub(1.0, score))


def downsample_reference(ref: Tensor | np.ndarray, factor: int) -> Tensor:
    """2x2-average a binary mask ``log2(factor)`` times, then re-binarize at 0.5."""
    data = ref.data if isinstance(ref, Tensor) else np.asarray(ref, dtype=np.float32)
    if factor == 1:
        return Tensor(data)
    out = Tensor(data)
    with T.no_grad():
        f = factor
        while f > 1:
            out = T.avgpool2(out)
            f //= 2
    return Tensor((out.data >= 0.5).astype(np.float32))


def side_dice_losses(outputs: Sequence[Tensor], ref: Tensor, eps: float = 1.0) -> list[Tensor]:
    """Dice loss of each side output against the reference rescaled to its size."""
    losses = []
    for out in outputs:
        factor = ref.shape[1] // out.shape[1]
        if factor * out.shape[1] != ref.shape[1]:
            raise ShapeError(f"side output {out.shape} does not divide reference {ref.shape}")
        losses.append(dice_loss(out, downsample_reference(ref, factor), eps))
    return losses


def seg_side_loss(outputs: Sequence[Tensor], ref: Tensor,
                  weights: Sequence[float] = SIDE_WEIGHTS,
                  active: Sequence[bool] = (True, True, True, True), eps: float = 1.0) -> Tensor:
    """Weighted sum of side-output Dice losses over the active scales.

    ``outputs`` is ordered coarse to fine (base/8, base/4, base/2, base).
    """
    total = Tensor(0.0)
    for loss, w, on in zip(side_dice_losses(outputs, ref, eps), weights, active):
        if on:
            total = T.add(total, T.mul(loss, float(w)))
    return total


REDUCTIONS = ("sum", "mean")


def _reduce(term: Tensor, reduction: str) -> Tensor:
    if reduction not in REDUCTIONS:
        raise ConfigError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    per_sample = _per_sample_sum(term)
    if reduction == "mean":
        per_sample = T.mul(per_sample, 1.0 / (term.size // max(per_sample.size, 1)))
    return T.mean(per_sample)


def kl_loss(pred_labeled: Tensor, pred_unlabeled: Tensor, ref: Tensor,
            eps: float = 1e-7, variant: str = "reference", reduction: str = "sum") -> Tensor:
    """Distribution-consistency term between predictions on ``x`` and ``g(x)``.

    ``reference``: per sample, ``sum |(p - pa) * log((y + eps) / (pa + eps))|``.
    ``standard``: per-pixel Bernoulli KL(p || pa), summed over pixels.
    ``reduction="mean"`` divides each sample's sum by its pixel count.
    """
    _same_shape(pred_labeled, pred_unlabeled, "kl_loss")
    _same_shape(pred_labeled, ref, "kl_loss")
    if variant == "reference":
        ratio = T.log(T.div(T.add(ref, eps), T.add(pred_unlabeled, eps)))
        term = T.abs_(T.mul(T.sub(pred_labeled, pred_unlabeled), ratio))
    elif variant == "standard":
        p, q = pred_labeled, pred_unlabeled
        fg = T.mul(p, T.log(T.div(T.add(p, eps), T.add(q, eps))))
        bg = T.mul(T.sub(1.0, p), T.log(T.div(T.sub(1.0 + eps, p), T.sub(1.0 + eps, q))))
        term = T.add(fg, bg)
    else:
        raise ConfigError(f"unknown kl_variant {variant!r}")
    return _reduce(term, reduction)


def _neg_log(x: Tensor) -> Tensor:
    return T.mean(T.mul(T.log(T.clip(x, LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)), -1.0))


def adv_loss_real(d_out: Tensor) -> Tensor:
    """Discriminator loss on reference pairs: ``-log(1 - D(x, y))``."""
    return _neg_log(T.sub(1.0, d_out))


def adv_loss_pred(d_out: Tensor) -> Tensor:
    """Discriminator loss on predicted pairs: ``-log D(x, y_hat)``."""
    return _neg_log(d_out)


def adv_loss_seg(d_out: Tensor) -> Tensor:
    """Segmentor adversarial loss: ``-log(1 - D(x, y_hat))``."""
    return _neg_log(T.sub(1.0, d_out))


def _batch_mean(f: Tensor) -> Tensor:
    return T.mean(f, axis=0) if f.ndim > 1 else f


def feature_loss(real_feats: Sequence[Tensor], pred_feats: Sequence[Tensor],
                 reduction: str = "sum") -> Tensor:
    """Sum over discriminators of the squared L2 gap between batch-mean features.

    ``reduction="mean"`` divides each discriminator's term by its feature size.
    """
    if reduction not in REDUCTIONS:
        raise ConfigError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    if len(real_feats) != len(pred_feats):
        raise ShapeError(f"feature_loss: {len(real_feats)} real vs {len(pred_feats)} predicted maps")
    total = Tensor(0.0)
    for fr, fp in zip(real_feats, pred_feats):
        _same_shape(fr, fp, "feature_loss")
        gap = T.sum_(T.square(T.sub(_batch_mean(fr), _batch_mean(fp))))
        if reduction == "mean":
            gap = T.mul(gap, 1.0 / _batch_mean(fr).size)
        total = T.add(total, gap)
    return total


def encoder_loss(z: Tensor, z_hat: Tensor) -> Tensor:
    """Mean squared difference between two latent codes (batched or not)."""
    _same_shape(z, z_hat, "encoder_loss")
    return T.mean(T.square(T.sub(z, z_hat)))


def total_segmentor_loss(seg, kl, adv, feature, lam: float = 0.3, alpha: float = 0.01,
                         beta: float = 1.0):
    """``seg + lam*kl + alpha*adv + beta*feature``; works on tensors or floats."""
    for label, w in (("lambda", lam), ("alpha", alpha), ("beta", beta)):
        if w < 0:
            raise ConfigError(f"loss weight {label} must be non-negative, got {w}")
    if not any(isinstance(v, Tensor) for v in (seg, kl, adv, feature)):
        return seg + lam * kl + alpha * adv + beta * feature
    out = T.add(seg, T.mul(kl, lam))
    out = T.add(out, T.mul(adv, alpha))
    return T.add(out, T.mul(feature, beta))


SCALE_NAMES = ("8", "4", "2", "1")

CSV_COLUMNS = (
    ["epoch", "step", "active_scales"]
    + [f"dice_{s}" for s in SCALE_NAMES]
    + ["kl", "seg_adv", "feature", "encoder"]
    + [f"d{s}_{kind}" for s in SCALE_NAMES for kind in ("real", "pred")]
    + ["total_S", "total_D", "total_E", "lr_S", "lr_D", "lr_E"]
)


@dataclass
class LossReport:
    """Scalar record of one training step; inactive scales report 0."""

    epoch: int = 0
    step: int = 0
    active_scales: int = 0
    dice_side: list[float] = field(default_factory=lambda: [0.0] * 4)
    kl: float = 0.0
    seg_adv: float = 0.0
    feature: float = 0.0
    encoder: float = 0.0
    disc: list[list[float]] = field(default_factory=lambda: [[0.0, 0.0] for _ in range(4)])
    total_S: float = 0.0
    total_D: float = 0.0
    total_E: float = 0.0
    lr_S: float = 0.0
    lr_D: float = 0.0
    lr_E: float = 0.0

    def values(self) -> list[float]:
        return (
            [self.epoch, self.step, self.active_scales]
            + list(self.dice_side)
            + [self.kl, self.seg_adv, self.feature, self.encoder]
            + [v for pair in self.disc for v in pair]
            + [self.total_S, self.total_D, self.total_E, self.lr_S, self.lr_D, self.lr_E]
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(np.asarray(self.values(), dtype=np.float64))))

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [v if isinstance(v, int) else repr(float(v)) for v in self.values()])
        return buf.getvalue()

    @classmethod
    def from_row(cls, row: dict) -> "LossReport":
        f = {k: float(v) for k, v in row.items()}
        return cls(
            epoch=int(f["epoch"]), step=int(f["step"]), active_scales=int(f["active_scales"]),
            dice_side=[f[f"dice_{s}"] for s in SCALE_NAMES],
            kl=f["kl"], seg_adv=f["seg_adv"], feature=f["feature"], encoder=f["encoder"],
            disc=[[f[f"d{s}_real"], f[f"d{s}_pred"]] for s in SCALE_NAMES],
            total_S=f["total_S"], total_D=f["total_D"], total_E=f["total_E"],
            lr_S=f["lr_S"], lr_D=f["lr_D"], lr_E=f["lr_E"],
        )


def csv_header() -> str:
    return ",".join(CSV_COLUMNS) + "\n"


def read_loss_log(path) -> list[LossReport]:
    with open(path, newline="") as fh:
        return [LossReport.from_row(row) for row in csv.DictReader(fh)]
