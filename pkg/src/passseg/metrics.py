"""Dice score, SSIM, average Hausdorff distance and the cross-domain matrix."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import ShapeError

SSIM_WINDOW = 11
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _binary_pair(pred, ref):
    p, r = np.asarray(pred).astype(bool), np.asarray(ref).astype(bool)
    if p.shape != r.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {r.shape}")
    return p, r


def dice_score(pred_binary, ref_binary) -> float:
    """``100 * 2|P & R| / (|P| + |R|)``; 100 when both masks are empty."""
    p, r = _binary_pair(pred_binary, ref_binary)
    total = int(p.sum()) + int(r.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int((p & r).sum()) / total


def _foreground(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(np.squeeze(mask) if mask.ndim > 2 else mask).astype(np.float64)


def _mean_min_distance(src: np.ndarray, dst: np.ndarray, chunk: int = 2048) -> float:
    total = 0.0
    dst_sq = (dst * dst).sum(axis=1)
    for lo in range(0, len(src), chunk):
        a = src[lo:lo + chunk]
        d2 = (a * a).sum(axis=1)[:, None] + dst_sq[None, :] - 2.0 * a @ dst.T
        total += np.sqrt(np.maximum(d2.min(axis=1), 0.0)).sum()
    return total / len(src)


def avg_hausdorff(pred_binary, ref_binary) -> float:
    """Symmetric average Hausdorff distance in pixels.

    Mean of the two directed mean nearest-point Euclidean distances between
    foreground pixel sets. Returns NaN when either set is empty.
    """
    p, r = _binary_pair(pred_binary, ref_binary)
    ps, rs = _foreground(p), _foreground(r)
    if len(ps) == 0 or len(rs) == 0:
        return float("nan")
    return 0.5 * (_mean_min_distance(ps, rs) + _mean_min_distance(rs, ps))


def _box_sums(x: np.ndarray, w: int) -> np.ndarray:
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    c[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    return c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]


def ssim(pred, ref, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over every fully-contained ``window x window`` uniform window."""
    a = np.squeeze(np.asarray(pred, dtype=np.float64))
    b = np.squeeze(np.asarray(ref, dtype=np.float64))
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"ssim needs two equal 2-D images, got {a.shape} and {b.shape}")
    if min(a.shape) < window:
        raise ShapeError(f"ssim window {window} exceeds image size {a.shape}")
    n = window * window
    mu_a, mu_b = _box_sums(a, window) / n, _box_sums(b, window) / n
    var_a = _box_sums(a * a, window) / n - mu_a ** 2
    var_b = _box_sums(b * b, window) / n - mu_b ** 2
    cov = _box_sums(a * b, window) / n - mu_a * mu_b
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


@dataclass
class MetricTriple:
    dice: float
    ssim: float
    avg_hd: float
    hd_missing: int = 0


def score_predictions(probs: np.ndarray, masks: np.ndarray) -> MetricTriple:
    """Mean metrics over samples; Dice and HD on ``probs > 0.5``, SSIM on ``probs``."""
    dices, ssims, hds, missing = [], [], [], 0
    for p, m in zip(probs, masks):
        pb, mb = p > 0.5, m > 0.5
        dices.append(dice_score(pb, mb))
        ssims.append(ssim(p, m))
        hd = avg_hausdorff(pb, mb)
        if math.isnan(hd):
            missing += 1
        else:
            hds.append(hd)
    return MetricTriple(float(np.mean(dices)), float(np.mean(ssims)),
                        float(np.mean(hds)) if hds else float("nan"), missing)


METRIC_NAMES = ("dice", "ssim", "avg_hd")


@dataclass
class EvalMatrix:
    """Train-domain x test-domain grid of metric triples."""

    train_domains: list[str]
    test_domains: list[str]
    cells: dict[tuple[str, str], MetricTriple | None] = field(default_factory=dict)

    def cell(self, train: str, test: str) -> MetricTriple | None:
        return self.cells.get((train, test))

    def row_average(self, train: str, metric: str = "dice") -> float:
        vals = [getattr(c, metric) for t in self.test_domains
                if (c := self.cell(train, t)) is not None and not math.isnan(getattr(c, metric))]
        return float(np.mean(vals)) if vals else float("nan")

    def row_incomplete(self, train: str) -> bool:
        return any(self.cell(train, t) is None for t in self.test_domains)

    def cross_domain_mean(self, train: str, metric: str = "dice") -> float:
        vals = [getattr(c, metric) for t in self.test_domains if t != train
                and (c := self.cell(train, t)) is not None and not math.isnan(getattr(c, metric))]
        return float(np.mean(vals)) if vals else float("nan")

    def domain_gap(self, train: str, metric: str = "dice") -> float:
        """In-domain score minus the mean cross-domain score."""
        own = self.cell(train, train)
        if own is None:
            return float("nan")
        return getattr(own, metric) - self.cross_domain_mean(train, metric)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["train", "test", "in_domain", "present", "dice", "ssim", "avg_hd", "hd_missing"])
        for tr in self.train_domains:
            for te in self.test_domains:
                c = self.cell(tr, te)
                if c is None:
                    w.writerow([tr, te, int(tr == te), 0, "", "", "", ""])
                else:
                    w.writerow([tr, te, int(tr == te), 1, f"{c.dice:.4f}", f"{c.ssim:.4f}",
                                f"{c.avg_hd:.4f}", c.hd_missing])
            w.writerow([tr, "Avg.", 0, int(not self.row_incomplete(tr))]
                       + [f"{self.row_average(tr, m):.4f}" for m in METRIC_NAMES]
                       + [""])
        return buf.getvalue()

    def to_text(self, metric: str = "dice") -> str:
        """Plain table: one column group per training domain, '*' marks in-domain."""
        fmt = "{:>8.2f}" if metric == "dice" else "{:>8.3f}"
        groups, header1, header2 = [], [], []
        for tr in self.train_domains:
            cells = []
            for te in self.test_domains:
                c = self.cell(tr, te)
                v = "--" if c is None else fmt.format(getattr(c, metric)).strip()
                cells.append(f"{v + ('*' if tr == te else ''):>9}")
            avg = self.row_average(tr, metric)
            flag = "+" if self.row_incomplete(tr) else ""
            cells.append(f"{fmt.format(avg).strip() + flag:>9}")
            cells.append(f"{self.domain_gap(tr, metric):>9.2f}")
            groups.append(" ".join(cells))
            names = [f"{te:>9}" for te in self.test_domains] + [f"{'Avg.':>9}", f"{'Gap':>9}"]
            header2.append(" ".join(names))
            header1.append(f"Train on {tr}".center(len(groups[-1])))
        lines = [" | ".join(header1), " | ".join(header2), " | ".join(groups),
                 f"({metric}; * in-domain, + row average over present cells only)"]
        return "\n".join(lines) + "\n"


def eval_matrix(models: Mapping[str, object], datasets: Mapping[str, object],
                part: str = "test") -> EvalMatrix:
    """Evaluate every training-domain model on every domain's ``part`` split.

    ``models`` maps a training-domain name to a segmentor ParamStore, a
    PassNetworks, a checkpoint path, or None (absent cell).
    """
    from .trainer import load_networks, predict  # noqa: avoid import cycle

    trains, tests = list(models), list(datasets)
    matrix = EvalMatrix(trains, tests)
    for tr in trains:
        model = models[tr]
        if model is None:
            continue
        if not hasattr(model, "kind") and not hasattr(model, "segmentor"):
            try:
                model = load_networks(model)
            except (OSError, ValueError, RuntimeError):
                continue
        seg = getattr(model, "segmentor", model)
        for te in tests:
            ds = datasets[te]
            idx = ds.indices(part)
            if not idx:
                continue
            probs = predict(seg, ds.images[idx])
            matrix.cells[(tr, te)] = score_predictions(probs, ds.masks[idx])
    return matrix
