"""Alternating D -> E -> S training with Adam, step decay and the g(x) transform.

All randomness is derived from ``(seed, stream, epoch)``, so a run is a pure
function of its configuration and data, and resuming from the checkpoint
written at the end of epoch ``e`` reproduces epochs ``e+1..`` bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from . import metrics
from . import nets
from . import tensor as T
from .data import Dataset
from .errors import ConfigError, NumericalError
from .nets import SIDE_FACTORS, NetworkSpec, ParamStore, PassNetworks
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr_S: float = 0.01
    lr_D: float = 0.001
    lr_E: float = 0.001
    decay: float = 0.9
    decay_every: int = 5
    lam: float = 0.3
    alpha: float = 0.01
    beta: float = 1.0
    dropout: float = 0.25
    use_gx: bool = True
    progressive: bool = True
    progress_interval: int = 2
    seed: int = 0
    side_weights: tuple = L.SIDE_WEIGHTS
    kl_variant: str = "reference"
    # the labeled prediction is the reference distribution for y_a; without the
    # detach the background weight |log eps| drags y_hat towards y_a
    kl_detach_labeled: bool = True
    # pixel- and element-normalised terms keep lam and beta independent of resolution
    kl_reduction: str = "mean"
    feature_reduction: str = "mean"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gx_gamma: tuple = (0.5, 2.0)
    gx_scale: tuple = (0.7, 1.3)
    gx_offset: tuple = (-0.1, 0.1)
    gx_noise: float = 0.05
    gx_flip: float = 0.5

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        for name in ("lr_S", "lr_D", "lr_E"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.decay < 1.0 or self.decay_every < 1:
            raise ConfigError("decay must lie in (0, 1) and decay_every be positive")
        for name in ("lam", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if len(self.side_weights) != 4 or min(self.side_weights) < 0:
            raise ConfigError("side_weights needs four non-negative values")
        if self.progress_interval < 1:
            raise ConfigError("progress_interval must be positive")
        if self.kl_variant not in ("reference", "standard"):
            raise ConfigError(f"kl_variant must be 'reference' or 'standard', got {self.kl_variant!r}")
        for name in ("kl_reduction", "feature_reduction"):
            if getattr(self, name) not in L.REDUCTIONS:
                raise ConfigError(f"{name} must be 'sum' or 'mean', got {getattr(self, name)!r}")
        return self

    def lr_at(self, base: float, epoch: int) -> float:
        return base * self.decay ** (epoch // self.decay_every)

    def active_scales(self, epoch: int) -> tuple[bool, bool, bool, bool]:
        """Which of the (x/8, x/4, x/2, x) losses and discriminators are on."""
        n = 4 if not self.progressive else min(4, 1 + epoch // self.progress_interval)
        return tuple(i < n for i in range(4))


@dataclass
class Adam:
    """Adam over one :class:`ParamStore`; parameters without a gradient are skipped."""

    store: ParamStore
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.store.items():
            self.m.setdefault(name, np.zeros(p.shape, dtype=np.float32))
            self.v.setdefault(name, np.zeros(p.shape, dtype=np.float32))

    def step(self) -> None:
        self.t += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        step = np.float32(self.lr * np.sqrt(c2) / c1)
        eps = np.float32(self.eps * np.sqrt(c2))
        for name, p in self.store.items():
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * (p.grad * p.grad)
            p.data = p.data - step * m / (np.sqrt(v) + eps)

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"opt/{prefix}/t": np.array([self.t], dtype=np.float32)}
        out.update({f"opt/{prefix}/m/{k}": v for k, v in self.m.items()})
        out.update({f"opt/{prefix}/v/{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(arrays[f"opt/{prefix}/t"][0])
        for k in self.m:
            self.m[k] = arrays[f"opt/{prefix}/m/{k}"].copy()
            self.v[k] = arrays[f"opt/{prefix}/v/{k}"].copy()


@dataclass
class SampleBatch:
    images: np.ndarray
    masks: np.ndarray | None = None
    flips: np.ndarray | None = None


@dataclass
class GxParams:
    """One per-image draw of the appearance transform."""

    gamma: float = 1.0
    scale: float = 1.0
    offset: float = 0.0
    sigma: float = 0.0
    flip: bool = False


def draw_gx(rng: np.random.Generator, config: TrainConfig = TrainConfig()) -> GxParams:
    lo, hi = config.gx_gamma
    return GxParams(
        gamma=float(np.exp(rng.uniform(np.log(lo), np.log(hi)))),
        scale=float(rng.uniform(*config.gx_scale)),
        offset=float(rng.uniform(*config.gx_offset)),
        sigma=float(rng.uniform(0.0, config.gx_noise)),
        flip=bool(rng.random() < config.gx_flip),
    )


def apply_gx(image: np.ndarray, p: GxParams, noise: np.ndarray) -> np.ndarray:
    """Gamma, contrast about the image mean, brightness offset, noise, flip, clip."""
    x = np.power(image, np.float32(p.gamma), dtype=np.float32)
    mu = np.float32(x.mean())
    x = x * np.float32(p.scale) + np.float32((1.0 - p.scale) * mu + p.offset)
    x = x + np.float32(p.sigma) * noise
    if p.flip:
        x = x[:, ::-1, :]
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def transform_gx(batch: SampleBatch, rng: np.random.Generator,
                 config: TrainConfig = TrainConfig()) -> SampleBatch:
    """Unlabeled, randomly re-rendered copy of ``batch``; flip bits are kept."""
    out, flips = [], []
    for image in batch.images:
        p = draw_gx(rng, config)
        noise = rng.standard_normal(image.shape).astype(np.float32)
        out.append(apply_gx(image, p, noise))
        flips.append(p.flip)
    return SampleBatch(np.stack(out), None, np.array(flips, dtype=bool))


@dataclass
class Optimizers:
    S: Adam
    D: dict[int, Adam]
    E: Adam

    @classmethod
    def for_networks(cls, networks: PassNetworks, config: TrainConfig) -> "Optimizers":
        kw = dict(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
        return cls(Adam(networks.segmentor, config.lr_S, **kw),
                   {s: Adam(d, config.lr_D, **kw) for s, d in networks.discriminators.items()},
                   Adam(networks.encoder, config.lr_E, **kw))

    def set_epoch(self, config: TrainConfig, epoch: int) -> None:
        self.S.lr = config.lr_at(config.lr_S, epoch)
        for opt in self.D.values():
            opt.lr = config.lr_at(config.lr_D, epoch)
        self.E.lr = config.lr_at(config.lr_E, epoch)

    def arrays(self) -> dict[str, np.ndarray]:
        out = self.S.arrays("S")
        for s, opt in self.D.items():
            out.update(opt.arrays(f"D{s}"))
        out.update(self.E.arrays("E"))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.S.load_arrays(arrays, "S")
        for s, opt in self.D.items():
            opt.load_arrays(arrays, f"D{s}")
        self.E.load_arrays(arrays, "E")


def _finite(value: Tensor, what: str, report: L.LossReport) -> float:
    v = value.item()
    if not np.isfinite(v):
        raise NumericalError(f"non-finite {what} at epoch {report.epoch} step {report.step}",
                             asdict(report))
    return v


def train_step(networks: PassNetworks, opt: Optimizers, batch: SampleBatch,
               config: TrainConfig, epoch: int, dropout_rng: np.random.Generator,
               unlabeled: SampleBatch | None = None, step: int = 0) -> L.LossReport:
    """One discriminator, encoder and segmentor update on a labeled minibatch.

    ``unlabeled`` holds ``g(x)`` of the same images; it is ignored when
    ``config.use_gx`` is false.
    """
    S, E = networks.segmentor, networks.encoder
    active = config.active_scales(epoch)
    report = L.LossReport(epoch=epoch, step=step, active_scales=sum(active),
                          lr_S=opt.S.lr, lr_D=next(iter(opt.D.values())).lr, lr_E=opt.E.lr)
    use_gx = config.use_gx and unlabeled is not None

    x, y = Tensor(batch.images), Tensor(batch.masks)
    ys = nets.forward_segmentor(S, x, train=True, rng=dropout_rng).as_list()
    if use_gx:
        xa = Tensor(unlabeled.images)
        yas = nets.forward_segmentor(S, xa, train=True, rng=dropout_rng).as_list()

    views = {}
    for i, factor in enumerate(SIDE_FACTORS):
        if active[i]:
            views[i] = (nets.downsample(x, factor), L.downsample_reference(y, factor),
                        nets.downsample(xa, factor) if use_gx else None)

    # (1) discriminators on reference, predicted and transformed-predicted pairs
    for i, (xs, ref_s, xas) in views.items():
        D = networks.discriminators[SIDE_FACTORS[i]]
        D.zero_grad()
        real = L.adv_loss_real(nets.forward_discriminator(D, xs, ref_s).prob)
        pred = L.adv_loss_pred(nets.forward_discriminator(D, xs, ys[i].detach()).prob)
        loss = T.add(real, pred)
        if use_gx:
            pred_a = L.adv_loss_pred(nets.forward_discriminator(D, xas, yas[i].detach()).prob)
            loss = T.add(loss, T.mul(pred_a, config.alpha))
        report.disc[i] = [_finite(real, "D real loss", report), _finite(pred, "D pred loss", report)]
        report.total_D += _finite(loss, "D loss", report)
        T.backward(loss)
        opt.D[SIDE_FACTORS[i]].step()

    # (2) shape encoder on reference vs (detached) predicted masks
    E.zero_grad()
    z = nets.forward_encoder(E, x, y)
    z_hat = nets.forward_encoder(E, x, ys[3].detach())
    enc = L.encoder_loss(z, z_hat)
    report.encoder = report.total_E = _finite(enc, "encoder loss", report)
    T.backward(enc)
    opt.E.step()

    # (3) segmentor
    S.zero_grad()
    dice = L.side_dice_losses(ys, y)
    seg = Tensor(0.0)
    for i, (d, w) in enumerate(zip(dice, config.side_weights)):
        if active[i]:
            report.dice_side[i] = _finite(d, "dice loss", report)
            seg = T.add(seg, T.mul(d, float(w)))
    if use_gx:
        # consistency acts on the finest active output, the current final prediction;
        # scales without a Dice signal yet would otherwise collapse to a constant
        f = max(views)
        ya = T.flip_width_where(yas[f], unlabeled.flips) if unlabeled.flips is not None else yas[f]
        yl = ys[f].detach() if config.kl_detach_labeled else ys[f]
        kl = L.kl_loss(yl, ya, views[f][1], variant=config.kl_variant,
                       reduction=config.kl_reduction)
    else:
        kl = Tensor(0.0)
    adv = Tensor(0.0)
    real_feats, pred_feats = [], []
    for i, (xs, ref_s, _) in views.items():
        D = networks.discriminators[SIDE_FACTORS[i]]
        out = nets.forward_discriminator(D, xs, ys[i])
        adv = T.add(adv, L.adv_loss_seg(out.prob))
        pred_feats.append(out.features)
        with T.no_grad():
            real_feats.append(nets.forward_discriminator(D, xs, ref_s).features)
    feat = L.feature_loss(real_feats, pred_feats, reduction=config.feature_reduction)
    total = L.total_segmentor_loss(seg, kl, adv, feat, config.lam, config.alpha, config.beta)
    report.kl = _finite(kl, "KL loss", report)
    report.seg_adv = _finite(adv, "segmentor adversarial loss", report)
    report.feature = _finite(feat, "feature loss", report)
    report.total_S = _finite(total, "segmentor loss", report)
    T.backward(total)
    opt.S.step()
    for D in networks.discriminators.values():
        D.zero_grad()
    return report


# ---------------------------------------------------------------------------
# full runs


def _stream(seed: int, stream: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, epoch])


def checkpoint_arrays(networks: PassNetworks, opt: Optimizers | None, epoch: int) -> dict:
    arrays = {f"meta/spec/{k}": np.array([v], dtype=np.float32)
              for k, v in _spec_numbers(networks.spec).items()}
    arrays["meta/epoch"] = np.array([epoch], dtype=np.float32)
    arrays.update(networks.arrays())
    if opt is not None:
        arrays.update(opt.arrays())
    return arrays


def _spec_numbers(spec: NetworkSpec) -> dict[str, float]:
    d = asdict(spec)
    d["encoder_input"] = 0.0 if spec.encoder_input == "stacked" else 1.0
    return d


def spec_from_checkpoint(arrays: dict[str, np.ndarray]) -> NetworkSpec:
    values = {k.split("/")[-1]: float(v[0]) for k, v in arrays.items() if k.startswith("meta/spec/")}
    kw = {}
    for f in fields(NetworkSpec):
        if f.name not in values:
            continue
        v = values[f.name]
        if f.name == "encoder_input":
            kw[f.name] = "stacked" if v == 0.0 else "mask_only"
        elif f.type in ("int", int):
            kw[f.name] = int(round(v))
        else:
            # stored as float32; the shortest repr recovers the configured value
            kw[f.name] = float(str(np.float32(v)))
    return NetworkSpec(**kw)


def load_networks(path, seed: int = 0) -> PassNetworks:
    arrays = nets.load_checkpoint(path)
    networks = PassNetworks.build(spec_from_checkpoint(arrays), seed)
    networks.load_arrays(arrays)
    return networks


@dataclass
class TrainResult:
    networks: PassNetworks
    reports: list[L.LossReport]
    val_dice: list[float]
    best_epoch: int
    out_dir: Path | None = None


def train(networks: PassNetworks, dataset: Dataset, config: TrainConfig,
          out_dir=None, resume: bool = False,
          on_epoch: Callable[[int, list[L.LossReport]], None] | None = None) -> TrainResult:
    """Run ``config.epochs`` epochs over the dataset's train split.

    When ``out_dir`` is given the step log (``losses.csv``), per-epoch
    validation (``val.csv``) and checkpoints ``last.ckpt``, ``best.ckpt`` and
    ``final.ckpt`` are written there. ``resume`` continues from ``last.ckpt``.
    """
    config.validate()
    train_idx = dataset.indices("train")
    if not train_idx:
        raise ConfigError("dataset has no training samples")
    val_idx = dataset.indices("val")
    opt = Optimizers.for_networks(networks, config)
    out = Path(out_dir) if out_dir is not None else None
    reports: list[L.LossReport] = []
    val_scores: list[float] = []
    best, best_epoch, start = -1.0, -1, 0

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "last.ckpt").exists():
            arrays = nets.load_checkpoint(out / "last.ckpt")
            networks.load_arrays(arrays)
            opt.load_arrays(arrays)
            start = int(arrays["meta/epoch"][0]) + 1
            reports = L.read_loss_log(out / "losses.csv")
            reports = [r for r in reports if r.epoch < start]
            val_scores, best, best_epoch = _read_val(out / "val.csv", start)
        _rewrite_log(out / "losses.csv", reports)
        _rewrite_val(out / "val.csv", val_scores)

    images, masks = dataset.images, dataset.masks
    for epoch in range(start, config.epochs):
        opt.set_epoch(config, epoch)
        order = _stream(config.seed, 1, epoch).permutation(train_idx)
        unlabeled_all = None
        if config.use_gx:
            unlabeled_all = transform_gx(SampleBatch(images[order]), _stream(config.seed, 2, epoch), config)
        drop_rng = _stream(config.seed, 3, epoch)
        epoch_reports = []
        for step, lo in enumerate(range(0, len(order), config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            batch = SampleBatch(images[idx], masks[idx])
            unlabeled = None
            if unlabeled_all is not None:
                sl = slice(lo, lo + len(idx))
                unlabeled = SampleBatch(unlabeled_all.images[sl], None, unlabeled_all.flips[sl])
            epoch_reports.append(train_step(networks, opt, batch, config, epoch, drop_rng,
                                            unlabeled, step))
        reports.extend(epoch_reports)

        score = evaluate_dice(networks.segmentor, images[val_idx], masks[val_idx]) if val_idx else float("nan")
        val_scores.append(score)
        improved = (not np.isnan(score) and score > best) or (np.isnan(score) and epoch == config.epochs - 1)
        if improved:
            best, best_epoch = (score if not np.isnan(score) else best), epoch
        if out is not None:
            with open(out / "losses.csv", "a") as fh:
                fh.writelines(r.csv_row() for r in epoch_reports)
            with open(out / "val.csv", "a") as fh:
                fh.write(f"{epoch},{score!r}\n")
            arrays = checkpoint_arrays(networks, opt, epoch)
            nets.save_checkpoint(out / "last.ckpt", arrays)
            if improved:
                nets.save_checkpoint(out / "best.ckpt", arrays)
        if on_epoch is not None:
            on_epoch(epoch, epoch_reports)
        log.info("epoch %d  S=%.4f  val_dice=%.2f", epoch, epoch_reports[-1].total_S, score)

    if out is not None:
        nets.save_checkpoint(out / "final.ckpt", checkpoint_arrays(networks, None, config.epochs - 1))
    return TrainResult(networks, reports, val_scores, best_epoch, out)


def _rewrite_log(path: Path, reports: Sequence[L.LossReport]) -> None:
    path.write_text(L.csv_header() + "".join(r.csv_row() for r in reports))


def _rewrite_val(path: Path, scores: Sequence[float]) -> None:
    path.write_text("epoch,val_dice\n" + "".join(f"{e},{s!r}\n" for e, s in enumerate(scores)))


def _read_val(path: Path, start: int):
    scores = []
    if path.exists():
        for line in path.read_text().splitlines()[1:]:
            e, s = line.split(",")
            if int(e) < start:
                scores.append(float(s))
    best, best_epoch = -1.0, -1
    for e, s in enumerate(scores):
        if not np.isnan(s) and s > best:
            best, best_epoch = s, e
    return scores, best, best_epoch


def predict(segmentor: ParamStore, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Final-resolution probabilities ``[N, H, W, 1]`` in inference mode."""
    outs = []
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            outs.append(nets.forward_segmentor(segmentor, Tensor(images[lo:lo + batch_size])).y1.data)
    return np.concatenate(outs) if outs else np.zeros((0,) + images.shape[1:3] + (1,), np.float32)


def evaluate_dice(segmentor: ParamStore, images: np.ndarray, masks: np.ndarray) -> float:
    """Mean per-sample Dice score (0-100) of thresholded final predictions."""
    if len(images) == 0:
        return float("nan")
    probs = predict(segmentor, images)
    return float(np.mean([metrics.dice_score(p > 0.5, m > 0.5) for p, m in zip(probs, masks)]))


def networks_for(spec: NetworkSpec, config: TrainConfig) -> PassNetworks:
    return PassNetworks.build(replace(spec, dropout=config.dropout), config.seed)
