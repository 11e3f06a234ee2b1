"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


# float32 round-off in the differenced losses is ~1e-7 * |f| / eps; gradients
# whose norm is below this floor are compared in absolute terms
NOISE_FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, NOISE_FLOOR)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), NOISE_FLOOR)
    return float(np.linalg.norm(a - n) / scale)


def numeric_gradient(fn: Callable[[], Tensor], target: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every element of ``target``."""
    grad = np.zeros(target.shape, dtype=np.float64)
    flat = target.data.reshape(-1)
    out = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            up = float(fn().data.sum(dtype=np.float64))
            flat[i] = original - eps
            down = float(fn().data.sum(dtype=np.float64))
            flat[i] = original
            out[i] = (up - down) / (2.0 * eps)
    return grad


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Largest relative error between analytic and numeric gradients over ``inputs``."""
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    T.backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape, dtype=np.float32)
        worst = max(worst, relative_error(analytic, numeric_gradient(fn, t, eps)))
    return worst


def _projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    # a random linear read-out exercises every output element with a distinct weight
    probe = {}

    def fn():
        out = out_fn()
        if "w" not in probe:
            probe["w"] = Tensor(rng.uniform(-1.0, 1.0, out.shape))
        return T.sum_(T.mul(out, probe["w"]))

    return fn


def _rand(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape))


def op_cases(seed: int) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Small random instances of every differentiable primitive."""
    rng = np.random.default_rng(seed)
    cases = {}

    x, k, b = _rand(rng, 2, 5, 5, 3), _rand(rng, 3, 3, 3, 4), _rand(rng, 4)
    cases["conv2d"] = (_projected(lambda: T.conv2d(x, k, b), rng), [x, k, b])
    x1, k1, b1 = _rand(rng, 2, 4, 4, 3), _rand(rng, 1, 1, 3, 2), _rand(rng, 2)
    cases["conv2d_1x1"] = (_projected(lambda: T.conv2d(x1, k1, b1), rng), [x1, k1, b1])
    xv, kv = _rand(rng, 1, 5, 5, 2), _rand(rng, 3, 3, 2, 2)
    cases["conv2d_valid"] = (_projected(lambda: T.conv2d(xv, kv, padding="valid"), rng), [xv, kv])

    xp = Tensor(rng.permutation(2 * 6 * 6 * 2).reshape(2, 6, 6, 2) / 72.0 - 0.5)
    cases["maxpool2"] = (_projected(lambda: T.maxpool2(xp), rng), [xp])
    xa = _rand(rng, 2, 4, 4, 2)
    cases["avgpool2"] = (_projected(lambda: T.avgpool2(xa), rng), [xa])
    xu = _rand(rng, 2, 3, 3, 2)
    cases["upsample2"] = (_projected(lambda: T.upsample2(xu), rng), [xu])

    xn, gn, sn = _rand(rng, 2, 4, 4, 3), _rand(rng, 3, low=0.5, high=1.5), _rand(rng, 3)
    cases["instance_norm"] = (_projected(lambda: T.instance_norm(xn, gn, sn), rng), [xn, gn, sn])

    xl = Tensor(rng.uniform(0.05, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))
    cases["leaky_relu"] = (_projected(lambda: T.leaky_relu(xl, 0.2), rng), [xl])
    xs = _rand(rng, 3, 4, low=-3, high=3)
    cases["sigmoid"] = (_projected(lambda: T.sigmoid(xs), rng), [xs])
    xm = _rand(rng, 1, 2, 2, 3, low=-2, high=2)
    cases["softmax_channel"] = (_projected(lambda: T.softmax_channel(xm), rng), [xm])

    xd, wd, bd = _rand(rng, 3, 5), _rand(rng, 5, 2), _rand(rng, 2)
    cases["dense"] = (_projected(lambda: T.dense(xd, wd, bd), rng), [xd, wd, bd])

    ea, eb = _rand(rng, 3, 4), _rand(rng, 1, 4, low=0.5, high=2.0)
    cases["arithmetic"] = (
        _projected(lambda: T.div(T.sub(T.mul(ea, eb), T.square(ea)), T.add(eb, 1.0)), rng),
        [ea, eb],
    )
    ep = _rand(rng, 2, 3, low=0.2, high=2.0)
    cases["log_exp_abs"] = (
        _projected(lambda: T.add(T.log(ep), T.abs_(T.exp(T.mul(ep, -0.5)))), rng), [ep])
    c1, c2 = _rand(rng, 1, 2, 2, 1), _rand(rng, 1, 2, 2, 2)
    cases["concat_flip"] = (
        _projected(lambda: T.flip_width_where(T.concat([c1, c2], axis=-1), np.array([True])), rng),
        [c1, c2])
    return cases


def _kink_margin(pre: np.ndarray, pooled_input: np.ndarray) -> float:
    # distance to the nearest ReLU hinge or max-pool tie
    win = np.sort(pooled_input.reshape(pooled_input.shape[0], pooled_input.shape[1] // 2, 2,
                                       pooled_input.shape[2] // 2, 2, -1)
                  .transpose(0, 1, 3, 5, 2, 4).reshape(-1, 4), axis=1)
    return float(min(np.abs(pre).min(), (win[:, 3] - win[:, 2]).min()))


def toy_network_case(seed: int, margin: float = 0.02):
    """Three-layer conv / norm / dense network with a random scalar read-out.

    Inputs are redrawn until every hinge and pooling tie is at least
    ``margin`` away, so central differences never straddle a kink.
    """
    rng = np.random.default_rng(seed)
    while True:
        x = _rand(rng, 2, 4, 4, 1)
        k1 = _rand(rng, 3, 3, 1, 3)
        g1, s1 = _rand(rng, 3, low=0.5, high=1.5), _rand(rng, 3)
        k2, b2 = _rand(rng, 3, 3, 3, 2), _rand(rng, 2)
        w3, b3 = _rand(rng, 8, 3), _rand(rng, 3)
        with T.no_grad():
            pre1 = T.instance_norm(T.conv2d(x, k1), g1, s1)
            pre2 = T.conv2d(T.leaky_relu(pre1), k2, b2)
        if min(np.abs(pre1.data).min(), _kink_margin(pre2.data, T.leaky_relu(pre2).data)) > margin:
            break

    def net():
        h = T.leaky_relu(T.instance_norm(T.conv2d(x, k1), g1, s1))
        h = T.maxpool2(T.leaky_relu(T.conv2d(h, k2, b2)))
        return T.sigmoid(T.dense(T.flatten(h), w3, b3))

    return _projected(net, rng), [x, k1, g1, s1, k2, b2, w3, b3]


def loss_cases(seed: int):
    """Random instances of every loss term, differentiated w.r.t. its soft inputs."""
    from . import losses as L

    rng = np.random.default_rng(seed)
    cases = {}
    pred = Tensor(rng.uniform(0.05, 0.95, (2, 4, 4, 1)))
    ref = Tensor((rng.random((2, 4, 4, 1)) > 0.5).astype(np.float32))
    cases["dice_loss"] = (lambda: L.dice_loss(pred, ref), [pred])

    side = [Tensor(rng.uniform(0.05, 0.95, (1, s, s, 1))) for s in (1, 2, 4, 8)]
    ref8 = Tensor((rng.random((1, 8, 8, 1)) > 0.5).astype(np.float32))
    cases["seg_side_loss"] = (lambda: L.seg_side_loss(side, ref8), side)

    a = Tensor(rng.uniform(0.1, 0.9, (1, 3, 3, 1)))
    a2 = Tensor(rng.uniform(0.1, 0.9, (1, 3, 3, 1)))
    r = Tensor((rng.random((1, 3, 3, 1)) > 0.5).astype(np.float32))
    # keep every |.| argument away from its kink
    a2.data[np.abs(a.data - a2.data) < 0.05] += 0.1
    cases["kl_loss"] = (lambda: L.kl_loss(a, a2, r), [a, a2])

    d = Tensor(rng.uniform(0.1, 0.9, (3, 1)))
    cases["adv_loss_real"] = (lambda: L.adv_loss_real(d), [d])
    cases["adv_loss_pred"] = (lambda: L.adv_loss_pred(d), [d])
    cases["adv_loss_seg"] = (lambda: L.adv_loss_seg(d), [d])

    fr = [Tensor(rng.normal(size=(2, 2, 2, 3))) for _ in range(2)]
    fp = [Tensor(rng.normal(size=(2, 2, 2, 3))) for _ in range(2)]
    cases["feature_loss"] = (lambda: L.feature_loss(fr, fp), fp + fr)

    z, zh = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(2, 8)))
    cases["encoder_loss"] = (lambda: L.encoder_loss(z, zh), [z, zh])
    return cases


def run_suite(seeds: Sequence[int] = (0, 1, 2, 3, 4), tolerance: float = 1e-2,
              eps: float = 1e-3, corrupt: str | None = None) -> list[GradCheckResult]:
    """Check every primitive, every loss and a toy network on each seed.

    ``corrupt`` names a case whose analytic gradient is deliberately scaled by
    1.5 before comparison; used as a negative control.
    """
    worst: dict[str, float] = {}
    for seed in seeds:
        cases = {**op_cases(seed), **loss_cases(seed), "toy_network": toy_network_case(seed)}
        for name, (fn, inputs) in cases.items():
            if name == corrupt:
                err = _corrupted_error(fn, inputs, eps)
            else:
                err = check_gradients(fn, inputs, eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return [GradCheckResult(name, err, tolerance) for name, err in worst.items()]


def _corrupted_error(fn, inputs, eps) -> float:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    T.backward(fn())
    return max(relative_error(1.5 * t.grad, numeric_gradient(fn, t, eps)) for t in inputs)
