"""Finite-difference verification of every backward rule in the loss path.

Each check builds a small randomized problem, reduces the op output to a
scalar through a fixed projection, and compares the analytic gradient of
every input against central finite differences. The composed checks run
the actual loss functions, ending with the full training objective on a
two-network toy instance.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .fourier import MixConfig, augment
from .losses import (
    build_prediction_set,
    cacps_loss,
    dice_loss,
    kl_variance,
    one_hot_mask,
    supervised_loss,
    total_loss,
)
from .network import NetSpec, forward, init_pair
from .tensor import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-3


class GradcheckError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def _check_gradients(
    fn: Callable[[], Tensor], leaves: Sequence[Tensor], step: float
) -> float:
    """Max relative error over all leaves of d fn / d leaf vs central FD."""
    for leaf in leaves:
        leaf.grad = None
    fn().backward()
    worst = 0.0
    for leaf in leaves:
        if leaf.grad is None:
            raise GradcheckError("no gradient reached a checked input")
        analytic = np.array(leaf.grad, copy=True)
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = fn().item()
            flat[i] = keep - step
            lo = fn().item()
            flat[i] = keep
            nflat[i] = (hi - lo) / (2.0 * step)
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


def _leaf(rng: np.random.Generator, shape, transform=None) -> Tensor:
    data = rng.standard_normal(shape)
    if transform is not None:
        data = transform(data)
    return Tensor(data, requires_grad=True)


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    # keeps relu/pool kinks out of finite-difference reach
    sign = np.where(x >= 0, 1.0, -1.0)
    return x + sign * margin


def _proj(rng: np.random.Generator, like: Tensor) -> Tensor:
    return Tensor(rng.standard_normal(like.data.shape))


def _elementwise_checks(rng: np.random.Generator, step: float):
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (3, 4))
    pos = _leaf(rng, (3, 4), lambda x: np.abs(x) + 0.5)
    kinked = _leaf(rng, (3, 4), _away_from_zero)
    p = Tensor(rng.standard_normal((3, 4)))
    yield "add", lambda: T.reduce_sum((a + b) * p), [a, b]
    yield "sub", lambda: T.reduce_sum((a - b) * p), [a, b]
    yield "mul", lambda: T.reduce_sum((a * b) * p), [a, b]
    yield "div", lambda: T.reduce_sum((a / pos) * p), [a, pos]
    yield "neg", lambda: T.reduce_sum((-a) * p), [a]
    yield "exp", lambda: T.reduce_sum(T.exp(a * 0.5) * p), [a]
    yield "log", lambda: T.reduce_sum(T.log(pos) * p), [pos]
    yield "sqrt", lambda: T.reduce_sum(T.sqrt(pos) * p), [pos]
    yield "relu", lambda: T.reduce_sum(T.relu(kinked) * p), [kinked]


def _structural_checks(rng: np.random.Generator, step: float):
    x3 = _leaf(rng, (2, 3, 4))
    p_sum = Tensor(rng.standard_normal(3))
    p_mean = Tensor(rng.standard_normal((2, 1, 4)))
    yield "reduce_sum", lambda: T.reduce_sum(
        T.reduce_sum(x3, axes=(0, 2)) * p_sum
    ), [x3]
    yield "reduce_mean", lambda: T.reduce_sum(
        T.reduce_mean(x3, axes=(1,), keepdims=True) * p_mean
    ), [x3]

    ca = _leaf(rng, (1, 2, 3, 3))
    cb = _leaf(rng, (1, 3, 3, 3))
    pc = Tensor(rng.standard_normal((1, 5, 3, 3)))
    yield "concat_channels", lambda: T.reduce_sum(T.concat_channels([ca, cb]) * pc), [ca, cb]

    na = _leaf(rng, (2, 1, 3, 3))
    nb = _leaf(rng, (1, 1, 3, 3))
    pn = Tensor(rng.standard_normal((3, 1, 3, 3)))
    yield "concat_batch", lambda: T.reduce_sum(T.concat_batch(na, nb) * pn), [na, nb]

    tb = _leaf(rng, (4, 2, 2, 2))
    pt = Tensor(rng.standard_normal((2, 2, 2, 2)))
    idx = np.array([3, 1])
    yield "take_batch", lambda: T.reduce_sum(T.take_batch(tb, idx) * pt), [tb]

    # distinct entries keep the pool argmax stable under perturbation
    pool_in = Tensor(
        rng.permutation(32).astype(np.float64).reshape(1, 2, 4, 4) * 0.1,
        requires_grad=True,
    )
    pp = Tensor(rng.standard_normal((1, 2, 2, 2)))
    yield "max_pool2d", lambda: T.reduce_sum(T.max_pool2d(pool_in) * pp), [pool_in]

    up = _leaf(rng, (1, 2, 3, 3))
    pu = Tensor(rng.standard_normal((1, 2, 6, 6)))
    yield "nearest_upsample2", lambda: T.reduce_sum(T.nearest_upsample2(up) * pu), [up]

    sm = _leaf(rng, (2, 3, 4, 4))
    ps = Tensor(rng.standard_normal((2, 3, 4, 4)))
    yield "softmax_channels", lambda: T.reduce_sum(T.softmax_channels(sm) * ps), [sm]

    inorm = _leaf(rng, (2, 3, 4, 4))
    pi = Tensor(rng.standard_normal((2, 3, 4, 4)))
    yield "instance_norm", lambda: T.reduce_sum(T.instance_norm(inorm) * pi), [inorm]

    cx = _leaf(rng, (2, 2, 6, 6))
    ck = _leaf(rng, (3, 2, 3, 3))
    cbias = _leaf(rng, (3,))
    pcv = Tensor(rng.standard_normal((2, 3, 6, 6)))
    yield "conv2d", lambda: T.reduce_sum(
        T.conv2d(cx, ck, bias=cbias, stride=1, padding=1) * pcv
    ), [cx, ck, cbias]


def _composed_loss_checks(rng: np.random.Generator, step: float):
    n, c, h, w = 1, 2, 4, 4
    logits = _leaf(rng, (n, c, h, w))
    target = Tensor(one_hot_mask(rng.integers(0, c, size=(n, h, w)), c))
    yield "dice_loss", lambda: dice_loss(T.softmax_channels(logits), target), [logits]

    lo = _leaf(rng, (n, c, h, w))
    lf = _leaf(rng, (n, c, h, w))
    yield "kl_variance", lambda: T.reduce_mean(
        kl_variance(T.softmax_channels(lo), T.softmax_channels(lf))
    ), [lo, lf]

    raw = [_leaf(rng, (n, c, h, w)) for _ in range(4)]

    def cacps_scalar() -> Tensor:
        po1, pf1, po2, pf2 = (T.softmax_channels(t) for t in raw)
        preds = build_prediction_set(po1, pf1, po2, pf2)
        l_a, l_b = cacps_loss(preds)
        return l_a + l_b

    yield "cacps_loss", cacps_scalar, raw


def _toy_problem(size: int, seed: int):
    """Toy instance with a safe argmax margin on both ensembles.

    The pseudo labels inside the loss come from a hard argmax; a parameter
    nudged across a tie would make finite differences see a jump. Fresh
    initializations tie exactly wherever every feature is relu-dead (the
    zero-bias head then emits identical logits), so biases get a small
    jitter, and seeds retry until every ensemble pixel has a comfortable
    margin.
    """
    spec = NetSpec(in_channels=1, num_classes=2, base_width=2, depth=1)
    for attempt in range(50):
        s = seed + 1000 * attempt
        rng = np.random.default_rng(s)
        pair = init_pair(spec, s * 2 + 1, s * 2 + 2)
        for params in (pair.params_1, pair.params_2):
            for name, p in params.items():
                if name.endswith(".b"):
                    p.data = p.data + rng.uniform(-0.2, 0.2, p.data.shape)
        x = rng.random((1, 1, size, size))
        partner = rng.random((1, size, size))
        z = augment(x[0, 0], partner[0], MixConfig(lam=0.8, alpha=0.1))[None, None]
        mask = rng.integers(0, 2, size=(1, size, size))

        def forward_all():
            xt, zt = Tensor(x), Tensor(z)
            po1, pf1 = forward(spec, pair.params_1, xt), forward(spec, pair.params_1, zt)
            po2, pf2 = forward(spec, pair.params_2, xt), forward(spec, pair.params_2, zt)
            return build_prediction_set(po1, pf1, po2, pf2)

        preds = forward_all()
        margin = np.inf
        for e in (preds.p_e1, preds.p_e2):
            p = e.data
            diff = np.abs(p[:, 0] - p[:, 1])
            margin = min(margin, float(diff.min()))
        if margin > 1e-3:
            return spec, pair, x, z, mask, forward_all
    raise GradcheckError("could not find a toy instance with stable pseudo labels")


def _full_loss_check(size: int, seed: int, step: float) -> float:
    spec, pair, x, z, mask, forward_all = _toy_problem(size, seed)
    target = Tensor(one_hot_mask(mask, spec.num_classes))

    def loss_fn() -> Tensor:
        preds = forward_all()
        l_a, l_b = cacps_loss(preds)
        l_s, _ = supervised_loss(preds.p_o1, preds.p_o2, target)
        return total_loss(l_s, l_a + l_b, beta=3.0)

    leaves = [p for _, p in pair.all_params()]
    return _check_gradients(loss_fn, leaves, step)


def run_gradcheck(
    size: int = 8, seed: int = 0, step: float = DEFAULT_STEP, tol: float = DEFAULT_TOL
) -> list[CheckResult]:
    """Run every check and return one result row per op or composed loss."""
    results = []
    rng = np.random.default_rng(seed)
    for name, fn, leaves in _elementwise_checks(rng, step):
        results.append(CheckResult(name, _check_gradients(fn, leaves, step), tol))
    for name, fn, leaves in _structural_checks(rng, step):
        results.append(CheckResult(name, _check_gradients(fn, leaves, step), tol))
    for name, fn, leaves in _composed_loss_checks(rng, step):
        results.append(CheckResult(name, _check_gradients(fn, leaves, step), tol))
    results.append(CheckResult("full_loss", _full_loss_check(size, seed, step), tol))
    return results


def all_passed(results: Sequence[CheckResult]) -> bool:
    return all(r.passed for r in results)


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  {'max_rel_err':>12}  status"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name.ljust(width)}  {r.max_rel_err:>12.3e}  {status}")
    return "\n".join(lines)
