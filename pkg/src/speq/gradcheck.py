"""Central finite-difference checks for every differentiable op and loss.

Each check draws small float64 inputs, reduces the op output to a scalar with
a fixed random projection, and compares tape gradients against
``(f(x + h) - f(x - h)) / 2h`` with ``h = 1e-4``. Inputs to piecewise ops are
drawn away from their kinks. The quantizers are not differentiable in the
finite-difference sense; their checks compare tape gradients against the
piecewise clipping-value formulas instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .quant import quantize_act, quantize_weight
from .tensor import Tensor, backward

STEP = 1e-4
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    passed: bool


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], i: int, h: float = STEP) -> np.ndarray:
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(arrays)
        x[idx] = old - h
        fm = f(arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def check_op(name: str, fn: Callable[..., Tensor], arrays: list[np.ndarray], rng: np.random.Generator,
             wrt: tuple[int, ...] | None = None, tol: float = TOLERANCE) -> CheckResult:
    """Compare tape and finite-difference gradients of ``sum(fn(*xs) * R)``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = tuple(range(len(arrays))) if wrt is None else wrt
    probe = fn(*[Tensor(a) for a in arrays])
    proj = rng.standard_normal(probe.shape)

    def scalar(arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * proj).sum())

    tensors = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = T.sum_(T.mul(fn(*tensors), proj))
    backward(out)
    err = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        err = max(err, rel_error(analytic, numeric_grad(scalar, arrays, i)))
    return CheckResult(name, err, err < tol)


def _away(rng, shape, kinks=(0.0,), margin=0.05, scale=1.0):
    x = rng.standard_normal(shape) * scale
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + np.where(x[close] >= k, margin, -margin) * 2
    return x


def _distinct(rng, shape, gap=0.01):
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _probs(rng, shape, t=1.0):
    return T.softmax_t(rng.standard_normal(shape) * 2, t)


def _cases(rng: np.random.Generator):
    """(name, fn, arrays, wrt) for every registered op."""
    y3 = rng.integers(0, 5, 3)
    p = _probs(rng, (3, 5))
    zt = rng.standard_normal((3, 5))
    cfg = L.DistillConfig(temperature=2.5, kind="cs", lam=0.3)
    cfg_kl = L.DistillConfig(temperature=2.5, kind="kl", lam=0.3)
    mean_ = rng.standard_normal(4)
    var = rng.random(4) + 0.5
    return [
        ("matmul", T.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], None),
        ("linear", T.linear, [rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)], None),
        ("conv2d_s1", lambda x, k: T.conv2d(x, k, 1, 1), [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3))], None),
        ("conv2d_s2", lambda x, k: T.conv2d(x, k, 2, 1), [rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))], None),
        ("conv2d_1x1_s2", lambda x, k: T.conv2d(x, k, 2, 0), [rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((3, 2, 1, 1))], None),
        ("add", T.add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], None),
        ("add_bias", T.add, [rng.standard_normal((3, 4)), rng.standard_normal(4)], None),
        ("add_scalar", T.add, [rng.standard_normal((3, 4)), rng.standard_normal(1)], None),
        ("mul", T.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], None),
        ("mul_scalar", T.mul, [rng.standard_normal((3, 4)), rng.standard_normal(1)], None),
        ("sum_axis", lambda x: T.sum_(x, axis=1), [rng.standard_normal((3, 4))], None),
        ("mean", T.mean, [rng.standard_normal((3, 4))], None),
        ("flatten", T.flatten, [rng.standard_normal((2, 3, 2, 2))], None),
        ("log", T.log, [rng.random((3, 4)) + 0.2], None),
        ("relu", T.relu, [_away(rng, (3, 4))], None),
        ("relu6", T.relu6, [_away(rng, (3, 4), kinks=(0.0, 6.0), scale=4.0)], None),
        ("clip", lambda x: T.clip(x, -1.0, 1.0), [_away(rng, (3, 4), kinks=(-1.0, 1.0))], None),
        ("maxpool2d", T.maxpool2d, [_distinct(rng, (2, 2, 4, 4))], None),
        ("global_avgpool", T.global_avgpool, [rng.standard_normal((2, 3, 2, 2))], None),
        ("batchnorm_batch", lambda x, g, b: T.batchnorm(x, g, b)[0],
         [rng.standard_normal((4, 3, 2, 2)), rng.standard_normal(3), rng.standard_normal(3)], None),
        ("batchnorm_dense", lambda x, g, b: T.batchnorm(x, g, b)[0],
         [rng.standard_normal((5, 3)), rng.standard_normal(3), rng.standard_normal(3)], None),
        ("batchnorm_fixed_stats", lambda x, g, b: T.batchnorm(x, g, b, mean_, var)[0],
         [rng.standard_normal((3, 4, 2, 2)), rng.standard_normal(4), rng.standard_normal(4)], None),
        ("pick", lambda x: T.pick(x, y3), [rng.standard_normal((3, 5))], None),
        ("softmax_t1", lambda z: T.softmax(z, 1.0), [rng.standard_normal((3, 5))], None),
        ("softmax_t4", lambda z: T.softmax(z, 4.0), [rng.standard_normal((3, 5))], None),
        ("log_softmax_t3", lambda z: T.log_softmax(z, 3.0), [rng.standard_normal((3, 5))], None),
        ("ce_loss", lambda z: L.ce_loss(y3, T.softmax(z, 1.0)), [rng.standard_normal((3, 5))], None),
        ("cross_entropy_logits", lambda z: L.cross_entropy_logits(z, y3), [rng.standard_normal((3, 5))], None),
        ("kl_loss", lambda z: L.kl_loss(p, T.softmax(z, 2.0)), [rng.standard_normal((3, 5))], None),
        ("cs_loss", lambda z: L.cs_loss(p, T.softmax(z, 2.0)), [rng.standard_normal((3, 5))], None),
        ("speq_loss_cs", lambda z: L.speq_loss(y3, z, zt, cfg), [rng.standard_normal((3, 5))], None),
        ("speq_loss_kl", lambda z: L.speq_loss(y3, z, zt, cfg_kl), [rng.standard_normal((3, 5))], None),
        ("speq_kd_loss", lambda z: L.speq_kd_loss(y3, z, zt, zt[::-1].copy(), cfg), [rng.standard_normal((3, 5))], None),
    ]


def _quantizer_formula_checks(rng: np.random.Generator) -> list[CheckResult]:
    results = []
    for bits in (2, 3, 4, 8):
        alpha = float(rng.uniform(0.5, 3.0))
        x = rng.uniform(-1.0, alpha + 1.0, (4, 6))
        g = rng.standard_normal(x.shape)
        xt, at = Tensor(x, requires_grad=True), Tensor(np.array([alpha]), requires_grad=True)
        backward(T.sum_(T.mul(quantize_act(xt, at, bits), g)))
        exp_x = g * ((x > 0) & (x < alpha))
        exp_a = (g * (x > alpha)).sum()
        err = max(rel_error(xt.grad, exp_x), rel_error(at.grad, np.array([exp_a])))
        results.append(CheckResult(f"quantize_act_{bits}b", err, err < 1e-12))

        w = rng.uniform(-alpha - 1.0, alpha + 1.0, (4, 6))
        wt, at = Tensor(w, requires_grad=True), Tensor(np.array([alpha]), requires_grad=True)
        backward(T.sum_(T.mul(quantize_weight(wt, at, bits), g)))
        exp_w = g * ((w >= -alpha) & (w <= alpha))
        exp_a = (g * (w > alpha)).sum() - (g * (w < -alpha)).sum()
        err = max(rel_error(wt.grad, exp_w), rel_error(at.grad, np.array([exp_a])))
        results.append(CheckResult(f"quantize_weight_{bits}b", err, err < 1e-12))
    return results


def run_all(seed: int = 0, tol: float = TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [check_op(name, fn, arrays, rng, wrt, tol) for name, fn, arrays, wrt in _cases(rng)]
    return results + _quantizer_formula_checks(rng)


def registered_ops() -> list[str]:
    return [c[0] for c in _cases(np.random.default_rng(0))]
