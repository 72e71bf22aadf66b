"""Layer-wise uniform quantizers with trainable clipping values.

Activations use a PACT-style unsigned quantizer on ``[0, alpha_x]``; weights
use a symmetric quantizer on ``[-alpha_w, alpha_w]`` whose levels are
``2*alpha_w*(k/(2^n-1) - 0.5)``. Rounding is half-away-from-zero everywhere.
Gradients w.r.t. the input pass straight through inside the clip range.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _make

ACT_ALPHA_INIT = 6.0
ALPHA_L2 = 5e-4
LLOYD_GRID = 512
ZERO_WEIGHT_ALPHA = 1e-3
# bit-width sentinel: clip with the trained clipping value but do not round
FP = "F"


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check(bits: int, alpha: float) -> None:
    if bits < 2:
        raise ValueError(f"bit width must be >= 2, got {bits}")
    if not alpha > 0:
        raise ValueError(f"clipping value must be > 0, got {alpha}")


@dataclass
class ActQuantizer:
    bits: int
    alpha: Tensor = field(default_factory=lambda: Tensor(np.array([ACT_ALPHA_INIT], np.float32), requires_grad=True))
    l2_scale: float = ALPHA_L2

    def __post_init__(self):
        if not isinstance(self.alpha, Tensor):
            self.alpha = Tensor(np.array([self.alpha], np.float32), requires_grad=True)
        _check(self.bits, float(self.alpha.data[0]))

    def __call__(self, x: Tensor, bits: int | str | None = None) -> Tensor:
        bits = self.bits if bits is None else bits
        return quantize_act(x, self.alpha, None if bits == FP else bits)

    def levels(self, bits: int | None = None) -> np.ndarray:
        n = (2 ** (bits or self.bits)) - 1
        return np.arange(n + 1) * (float(self.alpha.data[0]) / n)

    def regularizer(self) -> Tensor:
        """0.5 * l2_scale * alpha^2, so its gradient is l2_scale * alpha."""
        return (self.alpha * self.alpha).sum() * (0.5 * self.l2_scale)


@dataclass
class WeightQuantizer:
    bits: int
    alpha: Tensor = None

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = Tensor(np.array([1.0], np.float32), requires_grad=True)
        elif not isinstance(self.alpha, Tensor):
            self.alpha = Tensor(np.array([self.alpha], np.float32), requires_grad=True)
        _check(self.bits, float(self.alpha.data[0]))

    def __call__(self, w: Tensor, bits: int | str | None = None) -> Tensor:
        bits = self.bits if bits is None else bits
        return quantize_weight(w, self.alpha, None if bits == FP else bits)

    def levels(self, bits: int | None = None) -> np.ndarray:
        n = (2 ** (bits or self.bits)) - 1
        return 2 * float(self.alpha.data[0]) * (np.arange(n + 1) / n - 0.5)


def act_alpha_init() -> float:
    return ACT_ALPHA_INIT


def _alpha_tensor(alpha, dtype) -> Tensor:
    if isinstance(alpha, Tensor):
        return alpha
    return Tensor(np.array([alpha], dtype=dtype))


def quantize_act(x: Tensor, alpha, bits: int | None) -> Tensor:
    """Clip to ``[0, alpha]`` and round onto ``2^bits`` levels.

    ``bits=None`` clips without rounding (full-precision activations that keep
    the trained clipping value). Backward: identity for ``0 < x < alpha``;
    ``d/d alpha`` collects the upstream gradient where ``x > alpha``.
    """
    a = _alpha_tensor(alpha, x.dtype)
    av = a.data.reshape(()).astype(x.dtype)
    if bits is not None:
        _check(bits, float(av))
    else:
        _check(2, float(av))
    xc = np.clip(x.data, 0, av)
    if bits is None:
        out = xc
    else:
        n = 2 ** bits - 1
        out = (round_half_away(xc * (n / av)) * (av / n)).astype(x.dtype)
    inside = (x.data > 0) & (x.data < av)
    above = x.data > av

    def grad_fn(g):
        return g * inside, np.array([(g * above).sum()], dtype=a.dtype)

    return _make(out, (x, a), grad_fn, "quantize_act")


def quantize_weight(w: Tensor, alpha, bits: int | None) -> Tensor:
    """Symmetric weight quantizer; ``bits=None`` clips without rounding.

    Backward: straight-through inside ``[-alpha, alpha]``; ``d/d alpha`` is the
    upstream gradient where ``w > alpha`` and its negation where ``w < -alpha``.
    """
    a = _alpha_tensor(alpha, w.dtype)
    av = a.data.reshape(()).astype(w.dtype)
    _check(2 if bits is None else bits, float(av))
    wc = np.clip(w.data, -av, av)
    if bits is None:
        out = wc
    else:
        out = _weight_levels(wc, av, bits).astype(w.dtype)
    inside = (w.data >= -av) & (w.data <= av)
    sign = (w.data > av).astype(w.dtype) - (w.data < -av).astype(w.dtype)

    def grad_fn(g):
        return g * inside, np.array([(g * sign).sum()], dtype=a.dtype)

    return _make(out, (w, a), grad_fn, "quantize_weight")


def _weight_levels(wc: np.ndarray, alpha, bits: int) -> np.ndarray:
    n = 2 ** bits - 1
    unit = wc / (2 * alpha) + 0.5
    return 2 * alpha * (round_half_away(unit * n) / n - 0.5)


def weight_quant_error(w: np.ndarray, alphas: np.ndarray, bits: int) -> np.ndarray:
    """Squared reconstruction error ``sum (w - Q(w; alpha))^2`` for each alpha."""
    w = np.asarray(w, dtype=np.float64).reshape(1, -1)
    a = np.asarray(alphas, dtype=np.float64).reshape(-1, 1)
    q = _weight_levels(np.clip(w, -a, a), a, bits)
    return ((w - q) ** 2).sum(axis=1)


def lloyd_init_alpha_w(weights, bits: int, grid: int = LLOYD_GRID) -> float:
    """Clipping value minimizing the L2 quantization error of ``weights``.

    Dense search over ``grid`` candidates ``max|w| * k / grid`` for
    ``k = 1..grid``; ties go to the smallest candidate. An all-zero tensor
    warns and returns ``ZERO_WEIGHT_ALPHA``.
    """
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("cannot initialize a clipping value from an empty tensor")
    wmax = np.abs(w).max()
    if wmax == 0:
        warnings.warn("all-zero weights; using default clipping value", RuntimeWarning, stacklevel=2)
        return ZERO_WEIGHT_ALPHA
    cands = wmax * np.arange(1, grid + 1) / grid
    # chunk to bound memory on large layers
    errs = np.concatenate([weight_quant_error(w, c, bits) for c in np.array_split(cands, min(grid, max(1, w.size * grid // 4_000_000)))])
    return float(cands[int(np.argmin(errs))])
