"""Quantizable networks and multi-precision forward passes.

A network owns its parameters once. Every forward, whatever the per-layer
activation precision, reads the same weight and clipping-value tensors, so a
teacher pass at mixed precision and the student pass at the target precision
share everything by reference.

Bit widths are ints or :data:`speq.quant.FP`. For an activation layer with a
quantizer, ``FP`` clips at the trained ``alpha_x`` without rounding; without a
quantizer the layer is a plain ReLU6.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .optim import ParamGroup
from .quant import ALPHA_L2, FP, ActQuantizer, WeightQuantizer, act_alpha_init, lloyd_init_alpha_w
from .tensor import Tensor, no_grad

CHECKPOINT_VERSION = 1


@dataclass
class ForwardContext:
    act_bits: Sequence | None = None
    weight_bits: int | str | None = None
    train: bool = False
    bn_in: dict | None = None
    bn_out: dict = field(default_factory=dict)
    update_running: bool = False


def _check_bits(b) -> None:
    if b == FP:
        return
    if not isinstance(b, (int, np.integer)) or b < 2:
        raise ValueError(f"bit width must be an int >= 2 or {FP!r}, got {b!r}")


class Layer:
    name: str = ""

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []


class Conv(Layer):
    def __init__(self, name, cin, cout, k=3, stride=1, pad=1, rng=None):
        self.name, self.stride, self.pad = name, stride, pad
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32), requires_grad=True)
        self.wq: WeightQuantizer | None = None

    def __call__(self, x, ctx):
        return T.conv2d(x, _quantized_weight(self, ctx), self.stride, self.pad)

    def params(self):
        out = [(f"{self.name}.weight", self.weight)]
        if self.wq is not None:
            out.append((f"{self.name}.alpha_w", self.wq.alpha))
        return out


class Dense(Layer):
    def __init__(self, name, fin, fout, rng=None):
        self.name = name
        std = np.sqrt(2.0 / fin)
        self.weight = Tensor((rng.standard_normal((fout, fin)) * std).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(fout, np.float32), requires_grad=True)
        self.wq: WeightQuantizer | None = None

    def __call__(self, x, ctx):
        return T.linear(x, _quantized_weight(self, ctx), self.bias)

    def params(self):
        out = [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]
        if self.wq is not None:
            out.append((f"{self.name}.alpha_w", self.wq.alpha))
        return out


def _quantized_weight(layer, ctx) -> Tensor:
    bits = ctx.weight_bits
    if layer.wq is None:
        if bits not in (None, FP):
            raise ValueError(f"{layer.name} has no weight quantizer; cannot run at {bits} bits")
        return layer.weight
    return layer.wq(layer.weight, bits)


class BatchNorm(Layer):
    momentum = 0.1

    def __init__(self, name, c):
        self.name = name
        self.gamma = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)

    def __call__(self, x, ctx):
        if not ctx.train:
            out, _, _ = T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var)
            return out
        if ctx.bn_in is not None:
            mean, var = ctx.bn_in[self.name]
            out, _, _ = T.batchnorm(x, self.gamma, self.beta, mean, var)
            return out
        out, mean, var = T.batchnorm(x, self.gamma, self.beta)
        ctx.bn_out[self.name] = (mean, var)
        if ctx.update_running:
            m = x.data.size // x.shape[1]
            unbiased = var * (m / max(m - 1, 1))
            self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(np.float32)
            self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(np.float32)
        return out

    def params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean), (f"{self.name}.running_var", self.running_var)]


class Act(Layer):
    """ReLU6 in full precision; PACT clip-and-round once a quantizer is attached."""

    def __init__(self, name, index):
        self.name, self.index = name, index
        self.aq: ActQuantizer | None = None

    def __call__(self, x, ctx):
        bits = ctx.act_bits[self.index] if ctx.act_bits is not None else None
        if self.aq is None:
            if bits not in (None, FP):
                raise ValueError(f"{self.name} has no activation quantizer; cannot run at {bits} bits")
            return T.relu6(x)
        return self.aq(x, bits)

    def params(self):
        return [] if self.aq is None else [(f"{self.name}.alpha_x", self.aq.alpha)]


class Network:
    """Base class: subclasses build ``self.layers`` and implement ``_forward``."""

    arch = ""

    def __init__(self, **kwargs):
        self.kwargs = kwargs
        self.layers: list[Layer] = []

    # -- structure
    def _add(self, layer):
        self.layers.append(layer)
        return layer

    def _act(self):
        n = len(self.act_layers)
        return self._add(Act(f"act{n + 1}", n))

    @property
    def act_layers(self) -> list[Act]:
        return [l for l in self.layers if isinstance(l, Act)]

    @property
    def weight_layers(self) -> list[Layer]:
        return [l for l in self.layers if isinstance(l, (Conv, Dense))]

    @property
    def n_act_layers(self) -> int:
        return len(self.act_layers)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [p for l in self.layers for p in l.params()]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_groups(self, weight_decay: float = 0.0, alpha_w_lr_mult: float = 0.01) -> list[ParamGroup]:
        """Optimizer groups: weight clipping values get a reduced learning rate
        and no decay; activation clipping values are regularized in the loss."""
        groups = []
        for name, t in self.named_parameters():
            if name.endswith(".alpha_w"):
                groups.append(ParamGroup(t, alpha_w_lr_mult, 0.0, name))
            elif name.endswith(".alpha_x"):
                groups.append(ParamGroup(t, 1.0, 0.0, name))
            else:
                groups.append(ParamGroup(t, 1.0, weight_decay, name))
        return groups

    def regularizer(self) -> Tensor | None:
        terms = [a.aq.regularizer() for a in self.act_layers if a.aq is not None]
        if not terms:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    # -- quantization
    @property
    def act_bits(self):
        return [a.aq.bits if a.aq is not None else FP for a in self.act_layers]

    def quantize(self, n_w, n_a, quantize_first_last: bool = True, alpha_l2: float = ALPHA_L2) -> None:
        """Attach quantizers: ``alpha_x`` starts at 6, ``alpha_w`` at the
        L2-optimal clipping value of the current weights."""
        if n_a != FP and n_a is not None:
            _check_bits(n_a)
            for a in self.act_layers:
                a.aq = ActQuantizer(int(n_a), act_alpha_init(), alpha_l2)
        if n_w != FP and n_w is not None:
            _check_bits(n_w)
            wl = self.weight_layers
            if not quantize_first_last:
                wl = wl[1:-1]
            for l in wl:
                l.wq = WeightQuantizer(int(n_w), lloyd_init_alpha_w(l.weight, int(n_w)))

    # -- forward
    def forward(self, x, ctx: ForwardContext | None = None) -> Tensor:
        ctx = ctx or ForwardContext()
        if ctx.act_bits is not None:
            if len(ctx.act_bits) != self.n_act_layers:
                raise ValueError(f"expected {self.n_act_layers} activation bit widths, got {len(ctx.act_bits)}")
            for b in ctx.act_bits:
                _check_bits(b)
        if ctx.weight_bits is not None:
            _check_bits(ctx.weight_bits)
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, np.float32))
        return self._forward(x, ctx)

    def __call__(self, x, **kw) -> Tensor:
        return self.forward(x, ForwardContext(**kw))

    def _forward(self, x, ctx):
        raise NotImplementedError

    # -- state
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: t.data.copy() for n, t in self.named_parameters()}
        for l in self.layers:
            state.update({n: b.copy() for n, b in l.buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for l in self.layers:
            for n, t in l.params():
                t.data = np.asarray(state[n], dtype=t.dtype).copy()
            if isinstance(l, BatchNorm):
                l.running_mean = np.asarray(state[f"{l.name}.running_mean"], np.float32).copy()
                l.running_var = np.asarray(state[f"{l.name}.running_var"], np.float32).copy()

    def clone(self) -> "Network":
        """Independent deep copy (parameters, quantizers, running statistics)."""
        other = build_model(self.arch, **self.kwargs)
        other.apply_quant_meta(self.quant_meta())
        other.load_state_dict(self.state_dict())
        return other

    def quant_meta(self) -> dict:
        return {
            "act_bits": {a.name: a.aq.bits for a in self.act_layers if a.aq is not None},
            "alpha_l2": {a.name: a.aq.l2_scale for a in self.act_layers if a.aq is not None},
            "weight_bits": {l.name: l.wq.bits for l in self.weight_layers if l.wq is not None},
        }

    def apply_quant_meta(self, meta: dict) -> None:
        for a in self.act_layers:
            if a.name in meta["act_bits"]:
                l2 = meta.get("alpha_l2", {}).get(a.name, ALPHA_L2)
                a.aq = ActQuantizer(int(meta["act_bits"][a.name]), act_alpha_init(), l2)
        for l in self.weight_layers:
            if l.name in meta["weight_bits"]:
                l.wq = WeightQuantizer(int(meta["weight_bits"][l.name]), 1.0)


class CNN5(Network):
    """Five 3x3 conv layers, each followed by batchnorm and an activation
    quantizer; max pooling before the quantizer after conv2, conv4 and conv5."""

    arch = "cnn5"

    def __init__(self, in_channels=1, n_classes=10, width=16, image_size=8, seed=0):
        super().__init__(in_channels=in_channels, n_classes=n_classes, width=width, image_size=image_size, seed=seed)
        if image_size % 8:
            raise ValueError(f"cnn5 needs image_size divisible by 8, got {image_size}")
        rng = np.random.default_rng(seed)
        w = width
        chans = [(in_channels, w), (w, w), (w, 2 * w), (2 * w, 2 * w), (2 * w, 2 * w)]
        self.blocks = []
        for i, (ci, co) in enumerate(chans, start=1):
            conv = self._add(Conv(f"conv{i}", ci, co, rng=rng))
            bn = self._add(BatchNorm(f"bn{i}", co))
            act = self._act()
            self.blocks.append((conv, bn, i in (2, 4, 5), act))
        side = image_size // 8
        self.fc = self._add(Dense("fc", 2 * w * side * side, n_classes, rng=rng))

    def _forward(self, x, ctx):
        for conv, bn, pool, act in self.blocks:
            x = bn(conv(x, ctx), ctx)
            if pool:
                x = T.maxpool2d(x)
            x = act(x, ctx)
        return self.fc(T.flatten(x), ctx)


class ResNetSmall(Network):
    """ResNet20-style three-stage network with ``blocks`` basic blocks per stage."""

    arch = "resnet-small"

    def __init__(self, in_channels=1, n_classes=10, width=16, blocks=1, seed=0):
        super().__init__(in_channels=in_channels, n_classes=n_classes, width=width, blocks=blocks, seed=seed)
        rng = np.random.default_rng(seed)
        self.stem = (self._add(Conv("conv0", in_channels, width, rng=rng)), self._add(BatchNorm("bn0", width)), self._act())
        self.units = []
        cin = width
        for s, cout in enumerate((width, 2 * width, 4 * width), start=1):
            for b in range(1, blocks + 1):
                stride = 2 if (s > 1 and b == 1) else 1
                p = f"s{s}b{b}"
                c1 = self._add(Conv(f"{p}.conv1", cin, cout, stride=stride, rng=rng))
                n1 = self._add(BatchNorm(f"{p}.bn1", cout))
                a1 = self._act()
                c2 = self._add(Conv(f"{p}.conv2", cout, cout, rng=rng))
                n2 = self._add(BatchNorm(f"{p}.bn2", cout))
                short = None
                if stride != 1 or cin != cout:
                    short = (self._add(Conv(f"{p}.short", cin, cout, k=1, stride=stride, pad=0, rng=rng)),
                             self._add(BatchNorm(f"{p}.short_bn", cout)))
                a2 = self._act()
                self.units.append((c1, n1, a1, c2, n2, short, a2))
                cin = cout
        self.fc = self._add(Dense("fc", cin, n_classes, rng=rng))

    def _forward(self, x, ctx):
        conv, bn, act = self.stem
        x = act(bn(conv(x, ctx), ctx), ctx)
        for c1, n1, a1, c2, n2, short, a2 in self.units:
            h = a1(n1(c1(x, ctx), ctx), ctx)
            h = n2(c2(h, ctx), ctx)
            s = x if short is None else short[1](short[0](x, ctx), ctx)
            x = a2(T.add(h, s), ctx)
        return self.fc(T.global_avgpool(x), ctx)


class MLP(Network):
    arch = "mlp"

    def __init__(self, in_features=64, n_classes=10, hidden=(64, 64), seed=0):
        super().__init__(in_features=in_features, n_classes=n_classes, hidden=list(hidden), seed=seed)
        rng = np.random.default_rng(seed)
        self.hidden = []
        fin = in_features
        for i, h in enumerate(hidden, start=1):
            self.hidden.append((self._add(Dense(f"fc{i}", fin, h, rng=rng)), self._act()))
            fin = h
        self.fc = self._add(Dense("fc", fin, n_classes, rng=rng))

    def _forward(self, x, ctx):
        x = T.flatten(x) if x.data.ndim > 2 else x
        for dense, act in self.hidden:
            x = act(dense(x, ctx), ctx)
        return self.fc(x, ctx)


ARCHITECTURES = {cls.arch: cls for cls in (CNN5, ResNetSmall, MLP)}


def build_model(name: str, **kwargs) -> Network:
    try:
        cls = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    return cls(**kwargs)


def forward_with_bits(model: Network, x, bits: Sequence | None, weight_bits=None, bn_stats: dict | None = None) -> Tensor:
    """Logits with the given per-layer activation bit widths.

    Without ``bn_stats`` batchnorm uses running statistics; with them (a dict
    from a training-mode forward) those batch statistics are reused. Model
    state is never modified.
    """
    ctx = ForwardContext(act_bits=list(bits) if bits is not None else None, weight_bits=weight_bits,
                         train=bn_stats is not None, bn_in=bn_stats)
    return model.forward(x, ctx)


def predict(model: Network, x: np.ndarray, bits=None, weight_bits=None, batch_size: int = 500) -> np.ndarray:
    """Eval-mode logits as a plain array."""
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward_with_bits(model, x[i:i + batch_size], bits, weight_bits).data)
    return np.concatenate(out) if out else np.zeros((0, 0), np.float32)


def accuracy(model: Network, x: np.ndarray, y: np.ndarray, bits=None, weight_bits=None) -> float:
    if len(x) == 0:
        raise ValueError("empty dataset")
    return float((predict(model, x, bits, weight_bits).argmax(axis=1) == y).mean())


def precision_sweep(model: Network, x: np.ndarray, y: np.ndarray, axis: str, bit_list: Sequence) -> list[tuple]:
    """Accuracy at each bit width along one axis, the other axis as trained.

    Clipping values stay as trained; only the number of levels changes, and
    weights are re-quantized from the full-precision master copy.
    """
    if len(x) == 0:
        raise ValueError("empty dataset")
    if axis not in ("weight", "activation"):
        raise ValueError(f"axis must be 'weight' or 'activation', got {axis!r}")
    rows = []
    for b in bit_list:
        b = FP if b in (FP, "f", None) else int(b)
        if axis == "activation":
            acc = accuracy(model, x, y, bits=[b] * model.n_act_layers)
        else:
            acc = accuracy(model, x, y, weight_bits=b)
        rows.append((b, acc))
    return rows


# ---------------------------------------------------------------------------
# checkpoints: a numpy .npz archive, one array per named tensor, plus a
# "__meta__" entry holding a JSON document:
#   {"version": 1, "arch": str, "kwargs": {...},
#    "quant": {"act_bits": {layer: n}, "weight_bits": {layer: n}}, "extra": {...}}


def save_checkpoint(model: Network, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": CHECKPOINT_VERSION, "arch": model.arch, "kwargs": model.kwargs,
            "quant": model.quant_meta(), "extra": extra or {}}
    arrays = model.state_dict()
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> tuple[Network, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        model = build_model(meta["arch"], **meta["kwargs"])
        model.apply_quant_meta(meta["quant"])
        model.load_state_dict({k: z[k] for k in z.files if k != "__meta__"})
    return model, meta.get("extra", {})
