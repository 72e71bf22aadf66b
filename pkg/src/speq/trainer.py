"""Stochastic-precision self-distillation training.

Each step runs the network twice over the same parameters: the target
precision path (every activation at ``n_a`` bits, recorded on the tape) and
the stochastic precision path (per-layer bits drawn from ``{n_a, n_h}``, run
without recording). The second path's softened outputs are the soft labels
for the first; only the first path receives gradients.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, minibatches
from .losses import DistillConfig, cross_entropy_logits, speq_terms, teacher_term
from .network import ForwardContext, Network, accuracy, forward_with_bits, predict
from .optim import SGD, step_decay_lr
from .tensor import NonFiniteError, backward, no_grad

GREEDY_CAP = 12
POLICY_MODES = ("stochastic", "mix", "fixed")


@dataclass(frozen=True)
class PrecisionPolicy:
    n_a: int = 2
    n_h: int = 8
    u: float = 0.5
    mode: str = "stochastic"
    fixed_bits: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.u <= 1.0:
            raise ValueError(f"u must lie in [0, 1], got {self.u}")
        if not (2 <= self.n_a <= self.n_h):
            raise ValueError(f"need 2 <= n_a <= n_h, got n_a={self.n_a}, n_h={self.n_h}")
        if self.mode not in POLICY_MODES:
            raise ValueError(f"mode must be one of {POLICY_MODES}, got {self.mode!r}")
        if self.mode == "fixed" and (self.fixed_bits is None or self.fixed_bits < 2):
            raise ValueError("fixed mode needs fixed_bits >= 2")


def sample_assignment(policy: PrecisionPolicy, n_layers: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Per-layer activation bits: ``n_a`` with probability ``u``, else ``n_h``.

    ``mix`` draws each layer uniformly from ``n_a..n_h``; ``fixed`` repeats
    ``fixed_bits``.
    """
    if policy.mode == "fixed":
        return (int(policy.fixed_bits),) * n_layers
    if policy.mode == "mix":
        return tuple(int(b) for b in rng.integers(policy.n_a, policy.n_h + 1, n_layers))
    low = rng.random(n_layers) < policy.u
    return tuple(policy.n_a if l else policy.n_h for l in low)


@dataclass
class RunRecord:
    step: int
    epoch: int
    phase: str = ""
    seed: int = 0
    lr: float = 0.0
    ce_loss: float = math.nan
    distill_loss: float = math.nan
    teacher_loss: float = math.nan
    train_acc: float = math.nan
    test_acc: float = math.nan
    assignment: tuple = ()
    high_ratio: tuple = ()


def _ce_per_assignment(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float((lse - z[np.arange(len(y)), y]).mean())


def greedy_search(model: Network, x, y, n_a: int, n_h: int, bn_stats: dict | None = None,
                  cap: int = GREEDY_CAP) -> tuple[tuple[int, ...], dict[tuple[int, ...], float]]:
    """Exhaustive argmin of the cross-entropy over all ``2^L`` assignments.

    Returns the best assignment and the full table of losses. Ties go to the
    assignment with more ``n_h`` entries, then to the earliest in
    lexicographic order of the candidate list.
    """
    n_layers = model.n_act_layers
    if n_layers > cap:
        raise ValueError(f"greedy search over {n_layers} layers exceeds the cap of {cap}")
    table = {}
    with no_grad():
        for bits in itertools.product((n_a, n_h), repeat=n_layers):
            z = forward_with_bits(model, x, bits, bn_stats=bn_stats).data
            table[bits] = _ce_per_assignment(z, np.asarray(y))
    best = min(table, key=lambda b: (table[b], -sum(v == n_h for v in b)))
    return best, table


def greedy_assignment(model: Network, x, y, n_a: int, n_h: int, bn_stats: dict | None = None,
                      cap: int = GREEDY_CAP) -> tuple[int, ...]:
    return greedy_search(model, x, y, n_a, n_h, bn_stats, cap)[0]


def _spp_logits(model, x, assignment, stats, per_example_bits=None) -> np.ndarray:
    with no_grad():
        if per_example_bits is None:
            return forward_with_bits(model, x, assignment, bn_stats=stats).data
        out = None
        for bits in sorted(set(per_example_bits)):
            idx = [i for i, b in enumerate(per_example_bits) if b == bits]
            z = forward_with_bits(model, x[idx], bits, bn_stats=stats).data
            if out is None:
                out = np.zeros((len(x), z.shape[1]), z.dtype)
            out[idx] = z
        return out


def speq_step(model: Network, x, y, policy: PrecisionPolicy | None, cfg: DistillConfig, opt: SGD,
              rng: np.random.Generator | None = None, *, teacher: Network | None = None,
              greedy: bool = False, per_example: bool = False, distill_weight: float = 1.0,
              spp_override: np.ndarray | None = None, step: int = 0, epoch: int = 0) -> RunRecord:
    """One training step; ``policy=None`` skips the teacher path (plain retraining).

    ``spp_override`` replaces the sampled teacher logits by the given constants
    (used to check that nothing flows back through them).
    """
    y = np.asarray(y)
    tpp_bits = None if policy is None else [policy.n_a] * model.n_act_layers
    ctx = ForwardContext(act_bits=tpp_bits, train=True, update_running=True)
    z_tpp = model.forward(x, ctx)
    stats = ctx.bn_out
    rec = RunRecord(step=step, epoch=epoch, lr=opt.lr)
    ce = cross_entropy_logits(z_tpp, y)
    loss = ce
    if policy is not None:
        if greedy:
            assignment = greedy_assignment(model, x, y, policy.n_a, policy.n_h, stats)
            per_bits = None
        elif per_example:
            per_bits = [sample_assignment(policy, model.n_act_layers, rng) for _ in range(len(y))]
            assignment = per_bits[0]
        else:
            assignment = sample_assignment(policy, model.n_act_layers, rng)
            per_bits = None
        z_spp = spp_override if spp_override is not None else _spp_logits(model, x, assignment, stats, per_bits)
        ce, dist = speq_terms(y, z_tpp, z_spp, cfg)
        loss = T.add(ce, T.mul(dist, distill_weight))
        rec.assignment = tuple(assignment)
        rec.distill_loss = float(dist.data)
        if teacher is not None:
            tt = teacher_term(z_tpp, predict(teacher, x), cfg)
            loss = T.add(T.mul(loss, cfg.lam), T.mul(tt, 1.0 - cfg.lam))
            rec.teacher_loss = float(tt.data)
    reg = model.regularizer()
    if reg is not None:
        loss = T.add(loss, reg)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"non-finite loss at epoch {epoch} step {step}, assignment {rec.assignment}")
    opt.zero_grad()
    backward(loss)
    opt.step()
    rec.ce_loss = float(ce.data)
    rec.train_acc = float((z_tpp.data.argmax(axis=1) == y).mean())
    return rec


def retrain_step(model: Network, x, y, opt: SGD, step: int = 0, epoch: int = 0) -> RunRecord:
    """Cross-entropy-only quantized training step (the baseline)."""
    return speq_step(model, x, y, None, DistillConfig(), opt, step=step, epoch=epoch)


def pretrain_step(model: Network, x, y, opt: SGD, step: int = 0, epoch: int = 0) -> RunRecord:
    return speq_step(model, x, y, None, DistillConfig(), opt, step=step, epoch=epoch)


def track_ratio(records: Sequence[RunRecord], n_h: int) -> np.ndarray:
    """Per-epoch fraction of layers assigned ``n_h``; shape (epochs, L)."""
    by_epoch: dict[int, list] = {}
    for r in records:
        if r.assignment:
            by_epoch.setdefault(r.epoch, []).append([b == n_h for b in r.assignment])
    return np.array([np.mean(by_epoch[e], axis=0) for e in sorted(by_epoch)])


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def soft_label_diversity(model: Network, sample, assignments: Sequence[Sequence[int]],
                         temperature: float = 1.0) -> tuple[np.ndarray, float]:
    """Softmax output of one input under several activation assignments, and
    the largest pairwise total-variation distance among them."""
    x = np.asarray(sample, np.float32)
    if x.ndim == 3:
        x = x[None]
    with no_grad():
        probs = np.stack([T.softmax_t(forward_with_bits(model, x, a).data, temperature)[0] for a in assignments])
    dist = max((total_variation(a, b) for a, b in itertools.combinations(probs, 2)), default=0.0)
    return probs, dist


@dataclass
class TrainSettings:
    epochs: int
    lr: float
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 0.0
    alpha_w_lr_mult: float = 0.01
    augment: bool = False


@dataclass
class Phase:
    """What a training phase optimizes: plain CE, or self-distillation."""
    name: str
    policy: PrecisionPolicy | None = None
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher: Network | None = None
    greedy: bool = False
    per_example: bool = False


def fit(model: Network, train: Dataset, test: Dataset | None, settings: TrainSettings, phase: Phase,
        data_rng: np.random.Generator, precision_rng: np.random.Generator | None = None,
        seed: int = 0, on_record: Callable[[RunRecord], None] | None = None) -> list[RunRecord]:
    """Train for ``settings.epochs`` with step decay at 60% / 85%; test
    accuracy is attached to the last record of each epoch."""
    opt = SGD(model.param_groups(settings.weight_decay, settings.alpha_w_lr_mult), settings.lr, settings.momentum)
    records: list[RunRecord] = []
    step = 0
    n_h = phase.policy.n_h if phase.policy else None
    for epoch in range(settings.epochs):
        opt.lr = step_decay_lr(settings.lr, epoch, settings.epochs)
        high = []
        epoch_records = []
        for x, y in minibatches(train, settings.batch_size, data_rng, settings.augment):
            rec = speq_step(model, x, y, phase.policy, phase.distill, opt, precision_rng,
                            teacher=phase.teacher, greedy=phase.greedy, per_example=phase.per_example,
                            step=step, epoch=epoch)
            rec.phase, rec.seed = phase.name, seed
            if rec.assignment:
                high.append([b == n_h for b in rec.assignment])
                rec.high_ratio = tuple(float(v) for v in np.mean(high, axis=0))
            epoch_records.append(rec)
            step += 1
        if test is not None and epoch_records:
            epoch_records[-1].test_acc = accuracy(model, test.x, test.y)
        for rec in epoch_records:
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    return records
