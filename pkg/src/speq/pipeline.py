"""Pretrain -> retrain -> self-distillation pipeline, metrics and plot data."""

from __future__ import annotations

import csv
import logging
import math
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck
from .config import ExperimentConfig, bits_value
from .data import Dataset, load_cifar10, load_digits, load_mnist, synthetic
from .losses import DistillConfig, gradient_grid
from .network import (Network, accuracy, build_model, load_checkpoint, precision_sweep,
                      save_checkpoint)
from .trainer import (Phase, PrecisionPolicy, RunRecord, TrainSettings, fit, sample_assignment,
                      soft_label_diversity, track_ratio)

log = logging.getLogger(__name__)

# independent random streams per purpose, derived from one run seed
STREAMS = {"init": 0, "data:pretrain": 1, "data:retrain": 2, "data:speq": 3, "precision": 4, "diversity": 5,
           "data:greedy": 6}

COLUMNS = ["mode", "phase", "seed", "epoch", "step", "lr", "ce_loss", "distill_loss", "teacher_loss",
           "train_acc", "test_acc", "assignment", "high_ratio", "config_hash", "wall_clock"]
WALL_CLOCK_COLUMNS = ("wall_clock",)


def stream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[purpose],)))


def init_seed(seed: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(STREAMS["init"],)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data and models


def load_task(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, bool]:
    """(train, test, augment) for the configured task; subsets use a fixed order."""
    sub = np.random.default_rng(0)
    if cfg.task == "digits":
        train, test = load_digits()
    elif cfg.task == "synthetic":
        train, test = synthetic(cfg.n_train or 1000, seed=1), synthetic(cfg.n_test or 500, seed=2)
    elif cfg.task == "mnist":
        train = load_mnist(cfg.data_dir, "train", pad_to=32)
        test = load_mnist(cfg.data_dir, "test", pad_to=32)
    else:
        train = load_cifar10(cfg.data_dir, "train").subset(cfg.n_train or 10000, sub)
        test = load_cifar10(cfg.data_dir, "test").subset(cfg.n_test or 2000, sub)
    if cfg.task in ("digits", "mnist"):
        train, test = train.subset(cfg.n_train, sub), test.subset(cfg.n_test, sub)
    augment = cfg.augment == "yes" or (cfg.augment == "auto" and cfg.task == "cifar10-subset")
    return train, test, augment


def new_model(cfg: ExperimentConfig, data: Dataset, seed: int) -> Network:
    _, c, h, w = data.x.shape
    s = init_seed(seed)
    if cfg.model == "cnn5":
        return build_model("cnn5", in_channels=c, n_classes=10, width=cfg.width, image_size=h, seed=s)
    if cfg.model == "resnet-small":
        return build_model("resnet-small", in_channels=c, n_classes=10, width=cfg.width, blocks=cfg.blocks, seed=s)
    return build_model("mlp", in_features=c * h * w, n_classes=10, hidden=(4 * cfg.width, 4 * cfg.width), seed=s)


def policy_for(cfg: ExperimentConfig, u: float | None = None) -> PrecisionPolicy:
    return PrecisionPolicy(n_a=int(cfg.n_a), n_h=cfg.n_h, u=cfg.u if u is None else u,
                           mode="mix" if cfg.policy == "mix" else "stochastic")


def distill_for(cfg: ExperimentConfig) -> DistillConfig:
    return DistillConfig(temperature=cfg.temperature, kind=cfg.loss, lam=cfg.lam)


def quant_settings(cfg: ExperimentConfig, augment: bool) -> TrainSettings:
    # clipping-value L2 is the only regularizer once quantized
    return TrainSettings(cfg.epochs, cfg.lr, cfg.batch_size, cfg.momentum, 0.0, cfg.alpha_w_lr_mult, augment)


def pretrain(cfg, seed, train, test, augment=False, on_record=None) -> tuple[Network, list[RunRecord]]:
    model = new_model(cfg, train, seed)
    settings = TrainSettings(cfg.pretrain_epochs, cfg.pretrain_lr, cfg.batch_size, cfg.momentum,
                             cfg.weight_decay, cfg.alpha_w_lr_mult, augment)
    recs = fit(model, train, test, settings, Phase("pretrain"), stream(seed, "data:pretrain"), seed=seed,
               on_record=on_record)
    return model, recs


def retrain(cfg, seed, fp_model, train, test, augment=False, on_record=None) -> tuple[Network, list[RunRecord]]:
    """Quantize a copy of ``fp_model`` and train it with cross-entropy only."""
    model = fp_model.clone()
    model.quantize(bits_value(cfg.n_w), bits_value(cfg.n_a), cfg.quantize_first_last, cfg.alpha_l2)
    recs = fit(model, train, test, quant_settings(cfg, augment), Phase("retrain"), stream(seed, "data:retrain"),
               seed=seed, on_record=on_record)
    return model, recs


def continue_retrain(cfg, seed, q_model, train, test, augment=False, on_record=None):
    """Cross-entropy-only continuation with the same schedule and data order
    as :func:`speq_train` (a like-for-like baseline)."""
    model = q_model.clone()
    recs = fit(model, train, test, quant_settings(cfg, augment), Phase("retrain+"), stream(seed, "data:speq"),
               seed=seed, on_record=on_record)
    return model, recs


def speq_train(cfg, seed, q_model, train, test, augment=False, teacher: Network | None = None,
               greedy: bool = False, u: float | None = None, on_record=None) -> tuple[Network, list[RunRecord]]:
    model = q_model.clone()
    name = "greedy" if greedy else ("speq+kd" if teacher is not None else "speq")
    phase = Phase(name, policy_for(cfg, u), distill_for(cfg), teacher, greedy, cfg.per_example)
    recs = fit(model, train, test, quant_settings(cfg, augment), phase,
               stream(seed, "data:greedy" if greedy else "data:speq"), stream(seed, "precision"),
               seed=seed, on_record=on_record)
    return model, recs


# ---------------------------------------------------------------------------
# outputs


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, tuple):
        return ";".join(_fmt(x) for x in v)
    return str(v)


class MetricsWriter:
    """Append-only CSV with one fixed header."""

    def __init__(self, path, mode: str, config_hash: str):
        self.path = Path(path)
        self.mode, self.config_hash = mode, config_hash
        if self.path.exists() and self.path.stat().st_size:
            with open(self.path, newline="") as fh:
                header = next(csv.reader(fh))
            if header != COLUMNS:
                raise ValueError(f"{self.path} has a different header")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(COLUMNS)

    def __call__(self, rec: RunRecord) -> None:
        row = {"mode": self.mode, "config_hash": self.config_hash, "wall_clock": f"{time.time():.3f}"}
        for k in COLUMNS:
            if k not in row:
                row[k] = _fmt(getattr(rec, k))
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([row[k] for k in COLUMNS])


def final_test_acc(records: Sequence[RunRecord]) -> float:
    accs = [r.test_acc for r in records if not math.isnan(r.test_acc)]
    return accs[-1] if accs else math.nan


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


SUMMARY_COLUMNS = ["mode", "config_hash", "n_seeds", "seeds", "test_accs", "mean_test_acc", "std_test_acc"]


def write_summary(path, mode: str, config_hash: str, seeds: Sequence[int], accs: Sequence[float]) -> None:
    """Append one mean/std row for a finished multi-seed run."""
    path = Path(path)
    m, s = mean_std(accs)
    fresh = not path.exists() or not path.stat().st_size
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(SUMMARY_COLUMNS)
        w.writerow([mode, config_hash, len(seeds), ";".join(map(str, seeds)), ";".join(repr(float(a)) for a in accs),
                    repr(m), repr(s)])


def _write_tsv(path, header: Sequence[str], rows, delimiter: str = "\t") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def emit_plot_data(kind: str, out_dir, **inputs) -> list[Path]:
    """Write plot-ready TSV files.

    ``fig3``: ground-truth-logit gradient grids for both losses, from the
    closed forms (``n``, ``n_classes``). ``fig2a``: per-epoch high-precision
    selection ratio (``ratios`` of shape (epochs, L), optional ``name``).
    ``fig2b``: one softmax row per assignment (``probs``, ``assignments``).
    """
    out_dir = Path(out_dir)
    if kind == "fig3":
        paths = []
        for loss in ("kl", "cs"):
            q, p, g = gradient_grid(loss, inputs.get("n", 51), inputs.get("n_classes", 10))
            rows = [(repr(float(p[a])), repr(float(q[b])), repr(float(g[a, b]))) for a in range(len(p)) for b in range(len(q))]
            paths.append(_write_tsv(out_dir / f"fig3_{loss}.tsv", ["p_teacher", "q_student", "grad"], rows))
        return paths
    if kind == "fig2a":
        ratios = np.asarray(inputs["ratios"])
        header = ["epoch"] + [f"layer{i + 1}" for i in range(ratios.shape[1])]
        rows = [[e] + [repr(float(v)) for v in r] for e, r in enumerate(ratios)]
        return [_write_tsv(out_dir / inputs.get("name", "fig2a.tsv"), header, rows)]
    if kind == "fig2b":
        probs = np.asarray(inputs["probs"])
        header = ["assignment"] + [f"class{c}" for c in range(probs.shape[1])]
        rows = [[";".join(map(str, a))] + [repr(float(v)) for v in p] for a, p in zip(inputs["assignments"], probs)]
        return [_write_tsv(out_dir / inputs.get("name", "fig2b.tsv"), header, rows)]
    raise ValueError(f"unknown plot kind {kind!r}")


# ---------------------------------------------------------------------------
# orchestration

UPSTREAM = {"retrain": "pretrain", "speq": "retrain", "speq+kd": "retrain", "greedy": "retrain"}


def _upstream(cfg, out_dir: Path, seed: int, checkpoint) -> Network:
    path = Path(checkpoint) if checkpoint else out_dir / f"{UPSTREAM[cfg.mode]}_s{seed}.npz"
    if not path.exists():
        raise FileNotFoundError(f"missing upstream checkpoint for {cfg.mode}: {path}")
    return load_checkpoint(path)[0]


def run_pipeline(cfg: ExperimentConfig, out_dir, checkpoint=None) -> dict:
    """Run ``cfg.mode`` for every seed; returns a dict of produced artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = cfg.mode
    result: dict = {"mode": mode, "files": []}

    if mode == "gradcheck":
        checks = gradcheck.run_all()
        rows = [(c.name, repr(float(c.rel_error)), "pass" if c.passed else "FAIL") for c in checks]
        result["files"].append(_write_tsv(out_dir / "gradcheck.tsv", ["op", "rel_error", "status"], rows))
        result["ok"] = all(c.passed for c in checks)
        return result
    if mode == "plotdata":
        result["files"] += emit_plot_data("fig3", out_dir)
        result["ok"] = True
        return result

    train, test, augment = load_task(cfg)
    if mode == "speq+kd" and not cfg.teacher_checkpoint:
        raise ValueError("speq+kd needs teacher_checkpoint")
    teacher = load_checkpoint(cfg.teacher_checkpoint)[0] if cfg.teacher_checkpoint else None

    if mode == "sweep":
        rows = []
        targets = [(None, Path(checkpoint))] if checkpoint else [(s, out_dir / f"retrain_s{s}.npz") for s in cfg.seeds]
        for s, path in targets:
            if not path.exists():
                raise FileNotFoundError(f"missing checkpoint for sweep: {path}")
            model = load_checkpoint(path)[0]
            for b, acc in precision_sweep(model, test.x, test.y, cfg.sweep_axis, [bits_value(v) for v in cfg.sweep_bits]):
                rows.append(("" if s is None else s, cfg.sweep_axis, b, repr(float(acc))))
        result["files"].append(_write_tsv(out_dir / "sweep.csv", ["seed", "axis", "bits", "accuracy"], rows, ","))
        result["rows"] = rows
        return result

    if mode == "diversity":
        if not checkpoint:
            raise FileNotFoundError("diversity needs --checkpoint")
        model = load_checkpoint(checkpoint)[0]
        pol = policy_for(cfg)
        rng = stream(cfg.seeds[0], "diversity")
        L = model.n_act_layers
        assigns = [(pol.n_a,) * L, (pol.n_h,) * L]
        assigns += [sample_assignment(pol, L, rng) for _ in range(cfg.diversity_assignments - 2)]
        probs, dist = soft_label_diversity(model, test.x[cfg.diversity_sample], assigns)
        result["files"] += emit_plot_data("fig2b", out_dir, probs=probs, assignments=assigns)
        result["max_tv"] = dist
        return result

    writer = MetricsWriter(out_dir / "metrics.csv", mode, cfg.hash())
    accs = []
    for seed in cfg.seeds:
        if mode == "pretrain":
            model, recs = pretrain(cfg, seed, train, test, augment, writer)
        elif mode == "retrain":
            model, recs = retrain(cfg, seed, _upstream(cfg, out_dir, seed, checkpoint), train, test, augment, writer)
        else:
            model, recs = speq_train(cfg, seed, _upstream(cfg, out_dir, seed, checkpoint), train, test, augment,
                                     teacher=teacher, greedy=mode == "greedy", on_record=writer)
            if mode == "greedy":
                result["files"] += emit_plot_data("fig2a", out_dir, ratios=track_ratio(recs, cfg.n_h),
                                                  name=f"fig2a_s{seed}.tsv")
        path = save_checkpoint(model, out_dir / f"{mode}_s{seed}.npz", {"seed": seed, "mode": mode})
        result["files"].append(path)
        accs.append(final_test_acc(recs))
        log.info("%s seed %d: test accuracy %.4f", mode, seed, accs[-1])
    write_summary(out_dir / "summary.csv", mode, cfg.hash(), cfg.seeds, accs)
    result["files"] += [out_dir / "metrics.csv", out_dir / "summary.csv"]
    result["test_accs"] = accs
    result["mean"], result["std"] = mean_std(accs)
    return result
