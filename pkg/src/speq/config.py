"""Experiment configuration as a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Lists are comma separated.
Bit widths accept an integer or ``F`` (full precision). Unknown keys and
out-of-range values are rejected at load time.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

TASKS = ("digits", "synthetic", "mnist", "cifar10-subset")
MODES = ("pretrain", "retrain", "speq", "speq+kd", "sweep", "greedy", "gradcheck", "diversity", "plotdata")
MODELS = ("cnn5", "resnet-small", "mlp")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str = "speq"
    task: str = "digits"
    data_dir: str = ""
    n_train: int = 0
    n_test: int = 0
    model: str = "cnn5"
    width: int = 16
    blocks: int = 1
    n_w: str = "2"
    n_a: str = "2"
    n_h: int = 8
    u: float = 0.5
    policy: str = "stochastic"
    temperature: float = 3.0
    loss: str = "cs"
    lam: float = 0.5
    per_example: bool = False
    quantize_first_last: bool = True
    batch_size: int = 128
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.1
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha_l2: float = 5e-4
    alpha_w_lr_mult: float = 0.01
    augment: str = "auto"
    seeds: list[int] = field(default_factory=lambda: [0])
    teacher_checkpoint: str = ""
    sweep_axis: str = "activation"
    sweep_bits: list[str] = field(default_factory=lambda: ["2", "4", "8", "F"])
    diversity_sample: int = 0
    diversity_assignments: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.mode in MODES, f"mode must be one of {MODES}")
        need(self.task in TASKS, f"task must be one of {TASKS}")
        need(self.model in MODELS, f"model must be one of {MODELS}")
        for key in ("n_w", "n_a"):
            v = getattr(self, key)
            need(v == "F" or (v.isdigit() and int(v) >= 2), f"{key} must be an integer >= 2 or F, got {v!r}")
        need(self.n_h >= 2, "n_h must be >= 2")
        if self.n_a != "F":
            need(int(self.n_a) <= self.n_h, "n_a must not exceed n_h")
        need(0.0 <= self.u <= 1.0, "u must lie in [0, 1]")
        need(self.policy in ("stochastic", "mix"), "policy must be stochastic or mix")
        need(self.temperature > 0, "temperature must be > 0")
        need(self.loss in ("cs", "kl"), "loss must be cs or kl")
        need(0.0 <= self.lam <= 1.0, "lam must lie in [0, 1]")
        need(self.width >= 1 and self.blocks >= 1, "width and blocks must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(min(self.pretrain_epochs, self.epochs, self.n_train, self.n_test) >= 0, "counts must be >= 0")
        need(self.lr > 0 and self.pretrain_lr > 0, "learning rates must be > 0")
        need(0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)")
        need(min(self.weight_decay, self.alpha_l2, self.alpha_w_lr_mult) >= 0, "regularization scales must be >= 0")
        need(self.augment in ("auto", "yes", "no"), "augment must be auto, yes or no")
        need(len(self.seeds) >= 1, "at least one seed is required")
        need(self.sweep_axis in ("weight", "activation"), "sweep_axis must be weight or activation")
        for b in self.sweep_bits:
            need(b == "F" or (b.isdigit() and int(b) >= 2), f"bad sweep bit width {b!r}")
        need(self.diversity_assignments >= 2, "diversity_assignments must be >= 2")

    # -- serialization
    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:12]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(types[key], val, key)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())


def _parse(kind: str, val: str, key: str):
    try:
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
        if kind == "bool":
            if val.lower() not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(val)
            return val.lower() in ("true", "yes", "1")
        if kind == "list[int]":
            return [int(v) for v in val.split(",") if v.strip()]
        if kind == "list[str]":
            return [v.strip() for v in val.split(",") if v.strip()]
        return val
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {kind}") from None


def bits_value(v: str):
    """``"F"`` stays the full-precision sentinel, anything else becomes an int."""
    return "F" if v == "F" else int(v)
