"""Experiment configuration as flat ``section.key = value`` text.

Example::

    # 4-joint desk arm
    arm.variant = four
    arm.n_joints = 4
    model.n_hidden = 128
    train.epochs = 16
    infer.eta0 = 0.1
    seed = 3

Blank lines and ``#`` comments are ignored. Every key must be known; values
are converted to the type of the field's default (``none`` clears optional
fields).
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class ArmSection:
    variant: str = "four"
    n_joints: int = 4
    tilt_max: float | None = None  # None: variant default
    stretch_max: float | None = None
    base_height: float | None = None
    gear_radius: float | None = None


@dataclass
class ModelSection:
    n_hidden: int = 128
    n_alif: int | None = None
    alpha: float | None = None
    rho: float | None = None
    zeta: float = 0.03
    v_thr: float = 0.61
    lambda_pd: float = 0.3
    pd_dead_steps: int = 5
    adaptive_reset: bool = False


@dataclass
class TrainSection:
    batch_size: int = 128
    lr0: float = 0.001
    lr_decay: float = 0.5
    lr_decay_every: int = 10_000
    reg_factor: float = 0.001
    target_rate: float = 0.02
    epochs: int = 64
    init_gain: float = 1.0
    zero_self_recurrence: bool = False
    checkpoint_every: int = 0


@dataclass
class DataSection:
    train_samples: int = 100_000
    test_samples: int = 10_000
    p_edge: float = 0.05


@dataclass
class InferSection:
    optimizer: str = "sd-amsgrad"
    eta0: float | None = None
    max_iters: int = 5000
    tol_mm: float = 1.0
    patience: int = 10
    correction: bool = True
    decay: bool = True
    early_stop: bool = True
    pd_dead_steps: int | None = 0
    gamma1: float = 1.0
    gamma2: float = 1.0
    targets: int = 100
    runs_per_optimizer: int = 250


@dataclass
class PathsSection:
    out_dir: str = "."


@dataclass
class ExperimentConfig:
    arm: ArmSection = field(default_factory=ArmSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    infer: InferSection = field(default_factory=InferSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0

    def set(self, key: str, raw):
        """Assign ``section.name`` (or a top-level key) from a string or typed value."""
        section, _, name = key.strip().rpartition(".")
        target = getattr(self, section, None) if section else self
        if target is None or not dataclasses.is_dataclass(target) or section not in _SECTIONS | {""}:
            raise ConfigError(f"unknown config section in key {key!r}")
        hints = typing.get_type_hints(type(target))
        if name not in hints or dataclasses.is_dataclass(getattr(target, name, None)):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _convert(key, raw, hints[name]))

    def items(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    yield f"{f.name}.{g.name}", getattr(value, g.name)
            else:
                yield f.name, value

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    # Builders for the library objects. Imports stay local so that reading a
    # config never pulls in the numeric modules.
    def arm_spec(self):
        from .kinematics import ArmSpec

        overrides = {
            k: v for k, v in dataclasses.asdict(self.arm).items()
            if k not in ("variant", "n_joints") and v is not None
        }
        try:
            return ArmSpec.default(self.arm.variant, self.arm.n_joints, **overrides)
        except ValueError as exc:
            raise ConfigError(f"arm: {exc}") from None

    def neuron(self):
        from .lsnn import NeuronConfig

        m = self.model
        kw = dict(zeta=m.zeta, v_thr=m.v_thr, lambda_pd=m.lambda_pd,
                  pd_dead_steps=m.pd_dead_steps, adaptive_reset=m.adaptive_reset)
        if m.alpha is not None:
            kw["alpha"] = m.alpha
        if m.rho is not None:
            kw["rho"] = m.rho
        try:
            return NeuronConfig(**kw)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None

    def topology(self):
        from .encoding import POSE_WIDTH, n_inputs
        from .lsnn import NetworkTopology

        return NetworkTopology(n_in=n_inputs(self.arm.n_joints), n_hidden=self.model.n_hidden,
                               n_out=POSE_WIDTH, n_alif=self.model.n_alif)

    def train_config(self):
        from .training import TrainConfig

        t = self.train
        return TrainConfig(
            batch_size=t.batch_size, lr0=t.lr0, lr_decay=t.lr_decay, lr_decay_every=t.lr_decay_every,
            reg_factor=t.reg_factor, target_rate=t.target_rate, epochs=t.epochs, seed=self.seed,
            n_hidden=self.model.n_hidden, zero_self_recurrence=t.zero_self_recurrence, init_gain=t.init_gain,
        )

    def infer_options(self):
        from .inference import InferenceOptions

        i = self.infer
        return InferenceOptions(
            optimizer=i.optimizer, eta0=i.eta0, max_iters=i.max_iters, tol_mm=i.tol_mm,
            patience=i.patience, correction=i.correction, decay=i.decay, early_stop=i.early_stop,
            pd_dead_steps=i.pd_dead_steps,
        )


_SECTIONS = {"arm", "model", "train", "data", "infer", "paths"}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(key, raw, hint):
    args = typing.get_args(hint)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    if isinstance(raw, str):
        text = raw.strip()
        if text.lower() == "none":
            if optional:
                return None
            raise ConfigError(f"{key} may not be none")
        try:
            if base is bool:
                low = text.lower()
                if low in ("true", "yes", "1", "on"):
                    return True
                if low in ("false", "no", "0", "off"):
                    return False
                raise ValueError(text)
            if base is int:
                return int(text.replace("_", ""))
            if base is float:
                return float(text)
            return text
        except ValueError:
            raise ConfigError(f"{key}: cannot read {raw!r} as {base.__name__}") from None
    if raw is None and optional:
        return None
    if base is float and isinstance(raw, int) and not isinstance(raw, bool):
        return float(raw)
    if not isinstance(raw, base):
        raise ConfigError(f"{key}: expected {base.__name__}, got {type(raw).__name__}")
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
