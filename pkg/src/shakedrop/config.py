"""Flat ``key=value`` experiment configs with dotted section prefixes.

Every key has a default, so an empty file is a valid config. Unknown keys,
duplicate keys and malformed values are errors. :meth:`ExperimentConfig.resolved`
prints every key in sorted order, which is enough to rerun an experiment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Union

import numpy as np

from shakedrop.data import AugmentConfig
from shakedrop.models import ArchitectureSpec, count_blocks
from shakedrop.regularizers import (
    PRESETS,
    Coefficient,
    CoefficientSpec,
    Granularity,
    RegularizerConfig,
    RegularizerKind,
)
from shakedrop.training import LRSchedule, OptimizerConfig, TrainOptions


class ConfigError(ValueError):
    """Raised for any malformed, unknown or out-of-range setting."""


# value parsers ------------------------------------------------------------------

def _int(text: str) -> int:
    return int(text, 10)


def _float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _str(text: str) -> str:
    return text


def _list(item: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        return tuple(item(t.strip()) for t in text.split(",") if t.strip())
    return parse


def _coefficient(text: str) -> Coefficient:
    if ":" in text:
        lo, hi = text.split(":", 1)
        return Coefficient.uniform(_float(lo), _float(hi))
    return Coefficient.fixed(_float(text))


def _pool(text: str) -> Optional[tuple[tuple[float, float], ...]]:
    if text.strip() in ("", "none"):
        return None
    pairs = []
    for item in text.split(","):
        a, sep, b = item.strip().partition(":")
        if not sep:
            raise ValueError(f"pool entry {item!r} is not alpha:beta")
        pairs.append((_float(a), _float(b)))
    return tuple(pairs)


def _optional_int(text: str) -> Optional[int]:
    return None if text in ("", "none") else _int(text)


def _mixup(text: str) -> Optional[float]:
    if text in ("off", "none", ""):
        return None
    if text == "on":
        return 1.0
    v = _float(text)
    if v <= 0:
        raise ValueError("mixup Beta parameter must be > 0")
    return v


def _u64(text: str) -> int:
    v = _int(text)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


def _fmt(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Coefficient):
        return _fmt(value.lo) if value.is_fixed else f"{value.lo!r}:{value.hi!r}"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a!r}:{b!r}" for a, b in value)
        return ",".join(_fmt(v) for v in value)
    return str(value)


# (default text, parser)
SCHEMA: dict[str, tuple[str, Callable[[str], Any]]] = {
    "arch.family": ("resnet", _choice("resnet", "wideresnet", "pyramidnet", "resnext2", "resnext3")),
    "arch.depth": ("8", _int),
    "arch.block": ("basic", _choice("basic", "bottleneck")),
    "arch.widen_factor": ("1", _int),
    "arch.pyramid_alpha": ("48", _float),
    "arch.cardinality": ("1", _int),
    "arch.base_width": ("16", _int),
    "arch.stages": ("3", _int),
    "arch.erase_relu": ("false", _bool),
    "arch.bn_end": ("false", _bool),
    "arch.insertion": ("typeB", _choice("typeA", "typeB")),
    "bn.eps": ("1e-5", _float),
    "bn.momentum": ("0.1", _float),
    "reg.kind": ("none", _choice(*(k.value for k in RegularizerKind))),
    "reg.preset": ("none", _choice("none", *PRESETS)),
    "reg.alpha": ("0", _coefficient),
    "reg.beta": ("0:1", _coefficient),
    "reg.pool": ("", _pool),
    "reg.p_L": ("0.5", _float),
    "reg.granularity": ("pixel", _choice(*(g.value for g in Granularity))),
    "optimizer.base_lr": ("0.1", _float),
    "optimizer.momentum": ("0.9", _float),
    "optimizer.nesterov": ("true", _bool),
    "optimizer.weight_decay": ("1e-4", _float),
    "optimizer.decay_all": ("true", _bool),
    "optimizer.batch_size": ("128", _int),
    "schedule.total_epochs": ("60", _int),
    "schedule.milestones": ("30,45", _list(_int)),
    "schedule.factor": ("0.1", _float),
    "data.source": ("synthetic:striped-images", _str),
    "data.variant": ("cifar10", _choice("cifar10", "cifar100")),
    "data.eval_source": ("", _str),
    "data.n": ("2000", _int),
    "data.eval_n": ("500", _int),
    "data.classes": ("4", _int),
    "data.noise": ("0.5", _float),
    "data.image_size": ("8", _int),
    "data.channels": ("3", _int),
    "augment.enabled": ("false", _bool),
    "augment.flip_probability": ("0.5", _float),
    "augment.pad": ("4", _int),
    "augment.crop": ("none", _optional_int),
    "augment.mixup": ("off", _mixup),
    "run.seed": ("0", _u64),
    "run.workers": ("1", _int),
    "run.out": ("runs/experiment", _str),
    "run.dtype": ("float32", _choice("float32", "float64")),
    "run.normalize": ("true", _bool),
    "run.record_wall_time": ("false", _bool),
    "run.eval_batch_size": ("256", _int),
    "sweep.p_L": ("0.5,0.9", _list(_float)),
    "sweep.depths": ("8,20", _list(_int)),
    "sweep.processes": ("1", _int),
    "expect.draws": ("100000", _int),
    "expect.l": ("1", _int),
    "expect.L": ("1", _int),
    "expect.shape": ("2,3,4,4", _list(_int)),
    "gradcheck.seeds": ("1", _int),
    "gradcheck.tolerance": ("1e-4", _float),
    "gradcheck.alpha": ("0.2", _float),
    "gradcheck.beta": ("0.8", _float),
    "gradcheck.max_elements": ("none", _optional_int),
}

SYNTHETIC_PREFIX = "synthetic:"


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Split ``key=value`` lines; ``#`` starts a comment; blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{origin}:{lineno}: expected key=value")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key}")
        out[key] = value
    return out


def parse_assignment(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not key=value")
    return key.strip(), value.strip()


@dataclass
class ExperimentConfig:
    """Parsed settings keyed by their dotted names."""

    values: dict[str, Any]

    @classmethod
    def from_mapping(cls, raw: Mapping[str, str]) -> "ExperimentConfig":
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]}")
        values = {}
        for key, (default, parser) in SCHEMA.items():
            text = raw.get(key, default)
            try:
                values[key] = parser(text)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{key}={text}: {exc}") from None
        preset = values["reg.preset"]
        if preset != "none":
            # a preset fixes the coefficients; restating the same values is allowed
            p = PRESETS[preset]
            for key, want in (("reg.alpha", p.alpha), ("reg.beta", p.beta), ("reg.pool", p.pool)):
                if key in raw and values[key] != want:
                    raise ConfigError(f"reg.preset={preset} conflicts with {key}={raw[key]}")
                values[key] = want
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None,
             overrides: Iterable[str] = ()) -> "ExperimentConfig":
        raw: dict[str, str] = {}
        if path is not None:
            raw = parse_text(Path(path).read_text(encoding="utf-8"), str(path))
        for item in overrides:
            key, value = parse_assignment(item)
            raw[key] = value
        return cls.from_mapping(raw)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def replace(self, **updates: Any) -> "ExperimentConfig":
        """Copy with ``section__key=value`` updates (already parsed values), revalidated."""
        values = dict(self.values)
        for name, value in updates.items():
            key = name.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key}")
            values[key] = value
        cfg = ExperimentConfig(values)
        cfg.validate()
        return cfg

    def resolved(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in sorted(self.values))

    # derived objects -------------------------------------------------------------

    @property
    def synthetic_kind(self) -> Optional[str]:
        src = self["data.source"]
        return src[len(SYNTHETIC_PREFIX):] if src.startswith(SYNTHETIC_PREFIX) else None

    def input_shape(self) -> tuple[int, int, int]:
        if self.synthetic_kind is None:
            return (3, 32, 32)
        s = self["data.image_size"]
        return (self["data.channels"], s, s)

    def num_classes(self) -> int:
        if self.synthetic_kind is None:
            return 100 if self["data.variant"] == "cifar100" else 10
        return self["data.classes"]

    def coefficient_spec(self) -> CoefficientSpec:
        preset = self["reg.preset"]
        if preset != "none":
            return PRESETS[preset]
        return CoefficientSpec(self["reg.alpha"], self["reg.beta"], self["reg.pool"])

    def regularizer(self, p_L: Optional[float] = None) -> RegularizerConfig:
        return RegularizerConfig(RegularizerKind(self["reg.kind"]), self.coefficient_spec(),
                                 Granularity(self["reg.granularity"]),
                                 self["reg.p_L"] if p_L is None else p_L)

    def architecture(self, depth: Optional[int] = None, p_L: Optional[float] = None) -> ArchitectureSpec:
        v = self.values
        return ArchitectureSpec(
            family=v["arch.family"], depth=v["arch.depth"] if depth is None else depth,
            block=v["arch.block"], widen_factor=v["arch.widen_factor"],
            pyramid_alpha=v["arch.pyramid_alpha"], cardinality=v["arch.cardinality"],
            base_width=v["arch.base_width"], stages=v["arch.stages"],
            erase_relu=v["arch.erase_relu"], bn_end=v["arch.bn_end"],
            regularizer=self.regularizer(p_L), insertion=v["arch.insertion"],
            num_classes=self.num_classes(), input_shape=self.input_shape())

    def optimizer(self) -> OptimizerConfig:
        v = self.values
        return OptimizerConfig(v["optimizer.base_lr"], v["optimizer.momentum"], v["optimizer.nesterov"],
                               v["optimizer.weight_decay"], v["optimizer.batch_size"],
                               v["optimizer.decay_all"])

    def schedule(self) -> LRSchedule:
        return LRSchedule(self["schedule.total_epochs"], self["schedule.milestones"],
                          self["schedule.factor"])

    def augment(self) -> Optional[AugmentConfig]:
        v = self.values
        if not v["augment.enabled"] and v["augment.mixup"] is None:
            return None
        size = self.input_shape()[1]
        crop = v["augment.crop"] if v["augment.crop"] is not None else size
        on = v["augment.enabled"]
        return AugmentConfig(v["augment.flip_probability"], v["augment.pad"] if on else 0, crop,
                             flip_enabled=on, crop_enabled=on, mixup_alpha=v["augment.mixup"])

    def train_options(self) -> TrainOptions:
        v = self.values
        return TrainOptions(seed=v["run.seed"], workers=v["run.workers"], augment=self.augment(),
                            normalize=v["run.normalize"], record_wall_time=v["run.record_wall_time"],
                            eval_batch_size=v["run.eval_batch_size"])

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self["run.dtype"])

    # validation ------------------------------------------------------------------

    def validate(self) -> None:
        """Build every derived object so range errors surface before any compute."""
        v = self.values
        if v["bn.eps"] <= 0:
            raise ConfigError("bn.eps must be > 0")
        if not 0.0 <= v["bn.momentum"] <= 1.0:
            raise ConfigError("bn.momentum must lie in [0, 1]")
        for key in ("run.workers", "run.eval_batch_size", "sweep.processes", "gradcheck.seeds"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if v["expect.draws"] < 1000:
            raise ConfigError("expect.draws must be >= 1000")
        if not 1 <= v["expect.l"] <= v["expect.L"]:
            raise ConfigError("expect.l must lie in [1, expect.L]")
        if len(v["expect.shape"]) != 4 or min(v["expect.shape"]) < 1:
            raise ConfigError("expect.shape must be four positive sizes N,C,H,W")
        if v["gradcheck.tolerance"] <= 0:
            raise ConfigError("gradcheck.tolerance must be > 0")
        if v["gradcheck.alpha"] == 0:
            raise ConfigError("gradcheck.alpha must be nonzero to form a gradient ratio")
        if v["gradcheck.max_elements"] is not None and v["gradcheck.max_elements"] < 1:
            raise ConfigError("gradcheck.max_elements must be >= 1")
        for p in v["sweep.p_L"]:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"sweep.p_L value {p} outside [0, 1]")
        kind = self.synthetic_kind
        if kind is not None:
            if kind not in ("blobs", "spiral", "striped-images"):
                raise ConfigError(f"unknown synthetic kind {kind}")
            if v["data.classes"] < 2 or v["data.n"] < v["data.classes"]:
                raise ConfigError("data.n must be >= data.classes >= 2")
            if v["data.eval_n"] < 0 or v["data.noise"] < 0:
                raise ConfigError("data.eval_n and data.noise must be >= 0")
            if v["data.image_size"] < 1 or v["data.channels"] < 1:
                raise ConfigError("data.image_size and data.channels must be >= 1")
            if v["optimizer.batch_size"] > v["data.n"]:
                raise ConfigError("optimizer.batch_size exceeds data.n")
        try:
            self.architecture()
            for depth in v["sweep.depths"]:
                count_blocks(self.architecture(depth=depth))
            self.optimizer()
            self.schedule()
            self.augment()
            self.train_options()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        aug = self.augment()
        size = self.input_shape()[1]
        if aug is not None and aug.crop_enabled and aug.crop > size + 2 * aug.pad:
            raise ConfigError(f"augment.crop {aug.crop} larger than padded image {size + 2 * aug.pad}")
