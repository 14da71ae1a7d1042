"""Residual-branch perturbation with decoupled forward/backward coefficients.

Four regularizers share one mechanism: a branch output ``F`` is scaled by a
forward coefficient, while the gradient flowing back into ``F`` is scaled by
a different, independently drawn backward coefficient.

* ShakeDrop: forward ``b + a - b*a``, backward ``b + c - b*c`` with gate
  ``b ~ Bernoulli(p_l)`` and ``a``/``c`` the forward/backward draws.
* RandomDrop: ``b`` in both directions.
* Shake-Shake: ``a*F1 + (1-a)*F2`` forward, ``c`` / ``1-c`` backward.
* Single-branch Shake: ShakeDrop with the gate fixed at 0.

In evaluation every random coefficient is replaced by its expectation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from shakedrop import ops
from shakedrop.autograd import Tensor, grad_enabled
from shakedrop.rng import REGULARIZER, RandomStreams

Override = Union[float, np.ndarray, None]


class Granularity(str, enum.Enum):
    BATCH = "batch"
    IMAGE = "image"
    CHANNEL = "channel"
    PIXEL = "pixel"

    def draw_shape(self, shape: Sequence[int]) -> tuple[int, ...]:
        """Shape of the independent draws for a tensor of ``shape`` (broadcastable)."""
        shape = tuple(shape)
        nd = len(shape)
        if self is Granularity.BATCH:
            return (1,) * nd
        if self is Granularity.IMAGE:
            return (shape[0],) + (1,) * (nd - 1)
        if self is Granularity.CHANNEL:
            if nd < 2:
                raise ValueError("channel granularity needs at least 2 dimensions")
            return shape[:2] + (1,) * (nd - 2)
        return shape


class Phase(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class Coefficient:
    """A coefficient that is either fixed (``lo == hi``) or uniform on ``[lo, hi]``."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("coefficient bounds must be finite")
        if self.lo > self.hi:
            raise ValueError(f"coefficient range needs lo <= hi, got [{self.lo}, {self.hi}]")

    @classmethod
    def fixed(cls, value: float) -> "Coefficient":
        return cls(float(value), float(value))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "Coefficient":
        return cls(float(lo), float(hi))

    @property
    def is_fixed(self) -> bool:
        return self.lo == self.hi

    @property
    def mean(self) -> float:
        return self.lo if self.is_fixed else (self.lo + self.hi) / 2

    def draw(self, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
        # fixed coefficients consume nothing from the stream
        if self.is_fixed:
            return np.full(shape, self.lo)
        return rng.uniform(self.lo, self.hi, size=shape)

    def __str__(self) -> str:
        return f"{self.lo:g}" if self.is_fixed else f"{self.lo:g}:{self.hi:g}"


@dataclass(frozen=True)
class CoefficientSpec:
    """How the forward (alpha) and backward (beta) coefficients are drawn.

    When ``pool`` is given, each granularity cell draws one ``(alpha, beta)``
    pair uniformly from it instead of drawing the two independently.
    """

    alpha: Coefficient = field(default_factory=lambda: Coefficient.fixed(0.0))
    beta: Coefficient = field(default_factory=lambda: Coefficient.uniform(0.0, 1.0))
    pool: Optional[tuple[tuple[float, float], ...]] = None

    def __post_init__(self):
        if self.pool is not None:
            pool = tuple((float(a), float(b)) for a, b in self.pool)
            if not pool:
                raise ValueError("discrete pool must be non-empty")
            object.__setattr__(self, "pool", pool)

    def expected_alpha(self) -> float:
        if self.pool is not None:
            return float(np.mean([a for a, _ in self.pool]))
        return self.alpha.mean

    def expected_beta(self) -> float:
        if self.pool is not None:
            return float(np.mean([b for _, b in self.pool]))
        return self.beta.mean


PRESETS: dict[str, CoefficientSpec] = {
    "shakedrop-original": CoefficientSpec(Coefficient.fixed(0.0), Coefficient.uniform(0.0, 1.0)),
    "shakedrop-bn-end": CoefficientSpec(Coefficient.uniform(-1.0, 1.0), Coefficient.uniform(0.0, 1.0)),
}
PRESET_GRANULARITY = Granularity.PIXEL


@dataclass(frozen=True)
class DecaySchedule:
    """Linear decay of the survival probability over ``L`` blocks."""

    L: int
    p_L: float

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("block count L must be >= 1")
        if not 0.0 <= self.p_L <= 1.0:
            raise ValueError(f"p_L must lie in [0, 1], got {self.p_L}")

    def p(self, l: int) -> float:
        return linear_decay(l, self)


def linear_decay(l: int, schedule: DecaySchedule) -> float:
    """Survival probability ``1 - (l/L)(1 - p_L)`` of block ``l`` (1-based)."""
    if not 1 <= l <= schedule.L:
        raise ValueError(f"block index {l} outside 1..{schedule.L}")
    if l == schedule.L:
        return float(schedule.p_L)
    return 1.0 - (l / schedule.L) * (1.0 - schedule.p_L)


def gate_coefficient(b: float, coef: np.ndarray) -> np.ndarray:
    """``b + c - b*c`` for a gate ``b`` in {0, 1}, evaluated exactly."""
    # b*1 + (1-b)*c is exact for b in {0,1}; the expanded form can be 1 ulp off
    return b + (1.0 - b) * np.asarray(coef, dtype=np.float64)


def draw_gate(p: float, rng: Optional[np.random.Generator]) -> float:
    """Bernoulli(p) gate; p = 0 or 1 is decided without consuming a draw."""
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    return 1.0 if rng.random() < p else 0.0


def draw_pool_pairs(spec: CoefficientSpec, gran: Granularity, target_shape: Sequence[int],
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One pool index per granularity cell; returns the matching alpha and beta arrays."""
    if not spec.pool:
        raise ValueError("spec has no discrete pool")
    pool = np.asarray(spec.pool)
    idx = rng.integers(0, len(pool), size=gran.draw_shape(target_shape))
    return pool[idx, 0], pool[idx, 1]


def draw_coefficients(spec: CoefficientSpec, gran: Granularity, target_shape: Sequence[int],
                      which: str, rng: np.random.Generator) -> np.ndarray:
    """Draw alpha or beta at ``gran`` for a branch output of ``target_shape``.

    The result is broadcastable to ``target_shape`` and holds exactly one
    independent draw per granularity cell. In pool mode a fresh index is
    drawn; use :func:`draw_pool_pairs` when both components of the same
    pair are needed.
    """
    if which not in ("alpha", "beta"):
        raise ValueError("which must be 'alpha' or 'beta'")
    if spec.pool is not None:
        a, b = draw_pool_pairs(spec, gran, target_shape, rng)
        return a if which == "alpha" else b
    coef = spec.alpha if which == "alpha" else spec.beta
    return coef.draw(gran.draw_shape(target_shape), rng)


def _as_coef(value: Override, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    np.broadcast_shapes(arr.shape, shape)
    return arr


def _beta_source(spec: CoefficientSpec, gran: Granularity, shape: tuple[int, ...],
                 rng: np.random.Generator, beta: Override, pooled_beta: Optional[np.ndarray],
                 needs_backward: bool = True) -> Union[np.ndarray, Callable[[], np.ndarray], None]:
    if beta is not None:
        return _as_coef(beta, shape)
    if pooled_beta is not None:
        return pooled_beta
    if spec.beta.is_fixed:
        return spec.beta.draw(gran.draw_shape(shape), rng)
    if not needs_backward:
        return None
    # continuous beta is drawn lazily at backward time from its own child stream
    beta_rng = rng.spawn(1)[0]
    return lambda: spec.beta.draw(gran.draw_shape(shape), beta_rng)


def expected_shakedrop_coefficient(p: float, spec: CoefficientSpec) -> float:
    """``E[b + a - b*a] = p + (1 - p) * E[a]``."""
    return p + (1.0 - p) * spec.expected_alpha()


def shakedrop_apply(branch_out: Tensor, l: int, schedule: DecaySchedule, spec: CoefficientSpec,
                    gran: Granularity, phase: Phase, rng: Optional[np.random.Generator], *,
                    gate: Override = None, alpha: Override = None, beta: Override = None,
                    p: Optional[float] = None) -> Tensor:
    """Scale a branch output by ``b + a - b*a``; scale its gradient by ``b + c - b*c``.

    ``gate``/``alpha``/``beta`` freeze the corresponding draw (tests, gradient
    checks). ``p`` overrides the decay-rule probability of block ``l``.
    """
    p_l = linear_decay(l, schedule) if p is None else float(p)
    if Phase(phase) is Phase.EVAL:
        coef = expected_shakedrop_coefficient(p_l, spec)
        return ops.decoupled_scale(branch_out, np.float64(coef), np.float64(coef))

    shape = branch_out.shape
    if gate is None:
        b = draw_gate(p_l, rng)
    else:
        b = float(gate)
        if b not in (0.0, 1.0):
            raise ValueError("gate must be 0 or 1")
    pooled_beta = None
    if alpha is not None:
        a = _as_coef(alpha, shape)
    elif spec.pool is not None:
        a, pooled_beta = draw_pool_pairs(spec, gran, shape, rng)
    else:
        a = spec.alpha.draw(gran.draw_shape(shape), rng)
    needs = grad_enabled() and branch_out.requires_grad
    source = _beta_source(spec, gran, shape, rng, beta, pooled_beta, needs)
    if source is None:
        backward = None
    elif callable(source):
        backward = lambda: gate_coefficient(b, source())  # noqa: E731
    else:
        backward = gate_coefficient(b, source)
    return ops.decoupled_scale(branch_out, gate_coefficient(b, a), backward)


def randomdrop_apply(branch_out: Tensor, l: int, schedule: DecaySchedule, phase: Phase,
                     rng: Optional[np.random.Generator], *, gate: Override = None,
                     p: Optional[float] = None) -> Tensor:
    """Multiply the branch by one Bernoulli gate, the same gate in both directions."""
    p_l = linear_decay(l, schedule) if p is None else float(p)
    if Phase(phase) is Phase.EVAL:
        coef = np.float64(p_l)
    else:
        coef = np.float64(draw_gate(p_l, rng) if gate is None else float(gate))
    return ops.decoupled_scale(branch_out, coef, coef)


def single_branch_shake_apply(branch_out: Tensor, spec: CoefficientSpec, gran: Granularity,
                              phase: Phase, rng: Optional[np.random.Generator], *,
                              alpha: Override = None, beta: Override = None) -> Tensor:
    """``a*F`` forward, ``c*grad`` backward: ShakeDrop whose gate never opens."""
    return shakedrop_apply(branch_out, 1, DecaySchedule(1, 0.0), spec, gran, phase, rng,
                           alpha=alpha, beta=beta, p=0.0)


def shake_shake_combine(x: Tensor, f1: Tensor, f2: Tensor, spec: CoefficientSpec,
                        gran: Granularity, phase: Phase, rng: Optional[np.random.Generator], *,
                        alpha: Override = None, beta: Override = None) -> Tensor:
    """``x + a*F1 + (1-a)*F2``; the branches receive ``c*grad`` and ``(1-c)*grad``."""
    if not (x.shape == f1.shape == f2.shape):
        raise ValueError(f"shape mismatch: {x.shape}, {f1.shape}, {f2.shape}")
    shape = f1.shape
    if Phase(phase) is Phase.EVAL:
        e = np.float64(spec.expected_alpha())
        return ops.add(x, ops.decoupled_mix(f1, f2, e, e))
    pooled_beta = None
    if alpha is not None:
        a = _as_coef(alpha, shape)
    elif spec.pool is not None:
        a, pooled_beta = draw_pool_pairs(spec, gran, shape, rng)
    else:
        a = spec.alpha.draw(gran.draw_shape(shape), rng)
    needs = grad_enabled() and (f1.requires_grad or f2.requires_grad)
    source = _beta_source(spec, gran, shape, rng, beta, pooled_beta, needs)
    return ops.add(x, ops.decoupled_mix(f1, f2, a, source))


class RegularizerKind(str, enum.Enum):
    NONE = "none"
    RANDOMDROP = "randomdrop"
    SHAKEDROP = "shakedrop"
    SHAKESHAKE = "shakeshake"
    SINGLE_BRANCH_SHAKE = "single-branch-shake"


@dataclass(frozen=True)
class RegularizerConfig:
    """Everything a network needs to attach one kind of perturbation unit."""

    kind: RegularizerKind = RegularizerKind.NONE
    spec: CoefficientSpec = field(default_factory=CoefficientSpec)
    granularity: Granularity = Granularity.PIXEL
    p_L: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", RegularizerKind(self.kind))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if not 0.0 <= self.p_L <= 1.0:
            raise ValueError(f"p_L must lie in [0, 1], got {self.p_L}")


@dataclass
class Frozen:
    """Frozen draws for one perturbation unit; ``None`` leaves a draw random."""

    gate: Override = None
    alpha: Override = None
    beta: Override = None


class PerturbationUnit:
    """A regularizer node bound to block ``l`` inside a network.

    Each training call draws from the child stream keyed by
    ``(seed, l, unit, step, replica)``, so two units of one block, two
    blocks, two steps or two replicas never share draws.
    """

    def __init__(self, config: RegularizerConfig, l: int, L: int, unit: int = 0):
        self.config = config
        self.l = l
        self.unit = unit
        self.schedule = DecaySchedule(L, config.p_L)
        self.frozen: Optional[Frozen] = None
        self.last_gate: Optional[float] = None

    @property
    def p(self) -> float:
        return linear_decay(self.l, self.schedule)

    def _rng(self, streams: RandomStreams, step: int, replica: int) -> np.random.Generator:
        return streams.generator(REGULARIZER, self.l, self.unit, step, replica)

    def apply(self, branch_out: Tensor, phase: Phase, streams: Optional[RandomStreams],
              step: int = 0, replica: int = 0) -> Tensor:
        cfg = self.config
        frz = self.frozen or Frozen()
        rng = None
        if Phase(phase) is Phase.TRAIN and streams is not None:
            rng = self._rng(streams, step, replica)
        kind = cfg.kind
        if kind is RegularizerKind.SHAKEDROP:
            if rng is not None and frz.gate is None:
                # record the gate so tests can observe per-unit draws
                gate = draw_gate(self.p, rng)
            else:
                gate = frz.gate
            self.last_gate = None if gate is None else float(gate)
            return shakedrop_apply(branch_out, self.l, self.schedule, cfg.spec, cfg.granularity,
                                   phase, rng, gate=gate, alpha=frz.alpha, beta=frz.beta)
        if kind is RegularizerKind.RANDOMDROP:
            if rng is not None and frz.gate is None:
                gate = draw_gate(self.p, rng)
            else:
                gate = frz.gate
            self.last_gate = None if gate is None else float(gate)
            return randomdrop_apply(branch_out, self.l, self.schedule, phase, rng, gate=gate)
        if kind is RegularizerKind.SINGLE_BRANCH_SHAKE:
            return single_branch_shake_apply(branch_out, cfg.spec, cfg.granularity, phase, rng,
                                             alpha=frz.alpha, beta=frz.beta)
        raise ValueError(f"{kind.value} is not a single-branch perturbation")

    def combine(self, x: Tensor, f1: Tensor, f2: Tensor, phase: Phase,
                streams: Optional[RandomStreams], step: int = 0, replica: int = 0) -> Tensor:
        if self.config.kind is not RegularizerKind.SHAKESHAKE:
            raise ValueError("combine is only defined for shake-shake")
        frz = self.frozen or Frozen()
        rng = None
        if Phase(phase) is Phase.TRAIN and streams is not None:
            rng = self._rng(streams, step, replica)
        return shake_shake_combine(x, f1, f2, self.config.spec, self.config.granularity, phase,
                                   rng, alpha=frz.alpha, beta=frz.beta)
