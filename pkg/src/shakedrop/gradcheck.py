"""Central finite-difference checks of analytic gradients.

A check wraps a tensor function ``f(*tensors) -> Tensor`` and reduces its
output to a scalar through a fixed random projection, so every output
element contributes with a distinct weight. Elements whose two one-sided
differences disagree are treated as sitting on a kink and skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from shakedrop import ops
from shakedrop.autograd import Parameter, Tensor, backward, no_grad
from shakedrop.models import ArchitectureSpec, Family, Insertion, RunContext, build_network
from shakedrop.regularizers import (
    CoefficientSpec,
    Coefficient,
    Frozen,
    Granularity,
    Phase,
    PerturbationUnit,
    RegularizerConfig,
    RegularizerKind,
)

DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    """Worst relative error over all checked elements, plus the kink count."""

    max_error: float
    checked: int
    skipped: int

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_error < tolerance


def _projected(f: Callable[..., Tensor], tensors: Sequence[Tensor], weights: np.ndarray) -> Tensor:
    out = f(*tensors)
    return ops.sum_all(ops.mul(out, weights))


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6,
                      rng: np.random.Generator | None = None, kink_tol: float = 1e-4,
                      max_elements: int | None = None) -> GradCheckResult:
    """Compare backward against central differences for every input element.

    The error of one element is ``|analytic - central| / max(1, |analytic|)``.
    An element is skipped when ``|forward - backward| / max(1, |central|)``
    exceeds ``kink_tol``; near a kink the central difference is meaningless.
    ``max_elements`` checks a random subset of coordinates instead of all.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with no_grad():
        out_shape = f(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape)

    params = [Parameter(a) for a in arrays]
    backward(_projected(f, params, weights))
    analytic = [p.grad for p in params]

    def value(vals: list[np.ndarray]) -> float:
        with no_grad():
            return float(_projected(f, [Tensor(v) for v in vals], weights).data)

    coords = [(k, idx) for k, arr in enumerate(arrays) for idx in np.ndindex(arr.shape)]
    if max_elements is not None and len(coords) > max_elements:
        pick = rng.choice(len(coords), size=max_elements, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    base = value(arrays)
    worst, checked, skipped = 0.0, 0, 0
    for k, idx in coords:
        arr = arrays[k]
        orig = arr[idx]
        arr[idx] = orig + eps
        up = value(arrays)
        arr[idx] = orig - eps
        down = value(arrays)
        arr[idx] = orig
        central = (up - down) / (2 * eps)
        one_sided_gap = abs((up - base) - (base - down)) / eps
        if one_sided_gap / max(1.0, abs(central)) > kink_tol:
            skipped += 1
            continue
        a = analytic[k][idx]
        worst = max(worst, abs(a - central) / max(1.0, abs(a)))
        checked += 1
    return GradCheckResult(worst, checked, skipped)


# check catalogue -------------------------------------------------------------

@dataclass
class Check:
    name: str
    fn: Callable[..., Tensor]
    inputs: list[np.ndarray] = field(default_factory=list)


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def op_checks(rng: np.random.Generator) -> list[Check]:
    """Every deterministic op on small random inputs."""
    n = rng.standard_normal
    bn_state = ops.BatchNormState.fresh(2)
    eval_state = ops.BatchNormState(rng.standard_normal(2), rng.uniform(0.5, 2.0, size=2))
    labels = rng.integers(0, 4, size=3)
    soft = rng.dirichlet(np.ones(4), size=3)
    return [
        Check("add", ops.add, [n((2, 3)), n((2, 3))]),
        Check("add_broadcast", ops.add, [n((2, 3)), n((3,))]),
        Check("mul", ops.mul, [n((2, 3)), n((2, 3))]),
        Check("relu", ops.relu, [_away_from_zero(n((2, 3, 2, 2)))]),
        Check("conv2d", lambda x, w: ops.conv2d(x, w, 1, 1), [n((2, 2, 3, 3)), n((3, 2, 3, 3))]),
        Check("conv2d_stride2", lambda x, w: ops.conv2d(x, w, 2, 0), [n((1, 2, 5, 5)), n((2, 2, 3, 3))]),
        Check("conv2d_grouped", lambda x, w: ops.conv2d(x, w, 1, 0, groups=2),
              [n((2, 4, 2, 2)), n((4, 2, 1, 1))]),
        Check("linear", ops.linear, [n((3, 4)), n((4, 2)), n((2,))]),
        Check("batchnorm2d_train", lambda x, g, s: ops.batchnorm2d(x, g, s, bn_state, True),
              [n((3, 2, 2, 2)), rng.uniform(0.5, 1.5, 2), n((2,))]),
        Check("batchnorm2d_eval", lambda x, g, s: ops.batchnorm2d(x, g, s, eval_state, False),
              [n((3, 2, 2, 2)), rng.uniform(0.5, 1.5, 2), n((2,))]),
        Check("global_avg_pool", ops.global_avg_pool, [n((2, 3, 2, 2))]),
        Check("subsample2d", ops.subsample2d, [n((2, 2, 4, 4))]),
        Check("pad_channels", lambda x: ops.pad_channels(x, 5), [n((2, 3, 2, 2))]),
        Check("softmax_cross_entropy", lambda z: ops.softmax_cross_entropy(z, labels), [n((3, 4))]),
        Check("softmax_cross_entropy_soft", lambda z: ops.softmax_cross_entropy(z, soft), [n((3, 4))]),
        Check("mean", ops.mean_all, [n((2, 3))]),
    ]


_TINY = dict(input_shape=(2, 2, 2), num_classes=3, base_width=2, stages=1)


def _block_check(name: str, spec: ArchitectureSpec, frozen: Frozen, rng: np.random.Generator) -> Check:
    """Whole first block in Train phase with frozen draws; checks input and all parameters."""
    net = build_network(spec, seed=int(rng.integers(2**31)))
    block = net.blocks[0]
    net.freeze(frozen.gate, frozen.alpha, frozen.beta)
    params = list(block.parameters())
    slots = {id(v): (m, k) for m in block.modules() for k, v in vars(m).items() if isinstance(v, Parameter)}
    slots = [slots[id(p)] for p in params]
    ctx = RunContext(Phase.TRAIN, None)

    # the checker's tensors temporarily replace the block's parameters
    def run(x, *values):
        for (m, k), v in zip(slots, values):
            setattr(m, k, v)
        try:
            return block(x, ctx)
        finally:
            for (m, k), p in zip(slots, params):
                setattr(m, k, p)

    x = rng.standard_normal((2, block.in_channels, 2, 2))
    return Check(name, run, [x] + [p.data.copy() for p in params])


def _reg(kind: RegularizerKind, alpha=Coefficient.uniform(0, 1), beta=Coefficient.uniform(0, 1)) -> RegularizerConfig:
    return RegularizerConfig(kind, CoefficientSpec(alpha, beta), Granularity.PIXEL, 0.5)


def block_checks(rng: np.random.Generator) -> list[Check]:
    """Regularized blocks with coupled frozen coefficients, so backward matches the forward map."""
    basic = ArchitectureSpec(depth=4, **_TINY)
    checks = [
        _block_check("block_vanilla", basic, Frozen(), rng),
        _block_check("block_shakedrop_b0_coupled",
                     ArchitectureSpec(depth=4, regularizer=_reg(RegularizerKind.SHAKEDROP), **_TINY),
                     Frozen(0.0, 0.3, 0.3), rng),
        _block_check("block_shakedrop_b1",
                     ArchitectureSpec(depth=4, regularizer=_reg(RegularizerKind.SHAKEDROP), **_TINY),
                     Frozen(1.0, 0.3, 0.7), rng),
        _block_check("block_randomdrop",
                     ArchitectureSpec(depth=4, regularizer=_reg(RegularizerKind.RANDOMDROP), **_TINY),
                     Frozen(1.0), rng),
        _block_check("block_single_branch_shake_coupled",
                     ArchitectureSpec(depth=4, regularizer=_reg(RegularizerKind.SINGLE_BRANCH_SHAKE), **_TINY),
                     Frozen(None, 0.6, 0.6), rng),
        _block_check("block_shakeshake_coupled",
                     ArchitectureSpec(family=Family.RESNEXT3, depth=4,
                                      regularizer=_reg(RegularizerKind.SHAKESHAKE), **_TINY),
                     Frozen(None, 0.4, 0.4), rng),
        _block_check("block_resnext3_typeA",
                     ArchitectureSpec(family=Family.RESNEXT3, depth=4, insertion=Insertion.TYPE_A,
                                      regularizer=_reg(RegularizerKind.SHAKEDROP), **_TINY),
                     Frozen(0.0, 0.5, 0.5), rng),
    ]
    return checks


def decoupled_ratio(alpha: float, beta: float, rng: np.random.Generator,
                    shape: tuple[int, ...] = (2, 3, 4, 4)) -> float:
    """Branch gradient of a ShakeDrop unit frozen at ``b=0`` over its forward-consistent value.

    With ``alpha != beta`` the backward pass is deliberately not the
    derivative of the forward map; the ratio measures by how much, and
    should equal ``beta / alpha`` at every element.
    """
    branch = Parameter(rng.standard_normal(shape))
    upstream = rng.standard_normal(shape)
    unit = PerturbationUnit(RegularizerConfig(RegularizerKind.SHAKEDROP), 1, 1)
    unit.frozen = Frozen(0.0, alpha, beta)
    out = unit.apply(branch, Phase.TRAIN, None)
    backward(ops.sum_all(ops.mul(out, upstream)))
    ratios = branch.grad / (alpha * upstream)
    if np.ptp(ratios) > 1e-9 * max(1.0, abs(float(ratios.mean()))):
        raise ArithmeticError("branch gradient ratio is not uniform")
    return float(ratios.mean())
