"""Monte-Carlo check that Train-phase outputs average to the Eval-phase output."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from shakedrop.autograd import Tensor, no_grad
from shakedrop.regularizers import (
    PerturbationUnit,
    Phase,
    RegularizerConfig,
    RegularizerKind,
    expected_shakedrop_coefficient,
    randomdrop_apply,
    shake_shake_combine,
    shakedrop_apply,
    single_branch_shake_apply,
)

Z_LIMIT = 5.0


@dataclass
class ExpectationResult:
    max_z: float
    draws: int
    eval_output: np.ndarray
    train_mean: np.ndarray
    eval_coefficient: float

    def passed(self, limit: float = Z_LIMIT) -> bool:
        return self.max_z <= limit


def eval_coefficient(config: RegularizerConfig, p: float) -> float:
    """Scalar that Eval multiplies the (first) branch by."""
    kind = config.kind
    if kind is RegularizerKind.RANDOMDROP:
        return p
    if kind is RegularizerKind.SHAKEDROP:
        return expected_shakedrop_coefficient(p, config.spec)
    if kind in (RegularizerKind.SINGLE_BRANCH_SHAKE, RegularizerKind.SHAKESHAKE):
        return config.spec.expected_alpha()
    return 1.0


def expectation_test(config: RegularizerConfig, branch: np.ndarray, draws: int,
                     rng: np.random.Generator, *, l: int = 1, L: int = 1,
                     second_branch: Optional[np.ndarray] = None) -> ExpectationResult:
    """Average ``draws`` Train forwards of one unit on a fixed branch output.

    The z-score of an element is ``|mean - eval| / (sd / sqrt(draws))``. An
    element with zero sample spread scores 0 when it matches exactly and
    infinity otherwise. Shake-Shake mixes ``branch`` with ``second_branch``
    on a zero skip input.
    """
    if draws < 2:
        raise ValueError("need at least 2 draws")
    if config.kind is RegularizerKind.NONE:
        raise ValueError("expectation test needs a regularizer")
    unit = PerturbationUnit(config, l, L)
    f1 = Tensor(branch)
    shake = config.kind is RegularizerKind.SHAKESHAKE
    if shake:
        if second_branch is None:
            raise ValueError("shake-shake needs a second branch")
        f2 = Tensor(second_branch)
        skip = Tensor(np.zeros_like(branch))
    cfg, sched = unit.config, unit.schedule

    def forward(phase: Phase) -> np.ndarray:
        g = rng if phase is Phase.TRAIN else None
        if shake:
            return shake_shake_combine(skip, f1, f2, cfg.spec, cfg.granularity, phase, g).data
        if cfg.kind is RegularizerKind.SHAKEDROP:
            return shakedrop_apply(f1, l, sched, cfg.spec, cfg.granularity, phase, g).data
        if cfg.kind is RegularizerKind.RANDOMDROP:
            return randomdrop_apply(f1, l, sched, phase, g).data
        return single_branch_shake_apply(f1, cfg.spec, cfg.granularity, phase, g).data

    with no_grad():
        target = forward(Phase.EVAL)
        total = np.zeros_like(target)
        total_sq = np.zeros_like(target)
        for _ in range(draws):
            out = forward(Phase.TRAIN)
            total += out
            total_sq += out * out
    mean = total / draws
    var = np.maximum(total_sq / draws - mean * mean, 0.0) * draws / (draws - 1)
    se = np.sqrt(var / draws)
    gap = np.abs(mean - target)
    tiny = se <= 1e-12 * np.maximum(1.0, np.abs(target))
    z = np.where(tiny, np.where(gap <= 1e-9 * np.maximum(1.0, np.abs(target)), 0.0, np.inf),
                 gap / np.where(tiny, 1.0, se))
    return ExpectationResult(float(z.max()), draws, target, mean, eval_coefficient(config, unit.p))
