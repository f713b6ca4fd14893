"""Flow-balance training objectives computed over recorded trajectories.

All three objectives consume teacher-forced trajectory scores (see
``policy.TrajectoryScore``) plus strictly positive rewards, and return scalar
graph nodes. The backward policy is identically 1 throughout: histories form
a tree, so every state has a unique parent.

Index conventions for a terminated trajectory with ``m`` state transitions:
``score.steps[k]`` scores recorded step ``k`` (the final DONE step is index
``m``), and ``score.terminal[i]`` is the termination log-mass at prefix ``i``
for ``i = 0 .. m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from . import autodiff as ad
from .autodiff import Node
from .envs import ShapingError
from .policy import TrajectoryScore

VAR_TB = "var_tb"
SUBTB = "subtb"
DB = "db"
LOSS_KINDS = (VAR_TB, SUBTB, DB)


@dataclass(frozen=True)
class LossConfig:
    kind: str
    batch_size: int = 4

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.kind == VAR_TB and self.batch_size < 2:
            raise ValueError("variance balance is degenerate with fewer than 2 trajectories")


def _log_reward(value: float) -> float:
    if not value > 0 or math.isnan(value) or math.isinf(value):
        raise ShapingError(f"reward {value} is not strictly positive and finite")
    return math.log(value)


def zeta(score: TrajectoryScore, terminal_reward: float) -> Node:
    """Per-trajectory flow estimate: sum of forward log-probs minus log reward."""
    return score.log_p_forward_sum - _log_reward(terminal_reward)


def var_tb_loss(scores: Sequence[TrajectoryScore], rewards: Sequence[float]) -> Node:
    """Variance of the flow estimates across the batch; gradient flows through the mean."""
    if len(scores) < 2:
        raise ValueError("variance balance needs at least 2 trajectories")
    if len(scores) != len(rewards):
        raise ValueError("scores and rewards length mismatch")
    zetas = [zeta(s, r) for s, r in zip(scores, rewards)]
    centre = ad.nmean(zetas)
    return ad.nmean([ad.square(z - centre) for z in zetas])


def _check_terminal(score: TrajectoryScore, prefix_rewards: Sequence[float]) -> int:
    if score.terminal is None:
        raise ValueError("score lacks termination masses; re-score with want_terminal=True")
    m = len(score.terminal) - 1
    if len(prefix_rewards) != m + 1:
        raise ValueError(
            f"need {m + 1} prefix rewards for {m} transitions, got {len(prefix_rewards)}"
        )
    return m


def subtb_residual(score: TrajectoryScore, log_r: Sequence[float], i: int, j: int) -> Node:
    """Log imbalance of the (i, j) segment; zero when flows match."""
    inner = [score.steps[k - 1].log_p_forward for k in range(i + 1, j + 1)]
    lhs = ad.nsum(inner + [score.terminal[j]]) + log_r[i]
    return lhs - (score.terminal[i] + log_r[j])


def subtb_loss(score: TrajectoryScore, prefix_rewards: Sequence[float]) -> Node:
    """Sum of squared segment residuals over all prefix pairs i < j."""
    m = _check_terminal(score, prefix_rewards)
    log_r = [_log_reward(r) for r in prefix_rewards]
    if m == 0:
        return score.terminal[0].tape.constant(0.0)
    residuals = [
        ad.square(subtb_residual(score, log_r, i, j))
        for i in range(m)
        for j in range(i + 1, m + 1)
    ]
    return ad.nsum(residuals)


def db_transition_loss(score: TrajectoryScore, prefix_rewards: Sequence[float], t: int) -> Node:
    """Squared balance residual of the single transition t -> t+1."""
    m = _check_terminal(score, prefix_rewards)
    if not 0 <= t < m:
        raise IndexError(f"transition index {t} out of range for {m} transitions")
    log_r = [_log_reward(r) for r in prefix_rewards]
    return ad.square(subtb_residual(score, log_r, t, t + 1))


def db_loss(score: TrajectoryScore, prefix_rewards: Sequence[float]) -> Node:
    """Sum of squared one-transition residuals along the trajectory."""
    m = _check_terminal(score, prefix_rewards)
    log_r = [_log_reward(r) for r in prefix_rewards]
    if m == 0:
        return score.terminal[0].tape.constant(0.0)
    return ad.nsum([ad.square(subtb_residual(score, log_r, t, t + 1)) for t in range(m)])
