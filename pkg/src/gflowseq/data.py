"""Replay buffer, rule-based trajectory generators, and SFT dataset assembly."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import Trajectory
from .envs import (
    BlackjackEnv,
    BlackjackTask,
    Environment,
    NumberLineEnv,
    NumberLineTask,
    SequencePatternEnv,
    SequenceTask,
    drive_episode,
    valid_continuations,
)


class EmptyBufferError(RuntimeError):
    pass


class GenerationError(RuntimeError):
    pass


class ReplayBuffer:
    """Bounded FIFO of trajectories with seeded uniform sampling."""

    def __init__(self, capacity: int = 4):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: deque[Trajectory] = deque(maxlen=capacity)

    def push(self, traj: Trajectory) -> None:
        self._items.append(traj)

    def sample(self, k: int, rng: np.random.Generator) -> list[Trajectory]:
        """Uniform with replacement over current contents."""
        if not self._items:
            raise EmptyBufferError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self._items), size=k)
        return [self._items[int(i)] for i in idx]

    def __len__(self) -> int:
        return len(self._items)

    def items(self) -> tuple[Trajectory, ...]:
        return tuple(self._items)


def _rule_chooser(rule):
    """Adapt an (obs, admissible) -> action rule into a drive_episode chooser."""

    def choose(obs, admissible):
        return (), rule(obs, admissible)

    return choose


def oracle_numberline(env: NumberLineEnv, target: int, start: int) -> Trajectory:
    """Ground-truth trajectory: correct unit moves, then the termination step."""
    if abs(target - start) > env.config.steps_limit:
        raise GenerationError(
            f"target {target} unreachable from {start} within {env.config.steps_limit} steps"
        )
    plus, minus = env.vocab.id_of("+"), env.vocab.id_of("-")
    done = env.vocab.done_id

    def rule(obs, admissible):
        y, c = obs.value("current"), obs.value("target")
        if y == c:
            if done not in admissible:
                raise GenerationError("already at the target but DONE is not admissible")
            return done
        return plus if y < c else minus

    return drive_episode(env, NumberLineTask(target=target, start=start), 0, _rule_chooser(rule))


def oracle_blackjack(player_total: int) -> str:
    """Stand on 17 or higher, hit below."""
    return "stand" if player_total >= 17 else "hit"


def heuristic_blackjack_trajectory(env: BlackjackEnv, draw_seed: int) -> Trajectory:
    """One full episode played by the 17-point rule."""

    def rule(obs, admissible):
        return env.vocab.id_of(oracle_blackjack(obs.value("player")))

    return drive_episode(env, BlackjackTask(), draw_seed, _rule_chooser(rule))


def oracle_sequence(env: SequencePatternEnv, task: SequenceTask) -> Trajectory:
    """Deterministic valid continuation (smallest when the prefix fits both rules)."""
    valid = valid_continuations(task.shown)
    if not valid:
        raise GenerationError(f"prefix {task.shown} fits neither rule")

    def rule(obs, admissible):
        return env.vocab.value_id(valid[0])

    return drive_episode(env, task, 0, _rule_chooser(rule))


@dataclass(frozen=True)
class SftExample:
    """One supervised target: the recorded step ``step`` of ``traj``.

    Terminal steps are DONE-labelled by construction, so every successful
    trajectory contributes exactly one termination example.
    """

    traj: Trajectory
    step: int

    def __post_init__(self) -> None:
        if not 0 <= self.step < len(self.traj.steps):
            raise IndexError(f"step {self.step} out of range")

    @property
    def goal(self) -> str:
        return self.traj.goal

    @property
    def target_cot(self) -> tuple[int, ...]:
        return self.traj.steps[self.step].cot

    @property
    def target_action(self) -> int:
        return self.traj.steps[self.step].action


def build_sft_dataset(env: Environment, n_episodes: int, seed: int = 0) -> list[SftExample]:
    """Supervised examples from successful rule-based episodes.

    NumberLine episodes always succeed; Blackjack keeps only won hands;
    SequencePattern uses the deterministic valid continuation.
    """
    examples: list[SftExample] = []
    for e in range(n_episodes):
        if isinstance(env, NumberLineEnv):
            task = env.task_for(_subseed(seed, e))
            traj = oracle_numberline(env, task.target, task.start)
        elif isinstance(env, BlackjackEnv):
            traj = heuristic_blackjack_trajectory(env, _subseed(seed, e))
            if not env.is_success(traj):
                continue
        elif isinstance(env, SequencePatternEnv):
            task = env.task_for(_subseed(seed, e))
            traj = oracle_sequence(env, task)
        else:
            raise GenerationError(f"no oracle for environment {type(env).__name__}")
        examples.extend(SftExample(traj, t) for t in range(len(traj.steps)))
    return examples


def _subseed(seed: int, index: int) -> int:
    # stable scalar sub-seed; keeps task draws independent of dataset size
    return int(np.random.SeedSequence((seed, 11, index)).generate_state(1)[0])
