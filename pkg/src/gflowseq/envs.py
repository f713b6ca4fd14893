"""Environment contract plus the three bundled environments.

Termination is modelled uniformly: every episode ends with a DONE-labelled
step. When the environment itself finishes an episode (goal reached, hand
resolved, step limit), the step that finished it returns ``done=True``
together with the shaped terminal reward, and the admissible set collapses
to the singleton ``{DONE}`` so the recorded trajectory can close with a
forced, probability-one termination step. At free decision points DONE is
offered only when the config asks for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .core import Observation, StepRecord, Trajectory, Vocabulary

NUMBERLINE = "numberline"
BLACKJACK = "blackjack"
SEQUENCE = "sequence"

REWARD_FLOOR = 1e-10


class ContractViolationError(RuntimeError):
    """An environment was driven outside its contract (e.g. inadmissible action)."""


class ShapingError(ValueError):
    """A reward left the strictly-positive regime the losses rely on."""


@dataclass(frozen=True)
class EnvConfig:
    kind: str
    n_min: int = 0
    n_max: int = 5
    horizon: int | None = None
    scale: float = 100.0
    floor: float = REWARD_FLOOR
    seed: int = 0
    include_done: bool = True
    # optional task pinning (None means tasks are drawn from the seed)
    target: int | None = None
    start: int | None = None
    shown: tuple[int, ...] | None = None
    # bounds for the sequence task generator
    seq_start_max: int = 5
    seq_step_max: int = 3

    def __post_init__(self) -> None:
        if self.kind not in (NUMBERLINE, BLACKJACK, SEQUENCE):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.n_min >= self.n_max:
            raise ValueError(f"need n_min < n_max, got [{self.n_min}, {self.n_max}]")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not self.floor > 0:
            raise ValueError(f"floor must be positive, got {self.floor}")
        if self.shown is not None:
            if len(self.shown) < 3:
                raise ValueError("pinned sequence prefix needs at least 3 terms")
            if any(v < 0 for v in self.shown):
                raise ValueError("pinned sequence prefix must be non-negative")

    @property
    def steps_limit(self) -> int:
        if self.horizon is not None:
            return self.horizon
        if self.kind == NUMBERLINE:
            return 2 * self.n_max
        if self.kind == BLACKJACK:
            return 10
        return 1


@dataclass(frozen=True)
class EnvStep:
    reward: float
    observation: Observation
    admissible: tuple[int, ...]
    done: bool


@dataclass(frozen=True)
class NumberLineTask:
    target: int
    start: int


@dataclass(frozen=True)
class BlackjackTask:
    pass


@dataclass(frozen=True)
class SequenceTask:
    shown: tuple[int, ...]


Task = Union[NumberLineTask, BlackjackTask, SequenceTask]


def shape_numberline(c: int, y: int, l: float) -> float:
    """Shaped reward l / (|c - y| + 1); maximal exactly at y = c."""
    if not l > 0:
        raise ShapingError(f"scaling constant must be positive, got {l}")
    return l / (abs(c - y) + 1)


def shape_blackjack(r: int, eps: float = REWARD_FLOOR) -> float:
    """Map the raw outcome in {-1, 0, 1} to max(eps, (r + 1) * 10)."""
    if r not in (-1, 0, 1):
        raise ContractViolationError(f"raw blackjack reward must be -1, 0 or 1, got {r}")
    return max(eps, (r + 1) * 10.0)


def arithmetic_continuation(shown: tuple[int, ...]) -> int | None:
    """Next term under a constant-increment rule, if the prefix obeys one."""
    diffs = {shown[i + 1] - shown[i] for i in range(len(shown) - 1)}
    if len(diffs) == 1:
        return shown[-1] + diffs.pop()
    return None


def additive_continuation(shown: tuple[int, ...]) -> int | None:
    """Next term under the sum-of-previous-two rule, if the prefix obeys it."""
    ok = all(shown[i] == shown[i - 1] + shown[i - 2] for i in range(2, len(shown)))
    return shown[-1] + shown[-2] if ok else None


def valid_continuations(shown: tuple[int, ...]) -> tuple[int, ...]:
    out = []
    for rule in (arithmetic_continuation, additive_continuation):
        nxt = rule(shown)
        if nxt is not None and nxt not in out:
            out.append(nxt)
    return tuple(sorted(out))


def sequence_reward(shown: tuple[int, ...], proposed: int, high: float = 100.0,
                    eps: float = REWARD_FLOOR) -> float:
    """High reward for either rule-consistent continuation, the floor otherwise."""
    if len(shown) < 3:
        raise ValueError("need at least 3 shown terms")
    return high if proposed in valid_continuations(shown) else eps


def candidate_continuations(shown: tuple[int, ...], total: int = 4) -> tuple[int, ...]:
    """Valid continuations padded with deterministic distractors, sorted."""
    cands = set(valid_continuations(shown))
    filler = shown[-1] + 1
    while len(cands) < total:
        if filler not in cands:
            cands.add(filler)
        filler += 1
    return tuple(sorted(cands))


class Environment:
    """Single-threaded episode state machine. One instance per thread."""

    stochastic = False

    def __init__(self, config: EnvConfig, cot_alphabet: int = 4):
        self.config = config
        self.vocab = Vocabulary.build(
            actions=self.action_names(),
            value_range=self.value_range(),
            cot_alphabet=cot_alphabet,
        )
        self._done = True  # no episode until reset

    # --- per-environment hooks -------------------------------------------
    def action_names(self) -> tuple[str, ...]:
        raise NotImplementedError

    def value_range(self) -> tuple[int, int]:
        raise NotImplementedError

    def task_from_seed(self, task_seed: int) -> Task:
        raise NotImplementedError

    def reset_to(self, task: Task, draw_seed: int = 0) -> tuple[str, Observation, tuple[int, ...]]:
        raise NotImplementedError

    def step(self, action: int) -> EnvStep:
        raise NotImplementedError

    def is_success(self, traj: Trajectory) -> bool:
        raise NotImplementedError

    def raw_outcome(self, traj: Trajectory) -> float:
        raise NotImplementedError

    def prefix_reward(self, traj: Trajectory, i: int) -> float:
        raise NotImplementedError

    # --- shared surface ----------------------------------------------------
    def task_label(self, task: Task) -> str:
        if isinstance(task, NumberLineTask):
            return f"reach {task.target} from {task.start}"
        if isinstance(task, SequenceTask):
            return "seq " + "-".join(str(v) for v in task.shown)
        return "hand"

    def pinned_task(self) -> Task | None:
        return None

    def task_for(self, task_seed: int) -> Task:
        return self.pinned_task() or self.task_from_seed(task_seed)

    def reset(self, episode_seed: int) -> tuple[str, Observation, tuple[int, ...]]:
        """Deterministic function of (config, episode_seed)."""
        return self.reset_to(self.task_for(episode_seed), draw_seed=episode_seed)

    def _require_admissible(self, action: int, admissible: tuple[int, ...]) -> None:
        if self._done:
            raise ContractViolationError("step() called on a finished episode")
        if action not in admissible:
            names = [self.vocab.name_of(a) for a in admissible]
            raise ContractViolationError(
                f"action {self.vocab.name_of(action)!r} not admissible (admissible: {names})"
            )

    def _free_admissible(self, moves: tuple[str, ...]) -> tuple[int, ...]:
        ids = [self.vocab.id_of(m) for m in moves]
        if self.config.include_done:
            ids.append(self.vocab.done_id)
        return tuple(ids)

    def _terminal_admissible(self) -> tuple[int, ...]:
        return (self.vocab.done_id,)


class NumberLineEnv(Environment):
    """Move an integer to a target with +/- steps; dense shaped reward."""

    def action_names(self) -> tuple[str, ...]:
        return ("+", "-")

    def value_range(self) -> tuple[int, int]:
        c = self.config
        return (c.n_min - c.steps_limit, c.n_max + c.steps_limit)

    def pinned_task(self) -> NumberLineTask | None:
        c = self.config
        if c.target is None and c.start is None:
            return None
        if c.target is None or c.start is None:
            raise ValueError("pin both target and start, or neither")
        return NumberLineTask(target=c.target, start=c.start)

    def task_from_seed(self, task_seed: int) -> NumberLineTask:
        c = self.config
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((c.seed, 1, task_seed))))
        target = int(rng.integers(c.n_min, c.n_max + 1))
        # the start never coincides with the target: there is a decision to make
        start = int(rng.integers(c.n_min, c.n_max))
        if start >= target:
            start += 1
        return NumberLineTask(target=target, start=start)

    def reset_to(self, task: NumberLineTask, draw_seed: int = 0) -> tuple[str, Observation, tuple[int, ...]]:
        self._target = task.target
        self._y = task.start
        self._t = 0
        self._done = False
        # starting on the target leaves exactly one legal action: stop
        self._finished = self._y == self._target
        goal = f"reach {self._target}"
        return goal, self._obs(), self._admissible()

    def _obs(self) -> Observation:
        return Observation((("current", self._y), ("target", self._target)))

    def _admissible(self) -> tuple[int, ...]:
        if self._finished:
            return self._terminal_admissible()
        return self._free_admissible(("+", "-"))

    def step(self, action: int) -> EnvStep:
        self._require_admissible(action, self._admissible())
        cfg = self.config
        if action == self.vocab.done_id:
            self._done = True
            reward = shape_numberline(self._target, self._y, cfg.scale)
            return EnvStep(reward, self._obs(), self._terminal_admissible(), True)
        delta = 1 if self.vocab.name_of(action) == "+" else -1
        lo, hi = cfg.n_min - cfg.steps_limit, cfg.n_max + cfg.steps_limit
        self._y = min(max(self._y + delta, lo), hi)
        self._t += 1
        if self._y == self._target or self._t >= cfg.steps_limit:
            self._done = True
            reward = shape_numberline(self._target, self._y, cfg.scale)
            return EnvStep(reward, self._obs(), self._terminal_admissible(), True)
        return EnvStep(0.0, self._obs(), self._admissible(), False)

    def is_success(self, traj: Trajectory) -> bool:
        if not traj.terminated:
            return False
        final = traj.steps[-1].observation
        return final.value("current") == final.value("target")

    def raw_outcome(self, traj: Trajectory) -> float:
        return 1.0 if self.is_success(traj) else 0.0

    def prefix_reward(self, traj: Trajectory, i: int) -> float:
        obs = traj.steps[i].observation
        return shape_numberline(obs.value("target"), obs.value("current"), self.config.scale)


def _hand_total(cards: list[int]) -> tuple[int, int]:
    """(total, usable_ace) with one ace counted as 11 when it fits."""
    total = sum(cards)
    if 1 in cards and total + 10 <= 21:
        return total + 10, 1
    return total, 0


class BlackjackEnv(Environment):
    """Infinite-deck blackjack; dealer draws to 17; outcomes shaped to be positive."""

    stochastic = True

    def action_names(self) -> tuple[str, ...]:
        return ("stand", "hit")

    def value_range(self) -> tuple[int, int]:
        return (0, 31)

    def task_from_seed(self, task_seed: int) -> BlackjackTask:
        return BlackjackTask()

    def _draw(self) -> int:
        return min(int(self._rng.integers(1, 14)), 10)

    def reset_to(self, task: BlackjackTask, draw_seed: int = 0) -> tuple[str, Observation, tuple[int, ...]]:
        seq = np.random.SeedSequence((self.config.seed, 2, draw_seed))
        self._rng = np.random.Generator(np.random.PCG64(seq))
        self._player = [self._draw(), self._draw()]
        self._dealer = [self._draw(), self._draw()]
        self._t = 0
        self._done = False
        self._outcome = 0
        return "win", self._obs(), self._admissible()

    def _obs(self) -> Observation:
        total, ace = _hand_total(self._player)
        return Observation((("player", total), ("dealer", self._dealer[0]), ("ace", ace)))

    def _admissible(self) -> tuple[int, ...]:
        if self._done:
            return self._terminal_admissible()
        return self._free_admissible(("stand", "hit"))

    def _resolve(self, raw: int) -> EnvStep:
        self._done = True
        self._outcome = raw
        reward = shape_blackjack(raw, self.config.floor)
        return EnvStep(reward, self._obs(), self._terminal_admissible(), True)

    def step(self, action: int) -> EnvStep:
        self._require_admissible(action, self._admissible())
        if action == self.vocab.done_id:
            # claiming completion mid-round forfeits the hand
            return self._resolve(-1)
        name = self.vocab.name_of(action)
        self._t += 1
        if name == "hit":
            self._player.append(self._draw())
            total, _ = _hand_total(self._player)
            if total > 21:
                return self._resolve(-1)
            if self._t >= self.config.steps_limit:
                return self._resolve(-1)
            return EnvStep(0.0, self._obs(), self._admissible(), False)
        # stand: dealer draws to 17, then totals are compared
        while _hand_total(self._dealer)[0] < 17:
            self._dealer.append(self._draw())
        player, _ = _hand_total(self._player)
        dealer, _ = _hand_total(self._dealer)
        if dealer > 21 or player > dealer:
            return self._resolve(1)
        return self._resolve(0 if player == dealer else -1)

    def is_success(self, traj: Trajectory) -> bool:
        return traj.terminated and traj.terminal_reward == 20.0

    def raw_outcome(self, traj: Trajectory) -> float:
        if traj.terminal_reward == 20.0:
            return 1.0
        return 0.0 if traj.terminal_reward == 10.0 else -1.0

    def prefix_reward(self, traj: Trajectory, i: int) -> float:
        if traj.terminated and i == traj.transition_count:
            return traj.terminal_reward
        return self.config.floor


class SequencePatternEnv(Environment):
    """One-shot next-number prediction over rule-consistent integer prefixes."""

    def action_names(self) -> tuple[str, ...]:
        return ()

    def value_range(self) -> tuple[int, int]:
        cfg = self.config
        hi = cfg.seq_start_max + 3 * cfg.seq_step_max + 6
        if cfg.shown is not None:
            hi = max(hi, cfg.shown[-1] + cfg.shown[-2] + 6)
        hi = max(hi, 20)
        return (0, hi)

    def pinned_task(self) -> SequenceTask | None:
        if self.config.shown is None:
            return None
        return SequenceTask(shown=self.config.shown)

    def task_from_seed(self, task_seed: int) -> SequenceTask:
        cfg = self.config
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 1, task_seed))))
        if rng.integers(0, 2) == 0:
            start = int(rng.integers(1, cfg.seq_start_max + 1))
            step = int(rng.integers(1, cfg.seq_step_max + 1))
            shown = (start, start + step, start + 2 * step)
        else:
            a = int(rng.integers(1, 5))
            b = int(rng.integers(1, 5))
            shown = (a, b, a + b)
        return SequenceTask(shown=shown)

    def reset_to(self, task: SequenceTask, draw_seed: int = 0) -> tuple[str, Observation, tuple[int, ...]]:
        self._shown = task.shown
        self._chosen: int | None = None
        self._done = False
        obs = self._obs()
        return "continue the sequence", obs, self._admissible()

    def _obs(self) -> Observation:
        fields = [(f"s{i}", v) for i, v in enumerate(self._shown)]
        if self._chosen is not None:
            fields.append(("chosen", self._chosen))
        return Observation(tuple(fields))

    def _admissible(self) -> tuple[int, ...]:
        if self._done:
            return self._terminal_admissible()
        # DONE is withheld until an answer exists, independent of include_done
        return tuple(self.vocab.value_id(v) for v in candidate_continuations(self._shown))

    def step(self, action: int) -> EnvStep:
        self._require_admissible(action, self._admissible())
        name = self.vocab.name_of(action)
        self._chosen = int(name[1:])  # value tokens are "v{n}"
        self._done = True
        reward = sequence_reward(self._shown, self._chosen, self.config.scale, self.config.floor)
        return EnvStep(reward, self._obs(), self._terminal_admissible(), True)

    def is_success(self, traj: Trajectory) -> bool:
        return traj.terminated and traj.terminal_reward == self.config.scale

    def raw_outcome(self, traj: Trajectory) -> float:
        return 1.0 if self.is_success(traj) else 0.0

    def prefix_reward(self, traj: Trajectory, i: int) -> float:
        if traj.terminated and i == traj.transition_count:
            return traj.terminal_reward
        return self.config.floor


_ENV_CLASSES = {
    NUMBERLINE: NumberLineEnv,
    BLACKJACK: BlackjackEnv,
    SEQUENCE: SequencePatternEnv,
}


def make_env(config: EnvConfig, cot_alphabet: int = 4) -> Environment:
    return _ENV_CLASSES[config.kind](config, cot_alphabet=cot_alphabet)


def drive_episode(env: Environment, task: Task, draw_seed: int, choose) -> Trajectory:
    """Run one episode to termination and record it.

    ``choose(observation, admissible) -> (cot, action)`` supplies decisions at
    free points. When the environment finishes the episode on a move, a forced
    probability-one DONE step is appended at the terminal state so that every
    terminated trajectory closes with a DONE-labelled record carrying the
    terminal reward.
    """
    goal, obs, admissible = env.reset_to(task, draw_seed)
    done_id = env.vocab.done_id
    steps: list[StepRecord] = []
    while True:
        cot, action = choose(obs, admissible)
        out = env.step(action)
        if action == done_id:
            steps.append(StepRecord(obs, admissible, tuple(cot), action, out.reward))
            return Trajectory(goal, tuple(steps), True, out.reward)
        steps.append(StepRecord(obs, admissible, tuple(cot), action, 0.0))
        if out.done:
            steps.append(StepRecord(out.observation, out.admissible, (), done_id, out.reward))
            return Trajectory(goal, tuple(steps), True, out.reward)
        obs, admissible = out.observation, out.admissible


def check_prefix_rewards(env: Environment, traj: Trajectory) -> list[float]:
    """All R(prefix + stop) values a balance loss needs, floor-checked."""
    out = []
    for i in range(traj.transition_count + 1):
        r = env.prefix_reward(traj, i)
        if not r > 0 or math.isinf(r) or math.isnan(r):
            raise ShapingError(f"prefix reward {r} at index {i} is not strictly positive")
        out.append(r)
    return out
