"""Shared domain types: vocabularies, observations, step records, trajectories.

All types here are immutable after construction and safe to share across
threads. Trajectories serialize to JSON Lines (one trajectory per line) with
a stable field order, and round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

DONE_TOKEN = "[DONE]"

# structural markers used when flattening a history into a token stream
OBS_MARK = "<obs>"
ACT_MARK = "<act>"


class DataCorruptionError(ValueError):
    """A stored record violates an invariant it was built under."""


@dataclass(frozen=True)
class Vocabulary:
    """Fixed token table. A token is its integer index into ``tokens``.

    The table always contains the termination token ``[DONE]`` plus the
    structural markers used by history encoders. Environment-specific action
    names, integer value tokens (``v{n}``) and an auxiliary reasoning-token
    alphabet (``<c{i}>``) are appended at build time.
    """

    tokens: tuple[str, ...]
    _index: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        index = {name: i for i, name in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate token names in vocabulary")
        if DONE_TOKEN not in index:
            raise ValueError(f"vocabulary must contain {DONE_TOKEN!r}")
        object.__setattr__(self, "_index", index)

    @classmethod
    def build(
        cls,
        actions: Iterable[str],
        value_range: tuple[int, int],
        cot_alphabet: int = 4,
    ) -> "Vocabulary":
        """Assemble the table: markers, DONE, actions, values, CoT symbols.

        ``value_range`` is inclusive on both ends.
        """
        lo, hi = value_range
        if lo > hi:
            raise ValueError(f"empty value range [{lo}, {hi}]")
        names: list[str] = [OBS_MARK, ACT_MARK, DONE_TOKEN]
        for a in actions:
            if a in names:
                raise ValueError(f"action name {a!r} collides with a reserved token")
            names.append(a)
        names.extend(f"v{n}" for n in range(lo, hi + 1))
        names.extend(f"<c{i}>" for i in range(cot_alphabet))
        return cls(tokens=tuple(names))

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"token {name!r} not in vocabulary") from None

    def name_of(self, token: int) -> str:
        if not 0 <= token < len(self.tokens):
            raise IndexError(f"token id {token} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[token]

    @property
    def done_id(self) -> int:
        return self._index[DONE_TOKEN]

    def value_id(self, n: int) -> int:
        return self.id_of(f"v{n}")

    @property
    def cot_ids(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.tokens) if t.startswith("<c"))


@dataclass(frozen=True)
class Observation:
    """Symbolic observation: an ordered tuple of named integer fields.

    The ordered-pairs form makes the canonical text encoding ``d(o)``
    injective and keeps JSON serialization order-stable.
    """

    fields: tuple[tuple[str, int], ...]

    def text(self) -> str:
        return " ".join(f"{name}={value}" for name, value in self.fields)

    def value(self, name: str) -> int:
        for k, v in self.fields:
            if k == name:
                return v
        raise KeyError(f"observation has no field {name!r}")

    def values(self) -> tuple[int, ...]:
        return tuple(v for _, v in self.fields)


@dataclass(frozen=True)
class StepRecord:
    """One decision: observation, admissible actions, reasoning tokens, action, reward."""

    observation: Observation
    admissible: tuple[int, ...]
    cot: tuple[int, ...]
    action: int
    reward: float

    def __post_init__(self) -> None:
        if self.action not in self.admissible:
            raise ValueError(
                f"action {self.action} not in admissible set {self.admissible}"
            )
        if not self.reward >= 0.0:
            raise ValueError(f"negative step reward {self.reward}")


@dataclass(frozen=True)
class Trajectory:
    """Ordered record of one episode; the unit every loss consumes.

    A terminated trajectory always ends with a DONE-labelled step (either the
    agent's own choice, or a forced singleton step appended when the
    environment ends the episode). The number of state transitions is
    therefore ``len(steps) - 1`` when terminated.
    """

    goal: str
    steps: tuple[StepRecord, ...]
    terminated: bool
    terminal_reward: float

    def __post_init__(self) -> None:
        if not self.terminal_reward >= 0.0:
            raise ValueError(f"negative terminal reward {self.terminal_reward}")
        if self.terminated and not self.steps:
            raise ValueError("terminated trajectory with no steps")

    @property
    def transition_count(self) -> int:
        """Number of state-to-state moves (the terminal DONE step is not a move)."""
        return len(self.steps) - 1 if self.terminated else len(self.steps)

    def action_names(self, vocab: Vocabulary) -> tuple[str, ...]:
        return tuple(vocab.name_of(s.action) for s in self.steps)


def trajectory_prefix(traj: Trajectory, i: int) -> Trajectory:
    """First ``i`` steps of ``traj``; terminated only when the full trajectory is kept."""
    if not 0 <= i <= len(traj.steps):
        raise IndexError(
            f"prefix index {i} out of range for trajectory of {len(traj.steps)} steps"
        )
    full = i == len(traj.steps)
    return Trajectory(
        goal=traj.goal,
        steps=traj.steps[:i],
        terminated=traj.terminated and full,
        terminal_reward=traj.terminal_reward if full else 0.0,
    )


def trajectory_key(traj: Trajectory, vocab: Vocabulary) -> str:
    """Canonical identity of a trajectory: goal plus its action sequence.

    Reasoning tokens are deliberately excluded; two rollouts that take the
    same actions for the same goal count as the same outcome.
    """
    return json.dumps([traj.goal, list(traj.action_names(vocab))], separators=(",", ":"))


def canonical_history_text(traj: Trajectory, vocab: Vocabulary | None = None) -> str:
    """Deterministic, injective text encoding of a trajectory's history.

    Layout: a goal line, then alternating ``State t`` / ``Action t`` lines,
    then a trailing ``State n:`` header marking the current (possibly
    unknown) state. All interpolated strings are JSON-escaped so no two
    distinct histories can collide.
    """
    lines = [f"Goal: {json.dumps(traj.goal)}"]
    for t, step in enumerate(traj.steps):
        adm = ",".join(str(a) for a in step.admissible)
        lines.append(f"State {t}: {json.dumps(step.observation.text())} adm=[{adm}]")
        action = vocab.name_of(step.action) if vocab is not None else str(step.action)
        cot = ",".join(str(c) for c in step.cot)
        lines.append(f"Action {t}: {json.dumps(action)} cot=[{cot}]")
    lines.append(f"State {len(traj.steps)}:")
    return "\n".join(lines)


def _step_to_obj(step: StepRecord, vocab: Vocabulary) -> dict:
    return {
        "observation": [[name, value] for name, value in step.observation.fields],
        "admissible": [vocab.name_of(a) for a in step.admissible],
        "cot": [vocab.name_of(c) for c in step.cot],
        "action": vocab.name_of(step.action),
        "reward": step.reward,
    }


def _step_from_obj(obj: dict, vocab: Vocabulary) -> StepRecord:
    try:
        return StepRecord(
            observation=Observation(tuple((n, int(v)) for n, v in obj["observation"])),
            admissible=tuple(vocab.id_of(a) for a in obj["admissible"]),
            cot=tuple(vocab.id_of(c) for c in obj["cot"]),
            action=vocab.id_of(obj["action"]),
            reward=float(obj["reward"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataCorruptionError(f"malformed step record: {exc}") from exc


def trajectory_to_json(traj: Trajectory, vocab: Vocabulary) -> str:
    """One-line JSON form with stable field order."""
    obj = {
        "goal": traj.goal,
        "steps": [_step_to_obj(s, vocab) for s in traj.steps],
        "terminated": traj.terminated,
        "terminal_reward": traj.terminal_reward,
    }
    return json.dumps(obj, separators=(",", ":"))


def trajectory_from_json(line: str, vocab: Vocabulary) -> Trajectory:
    obj = json.loads(line)
    try:
        return Trajectory(
            goal=obj["goal"],
            steps=tuple(_step_from_obj(s, vocab) for s in obj["steps"]),
            terminated=bool(obj["terminated"]),
            terminal_reward=float(obj["terminal_reward"]),
        )
    except KeyError as exc:
        raise DataCorruptionError(f"trajectory record missing field {exc}") from exc


def write_trajectories(path: str, trajectories: Iterable[Trajectory], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(trajectory_to_json(traj, vocab))
            fh.write("\n")


def read_trajectories(path: str, vocab: Vocabulary) -> Iterator[Trajectory]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield trajectory_from_json(line, vocab)
