"""Non-Markovian autoregressive policy over a token vocabulary.

The network is a small recurrent summarizer: history tokens (observation
values and actions, delimited by structural markers) are embedded and folded
into a hidden state; output logits are masked to the admissible token set and
tempered before log-softmax. Each decision optionally emits a fixed-length
reasoning-token segment first; its log-probability enters the forward
log-probability with weight ``cot_weight``:

    log_pf = log_p_action + cot_weight * log_p_cot

Sampling and teacher-forced re-scoring run the exact same graph ops, so a
step scored immediately after sampling reproduces the sampled log-probability
bit-for-bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .core import ACT_MARK, OBS_MARK, Observation, Trajectory, Vocabulary

logger = logging.getLogger(__name__)

# log-probability assigned to termination when DONE is not in the mask
TERMINAL_LOG_FLOOR = np.log(1e-30)


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 12
    hidden_dim: int = 24
    cot_length: int = 0
    cot_alphabet: int = 4
    cot_weight: float = 0.4
    temperature: float = 1.0
    markovian: bool = False
    init_scale: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.cot_weight <= 1.0:
            raise ValueError(f"cot_weight must be in [0, 1], got {self.cot_weight}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.cot_length < 0:
            raise ValueError(f"cot_length must be >= 0, got {self.cot_length}")
        if self.cot_length > 0 and self.cot_alphabet < 1:
            raise ValueError("cot_length > 0 needs a non-empty reasoning alphabet")


class PolicyParameters:
    """Named dense float64 tensors; the sole trainable state."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} has non-finite entries")

    @classmethod
    def initial(cls, config: PolicyConfig, vocab: Vocabulary) -> "PolicyParameters":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, 0))))
        v, e, h = len(vocab), config.embed_dim, config.hidden_dim
        s = config.init_scale
        return cls({
            "emb": rng.normal(0.0, s, size=(v, e)),
            "w_in": rng.normal(0.0, s / np.sqrt(e), size=(e, h)),
            "w_rec": rng.normal(0.0, s / np.sqrt(h), size=(h, h)),
            "b_rec": np.zeros(h),
            "w_out": rng.normal(0.0, s / np.sqrt(h), size=(h, v)),
            "b_out": np.zeros(v),
        })

    def copy(self) -> "PolicyParameters":
        return PolicyParameters({k: v.copy() for k, v in self.arrays.items()})

    def leaves(self, tape: Tape) -> dict[str, Node]:
        return {name: tape.leaf(arr, name) for name, arr in self.arrays.items()}

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())


def save_arrays(arrays: dict[str, np.ndarray], base: str | Path, meta: dict | None = None) -> None:
    """Flat little-endian float64 dump plus a JSON shape manifest."""
    base = Path(base)
    entries = []
    offset = 0
    with open(base.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += data.size
    manifest = {"dtype": "<f8", "entries": entries, "meta": meta or {}}
    with open(base.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_arrays(base: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    base = Path(base)
    with open(base.with_suffix(".json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    flat = np.frombuffer(Path(base.with_suffix(".bin")).read_bytes(), dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        chunk = flat[entry["offset"]: entry["offset"] + size]
        if chunk.size != size:
            raise ValueError(f"checkpoint truncated at entry {entry['name']!r}")
        arrays[entry["name"]] = chunk.reshape(shape).astype(np.float64).copy()
    return arrays, manifest.get("meta", {})


@dataclass
class PolicyOutput:
    cot: tuple[int, ...]
    action: int
    log_p_cot: Node
    log_p_action: Node
    log_p_forward: Node


@dataclass
class StepScore:
    """Teacher-forced scores for one recorded step."""

    log_p_cot: Node
    log_p_action: Node
    log_p_forward: Node


@dataclass
class TrajectoryScore:
    steps: list[StepScore]
    terminal: list[Node] | None  # DONE mass at each prefix 0..len(steps)-1

    @property
    def log_p_forward_sum(self) -> Node:
        return ad.nsum([s.log_p_forward for s in self.steps])


class Policy:
    """Stateless scorer/sampler; parameters are passed in as tape leaves."""

    def __init__(self, config: PolicyConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        if config.cot_length > 0 and len(vocab.cot_ids) < config.cot_alphabet:
            raise ValueError("vocabulary reasoning alphabet smaller than configured")
        self._obs_mark = vocab.id_of(OBS_MARK)
        self._act_mark = vocab.id_of(ACT_MARK)

    def init_parameters(self) -> PolicyParameters:
        return PolicyParameters.initial(self.config, self.vocab)

    # --- recurrent core ---------------------------------------------------
    def _h0(self, tape: Tape) -> Node:
        return tape.constant(np.zeros(self.config.hidden_dim))

    def _chain(self, leaves: dict[str, Node], h: Node, token: int) -> Node:
        e = ad.gather(leaves["emb"], token)
        return ad.tanh(ad.matmul(e, leaves["w_in"]) + ad.matmul(h, leaves["w_rec"])
                       + leaves["b_rec"])

    def _obs_tokens(self, obs: Observation) -> list[int]:
        return [self._obs_mark] + [self.vocab.value_id(v) for v in obs.values()]

    def _masked_log_probs(self, leaves: dict[str, Node], h: Node,
                          ids: tuple[int, ...]) -> Node:
        logits = ad.matmul(h, leaves["w_out"]) + leaves["b_out"]
        return ad.log_softmax(ad.gather(logits, list(ids)) / self.config.temperature)

    # --- history encoding ---------------------------------------------------
    def encode_history(self, tape: Tape, leaves: dict[str, Node],
                       traj: Trajectory, t: int) -> Node:
        """Hidden state at decision point ``t`` (observation ``t`` included).

        In Markovian mode only the current observation is consumed, so the
        result is literally a function of ``steps[t].observation``.
        """
        if not 0 <= t < len(traj.steps):
            raise IndexError(f"decision index {t} out of range")
        h = self._h0(tape)
        if not self.config.markovian:
            for step in traj.steps[:t]:
                for tok in self._obs_tokens(step.observation):
                    h = self._chain(leaves, h, tok)
                h = self._chain(leaves, h, self._act_mark)
                h = self._chain(leaves, h, step.action)
        for tok in self._obs_tokens(traj.steps[t].observation):
            h = self._chain(leaves, h, tok)
        return h

    # --- acting -------------------------------------------------------------
    def step_from_hidden(self, tape: Tape, leaves: dict[str, Node], h: Node,
                         admissible: tuple[int, ...],
                         rng: np.random.Generator) -> PolicyOutput:
        """Sample a reasoning segment then one admissible action."""
        if not admissible:
            raise ValueError("empty admissible set")
        cot: list[int] = []
        cot_terms: list[Node] = []
        h_c = h
        if self.config.cot_length > 0:
            cot_ids = self.vocab.cot_ids[: self.config.cot_alphabet]
            for _ in range(self.config.cot_length):
                dist = self._masked_log_probs(leaves, h_c, cot_ids)
                k = _sample_index(dist.value, rng)
                cot.append(cot_ids[k])
                cot_terms.append(ad.gather(dist, k))
                h_c = self._chain(leaves, h_c, cot_ids[k])
        dist = self._masked_log_probs(leaves, h_c, admissible)
        k = _sample_index(dist.value, rng)
        log_p_action = ad.gather(dist, k)
        log_p_cot = ad.nsum(cot_terms) if cot_terms else tape.constant(0.0)
        log_p_forward = log_p_action + ad.mul(log_p_cot, self.config.cot_weight)
        return PolicyOutput(tuple(cot), admissible[k], log_p_cot, log_p_action, log_p_forward)

    # --- teacher-forced scoring ----------------------------------------------
    def _score_decision(self, tape: Tape, leaves: dict[str, Node], h: Node,
                        step, want_terminal: bool) -> tuple[StepScore, Node | None]:
        ids = step.admissible
        base = self._masked_log_probs(leaves, h, ids)
        terminal = None
        if want_terminal:
            if self.vocab.done_id in ids:
                terminal = ad.gather(base, ids.index(self.vocab.done_id))
            else:
                logger.warning(
                    "termination weight requested at a prefix whose admissible set "
                    "has no DONE token; returning the hard floor"
                )
                terminal = tape.constant(TERMINAL_LOG_FLOOR)
        h_c = h
        cot_terms: list[Node] = []
        for tok in step.cot:
            cot_ids = self.vocab.cot_ids[: self.config.cot_alphabet]
            dist = self._masked_log_probs(leaves, h_c, cot_ids)
            cot_terms.append(ad.gather(dist, cot_ids.index(tok)))
            h_c = self._chain(leaves, h_c, tok)
        if step.cot:
            action_dist = self._masked_log_probs(leaves, h_c, ids)
        else:
            action_dist = base
        log_p_action = ad.gather(action_dist, ids.index(step.action))
        log_p_cot = ad.nsum(cot_terms) if cot_terms else tape.constant(0.0)
        log_p_forward = log_p_action + ad.mul(log_p_cot, self.config.cot_weight)
        return StepScore(log_p_cot, log_p_action, log_p_forward), terminal

    def score_trajectory(self, tape: Tape, leaves: dict[str, Node], traj: Trajectory,
                         want_terminal: bool = False) -> TrajectoryScore:
        """Score every recorded step (and termination mass at every prefix)."""
        scores: list[StepScore] = []
        terminals: list[Node] = []
        h = self._h0(tape)
        for step in traj.steps:
            if self.config.markovian:
                h = self._h0(tape)
            for tok in self._obs_tokens(step.observation):
                h = self._chain(leaves, h, tok)
            score, terminal = self._score_decision(tape, leaves, h, step, want_terminal)
            scores.append(score)
            if want_terminal:
                terminals.append(terminal)
            if not self.config.markovian:
                h = self._chain(leaves, h, self._act_mark)
                h = self._chain(leaves, h, step.action)
        return TrajectoryScore(steps=scores, terminal=terminals if want_terminal else None)

    def log_p_forward_of(self, tape: Tape, leaves: dict[str, Node],
                         traj: Trajectory, t: int) -> Node:
        """Forward log-probability of recorded step ``t`` under current parameters."""
        if not 0 <= t < len(traj.steps):
            raise IndexError(f"step index {t} out of range")
        h = self.encode_history(tape, leaves, traj, t)
        score, _ = self._score_decision(tape, leaves, h, traj.steps[t], want_terminal=False)
        return score.log_p_forward

    def terminal_log_prob(self, tape: Tape, leaves: dict[str, Node],
                          traj: Trajectory, i: int) -> Node:
        """Log-mass the masked action distribution puts on DONE at prefix ``i``."""
        h = self.encode_history(tape, leaves, traj, i)
        step = traj.steps[i]
        if self.vocab.done_id not in step.admissible:
            logger.warning(
                "termination weight requested at a prefix whose admissible set "
                "has no DONE token; returning the hard floor"
            )
            return tape.constant(TERMINAL_LOG_FLOOR)
        dist = self._masked_log_probs(leaves, h, step.admissible)
        return ad.gather(dist, step.admissible.index(self.vocab.done_id))


class EpisodeSampler:
    """Incremental within-episode sampler; usable as a ``drive_episode`` chooser.

    Maintains the running hidden state so each decision costs only the new
    tokens. The op sequence matches ``score_trajectory`` exactly, so scoring
    a fresh rollout under unchanged parameters reproduces the sampled
    log-probabilities bit-for-bit.
    """

    def __init__(self, policy: Policy, tape: Tape, leaves: dict[str, Node],
                 rng: np.random.Generator):
        self.policy = policy
        self.tape = tape
        self.leaves = leaves
        self.rng = rng
        self._h = policy._h0(tape)
        self.outputs: list[PolicyOutput] = []

    def __call__(self, obs: Observation, admissible: tuple[int, ...]) -> tuple[tuple[int, ...], int]:
        p = self.policy
        if p.config.markovian:
            self._h = p._h0(self.tape)
        for tok in p._obs_tokens(obs):
            self._h = p._chain(self.leaves, self._h, tok)
        out = p.step_from_hidden(self.tape, self.leaves, self._h, admissible, self.rng)
        self.outputs.append(out)
        if not p.config.markovian:
            self._h = p._chain(self.leaves, self._h, p._act_mark)
            self._h = p._chain(self.leaves, self._h, out.action)
        return out.cot, out.action


def _sample_index(log_probs: np.ndarray, rng: np.random.Generator) -> int:
    """Draw an index from a log-probability vector, tolerance-free."""
    p = np.exp(log_probs)
    cum = np.cumsum(p)
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
