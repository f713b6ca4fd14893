"""Supervised pretraining, the flow-balance training loop, and a
reward-maximizing REINFORCE comparator.

The loop mirrors the per-task structure of the sampling procedure it
implements: for each task, roll K episodes into a fresh bounded buffer,
optionally inject rule-based trajectories for failed episodes, sample a
batch back out, and take one optimizer step. Everything is seeded through
``numpy.random.SeedSequence`` so a run is a pure function of its configs.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tape
from .core import Trajectory
from .data import (
    ReplayBuffer,
    SftExample,
    build_sft_dataset,
    heuristic_blackjack_trajectory,
    oracle_numberline,
)
from .envs import (
    BlackjackEnv,
    EnvConfig,
    Environment,
    NumberLineEnv,
    check_prefix_rewards,
    drive_episode,
    make_env,
)
from .policy import EpisodeSampler, Policy, PolicyConfig, PolicyParameters, load_arrays, save_arrays

logger = logging.getLogger(__name__)

GFN = "gfn"
PG = "pg"

METRICS_COLUMNS = ("step", "task", "loss", "success_rate", "mean_reward", "lr")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    loss: str = L.VAR_TB
    algo: str = GFN
    num_tasks: int = 100
    rollouts_per_task: int = 4
    buffer_capacity: int = 4
    off_policy: bool = False
    sft_init: bool = False
    sft_episodes: int = 64
    sft_epochs: int = 40
    sft_lr: float = 0.05
    lr_initial: float = 1e-5
    lr_final: float = 1e-9
    lr_peak_step: int = 25
    total_steps: int | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    baseline_momentum: float = 0.99
    divergence_threshold: float = 1e6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.algo not in (GFN, PG):
            raise ValueError(f"unknown algo {self.algo!r}")
        # validates the loss kind and the VarTB batch-size requirement
        L.LossConfig(kind=self.loss, batch_size=self.rollouts_per_task)
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if not self.lr_initial >= self.lr_final > 0:
            raise ValueError("need lr_initial >= lr_final > 0")
        if self.lr_peak_step < 1:
            raise ValueError("lr_peak_step must be >= 1")

    @property
    def schedule_steps(self) -> int:
        return self.total_steps if self.total_steps is not None else self.num_tasks


def lr_at(step: int, config: TrainerConfig) -> float:
    """Linear warmup to the peak at ``lr_peak_step``, cosine decay to ``lr_final``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    peak = config.lr_peak_step
    total = max(config.schedule_steps, peak + 1)
    if step <= peak:
        return config.lr_initial * (step / peak)
    if step >= total:
        return config.lr_final
    x = (step - peak) / (total - peak)
    return config.lr_final + (config.lr_initial - config.lr_final) * 0.5 * (1.0 + math.cos(math.pi * x))


class Adam:
    """Adaptive-moment optimizer over named parameter arrays."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def update(self, params: PolicyParameters, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            params.arrays[name] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainState:
    params: PolicyParameters
    adam: Adam
    step: int = 0
    metrics: list[dict] = field(default_factory=list)

    def save(self, base: str | Path) -> None:
        arrays = dict(self.params.arrays)
        for name, arr in self.adam.m.items():
            arrays[f"adam_m.{name}"] = arr
        for name, arr in self.adam.v.items():
            arrays[f"adam_v.{name}"] = arr
        save_arrays(arrays, base, meta={"step": self.step, "adam_t": self.adam.t})

    @classmethod
    def load(cls, base: str | Path) -> "TrainState":
        arrays, meta = load_arrays(base)
        params = {k: v for k, v in arrays.items() if not k.startswith("adam_")}
        state = cls(params=PolicyParameters(params),
                    adam=Adam({k: v.shape for k, v in params.items()}),
                    step=int(meta.get("step", 0)))
        state.adam.t = int(meta.get("adam_t", 0))
        for k, v in arrays.items():
            if k.startswith("adam_m."):
                state.adam.m[k[len("adam_m."):]] = v
            elif k.startswith("adam_v."):
                state.adam.v[k[len("adam_v."):]] = v
        return state


def run_episode(env: Environment, policy: Policy, params: PolicyParameters,
                task, draw_seed: int, rng: np.random.Generator) -> Trajectory:
    """One sampled rollout; the recording carries no graph state."""
    tape = Tape()
    leaves = params.leaves(tape)
    sampler = EpisodeSampler(policy, tape, leaves, rng)
    return drive_episode(env, task, draw_seed, sampler)


def _episode_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, *key))))


def sft_train(dataset: list[SftExample], policy: Policy, params: PolicyParameters,
              config: TrainerConfig) -> tuple[PolicyParameters, list[float]]:
    """Cross-entropy on recorded reasoning and action tokens, full-batch Adam."""
    if not dataset:
        raise ValueError("SFT dataset is empty")
    params = params.copy()
    adam = Adam({k: v.shape for k, v in params.arrays.items()},
                config.adam_beta1, config.adam_beta2, config.adam_eps)
    trajs: list[Trajectory] = []
    picks: list[tuple[int, int]] = []  # (trajectory index, step index)
    index: dict[int, int] = {}
    for ex in dataset:
        key = id(ex.traj)
        if key not in index:
            index[key] = len(trajs)
            trajs.append(ex.traj)
        picks.append((index[key], ex.step))
    trace: list[float] = []
    for _ in range(config.sft_epochs):
        tape = Tape()
        leaves = params.leaves(tape)
        scores = [policy.score_trajectory(tape, leaves, t) for t in trajs]
        terms = [scores[ti].steps[si].log_p_action + scores[ti].steps[si].log_p_cot
                 for ti, si in picks]
        loss = ad.mul(ad.nmean(terms), -1.0)
        tape.backward(loss)
        adam.update(params, tape.gradients(leaves), config.sft_lr)
        trace.append(loss.item())
    return params, trace


def _inject_off_policy(env: Environment, task, draw_seed: int, buffer: ReplayBuffer) -> None:
    if isinstance(env, NumberLineEnv):
        buffer.push(oracle_numberline(env, task.target, task.start))
    elif isinstance(env, BlackjackEnv):
        buffer.push(heuristic_blackjack_trajectory(env, draw_seed))
    # the one-shot sequence task has no published injection rule


def batch_loss(kind: str, policy: Policy, params: PolicyParameters,
                env: Environment, batch: list[Trajectory]) -> tuple[Tape, ad.Node, dict[str, ad.Node]]:
    tape = Tape()
    leaves = params.leaves(tape)
    if kind == L.VAR_TB:
        scores = [policy.score_trajectory(tape, leaves, t) for t in batch]
        loss = L.var_tb_loss(scores, [t.terminal_reward for t in batch])
        return tape, loss, leaves
    per_traj = []
    for traj in batch:
        score = policy.score_trajectory(tape, leaves, traj, want_terminal=True)
        rewards = check_prefix_rewards(env, traj)
        if kind == L.SUBTB:
            per_traj.append(L.subtb_loss(score, rewards))
        else:
            per_traj.append(L.db_loss(score, rewards))
    return tape, ad.nmean(per_traj), leaves


def _check_finite(loss_value: float, threshold: float, context: str) -> None:
    if not math.isfinite(loss_value) or loss_value > threshold:
        raise TrainingDivergedError(f"{context}: loss {loss_value} exceeded guard {threshold}")


def _resolve_initial_params(env: Environment, policy: Policy, config: TrainerConfig,
                            initial: PolicyParameters | None) -> PolicyParameters:
    if initial is not None:
        params = initial.copy()
    else:
        params = policy.init_parameters()
    if config.sft_init:
        dataset = build_sft_dataset(env, config.sft_episodes, seed=config.seed)
        params, trace = sft_train(dataset, policy, params, config)
        logger.info("sft init: %d examples, loss %.4f -> %.4f",
                    len(dataset), trace[0], trace[-1])
    return params


def gfn_train(env_config: EnvConfig, policy_config: PolicyConfig, config: TrainerConfig,
              initial: PolicyParameters | None = None) -> TrainState:
    """Flow-balance training per the per-task rollout/update loop."""
    env = make_env(env_config, cot_alphabet=policy_config.cot_alphabet)
    policy = Policy(policy_config, env.vocab)
    params = _resolve_initial_params(env, policy, config, initial)
    adam = Adam({k: v.shape for k, v in params.arrays.items()},
                config.adam_beta1, config.adam_beta2, config.adam_eps)
    state = TrainState(params=params, adam=adam)
    k_eps = config.rollouts_per_task
    for w in range(config.num_tasks):
        task = env.task_for(w)
        buffer = ReplayBuffer(config.buffer_capacity)
        fresh: list[Trajectory] = []
        for k in range(k_eps):
            rng = _episode_rng(config.seed, 3, w, k)
            traj = run_episode(env, policy, params, task, draw_seed=w * k_eps + k, rng=rng)
            fresh.append(traj)
            buffer.push(traj)
            if config.off_policy and not env.is_success(traj):
                _inject_off_policy(env, task, draw_seed=(w * k_eps + k) + 10 ** 6, buffer=buffer)
        batch = buffer.sample(k_eps, _episode_rng(config.seed, 4, w))
        tape, loss, leaves = batch_loss(config.loss, policy, params, env, batch)
        _check_finite(loss.item(), config.divergence_threshold, f"task {w}")
        tape.backward(loss)
        adam.update(params, tape.gradients(leaves), lr_at(w, config))
        state.step = w + 1
        state.metrics.append({
            "step": w,
            "task": env.task_label(task),
            "loss": loss.item(),
            "success_rate": sum(env.is_success(t) for t in fresh) / len(fresh),
            "mean_reward": sum(t.terminal_reward for t in fresh) / len(fresh),
            "lr": lr_at(w, config),
        })
    return state


def pg_baseline_train(env_config: EnvConfig, policy_config: PolicyConfig,
                      config: TrainerConfig,
                      initial: PolicyParameters | None = None) -> TrainState:
    """REINFORCE with a moving-average baseline on the raw episode outcome."""
    env = make_env(env_config, cot_alphabet=policy_config.cot_alphabet)
    policy = Policy(policy_config, env.vocab)
    params = _resolve_initial_params(env, policy, config, initial)
    adam = Adam({k: v.shape for k, v in params.arrays.items()},
                config.adam_beta1, config.adam_beta2, config.adam_eps)
    state = TrainState(params=params, adam=adam)
    baseline = 0.0
    mom = config.baseline_momentum
    for w in range(config.num_tasks):
        task = env.task_for(w)
        fresh: list[Trajectory] = []
        advantages: list[float] = []
        for k in range(config.rollouts_per_task):
            rng = _episode_rng(config.seed, 3, w, k)
            traj = run_episode(env, policy, params, task,
                               draw_seed=w * config.rollouts_per_task + k, rng=rng)
            outcome = env.raw_outcome(traj)
            advantages.append(outcome - baseline)
            baseline = mom * baseline + (1.0 - mom) * outcome
            fresh.append(traj)
        tape = Tape()
        leaves = params.leaves(tape)
        terms = []
        for traj, adv in zip(fresh, advantages):
            score = policy.score_trajectory(tape, leaves, traj)
            terms.append(ad.mul(score.log_p_forward_sum, -adv))
        loss = ad.nmean(terms)
        _check_finite(loss.item(), config.divergence_threshold, f"task {w}")
        tape.backward(loss)
        adam.update(params, tape.gradients(leaves), lr_at(w, config))
        state.step = w + 1
        state.metrics.append({
            "step": w,
            "task": env.task_label(task),
            "loss": loss.item(),
            "success_rate": sum(env.is_success(t) for t in fresh) / len(fresh),
            "mean_reward": sum(t.terminal_reward for t in fresh) / len(fresh),
            "lr": lr_at(w, config),
        })
    return state


def train(env_config: EnvConfig, policy_config: PolicyConfig, config: TrainerConfig,
          initial: PolicyParameters | None = None) -> TrainState:
    runner = gfn_train if config.algo == GFN else pg_baseline_train
    return runner(env_config, policy_config, config, initial)


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    """Stable column order and repr-formatted floats keep reruns byte-identical."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


def _fmt(x) -> str:
    return repr(x) if isinstance(x, float) else str(x)
