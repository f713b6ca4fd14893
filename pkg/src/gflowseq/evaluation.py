"""Enumeration oracle, distribution diagnostics, success and diversity metrics,
and the finite-difference gradient harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape
from .core import Trajectory, trajectory_key
from .envs import EnvConfig, Environment, Task, drive_episode, make_env
from .policy import Policy, PolicyConfig, PolicyParameters, StepScore, TrajectoryScore
from .training import batch_loss, run_episode


class UnsupportedEnvironmentError(RuntimeError):
    pass


class EnumerationSizeError(RuntimeError):
    pass


class MetricUndefinedError(ValueError):
    pass


@dataclass
class ExactFlowTable:
    """Every complete trajectory of an enumerable task with its target probability."""

    entries: dict[str, tuple[float, float]]  # key -> (reward, reward / z)
    z: float

    def probability(self, key: str) -> float:
        return self.entries[key][1]

    def check(self, tol: float = 1e-9) -> None:
        total = math.fsum(p for _, p in self.entries.values())
        if abs(total - 1.0) > tol:
            raise AssertionError(f"target probabilities sum to {total}, not 1")


@dataclass
class EnumeratedTree:
    """Full unrolled decision tree of one task, plus per-state flows."""

    task: Task
    trajectories: list[Trajectory]
    table: ExactFlowTable
    flows: dict[tuple[int, ...], float]  # move-prefix -> total reward through it
    stop_rewards: dict[tuple[int, ...], float]  # move-prefix -> reward of stopping there

    def terminal_mass(self, moves: tuple[int, ...]) -> float:
        """Probability a flow-matched policy stops at this state."""
        return self.stop_rewards.get(moves, 0.0) / self.flows[moves]


def _scripted(actions: Sequence[int]) -> Callable:
    it = iter(actions)

    def choose(obs, admissible):
        return (), next(it)

    return choose


def enumerate_tree(env: Environment, task: Task | None = None,
                   max_trajectories: int = 10 ** 6) -> EnumeratedTree:
    """Depth-first unroll of every complete trajectory of one task."""
    if env.stochastic:
        raise UnsupportedEnvironmentError(
            f"{type(env).__name__} has stochastic transitions; enumeration is undefined"
        )
    if task is None:
        task = env.task_for(0)
    done_id = env.vocab.done_id
    trajectories: list[Trajectory] = []

    def replay(choices: tuple[int, ...]) -> tuple[bool, tuple[int, ...]]:
        _, _, admissible = env.reset_to(task, 0)
        done = False
        for a in choices:
            out = env.step(a)
            done, admissible = out.done, out.admissible
        return done, admissible

    def complete(choices: tuple[int, ...]) -> None:
        if len(trajectories) >= max_trajectories:
            raise EnumerationSizeError(f"trajectory tree exceeds {max_trajectories} leaves")
        trajectories.append(drive_episode(env, task, 0, _scripted(choices)))

    def dfs(choices: tuple[int, ...]) -> None:
        done, admissible = replay(choices)
        if done:
            complete(choices)
            return
        for a in admissible:
            if a == done_id:
                complete(choices + (a,))
            else:
                dfs(choices + (a,))

    dfs(())
    z = math.fsum(t.terminal_reward for t in trajectories)
    entries: dict[str, tuple[float, float]] = {}
    for traj in trajectories:
        key = trajectory_key(traj, env.vocab)
        if key in entries:
            raise AssertionError(f"duplicate trajectory key {key}")
        entries[key] = (traj.terminal_reward, traj.terminal_reward / z)
    flows: dict[tuple[int, ...], float] = {}
    stop_rewards: dict[tuple[int, ...], float] = {}
    for traj in trajectories:
        moves = tuple(s.action for s in traj.steps if s.action != done_id)
        stop_rewards[moves] = traj.terminal_reward
        for i in range(len(moves) + 1):
            flows[moves[:i]] = flows.get(moves[:i], 0.0) + traj.terminal_reward
    return EnumeratedTree(task=task, trajectories=trajectories,
                          table=ExactFlowTable(entries=entries, z=z), flows=flows,
                          stop_rewards=stop_rewards)


def enumerate_target(env: Environment, task: Task | None = None,
                     max_trajectories: int = 10 ** 6) -> ExactFlowTable:
    return enumerate_tree(env, task, max_trajectories).table


def flow_matched_score(tape: Tape, tree: EnumeratedTree, traj: Trajectory,
                       done_id: int) -> TrajectoryScore:
    """Analytic score under the exactly flow-matched policy of ``tree``.

    The resulting log-probabilities are constants, so every balance loss
    evaluates to zero on them up to float rounding. States that cannot stop
    (no DONE branch) get -inf termination mass; the balance losses never
    read those entries.
    """
    steps: list[StepScore] = []
    terminal: list[float] = []
    moves: tuple[int, ...] = ()
    for step in traj.steps:
        mass = tree.terminal_mass(moves)
        terminal.append(math.log(mass) if mass > 0 else float("-inf"))
        if step.action == done_id:
            log_pf = terminal[-1]
        else:
            log_pf = math.log(tree.flows[moves + (step.action,)] / tree.flows[moves])
            moves = moves + (step.action,)
        zero = tape.constant(0.0)
        steps.append(StepScore(zero, tape.constant(log_pf), tape.constant(log_pf)))
    return TrajectoryScore(steps=steps, terminal=[tape.constant(t) for t in terminal])


def empirical_distribution(env: Environment, policy: Policy, params: PolicyParameters,
                           n_samples: int, seed: int = 0,
                           task: Task | None = None) -> dict[str, float]:
    """Frequencies of canonical trajectory keys over seeded rollouts."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if task is None:
        task = env.task_for(0)
    counts: dict[str, int] = {}
    for i in range(n_samples):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 5, i))))
        traj = run_episode(env, policy, params, task, draw_seed=i, rng=rng)
        key = trajectory_key(traj, env.vocab)
        counts[key] = counts.get(key, 0) + 1
    return {k: c / n_samples for k, c in counts.items()}


def l1_distance(p: dict[str, float], q: dict[str, float]) -> float:
    keys = set(p) | set(q)
    return math.fsum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def kl_divergence(target: dict[str, float], observed: dict[str, float],
                  eps: float = 1e-12) -> float:
    """KL(target || observed) with the observed side floored at ``eps``."""
    out = 0.0
    for k, t in target.items():
        if t > 0:
            out += t * (math.log(t) - math.log(max(observed.get(k, 0.0), eps)))
    return out


def success_rate(trajectories: Sequence[Trajectory], predicate: Callable[[Trajectory], bool]) -> float:
    if not trajectories:
        raise ValueError("success rate of an empty set is undefined")
    return sum(bool(predicate(t)) for t in trajectories) / len(trajectories)


def div_at_n(success_counts: Sequence[int]) -> float:
    """Mean number of distinct successes per task that has at least one."""
    solved = [s for s in success_counts if s >= 1]
    if not solved:
        raise MetricUndefinedError("diversity is undefined when no task has a success")
    return sum(solved) / len(solved)


def diversity_success_counts(env: Environment, policy: Policy, params: PolicyParameters,
                             tasks: Sequence[Task], n_samples: int,
                             seed: int = 0) -> list[int]:
    """Distinct successful trajectory keys per task over ``n_samples`` rollouts."""
    counts: list[int] = []
    for ti, task in enumerate(tasks):
        distinct: set[str] = set()
        for i in range(n_samples):
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence((seed, 6, ti, i))))
            traj = run_episode(env, policy, params, task, draw_seed=ti * n_samples + i, rng=rng)
            if env.is_success(traj):
                distinct.add(trajectory_key(traj, env.vocab))
        counts.append(len(distinct))
    return counts


# --- finite-difference gradient harness -------------------------------------


@dataclass
class GradCheckInstance:
    env: Environment
    policy: Policy
    params: PolicyParameters
    batch: list[Trajectory]
    loss_kind: str


def make_grad_check_instance(loss_kind: str, seed: int = 0,
                             batch_size: int = 2) -> GradCheckInstance:
    """Small random instance: tiny task, tiny policy, sampled trajectories."""
    env_config = EnvConfig(kind="numberline", n_min=0, n_max=1, horizon=2,
                           seed=seed, include_done=loss_kind != "var_tb")
    policy_config = PolicyConfig(embed_dim=4, hidden_dim=8, cot_length=1,
                                 cot_alphabet=2, cot_weight=0.4, seed=seed)
    env = make_env(env_config, cot_alphabet=policy_config.cot_alphabet)
    policy = Policy(policy_config, env.vocab)
    params = policy.init_parameters()
    task = env.task_for(seed)
    batch = []
    for k in range(batch_size):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 9, k))))
        batch.append(run_episode(env, policy, params, task, draw_seed=k, rng=rng))
    return GradCheckInstance(env=env, policy=policy, params=params,
                             batch=batch, loss_kind=loss_kind)


def grad_check(instance: GradCheckInstance, h: float = 1e-5,
               grad_floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients."""

    def loss_value(params: PolicyParameters) -> float:
        _, loss, _ = batch_loss(instance.loss_kind, instance.policy, params,
                                instance.env, instance.batch)
        return loss.item()

    tape, loss, leaves = batch_loss(instance.loss_kind, instance.policy,
                                    instance.params, instance.env, instance.batch)
    tape.backward(loss)
    analytic = tape.gradients(leaves)
    worst = 0.0
    work = instance.params.copy()
    for name, arr in work.arrays.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            up = loss_value(work)
            flat[j] = keep - h
            down = loss_value(work)
            flat[j] = keep
            fd = (up - down) / (2.0 * h)
            scale = max(abs(ga[j]), abs(fd))
            if scale > grad_floor:
                worst = max(worst, abs(ga[j] - fd) / scale)
    return worst
