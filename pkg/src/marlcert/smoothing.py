"""Monte Carlo smoothing of joint policies under Gaussian observation noise.

The smoothed policy replaces each agent's greedy action with its most
frequent action over M noisy copies of the observation.  This module owns
the noise streams, the action tallies, and the two certification recipes
built on them: a joint-action radius (top-2 joint actions, binomial gate,
simultaneous confidence box) and per-agent radii (one confidence box per
agent over its five action counts).

Noise streams are counter-based so every draw is addressable: the stream for
(seed, step_index, agent) is a Philox generator keyed by hashing those
values, and sample m starts at counter block ``m * ceil(dim / 4)`` (Philox
counts in blocks of four doubles).  `gaussian_noise_block` therefore yields
rows bit-identical to per-sample `gaussian_noise` calls, no matter how the
work is batched or parallelized.  Uniform draws map to normals through the
inverse CDF, then scale by sigma, so noise at two sigmas differs by an exact
factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .envs import N_ACTIONS, EnvState, GridSpec, observe
from .errors import ConfigError
from .policy import JointPolicy
from .seeds import philox_key
from .stats import (
    binom_pvalue_two_sided,
    goodman_bounds,
    std_normal_quantile,
    std_normal_quantile_vec,
)


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float
    samples: int
    alpha: float
    seed: int

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ConfigError("sigma must be positive")
        if self.samples < 2:
            raise ConfigError("need at least two smoothing samples")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an integer in [0, 2**64)")


@dataclass(eq=False)
class ActionTally:
    """Per-agent and joint action counts over one shared set of M samples."""

    per_agent: np.ndarray  # (n_agents, N_ACTIONS) int64
    joint: dict  # joint action tuple -> count
    samples: int

    def __post_init__(self):
        self.per_agent = np.asarray(self.per_agent, dtype=np.int64)
        if self.per_agent.ndim != 2 or self.per_agent.shape[1] != N_ACTIONS:
            raise ValueError("per_agent must be (n_agents, n_actions)")
        if not np.all(self.per_agent.sum(axis=1) == self.samples):
            raise ValueError("per-agent counts must sum to the sample count")
        if sum(self.joint.values()) != self.samples:
            raise ValueError("joint counts must sum to the sample count")
        n = self.per_agent.shape[0]
        marginals = np.zeros_like(self.per_agent)
        for joint_action, count in self.joint.items():
            if len(joint_action) != n:
                raise ValueError("joint action arity mismatch")
            for agent, action in enumerate(joint_action):
                marginals[agent, action] += count
        if not np.array_equal(marginals, self.per_agent):
            raise ValueError("joint counts disagree with per-agent counts")

    @property
    def n_agents(self) -> int:
        return self.per_agent.shape[0]


@dataclass(frozen=True)
class SmoothedDecision:
    """Outcome of certifying one tally.

    `chosen`/`runner_up` are joint actions for the joint recipe and tuples
    of per-agent actions for the per-agent recipe; `per_agent_radius` is
    None for the joint recipe, which only produces the shared radius.
    """

    chosen: tuple
    runner_up: Optional[tuple]
    per_agent_radius: Optional[tuple]
    joint_radius: float
    certified: tuple  # one flag per agent


def _uniform_to_normal(u: np.ndarray, sigma: float) -> np.ndarray:
    # Generator.random() can emit exactly 0, outside the quantile's domain
    u = np.maximum(u, 2.0**-54)
    return std_normal_quantile_vec(u) * sigma


def _blocks_per_sample(dim: int) -> int:
    return (dim + 3) // 4  # Philox advances in blocks of four doubles


def gaussian_noise(
    dim: int, sigma: float, seed: int, step_index: int, agent: int, sample: int
) -> np.ndarray:
    """The noise vector for one (seed, step, agent, sample) address."""
    if not sigma > 0.0:
        raise ConfigError("sigma must be positive")
    bits = np.random.Philox(key=philox_key(seed, "noise", step_index, agent))
    bits.advance(sample * _blocks_per_sample(dim))
    u = np.random.Generator(bits).random(dim)
    return _uniform_to_normal(u, sigma)


def gaussian_noise_block(
    dim: int, sigma: float, seed: int, step_index: int, agent: int, count: int
) -> np.ndarray:
    """Rows 0..count-1 of the stream; row m equals gaussian_noise(sample=m)."""
    if not sigma > 0.0:
        raise ConfigError("sigma must be positive")
    bits = np.random.Philox(key=philox_key(seed, "noise", step_index, agent))
    width = _blocks_per_sample(dim) * 4
    u = np.random.Generator(bits).random((count, width))
    return _uniform_to_normal(u[:, :dim], sigma)


def sample_tally(
    policy: JointPolicy, spec: GridSpec, state: EnvState, cfg: NoiseConfig
) -> ActionTally:
    """Greedy actions of every agent under M shared noise samples."""
    if state.done:
        raise ValueError("cannot smooth a finished episode")
    n = policy.n_agents
    m = cfg.samples
    actions = np.empty((m, n), dtype=np.int64)
    per_agent = np.zeros((n, N_ACTIONS), dtype=np.int64)
    for agent in range(n):
        base = observe(spec, state, agent)
        noise = gaussian_noise_block(
            base.size, cfg.sigma, cfg.seed, state.step_count, agent, m
        )
        values = nn.forward_batch(policy.agent_nets[agent], base[None, :] + noise)
        picks = np.argmax(values, axis=1)  # first max: lowest-index ties
        actions[:, agent] = picks
        per_agent[agent] = np.bincount(picks, minlength=N_ACTIONS)
    joint = {}
    rows, counts = np.unique(actions, axis=0, return_counts=True)
    for row, count in zip(rows, counts):
        joint[tuple(int(a) for a in row)] = int(count)
    return ActionTally(per_agent, joint, m)


def _ranked_joint(tally: ActionTally):
    return sorted(tally.joint.items(), key=lambda item: (-item[1], item[0]))


def certify_joint(tally: ActionTally, cfg: NoiseConfig) -> SmoothedDecision:
    """Radius for the modal joint action (top-2 gate + simultaneous box).

    The modal and runner-up joint actions are compared with a two-sided
    binomial test on their conditional counts; if that passes at level
    alpha, simultaneous confidence bounds over the observed joint-action
    counts give the radius.  A failed gate certifies nothing and reports
    radius 0.
    """
    ranked = _ranked_joint(tally)
    n = tally.n_agents
    chosen = ranked[0][0]
    ct1 = ranked[0][1]
    if len(ranked) > 1:
        runner_up, ct2 = ranked[1]
    else:
        runner_up, ct2 = None, 0

    pvalue = binom_pvalue_two_sided(ct1, ct1 + ct2, 0.5)
    if pvalue > cfg.alpha:
        return SmoothedDecision(
            chosen=chosen,
            runner_up=runner_up,
            per_agent_radius=None,
            joint_radius=0.0,
            certified=(False,) * n,
        )
    counts = [count for _, count in ranked]
    if len(counts) == 1:
        counts.append(0)  # synthetic bucket standing in for "anything else"
    box = goodman_bounds(counts, cfg.alpha)
    radius = 0.5 * cfg.sigma * (
        std_normal_quantile(box.lower[0]) - std_normal_quantile(box.upper[1])
    )
    return SmoothedDecision(
        chosen=chosen,
        runner_up=runner_up,
        per_agent_radius=None,
        joint_radius=max(0.0, radius),
        certified=(True,) * n,
    )


def _agent_top_two(counts: np.ndarray):
    order = sorted(range(N_ACTIONS), key=lambda a: (-int(counts[a]), a))
    return order[0], order[1]


def per_agent_radii(tally: ActionTally, cfg: NoiseConfig) -> SmoothedDecision:
    """One radius per agent from simultaneous bounds over its five counts.

    An agent whose radius clamps to zero is uncertified; the joint radius
    is the minimum over certified agents (zero when there are none).
    """
    chosen = []
    runners = []
    radii = []
    for agent in range(tally.n_agents):
        counts = tally.per_agent[agent]
        modal, runner = _agent_top_two(counts)
        box = goodman_bounds(counts.tolist(), cfg.alpha)
        radius = 0.5 * cfg.sigma * (
            std_normal_quantile(box.lower[modal])
            - std_normal_quantile(box.upper[runner])
        )
        chosen.append(modal)
        runners.append(runner)
        radii.append(max(0.0, radius))
    certified = tuple(bool(r > 0.0) for r in radii)
    positive = [r for r in radii if r > 0.0]
    return SmoothedDecision(
        chosen=tuple(chosen),
        runner_up=tuple(runners),
        per_agent_radius=tuple(radii),
        joint_radius=min(positive) if positive else 0.0,
        certified=certified,
    )
