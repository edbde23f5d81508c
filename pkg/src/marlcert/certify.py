"""Per-state robustness certificates and a team-reward lower bound.

Certification works on the smoothed policy: each agent's action is the
modal greedy choice under ``M`` Gaussian observation perturbations.  Two
artifacts come out of this module:

* ``crsc`` certifies a single state.  Every agent gets a one-sided
  binomial p-value for "my modal action wins more than half the time",
  the p-values are reweighted by how much each agent's choice matters to
  the team value, and a Benjamini-Hochberg pass controls the false
  discovery rate across agents.  Surviving agents receive an l2 radius
  from simultaneous confidence bounds over their action counts.

* ``tcrgr`` lower-bounds the team reward under any perturbation smaller
  than the weakest per-state radius along the way.  It walks the tree of
  trajectories reachable through per-agent candidate action sets (the
  modal action, plus the runner-up wherever the reweighted p-value fails
  the ``alpha`` gate) and takes the minimum total reward over leaves.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .envs import EnvState, GridSpec, reset, step
from .errors import ConfigError
from .policy import JointPolicy, counterfactual_values, q_total
from .smoothing import (
    ActionTally,
    NoiseConfig,
    _agent_top_two,
    per_agent_radii,
    sample_tally,
)
from .stats import (
    bh_procedure,
    binom_lower_bound,
    binom_pvalue_one_sided,
    std_normal_quantile,
)

# floor of the rescaled importance weights; keeps every correction
# strictly positive so no p-value is zeroed outright
IF_FLOOR = 0.05


@dataclass(frozen=True)
class ImportanceFactors:
    """Per-agent value gaps, raw and rescaled to [IF_FLOOR, 1]."""

    raw: tuple
    normalized: tuple


@dataclass(frozen=True)
class StateCertificate:
    """Outcome of certifying one state.

    ``per_agent_radius[n]`` is zero when agent n failed the FDR gate or
    its confidence bound clamped; ``certified_set`` holds the rest, and
    ``min_radius`` is the joint certificate (zero when the set is empty).
    """

    state: EnvState
    step_index: int
    actions: tuple
    pvalues: tuple
    corrected_pvalues: tuple
    per_agent_radius: tuple
    certified_set: frozenset
    min_radius: float


@dataclass(frozen=True)
class SearchNode:
    """Candidate action sets and certified radius for one tree state."""

    action_sets: tuple
    per_agent_radius: tuple
    radius: float


@dataclass(frozen=True)
class RewardCertificate:
    epsilon_cert: float
    r_min: float
    nodes_expanded: int
    nodes_pruned: int
    trajectories_completed: int


def importance_factor(
    policy: JointPolicy,
    spec: GridSpec,
    state: EnvState,
    action,
    tally: ActionTally,
) -> ImportanceFactors:
    """How much each agent's chosen action contributes to the team value.

    The raw factor for agent n is q_total at ``action`` minus its
    expectation when agent n instead plays a draw from its own smoothed
    action distribution (the tally frequencies).  Factors are then
    min-max rescaled to [IF_FLOOR, 1]; an all-equal vector maps to all
    ones so the correction becomes a no-op.
    """
    if len(action) != tally.n_agents:
        raise ValueError("action arity disagrees with tally")
    total = q_total(policy, spec, state, action)
    raw = []
    for agent in range(tally.n_agents):
        freqs = tally.per_agent[agent] / tally.samples
        alternatives = counterfactual_values(policy, spec, state, action, agent)
        raw.append(total - float(freqs @ alternatives))
    lo = min(raw)
    hi = max(raw)
    if hi == lo:
        normalized = (1.0,) * tally.n_agents
    else:
        span = hi - lo
        normalized = tuple(
            IF_FLOOR + (1.0 - IF_FLOOR) * (r - lo) / span for r in raw
        )
    return ImportanceFactors(raw=tuple(raw), normalized=normalized)


def _corrected_pvalue(count: int, norm: float, cfg: NoiseConfig):
    pv = binom_pvalue_one_sided(count, cfg.samples, 0.5)
    return pv, min(1.0, pv * norm)


def crsc(
    policy: JointPolicy, spec: GridSpec, state: EnvState, cfg: NoiseConfig
) -> StateCertificate:
    """Certify one state with importance-reweighted FDR control."""
    tally = sample_tally(policy, spec, state, cfg)
    n = tally.n_agents
    modal = tuple(int(np.argmax(tally.per_agent[agent])) for agent in range(n))
    factors = importance_factor(policy, spec, state, modal, tally)
    pvalues = []
    corrected = []
    for agent in range(n):
        ct1 = int(tally.per_agent[agent][modal[agent]])
        pv, cpv = _corrected_pvalue(ct1, factors.normalized[agent], cfg)
        pvalues.append(pv)
        corrected.append(cpv)
    outcome = bh_procedure(corrected, cfg.alpha)
    bounds = per_agent_radii(tally, cfg)
    radii = tuple(
        bounds.per_agent_radius[agent] if outcome.reject[agent] else 0.0
        for agent in range(n)
    )
    certified = frozenset(agent for agent, d in enumerate(radii) if d != 0.0)
    return StateCertificate(
        state=state,
        step_index=state.step_count,
        actions=modal,
        pvalues=tuple(pvalues),
        corrected_pvalues=tuple(corrected),
        per_agent_radius=radii,
        certified_set=certified,
        min_radius=min((radii[agent] for agent in certified), default=0.0),
    )


def node_decision(
    tally: ActionTally, factors: ImportanceFactors, cfg: NoiseConfig
) -> SearchNode:
    """Candidate sets and radius from a tally and importance weights.

    Agents whose corrected p-value clears ``alpha`` keep only the modal
    action and the radius certifies that singleton; the rest keep the
    runner-up too and the radius certifies the pair through the combined
    count.  A lower bound that falls below one half clamps the radius to
    zero, and in the singleton case also restores the runner-up, since
    the modal action alone is then not trustworthy.
    """
    sets = []
    radii = []
    for agent in range(tally.n_agents):
        counts = tally.per_agent[agent]
        modal, runner = _agent_top_two(counts)
        ct1 = int(counts[modal])
        ct2 = int(counts[runner])
        _, cpv = _corrected_pvalue(ct1, factors.normalized[agent], cfg)
        if cpv > cfg.alpha:
            keep = (modal, runner)
            p_lower = binom_lower_bound(ct1 + ct2, cfg.samples, cfg.alpha)
        else:
            keep = (modal,)
            p_lower = binom_lower_bound(ct1, cfg.samples, cfg.alpha)
        if p_lower < 0.5:
            radius = 0.0
            if len(keep) == 1:
                keep = (modal, runner)
        else:
            radius = cfg.sigma * std_normal_quantile(p_lower)
        sets.append(keep)
        radii.append(radius)
    return SearchNode(
        action_sets=tuple(sets),
        per_agent_radius=tuple(radii),
        radius=min(radii),
    )


def get_node(
    policy: JointPolicy, spec: GridSpec, state: EnvState, cfg: NoiseConfig
) -> SearchNode:
    tally = sample_tally(policy, spec, state, cfg)
    modal = tuple(
        int(np.argmax(tally.per_agent[agent])) for agent in range(tally.n_agents)
    )
    factors = importance_factor(policy, spec, state, modal, tally)
    return node_decision(tally, factors, cfg)


def tcrgr(
    policy: JointPolicy, spec: GridSpec, cfg: NoiseConfig, pruning: bool = True
) -> RewardCertificate:
    """Lower-bound the team reward over the candidate-action tree.

    The reachable tree is expanded fully once, so ``epsilon_cert`` (the
    weakest node radius) never depends on ``pruning``.  The reward
    minimum then comes from a depth-first pass over the same tree;
    with ``pruning`` a branch is dropped as soon as its accumulated
    reward already matches the incumbent, which is only sound when no
    step can pay a negative amount.  Subtrees evaluated to completion
    are memoized by state, which collapses paths that reconverge.
    """
    if pruning:
        for key, value in spec.reward_table.items():
            if value < 0:
                raise ConfigError(
                    f"branch pruning needs non-negative rewards, got {key}={value}"
                )

    nodes = {}

    def node_for(state):
        found = nodes.get(state)
        if found is None:
            found = get_node(policy, spec, state, cfg)
            nodes[state] = found
        return found

    initial = reset(spec)
    epsilon = np.inf
    stack = [initial]
    seen = set()
    while stack:
        state = stack.pop()
        if state.done or state in seen:
            continue
        seen.add(state)
        node = node_for(state)
        epsilon = min(epsilon, node.radius)
        for joint in itertools.product(*node.action_sets):
            stack.append(step(spec, state, joint).next_state)

    r_min = np.inf
    nodes_pruned = 0
    trajectories = 0
    complete_value = {}

    def walk(state, acc):
        """Minimum future reward from ``state``; False when pruned short."""
        nonlocal r_min, nodes_pruned, trajectories
        if state.done:
            r_min = min(r_min, acc)
            trajectories += 1
            return 0.0, True
        memo = complete_value.get(state)
        if memo is not None:
            r_min = min(r_min, acc + memo)
            return memo, True
        if pruning and acc >= r_min:
            nodes_pruned += 1
            return np.inf, False
        node = nodes[state]
        best = np.inf
        complete = True
        for joint in itertools.product(*node.action_sets):
            outcome = step(spec, state, joint)
            future, full = walk(outcome.next_state, acc + outcome.team_reward)
            best = min(best, outcome.team_reward + future)
            complete = complete and full
        if complete:
            complete_value[state] = best
        return best, complete

    walk(initial, 0.0)
    return RewardCertificate(
        epsilon_cert=float(epsilon),
        r_min=float(r_min),
        nodes_expanded=len(seen),
        nodes_pruned=nodes_pruned,
        trajectories_completed=trajectories,
    )


def certify_trajectory(
    policy: JointPolicy, spec: GridSpec, cfg: NoiseConfig
) -> list:
    """Certificates along the smoothed policy's own rollout.

    The rollout follows each state's modal joint action, i.e. the
    trajectory the certificates actually speak about.
    """
    certificates = []
    state = reset(spec)
    while not state.done:
        cert = crsc(policy, spec, state, cfg)
        certificates.append(cert)
        state = step(spec, state, cert.actions).next_state
    return certificates
