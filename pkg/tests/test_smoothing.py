"""Tests for Gaussian observation smoothing: noise streams, tallies, radii."""

import numpy as np
import pytest

from marlcert.envs import parse_grid_config, reset
from marlcert.errors import ConfigError
from marlcert.policy import new_policy
from marlcert.smoothing import (
    ActionTally,
    NoiseConfig,
    certify_joint,
    gaussian_noise,
    gaussian_noise_block,
    per_agent_radii,
    sample_tally,
)


def _spec():
    return parse_grid_config("map: |\n  1.a\n  2.l\nstep_cap: 6\n")


def _tally(rows, joint):
    rows = np.asarray(rows, dtype=np.int64)
    return ActionTally(rows, joint, int(rows[0].sum()))


class TestNoiseConfig:
    def test_validation(self):
        NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        with pytest.raises(ConfigError):
            NoiseConfig(sigma=0.0, samples=100, alpha=0.05, seed=0)
        with pytest.raises(ConfigError):
            NoiseConfig(sigma=0.1, samples=1, alpha=0.05, seed=0)
        with pytest.raises(ConfigError):
            NoiseConfig(sigma=0.1, samples=100, alpha=1.0, seed=0)
        with pytest.raises(ConfigError):
            NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=-1)


class TestGaussianNoise:
    def test_deterministic(self):
        a = gaussian_noise(47, 0.1, seed=7, step_index=3, agent=1, sample=12)
        b = gaussian_noise(47, 0.1, seed=7, step_index=3, agent=1, sample=12)
        assert np.array_equal(a, b)

    def test_streams_distinct(self):
        base = dict(seed=7, step_index=3, agent=1, sample=12)
        a = gaussian_noise(47, 0.1, **base)
        for key in ("seed", "step_index", "agent", "sample"):
            other = dict(base)
            other[key] += 1
            assert not np.array_equal(a, gaussian_noise(47, 0.1, **other))

    @pytest.mark.parametrize("dim", [4, 5, 47])
    def test_block_rows_match_single_draws(self, dim):
        block = gaussian_noise_block(dim, 0.06, seed=11, step_index=0, agent=2, count=9)
        assert block.shape == (9, dim)
        for m in range(9):
            single = gaussian_noise(dim, 0.06, seed=11, step_index=0, agent=2, sample=m)
            assert np.array_equal(block[m], single)

    def test_sigma_scaling_exact(self):
        a = gaussian_noise(20, 0.05, seed=1, step_index=0, agent=0, sample=0)
        b = gaussian_noise(20, 0.1, seed=1, step_index=0, agent=0, sample=0)
        assert np.array_equal(2.0 * a, b)

    def test_tiny_sigma_vanishes(self):
        a = gaussian_noise(20, 1e-300, seed=1, step_index=0, agent=0, sample=0)
        assert np.all(np.abs(a) < 1e-290)

    def test_sample_mean(self):
        block = gaussian_noise_block(
            1000, 0.5, seed=3, step_index=0, agent=0, count=1000
        )
        assert abs(block.mean()) <= 5 * 0.5 / 1000


class TestSampleTally:
    def test_tiny_sigma_concentrates(self):
        spec = _spec()
        policy = new_policy(spec, "vdn", np.random.default_rng(1))
        cfg = NoiseConfig(sigma=1e-9, samples=50, alpha=0.05, seed=5)
        tally = sample_tally(policy, spec, reset(spec), cfg)
        assert tally.per_agent.max(axis=1).tolist() == [50, 50]
        assert len(tally.joint) == 1

    def test_constant_net_all_mass_on_zero(self):
        spec = _spec()
        policy = new_policy(spec, "vdn", np.random.default_rng(1))
        zeroed = []
        for net in policy.agent_nets:
            for w in net.weights:
                w *= 0.0
            for b in net.biases:
                b *= 0.0
            zeroed.append(net)
        cfg = NoiseConfig(sigma=0.5, samples=40, alpha=0.05, seed=5)
        tally = sample_tally(policy, spec, reset(spec), cfg)
        assert tally.per_agent[:, 0].tolist() == [40, 40]
        assert tally.joint == {(0, 0): 40}

    def test_marginal_consistency_and_determinism(self):
        spec = _spec()
        policy = new_policy(spec, "vdn", np.random.default_rng(2))
        cfg = NoiseConfig(sigma=0.3, samples=200, alpha=0.05, seed=9)
        t1 = sample_tally(policy, spec, reset(spec), cfg)
        t2 = sample_tally(policy, spec, reset(spec), cfg)
        assert np.array_equal(t1.per_agent, t2.per_agent)
        assert t1.joint == t2.joint
        assert t1.per_agent.sum(axis=1).tolist() == [200, 200]
        assert sum(t1.joint.values()) == 200
        for agent in range(2):
            marginal = np.zeros(5, dtype=np.int64)
            for joint_action, count in t1.joint.items():
                marginal[joint_action[agent]] += count
            assert np.array_equal(marginal, t1.per_agent[agent])

    def test_done_state_rejected(self):
        spec = parse_grid_config("map: |\n  1a\nstep_cap: 5\n")
        policy = new_policy(spec, "vdn", np.random.default_rng(1))
        cfg = NoiseConfig(sigma=0.1, samples=10, alpha=0.05, seed=1)
        from marlcert.envs import step

        out = step(spec, reset(spec), (3,))
        with pytest.raises(ValueError):
            sample_tally(policy, spec, out.next_state, cfg)

    def test_tally_invariants_enforced(self):
        with pytest.raises(ValueError):
            _tally([[10, 0, 0, 0, 0]], {(0,): 9})
        with pytest.raises(ValueError):
            _tally([[10, 0, 0, 0, 0], [10, 0, 0, 0, 0]], {(0, 0): 9, (0, 1): 1})


class TestCertifyJoint:
    def test_tie_fails(self):
        tally = _tally(
            [[50, 50, 0, 0, 0], [100, 0, 0, 0, 0]],
            {(0, 0): 50, (1, 0): 50},
        )
        cfg = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        decision = certify_joint(tally, cfg)
        assert decision.certified == (False, False)
        assert decision.joint_radius == 0.0

    def test_marginal_majority_fails_gate(self):
        # 60/40 two-sided p-value 0.0569 just misses alpha = 0.05
        tally = _tally(
            [[60, 40, 0, 0, 0], [100, 0, 0, 0, 0]],
            {(0, 0): 60, (1, 0): 40},
        )
        cfg = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        assert certify_joint(tally, cfg).certified == (False, False)

    def test_clear_majority_passes_gate(self):
        tally = _tally(
            [[70, 30, 0, 0, 0], [100, 0, 0, 0, 0]],
            {(0, 0): 70, (1, 0): 30},
        )
        cfg = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        decision = certify_joint(tally, cfg)
        assert decision.certified == (True, True)
        assert decision.chosen == (0, 0)
        assert decision.runner_up == (1, 0)

    def test_unanimous_closed_form(self):
        # all M samples on one joint action: D = sigma * quantile(M/(M+A))
        # with A the Goodman chi-square constant for two categories
        tally = _tally([[100, 0, 0, 0, 0]], {(0,): 100})
        cfg = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        decision = certify_joint(tally, cfg)
        assert decision.certified == (True,)
        assert decision.runner_up is None
        from marlcert.stats import std_normal_quantile

        a2 = 5.023886187314887  # chi2_quantile(1, 1 - 0.05/2)
        lo = 100 / (100 + a2)
        want = 0.05 * (std_normal_quantile(lo) - std_normal_quantile(1 - lo))
        assert decision.joint_radius == pytest.approx(want, rel=1e-12)

    def test_three_category_derived_value(self):
        tally = _tally(
            [[85, 15, 0, 0, 0], [95, 5, 0, 0, 0]],
            {(0, 0): 80, (1, 0): 15, (0, 1): 5},
        )
        cfg = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        decision = certify_joint(tally, cfg)
        assert decision.chosen == (0, 0)
        assert decision.runner_up == (1, 0)
        assert decision.joint_radius == pytest.approx(0.05773943540815262, rel=1e-10)

    def test_radius_scales_with_sigma(self):
        tally = _tally(
            [[85, 15, 0, 0, 0], [95, 5, 0, 0, 0]],
            {(0, 0): 80, (1, 0): 15, (0, 1): 5},
        )
        lo = NoiseConfig(sigma=0.05, samples=100, alpha=0.05, seed=0)
        hi = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        d_lo = certify_joint(tally, lo).joint_radius
        d_hi = certify_joint(tally, hi).joint_radius
        assert d_hi == 2.0 * d_lo


class TestPerAgentRadii:
    def test_uniform_counts_clamp_to_zero(self):
        tally = _tally(
            [[20, 20, 20, 20, 20], [100, 0, 0, 0, 0]],
            {(a, 0): 20 for a in range(5)},
        )
        cfg = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        decision = per_agent_radii(tally, cfg)
        assert decision.per_agent_radius[0] == 0.0
        assert decision.certified[0] is False
        assert decision.certified[1] is True

    def test_unanimous_closed_form(self):
        tally = _tally([[100, 0, 0, 0, 0]], {(0,): 100})
        cfg = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        decision = per_agent_radii(tally, cfg)
        assert decision.chosen == (0,)
        assert decision.runner_up == (1,)  # lowest-index zero-count action
        assert decision.per_agent_radius[0] == pytest.approx(
            0.1536395640059247, rel=1e-10
        )
        assert decision.joint_radius == decision.per_agent_radius[0]

    def test_monotone_in_modal_count(self):
        cfg = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        last = -1.0
        for modal in (60, 70, 80, 90, 100):
            tally = _tally(
                [[modal, 100 - modal, 0, 0, 0]],
                {(0,): modal, (1,): 100 - modal},
            )
            d = per_agent_radii(tally, cfg).per_agent_radius[0]
            assert d >= last
            last = d

    def test_alpha_monotone(self):
        tally = _tally([[90, 10, 0, 0, 0]], {(0,): 90, (1,): 10})
        strict = NoiseConfig(sigma=0.1, samples=100, alpha=0.01, seed=0)
        loose = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        d_strict = per_agent_radii(tally, strict).per_agent_radius[0]
        d_loose = per_agent_radii(tally, loose).per_agent_radius[0]
        assert d_strict <= d_loose

    def test_sigma_scaling_exact(self):
        tally = _tally([[90, 6, 2, 2, 0]], {(0,): 90, (1,): 6, (2,): 2, (3,): 2})
        lo = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        hi = NoiseConfig(sigma=0.2, samples=100, alpha=0.05, seed=0)
        assert per_agent_radii(tally, hi).per_agent_radius[0] == 2.0 * (
            per_agent_radii(tally, lo).per_agent_radius[0]
        )

    def test_other_agents_do_not_affect_radius(self):
        cfg = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        t1 = _tally(
            [[90, 10, 0, 0, 0], [60, 40, 0, 0, 0]],
            {(0, 0): 60, (0, 1): 30, (1, 1): 10},
        )
        t2 = _tally(
            [[90, 10, 0, 0, 0], [100, 0, 0, 0, 0]],
            {(0, 0): 90, (1, 0): 10},
        )
        d1 = per_agent_radii(t1, cfg).per_agent_radius[0]
        d2 = per_agent_radii(t2, cfg).per_agent_radius[0]
        assert d1 == d2

    def test_joint_radius_min_over_certified(self):
        cfg = NoiseConfig(sigma=0.1, samples=100, alpha=0.05, seed=0)
        tally = _tally(
            [[20, 20, 20, 20, 20], [100, 0, 0, 0, 0]],
            {(a, 0): 20 for a in range(5)},
        )
        decision = per_agent_radii(tally, cfg)
        # agent 0 is uncertified (radius 0); the joint radius is the min
        # over the certified agents only
        assert decision.joint_radius == decision.per_agent_radius[1]
        all_zero = _tally(
            [[50, 50, 0, 0, 0]],
            {(0,): 50, (1,): 50},
        )
        assert per_agent_radii(all_zero, cfg).joint_radius == 0.0
