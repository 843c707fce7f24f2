import math

import numpy as np
import pytest
from scipy import stats

from ope_lab.environments import (
    BanditSpec,
    CartPoleSpec,
    ContextFreePolicy,
    Dataset,
    StateTablePolicy,
    TabularMDPSpec,
    default_bandit,
    derive_seed,
    exact_value,
    marginal_ratios,
    monte_carlo_value,
    q_function,
    sample,
    sample_bandit_dataset,
    sample_trajectories,
    state_action_marginals,
)

from conftest import constant_chain


# -- bandit -----------------------------------------------------------------


def test_bandit_true_value_is_4_2():
    assert default_bandit().true_value() == pytest.approx(4.2, abs=1e-12)


def test_bandit_monte_carlo_recovers_true_value():
    mc = monte_carlo_value(default_bandit(), None, 200_000, seed=3)
    assert abs(mc.value - 4.2) <= 3 * mc.se


def test_bandit_constant_reward_when_policies_match():
    spec = BanditSpec([0.5, 0.5], np.full((2, 2), 2.5), [0.5, 0.5], [0.5, 0.5], reward_noise_sd=0.0)
    d = sample_bandit_dataset(spec, 500, seed=1)
    assert np.all(d.rewards == 2.5)
    assert d.horizon == 0


def test_bandit_sampling_is_deterministic(tmp_path):
    a = sample_bandit_dataset(default_bandit(), 300, seed=7)
    b = sample_bandit_dataset(default_bandit(), 300, seed=7)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_bandit_marginals_follow_spec():
    d = sample_bandit_dataset(default_bandit(), 100_000, seed=2)
    p_a1 = d.actions.mean()
    assert abs(p_a1 - 0.3) < 3 * math.sqrt(0.3 * 0.7 / 100_000)
    p_s1 = d.states.mean()
    assert abs(p_s1 - 0.5) < 3 * math.sqrt(0.25 / 100_000)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(context_probs=[0.6, 0.6]),
        dict(behavior_probs=[0.7, 0.2]),
        dict(target_probs=[1.0, 0.0]),
        dict(reward_noise_sd=-1.0),
    ],
)
def test_bandit_spec_validation(kwargs):
    base = dict(context_probs=[0.5, 0.5], reward_mean=np.zeros((2, 2)), behavior_probs=[0.7, 0.3], target_probs=[0.6, 0.4])
    base.update(kwargs)
    with pytest.raises(ValueError):
        BanditSpec(**base)


# -- tabular MDP ------------------------------------------------------------


def test_degenerate_mdp_rewards_are_constant():
    spec, pol = constant_chain(horizon=2)
    d = sample_trajectories(spec, pol, 50, seed=0)
    assert d.rewards.shape == (50, 3)
    assert np.all(d.rewards == 1.0)


def test_monte_carlo_geometric_sum_exact():
    spec, pol = constant_chain(horizon=2)
    mc = monte_carlo_value(spec, pol, 10, discount=0.5, seed=0)
    assert mc.value == 1.75
    assert mc.se == 0.0


def test_transition_frequencies_match_two_state_spec():
    P = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.5, 0.5], [0.3, 0.7]]])
    spec = TabularMDPSpec(P, np.zeros((2, 2)), np.array([0.5, 0.5]), horizon=99)
    d = sample_trajectories(spec, StateTablePolicy(np.full((2, 2), 0.5)), 1000, seed=4)
    s, a, s_next = d.states[:, :-1].ravel(), d.actions[:, :-1].ravel(), d.states[:, 1:].ravel()
    for si in range(2):
        for ai in range(2):
            mask = (s == si) & (a == ai)
            m = mask.sum()
            freq = (s_next[mask] == 1).mean()
            p = P[si, ai, 1]
            assert abs(freq - p) < 3 * math.sqrt(p * (1 - p) / m)


def test_reference_transition_chi_squared(ref):
    spec, behavior, _ = ref
    d = sample_trajectories(spec, behavior, 10_000, seed=5)  # 10^5 transitions
    s, a, s_next = d.states[:, :-1].ravel(), d.actions[:, :-1].ravel(), d.states[:, 1:].ravel()
    chi2, dof = 0.0, 0
    for si in range(spec.num_states):
        for ai in range(spec.num_actions):
            mask = (s == si) & (a == ai)
            obs = np.bincount(s_next[mask], minlength=spec.num_states)
            exp = mask.sum() * spec.transition[si, ai]
            chi2 += float(((obs - exp) ** 2 / exp).sum())
            dof += spec.num_states - 1
    assert stats.chi2.sf(chi2, dof) > 0.01


def test_same_seed_same_dataset(ref):
    spec, behavior, _ = ref
    a = sample_trajectories(spec, behavior, 2500, seed=11)
    b = sample_trajectories(spec, behavior, 2500, seed=11)
    c = sample_trajectories(spec, behavior, 2500, seed=12)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.rewards, b.rewards)
    assert not np.array_equal(a.rewards, c.rewards)


def test_blocks_regenerate_independently(ref):
    # the first block of a large draw equals a draw of exactly one block
    spec, behavior, _ = ref
    big = sample_trajectories(spec, behavior, 3000, seed=9)
    small = sample_trajectories(spec, behavior, 1024, seed=9)
    assert np.array_equal(big.rewards[:1024], small.rewards)


def test_policy_validation_rejects_bad_probabilities(ref):
    spec, _, _ = ref

    class Broken:
        num_actions = 2

        def probs(self, states):
            return np.full(np.shape(states) + (2,), 0.7)

    with pytest.raises(ValueError):
        sample_trajectories(spec, Broken(), 10, seed=0)


def test_spec_validation():
    with pytest.raises(ValueError):
        TabularMDPSpec(np.full((2, 1, 2), 0.6), np.zeros((2, 1)), np.array([0.5, 0.5]), horizon=1)
    with pytest.raises(ValueError):
        TabularMDPSpec(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), np.array([0.5, 0.6]), horizon=1)
    with pytest.raises(ValueError):
        TabularMDPSpec(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), np.array([0.5, 0.5]), horizon=1, discount=0.0)


def test_exact_value_matches_monte_carlo(ref):
    spec, _, target = ref
    mc = monte_carlo_value(spec, target, 100_000, seed=6)
    assert abs(mc.value - exact_value(spec, target)) < 4 * mc.se


def test_q_function_last_step_is_reward(ref):
    spec, _, target = ref
    q = q_function(spec, target)
    assert q.shape == (spec.horizon + 1, 4, 2)
    assert np.allclose(q[-1], spec.reward_mean)


def test_marginals_are_distributions(ref):
    spec, behavior, target = ref
    d = state_action_marginals(spec, behavior)
    assert np.allclose(d.sum(axis=(1, 2)), 1.0)
    w = marginal_ratios(spec, behavior, target)
    # E_b[w_t] = 1 at every step
    assert np.allclose((w * d).sum(axis=(1, 2)), 1.0)


def test_csv_round_trip(tmp_path, ref):
    spec, behavior, _ = ref
    d = sample_trajectories(spec, behavior, 40, seed=3)
    d.to_csv(tmp_path / "d.csv", spec)
    back = Dataset.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.states, d.states)
    assert np.array_equal(back.actions, d.actions)
    assert np.array_equal(back.rewards, d.rewards)
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header.startswith("traj_id,t,state,action,reward")
    assert (tmp_path / "d.csv.meta.json").exists()


def test_sample_dispatches_on_spec(ref):
    spec, behavior, _ = ref
    assert sample(spec, behavior, 5, 0).horizon == spec.horizon
    assert sample(default_bandit(), None, 5, 0).horizon == 0


def test_derive_seed_is_stable():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)


# -- CartPole ---------------------------------------------------------------


def test_cartpole_reward_at_origin_is_three():
    assert CartPoleSpec().reward(np.zeros(4)) == pytest.approx(3.0)


def test_cartpole_at_rest_without_force():
    spec = CartPoleSpec(force_mag=0.0)
    s = np.zeros((3, 4))
    for _ in range(200):
        s = spec.step(s, np.array([0, 1, 0]))
    assert np.all(s == 0.0)


def test_cartpole_push_direction():
    spec = CartPoleSpec()
    s = spec.step(np.zeros((1, 4)), np.array([1]))
    assert s[0, 1] > 0  # cart accelerates toward +x
    assert s[0, 3] < 0  # pole tips the other way


def test_cartpole_padding_is_absorbing():
    spec = CartPoleSpec(horizon=60)
    d = sample_trajectories(spec, spec.behavior, 200, seed=0)
    assert d.states.shape == (200, 61, 4)
    assert d.absorbed.any()
    assert np.all(d.rewards[d.absorbed] == 0.0)
    # once absorbed, always absorbed, and the state stops moving
    assert np.all(np.diff(d.absorbed.astype(int), axis=1) >= 0)
    i, t = np.argwhere(d.absorbed)[0]
    assert np.all(d.states[i, t:] == d.states[i, t])
    live = ~d.absorbed
    assert np.abs(d.rewards[live]).max() <= spec.reward_bound


def test_logistic_angle_policy_is_normalized():
    spec = CartPoleSpec()
    s = np.random.default_rng(0).normal(size=(100, 4))
    p = spec.target.probs(s)
    assert np.allclose(p.sum(-1), 1.0)
    assert np.allclose(p[:, 1], 1 / (1 + np.exp(20 * s[:, 2])))


def test_context_free_policy_shapes():
    pol = ContextFreePolicy(np.array([0.2, 0.8]))
    assert pol.probs(np.zeros((3, 5), dtype=int)).shape == (3, 5, 2)
