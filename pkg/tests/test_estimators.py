import dataclasses

import numpy as np
import pytest

from ope_lab.analysis import EstimatorConfig, run_sweep
from ope_lab.environments import (
    BanditSpec,
    ContextFreePolicy,
    Dataset,
    StateTablePolicy,
    default_bandit,
    exact_value,
    marginal_ratios,
    q_function,
    reference_mdp,
    sample_bandit_dataset,
    sample_trajectories,
)
from ope_lab.estimators import (
    QFunction,
    TabularHistoryFeatures,
    bandit_is,
    bellman_residuals,
    compute_weights,
    constant_features,
    dense_one_hot_features,
    dr,
    dr_terms,
    drl_linear,
    drl_linear_details,
    estimate_record,
    fit_mis_ratios,
    mis,
    ois,
    sis,
)

from conftest import constant_chain, one_state_binary


def _with_rewards(d: Dataset, rewards: np.ndarray) -> Dataset:
    return dataclasses.replace(d, rewards=rewards, states=d.states.copy(), actions=d.actions.copy(), absorbed=d.absorbed.copy())


# -- bandit -----------------------------------------------------------------


def test_bandit_oracle_with_matching_policies_is_sample_mean():
    spec = BanditSpec([0.5, 0.5], default_bandit().reward_mean, [0.6, 0.4], [0.6, 0.4])
    d = sample_bandit_dataset(spec, 300, seed=0)
    assert bandit_is(d, "oracle", spec) == pytest.approx(d.rewards.mean(), rel=1e-14)


def test_bandit_oracle_hand_arithmetic():
    spec = default_bandit()
    d = Dataset(np.array([[0], [1]]), np.array([[1], [0]]), np.array([[10.1], [0.3]]), np.zeros((2, 1), bool), 2, 2)
    expected = ((0.4 / 0.3) * 10.1 + (0.6 / 0.7) * 0.3) / 2
    assert bandit_is(d, "oracle", spec) == pytest.approx(expected, rel=1e-14)


def test_bandit_context_dependent_names_unvisited_cell():
    spec = default_bandit()
    d = Dataset(np.array([[0], [0], [1]]), np.array([[1], [0], [0]]), np.zeros((3, 1)), np.zeros((3, 1), bool), 2, 2)
    with pytest.raises(ValueError, match=r"\(1, 1\)"):
        bandit_is(d, "context_dependent", spec)
    bandit_is(d, "context_agnostic", spec)  # defined: both actions seen


def test_bandit_estimated_ratios_reduce_mse_without_noise():
    # noise-free rewards make the context-dependent gain visible at modest scale
    from ope_lab.analysis import run_bandit_sweep

    rep = run_bandit_sweep(default_bandit(0.0), [500], 3000, seed=5)
    mse = {r.estimator: r.mse for r in rep.rows}
    assert mse["context_dependent"] < mse["context_agnostic"] < mse["oracle"]
    d = rep.compare(("context_dependent", 0, 500), ("context_agnostic", 0, 500), "mse")
    assert d.diff + 2 * d.se < 0


# -- weights ----------------------------------------------------------------


def test_weights_are_one_on_policy(ref):
    spec, behavior, _ = ref
    d = sample_trajectories(spec, behavior, 100, seed=0)
    w = compute_weights(d, behavior, behavior)
    assert np.all(w.lam == 1.0) and w.c_hat == 1.0
    assert w.source == "oracle"


def test_weights_are_cumulative_products(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 50, seed=1)
    w = compute_weights(d, target, behavior)
    for i in range(50):
        r = [target.table[s, a] / behavior.table[s, a] for s, a in zip(d.states[i], d.actions[i])]
        assert np.array_equal(w.lam[i], np.cumprod(r))
    assert np.array_equal(w.lam_prev[:, 0], np.ones(50))
    assert np.array_equal(w.lam_prev[:, 1:], w.lam[:, :-1])
    assert np.all(w.lam > 0)
    assert w.c_hat == pytest.approx(w.ratios.max())
    assert w.c_hat <= (target.table / behavior.table).max() + 1e-15


def test_log_weights_have_nonpositive_mean(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 20_000, seed=2)
    w = compute_weights(d, target, behavior)
    assert np.log(w.final).mean() <= 0.0
    assert abs(w.final.mean() - 1.0) < 4 * w.final.std() / np.sqrt(len(d))


def test_zero_behavior_probability_is_an_error(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 200, seed=3)
    bad = StateTablePolicy(np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]))
    with pytest.raises(ValueError, match="probability 0"):
        compute_weights(d, target, bad)


def test_effective_sample_size_ratio(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 100, seed=3)
    w = compute_weights(d, target, behavior)
    lt = w.final
    assert w.effective_sample_size_ratio() == pytest.approx((lt**2).sum() / lt.sum() ** 2)


# -- OIS / SIS / DR ---------------------------------------------------------


@pytest.fixture(scope="module")
def oracle_sweep():
    spec, behavior, target = reference_mdp()
    q = QFunction.tabular(q_function(spec, target))
    ests = [EstimatorConfig("ois", "ois"), EstimatorConfig("sis", "sis"), EstimatorConfig("dr", "dr", q)]
    return run_sweep(spec, behavior, target, ests, ["oracle"], [200], 10_000, seed=17)


@pytest.mark.parametrize("name", ["ois", "sis", "dr"])
def test_oracle_estimators_unbiased(oracle_sweep, name):
    row = oracle_sweep.row(name, "oracle", 200)
    assert abs(row.bias) <= 4 * row.bias_se


def test_dr_with_true_q_has_lower_variance_than_sis(oracle_sweep):
    d = oracle_sweep.compare(("sis", "oracle", 200), ("dr", "oracle", 200))
    assert d.diff > 2 * d.se


def test_on_policy_estimates_are_sample_mean_return(ref):
    spec, behavior, _ = ref
    d = sample_trajectories(spec, behavior, 300, seed=4)
    w = compute_weights(d, behavior, behavior)
    assert ois(d, w) == pytest.approx(d.returns().mean(), rel=1e-14)
    assert sis(d, w) == pytest.approx(d.returns().mean(), rel=1e-14)


def test_horizon_zero_collapses_to_bandit_is():
    spec = default_bandit()
    d = sample_bandit_dataset(spec, 1000, seed=6)
    w = compute_weights(d, spec.target, spec.behavior)
    v = bandit_is(d, "oracle", spec)
    assert ois(d, w) == v
    assert sis(d, w) == v


def test_final_step_reward_makes_sis_equal_ois(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 200, seed=5)
    r = np.zeros_like(d.rewards)
    r[:, -1] = d.rewards[:, -1]
    d = _with_rewards(d, r)
    w = compute_weights(d, target, behavior)
    assert sis(d, w) == ois(d, w)


def test_dr_with_zero_q_is_sis(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 400, seed=6)
    w = compute_weights(d, target, behavior)
    for gamma in (1.0, 0.9):
        assert dr(d, w, QFunction.zero(), target, gamma) == sis(d, w, gamma)


def test_on_policy_dr_is_q0_plus_residuals(ref):
    spec, behavior, _ = ref
    q = QFunction.tabular(q_function(spec, behavior))
    d = sample_trajectories(spec, behavior, 2000, seed=7)
    w = compute_weights(d, behavior, behavior)
    terms = dr_terms(d, w, q, behavior)
    q0_pi = (q.values(d)[:, 0] * behavior.probs(d.states[:, 0])).sum(-1)
    u = bellman_residuals(d, q, behavior)
    assert np.allclose(terms, q0_pi + u.sum(axis=1), atol=1e-10)
    truth = exact_value(spec, behavior)
    assert abs(terms.mean() - truth) < 4 * terms.std() / np.sqrt(len(d))


def test_q_function_modes(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 20, seed=0)
    assert np.all(QFunction.zero().values(d) == 0.0)
    tables = q_function(spec, target)
    tab = QFunction.tabular(tables, offset=2.0).values(d)
    assert np.allclose(tab[:, 3], tables[3][d.states[:, 3]] + 2.0)

    def feats(states):
        out = np.zeros(states.shape + (2, 8))
        for a in range(2):
            out[..., a, states * 2 + a] = 0  # placeholder, filled below
        idx = states[..., None] * 2 + np.arange(2)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out

    coefs = tables.reshape(spec.horizon + 1, 8)
    lin = QFunction.linear(feats, coefs).values(d)
    assert np.allclose(lin, QFunction.tabular(tables).values(d))


# -- MIS --------------------------------------------------------------------


def test_constant_features_give_unit_first_ratio(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 300, seed=0)
    model = fit_mis_ratios(d, target, constant_features(2), ridge=0.0)
    assert model.alphas[0][0] == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(model.w, 1.0)
    assert mis(d, model) == pytest.approx(d.returns().mean(), rel=1e-14)
    assert np.allclose(model.mean_ratios(), 1.0)


def test_tabular_ratios_converge_to_true_marginal_ratios():
    spec, behavior, target = reference_mdp(horizon=3)
    d = sample_trajectories(spec, behavior, 100_000, seed=1)
    model = fit_mis_ratios(d, target, TabularHistoryFeatures(4, 2), k=0, ridge=0.0)
    true_w = marginal_ratios(spec, behavior, target)
    T1 = spec.horizon + 1
    expected = true_w[np.arange(T1)[None, :], d.states, d.actions]
    assert np.max(np.abs(model.w / expected - 1.0)) < 0.02


def test_dense_and_sparse_one_hot_agree(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 500, seed=2)
    a = fit_mis_ratios(d, target, TabularHistoryFeatures(4, 2), ridge=0.0)
    b = fit_mis_ratios(d, target, dense_one_hot_features(4, 2), ridge=0.0)
    assert np.allclose(a.w, b.w, rtol=1e-10)


def test_saturated_history_ratios_reproduce_cumulative_ratios():
    spec, behavior, target = reference_mdp(horizon=3)
    d = sample_trajectories(spec, behavior, 3000, seed=3)
    T = spec.horizon
    model = fit_mis_ratios(d, target, TabularHistoryFeatures(4, 2), k=T, ridge=0.0)
    # cumulative ratios with the behavior estimated by full-history frequencies
    lam = np.ones(len(d))
    for t in range(T + 1):
        hist = [tuple(row) for row in np.column_stack([d.states[:, : t + 1], d.actions[:, :t]])]
        cell = [h + (a,) for h, a in zip(hist, d.actions[:, t])]
        n_h = {}
        n_ha = {}
        for h, c in zip(hist, cell):
            n_h[h] = n_h.get(h, 0) + 1
            n_ha[c] = n_ha.get(c, 0) + 1
        pb_hat = np.array([n_ha[c] / n_h[h] for h, c in zip(hist, cell)])
        lam = lam * target.table[d.states[:, t], d.actions[:, t]] / pb_hat
        assert np.allclose(model.w[:, t], lam, rtol=1e-6, atol=0)


def test_mis_unbiased_over_replications():
    spec, behavior, target = reference_mdp(horizon=3)
    rep = run_sweep(spec, behavior, target, [EstimatorConfig("mis", "mis")], [0], [500], 2000, seed=9)
    row = rep.row("mis", 0, 500)
    assert abs(row.bias) <= 4 * row.bias_se


def test_mis_is_deterministic(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 300, seed=4)
    feats = TabularHistoryFeatures(4, 2)
    assert mis(d, fit_mis_ratios(d, target, feats, k=1)) == mis(d, fit_mis_ratios(d, target, feats, k=1))


def test_singular_features_without_ridge_raise():
    spec, behavior = one_state_binary()
    d = sample_trajectories(spec, behavior, 100, seed=0)
    target = StateTablePolicy(np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError, match="ridge"):
        fit_mis_ratios(d, target, dense_one_hot_features(2, 2), ridge=0.0)
    fit_mis_ratios(d, target, dense_one_hot_features(2, 2), ridge=1e-8)


def test_dense_features_reject_history_mode(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 50, seed=0)
    with pytest.raises(ValueError):
        fit_mis_ratios(d, target, dense_one_hot_features(4, 2), k=1)


# -- MIS = DRL --------------------------------------------------------------


@pytest.mark.parametrize("k", [0, 1, 2])
def test_mis_equals_drl_with_sparse_history_features(ref, k):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 1000, seed=10 + k)
    feats = TabularHistoryFeatures(4, 2)
    model = fit_mis_ratios(d, target, feats, k=k, ridge=0.0)
    assert abs(mis(d, model) - drl_linear(d, target, feats, ridge=0.0, k=k)) <= 1e-8


def test_mis_equals_drl_with_dense_features_and_discount(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 1000, seed=3)
    feats = dense_one_hot_features(4, 2)
    model = fit_mis_ratios(d, target, feats, ridge=0.0)
    for gamma in (1.0, 0.8):
        assert abs(mis(d, model, gamma) - drl_linear(d, target, feats, ridge=0.0, gamma=gamma)) <= 1e-8


def test_drl_degenerate_chain_counts_steps():
    spec, pol = constant_chain(horizon=5)
    d = sample_trajectories(spec, pol, 10, seed=0)
    assert drl_linear(d, pol, constant_features(1), ridge=0.0) == pytest.approx(6.0, abs=1e-12)


def test_drl_details_expose_backward_fit(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 500, seed=1)
    res = drl_linear_details(d, target, TabularHistoryFeatures(4, 2), ridge=0.0)
    # last-step Q fit is the cell mean of the final reward
    cells = d.states[:, -1] * 2 + d.actions[:, -1]
    for c in np.unique(cells):
        assert res.q_obs[cells == c, -1] == pytest.approx(d.rewards[cells == c, -1].mean())


def test_estimate_record(ref):
    spec, behavior, target = ref
    d = sample_trajectories(spec, behavior, 100, seed=0)
    w = compute_weights(d, target, behavior)
    rec = estimate_record("sis", d, sis(d, w), w, k="oracle").to_dict()
    assert rec["estimator"] == "sis" and rec["n"] == 100
    assert rec["c_hat"] == w.c_hat
    assert rec["ess_ratio"] == pytest.approx(w.effective_sample_size_ratio())
