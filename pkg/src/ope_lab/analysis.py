"""Theory oracles and experiment logic.

* ``projection_variance``: asymptotic n * Var of an estimated-ratio estimator,
  Var(X) - c^T I^{-1} c with c = E[X s] and I the Fisher information.
* ``run_sweep`` / ``run_bandit_sweep``: replicated bias / variance / MSE per
  (estimator, k, n) cell with jackknife standard errors.
* ``select_history``: BIC-style history-length selector.
* ``coverage_diagnostics``: R_max, C_hat, eps_hat and U_max.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed

from .environments import (
    BanditSpec,
    CartPoleSpec,
    Dataset,
    MarkovPolicy,
    TabularMDPSpec,
    derive_seed,
    exact_value,
    marginal_ratios,
    monte_carlo_value,
    sample_bandit_dataset,
    sample_trajectories,
)
from .estimators import (
    ISWeights,
    QFunction,
    TabularHistoryFeatures,
    bandit_is,
    bellman_residuals,
    compute_weights,
    dr_terms,
    fit_mis_ratios,
    mis_terms,
    ois_terms,
    oracle_mis_terms,
    sis_terms,
    target_table,
)
from .policies import (
    DEFAULT_MIX,
    FeatureMap,
    ParametricHistoryPolicy,
    default_feature_map,
    fit_history_policies,
    trajectory_scores,
)

ORACLE = "oracle"
KValue = Union[int, str]
CoreKind = Literal["ois", "sis", "dr", "mis"]


# ---------------------------------------------------------------------------
# estimator configuration shared by sweeps and the selector


@dataclass(frozen=True)
class EstimatorConfig:
    """One estimator column: ``kind`` is ois, sis, dr or mis.

    DR needs ``q``; MIS uses tabular history features with ``ridge``.
    """

    name: str
    kind: CoreKind
    q: Optional[QFunction] = None
    ridge: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in ("ois", "sis", "dr", "mis"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "dr" and self.q is None:
            object.__setattr__(self, "q", QFunction.zero())


def _core_terms(
    est: EstimatorConfig,
    dataset: Dataset,
    weights: Optional[ISWeights],
    target: MarkovPolicy,
    gamma: float,
    pe: np.ndarray,
    q_values: Optional[np.ndarray] = None,
) -> np.ndarray:
    if est.kind == "ois":
        return ois_terms(dataset, weights, gamma)
    if est.kind == "sis":
        return sis_terms(dataset, weights, gamma)
    if est.kind == "dr":
        return dr_terms(dataset, weights, est.q, target, gamma, pe_table=pe, q_values=q_values)
    raise ValueError("MIS has no per-weight core")


def _mis_value(est: EstimatorConfig, dataset: Dataset, target: MarkovPolicy, k: KValue, gamma: float, ratio_tables) -> float:
    if k == ORACLE:
        return float(oracle_mis_terms(dataset, ratio_tables, gamma).mean())
    feats = TabularHistoryFeatures(dataset.num_states, dataset.num_actions)
    model = fit_mis_ratios(dataset, target, feats, k=int(k), ridge=est.ridge)
    return float(mis_terms(dataset, model, gamma).mean())


def evaluate_all(
    dataset: Dataset,
    target: MarkovPolicy,
    behavior: Optional[MarkovPolicy],
    estimators: Sequence[EstimatorConfig],
    ks: Sequence[KValue],
    gamma: float = 1.0,
    features: Optional[FeatureMap] = None,
    ratio_tables: Optional[np.ndarray] = None,
    mix: float = DEFAULT_MIX,
) -> dict[tuple[str, KValue], float]:
    """Every (estimator, k) estimate on one dataset; failures are NaN.

    Behavior policies are fitted once per k and shared across estimators.
    """
    out: dict[tuple[str, KValue], float] = {}
    fit_ks = sorted(int(k) for k in ks if k != ORACLE)
    needs_fit = any(e.kind != "mis" for e in estimators) and fit_ks
    features = default_feature_map(dataset) if features is None else features
    pe = target_table(dataset, target)
    q_cache: dict[int, np.ndarray] = {}

    def q_values(est: EstimatorConfig):
        if est.kind != "dr":
            return None
        key = id(est.q)
        if key not in q_cache:
            q_cache[key] = est.q.values(dataset)
        return q_cache[key]

    weights: dict[KValue, Optional[ISWeights]] = {}
    if ORACLE in ks and any(e.kind != "mis" for e in estimators):
        try:
            weights[ORACLE] = compute_weights(dataset, target, behavior, pe_table=pe)
        except ValueError:
            weights[ORACLE] = None
    if needs_fit:
        X_full = features.design(dataset.states, dataset.actions, max(fit_ks))
        try:
            fits = fit_history_policies(dataset, features, fit_ks, mix)
        except (ValueError, np.linalg.LinAlgError):
            fits = {}
        for k in fit_ks:
            if k not in fits or not fits[k][1].converged:
                weights[k] = None
                continue
            pol = fits[k][0]
            weights[k] = compute_weights(dataset, target, pol, X=X_full[..., : pol.dim], pe_table=pe)

    for est in estimators:
        for k in ks:
            try:
                if est.kind == "mis":
                    val = _mis_value(est, dataset, target, k, gamma, ratio_tables)
                else:
                    w = weights.get(k)
                    val = math.nan if w is None else float(_core_terms(est, dataset, w, target, gamma, pe, q_values(est)).mean())
            except (ValueError, np.linalg.LinAlgError, OverflowError):
                val = math.nan
            out[(est.name, k)] = val
    return out


# ---------------------------------------------------------------------------
# jackknife statistics


def _loo_mean_var(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out means and (ddof 0) variances along axis 0."""
    R = x.shape[0]
    s, q = x.sum(axis=0), (x**2).sum(axis=0)
    m = (s - x) / (R - 1)
    v = (q - x**2) / (R - 1) - m**2
    return m, np.maximum(v, 0.0)


def _jk_se(loo: np.ndarray) -> np.ndarray:
    R = loo.shape[0]
    return np.sqrt((R - 1) / R * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))


@dataclass(frozen=True)
class CellStats:
    bias: float
    bias_se: float
    variance: float
    variance_se: float
    mse: float
    mse_se: float


def cell_stats(values: np.ndarray, truth: float, truth_se: float = 0.0) -> CellStats:
    """Bias, variance (ddof 0) and MSE = bias^2 + variance with jackknife SEs."""
    x = np.asarray(values, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) < 2:
        nan = math.nan
        return CellStats(nan, nan, nan, nan, nan, nan)
    bias = x.mean() - truth
    var = x.var()
    m, v = _loo_mean_var(x)
    mse_loo = (m - truth) ** 2 + v
    return CellStats(
        float(bias),
        float(math.sqrt(_jk_se(m) ** 2 + truth_se**2)),
        float(var),
        float(_jk_se(v)),
        float(bias**2 + var),
        float(_jk_se(mse_loo)),
    )


@dataclass(frozen=True)
class PairedDifference:
    """stat(a) - stat(b) over shared replications, with its jackknife SE."""

    diff: float
    se: float

    @property
    def z(self) -> float:
        return self.diff / self.se if self.se > 0 else (math.inf if self.diff > 0 else -math.inf if self.diff < 0 else 0.0)


def paired_difference(
    a: np.ndarray, b: np.ndarray, stat: Literal["variance", "mse", "abs_bias"] = "variance", truth: float = 0.0
) -> PairedDifference:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    ok = np.isfinite(a) & np.isfinite(b)
    x = np.stack([a[ok], b[ok]], axis=1)
    m, v = _loo_mean_var(x)
    full_m, full_v = x.mean(axis=0), x.var(axis=0)
    if stat == "variance":
        loo, full = v, full_v
    elif stat == "mse":
        loo, full = (m - truth) ** 2 + v, (full_m - truth) ** 2 + full_v
    elif stat == "abs_bias":
        loo, full = np.abs(m - truth), np.abs(full_m - truth)
    else:
        raise ValueError(f"unknown statistic {stat!r}")
    d = loo[:, 0] - loo[:, 1]
    return PairedDifference(float(full[0] - full[1]), float(_jk_se(d[:, None])[0]))


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepRow:
    estimator: str
    k: KValue
    n: int
    replications: int
    bias: float
    bias_se: float
    variance: float
    variance_se: float
    mse: float
    mse_se: float
    failures: int

    @property
    def valid(self) -> bool:
        return self.failures <= 0.01 * self.replications


CSV_COLUMNS = ["estimator", "k", "n", "replications", "bias", "bias_se", "variance", "variance_se", "mse", "mse_se", "failures"]


@dataclass
class SweepReport:
    rows: list[SweepRow]
    truth: float
    truth_se: float
    raw: dict = field(default_factory=dict)  # (estimator, k, n) -> replication values

    def row(self, estimator: str, k: KValue, n: int) -> SweepRow:
        for r in self.rows:
            if r.estimator == estimator and r.k == k and r.n == n:
                return r
        raise KeyError((estimator, k, n))

    def values(self, estimator: str, k: KValue, n: int) -> np.ndarray:
        return self.raw[(estimator, k, n)]

    def compare(self, a: tuple, b: tuple, stat: str = "variance") -> PairedDifference:
        """Paired jackknife difference stat(a) - stat(b); a, b are (estimator, k, n)."""
        return paired_difference(self.values(*a), self.values(*b), stat, self.truth)

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.estimator, r.k, r.n, r.replications] + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[4:10]] + [r.failures])


def _summarize(raw: dict, truth: float, truth_se: float) -> list[SweepRow]:
    rows = []
    for (name, k, n), vals in raw.items():
        st = cell_stats(vals, truth, truth_se)
        failures = int(np.sum(~np.isfinite(vals)))
        rows.append(SweepRow(name, k, n, len(vals), st.bias, st.bias_se, st.variance, st.variance_se, st.mse, st.mse_se, failures))
    return rows


def _worker_count(workers: Optional[int]) -> int:
    return 1 if workers is None else max(1, int(workers))


def _chunks(R: int, parts: int) -> list[range]:
    edges = np.linspace(0, R, parts + 1).astype(int)
    return [range(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _mdp_chunk(spec, behavior, target, estimators, ks, n, reps, seed, gamma, features, ratio_tables, mix):
    out = []
    for rep in reps:
        d = sample_trajectories(spec, behavior, n, derive_seed(seed, n, rep))
        out.append(evaluate_all(d, target, behavior, estimators, ks, gamma, features, ratio_tables, mix))
    return out


def run_sweep(
    spec: Union[TabularMDPSpec, CartPoleSpec],
    behavior: MarkovPolicy,
    target: MarkovPolicy,
    estimators: Sequence[EstimatorConfig],
    ks: Sequence[KValue],
    ns: Sequence[int],
    replications: int,
    seed: int,
    gamma: Optional[float] = None,
    truth: Optional[tuple[float, float]] = None,
    features: Optional[FeatureMap] = None,
    workers: Optional[int] = None,
    mix: float = DEFAULT_MIX,
) -> SweepReport:
    """Replicated sweep; replication r at size n uses the same dataset for every cell."""
    if replications < 2:
        raise ValueError("replications must be >= 2 (variance undefined otherwise)")
    if not estimators:
        raise ValueError("estimator list is empty")
    if not ks or not ns:
        raise ValueError("k and n lists must be non-empty")
    gamma = spec.discount if gamma is None else gamma
    if truth is None:
        if isinstance(spec, TabularMDPSpec):
            truth = (exact_value(spec, target, gamma), 0.0)
        else:
            mc = monte_carlo_value(spec, target, 10**5, gamma, derive_seed(seed, 7))
            truth = (mc.value, mc.se)
    ratio_tables = None
    if any(e.kind == "mis" for e in estimators):
        if not isinstance(spec, TabularMDPSpec):
            raise ValueError("MIS sweeps need a tabular environment")
        if ORACLE in ks:
            ratio_tables = marginal_ratios(spec, behavior, target)
    raw: dict = {}
    nw = _worker_count(workers)
    for n in ns:
        jobs = [
            delayed(_mdp_chunk)(spec, behavior, target, estimators, ks, n, reps, seed, gamma, features, ratio_tables, mix)
            for reps in _chunks(replications, nw * 4 if nw > 1 else 1)
        ]
        results = Parallel(n_jobs=nw)(jobs) if nw > 1 else [j[0](*j[1], **j[2]) for j in jobs]
        flat = [r for chunk in results for r in chunk]
        for est in estimators:
            for k in ks:
                raw[(est.name, k, n)] = np.array([r[(est.name, k)] for r in flat])
    return SweepReport(_summarize(raw, *truth), truth[0], truth[1], raw)


BANDIT_MODES = ("oracle", "context_agnostic", "context_dependent")


def _bandit_chunk(spec, n, reps, seed):
    out = np.full((len(reps), len(BANDIT_MODES)), np.nan)
    for i, rep in enumerate(reps):
        d = sample_bandit_dataset(spec, n, derive_seed(seed, n, rep))
        for j, mode in enumerate(BANDIT_MODES):
            try:
                out[i, j] = bandit_is(d, mode, spec)
            except ValueError:
                pass
    return out


def run_bandit_sweep(
    spec: BanditSpec, ns: Sequence[int], replications: int, seed: int, workers: Optional[int] = None
) -> SweepReport:
    """Oracle / context-agnostic / context-dependent IS over an n grid."""
    if replications < 2:
        raise ValueError("replications must be >= 2 (variance undefined otherwise)")
    if not ns:
        raise ValueError("n list must be non-empty")
    nw = _worker_count(workers)
    raw: dict = {}
    for n in ns:
        parts = _chunks(replications, nw * 4 if nw > 1 else 1)
        if nw > 1:
            res = Parallel(n_jobs=nw)(delayed(_bandit_chunk)(spec, n, r, seed) for r in parts)
        else:
            res = [_bandit_chunk(spec, n, r, seed) for r in parts]
        vals = np.concatenate(res, axis=0)
        for j, mode in enumerate(BANDIT_MODES):
            raw[(mode, ORACLE if mode == "oracle" else 0, n)] = vals[:, j]
    truth = spec.true_value()
    return SweepReport(_summarize(raw, truth, 0.0), truth, 0.0, raw)


# ---------------------------------------------------------------------------
# projection variance


@dataclass(frozen=True)
class ProjectionReport:
    var_raw: float
    cross_moment: np.ndarray
    fisher: np.ndarray
    var_projected: float
    k: int
    ridge: float = 0.0

    def to_dict(self) -> dict:
        return {
            "var_raw": self.var_raw,
            "cross_moment": self.cross_moment.tolist(),
            "fisher": self.fisher.tolist(),
            "var_projected": self.var_projected,
            "k": self.k,
            "ridge": self.ridge,
        }


def projection_variance(
    dataset: Dataset,
    target: MarkovPolicy,
    behavior: MarkovPolicy,
    fitted_policy: ParametricHistoryPolicy,
    core: Union[CoreKind, EstimatorConfig] = "ois",
    gamma: float = 1.0,
    ridge_threshold: float = 1e-10,
    ridge: float = 1e-8,
) -> ProjectionReport:
    """Var(X) - c^T I^{-1} c with X the per-trajectory core under oracle weights.

    The result predicts n * Var of the estimator whose ratios use the MLE over
    the class of ``fitted_policy``.  For DR the core is the whole
    per-trajectory DR term, which includes Q_0(S_0, pi_e).
    """
    est = core if isinstance(core, EstimatorConfig) else EstimatorConfig(str(core), core)
    if est.kind == "mis":
        raise ValueError("projection variance is defined for ois, sis and dr")
    pe = target_table(dataset, target)
    w = compute_weights(dataset, target, behavior, pe_table=pe)
    x = _core_terms(est, dataset, w, target, gamma, pe)
    s = trajectory_scores(fitted_policy, dataset)
    n = len(dataset)
    xc = x - x.mean()
    var_raw = float(xc @ xc / n)
    c = s.T @ xc / n
    info = s.T @ s / n
    info = 0.5 * (info + info.T)
    used = 0.0
    if info.size:
        min_eig = float(np.linalg.eigvalsh(info)[0])
        if min_eig < ridge_threshold:
            warnings.warn(f"Fisher information near singular (min eigenvalue {min_eig:.3g}); adding ridge {ridge}")
            used = ridge
        proj = float(c @ np.linalg.solve(info + used * np.eye(len(info)), c))
    else:
        proj = 0.0
    return ProjectionReport(var_raw, c, info, max(var_raw - proj, 0.0), fitted_policy.k, used)


# ---------------------------------------------------------------------------
# history-length selection


@dataclass(frozen=True)
class HistorySelection:
    candidates: tuple
    var_hat: tuple
    objective: tuple
    h_star: int
    n: int
    method: str = "given"

    def to_dict(self) -> dict:
        return asdict(self)


def select_from_variances(candidates: Sequence[int], var_hat: Sequence[float], n: int, method: str = "given") -> HistorySelection:
    """argmin_h 2n * var_hat(h) - h log n, ties to the smaller h."""
    if len(candidates) == 0:
        raise ValueError("no candidate history lengths")
    if len(candidates) != len(var_hat):
        raise ValueError("one variance per candidate is required")
    order = np.argsort(candidates, kind="stable")
    cands = [int(candidates[i]) for i in order]
    var = [float(var_hat[i]) for i in order]
    obj = [2 * n * v - h * math.log(n) for h, v in zip(cands, var)]
    best = min(range(len(cands)), key=lambda i: (obj[i], cands[i]))
    return HistorySelection(tuple(cands), tuple(var), tuple(obj), cands[best], n, method)


def _influence_variance(dataset, target, est, pol, X, gamma, pe) -> float:
    w = compute_weights(dataset, target, pol, X=X, pe_table=pe)
    x = _core_terms(est, dataset, w, target, gamma, pe)
    s = trajectory_scores(pol, dataset, X)
    n = len(dataset)
    xc = x - x.mean()
    c = s.T @ xc / n
    info = s.T @ s / n + 1e-10 * np.eye(s.shape[1])
    infl = xc - s @ np.linalg.solve(info, c)
    return float(infl.var() / n)


def select_history(
    dataset: Dataset,
    target: MarkovPolicy,
    estimator: Union[CoreKind, EstimatorConfig],
    candidates: Sequence[int],
    variance_estimator: Literal["bootstrap", "sampling-formula"] = "bootstrap",
    bootstrap_samples: int = 200,
    seed: int = 0,
    gamma: float = 1.0,
    features: Optional[FeatureMap] = None,
) -> HistorySelection:
    """Pick h minimizing 2n Var(h) - h log n.

    Var(h) is the bootstrap variance of the estimate with a behavior policy
    refitted on every resample, or the plug-in variance of its influence
    function (core minus its projection on the scores).  MIS uses history
    length h in its ratio features instead of a behavior fit.
    """
    if len(candidates) == 0:
        raise ValueError("no candidate history lengths")
    est = estimator if isinstance(estimator, EstimatorConfig) else EstimatorConfig(str(estimator), estimator)
    n = len(dataset)
    cands = sorted(int(h) for h in candidates)
    features = default_feature_map(dataset) if features is None else features
    if variance_estimator == "bootstrap":
        if n < 10:
            raise ValueError("bootstrap needs at least 10 trajectories")
        rng = np.random.default_rng(derive_seed(seed, n))
        vals = np.full((bootstrap_samples, len(cands)), np.nan)
        for b in range(bootstrap_samples):
            boot = dataset.subset(rng.integers(0, n, n))
            res = evaluate_all(boot, target, None, [est], cands, gamma, features)
            vals[b] = [res[(est.name, h)] for h in cands]
        ok = np.isfinite(vals).all(axis=1)
        if ok.sum() < 2:
            raise RuntimeError("bootstrap failed on almost every resample")
        var_hat = vals[ok].var(axis=0, ddof=1)
    elif variance_estimator == "sampling-formula":
        pe = target_table(dataset, target)
        if est.kind == "mis":
            var_hat = []
            feats = TabularHistoryFeatures(dataset.num_states, dataset.num_actions)
            for h in cands:
                model = fit_mis_ratios(dataset, target, feats, k=h, ridge=est.ridge)
                var_hat.append(float(mis_terms(dataset, model, gamma).var() / n))
        else:
            X_full = features.design(dataset.states, dataset.actions, max(cands))
            fits = fit_history_policies(dataset, features, cands)
            var_hat = [
                _influence_variance(dataset, target, est, fits[h][0], X_full[..., : fits[h][0].dim], gamma, pe) for h in cands
            ]
    else:
        raise ValueError(f"unknown variance estimator {variance_estimator!r}")
    return select_from_variances(cands, var_hat, n, variance_estimator)


# ---------------------------------------------------------------------------
# coverage


@dataclass(frozen=True)
class CoverageRecord:
    r_max: float
    c_hat: float
    eps_hat: float
    u_max: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def coverage_diagnostics(
    dataset: Dataset,
    target: MarkovPolicy,
    behavior: Union[MarkovPolicy, ParametricHistoryPolicy],
    q: Optional[QFunction] = None,
    gamma: float = 1.0,
) -> CoverageRecord:
    live = ~dataset.absorbed
    w = compute_weights(dataset, target, behavior)
    if isinstance(behavior, ParametricHistoryPolicy):
        pb = behavior.action_probs(dataset)
    else:
        pb = np.take_along_axis(np.asarray(behavior.probs(dataset.states)), dataset.actions[..., None], axis=-1)[..., 0]
    u_max = None
    if q is not None:
        u = bellman_residuals(dataset, q, target, gamma)
        u_max = float(np.abs(u[live]).max()) if live.any() else 0.0
    return CoverageRecord(
        float(np.abs(dataset.rewards[live]).max()) if live.any() else 0.0,
        w.c_hat,
        float(pb[live].min()) if live.any() else 1.0,
        u_max,
    )
