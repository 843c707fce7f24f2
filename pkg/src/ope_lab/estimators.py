"""Importance-sampling family of policy-value estimators.

Bandit IS (oracle / context-agnostic / context-dependent ratios), OIS, SIS,
DR and MIS with linearly parameterized marginal ratios, plus the DR-form
estimator with linear-sieve Q that MIS coincides with algebraically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Union

import numpy as np

from .environments import BanditSpec, Dataset, MarkovPolicy
from .policies import ParametricHistoryPolicy, fit_tabular

Behavior = Union[MarkovPolicy, ParametricHistoryPolicy]


def _gather(probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.take_along_axis(probs, actions[..., None], axis=-1)[..., 0]


def target_table(dataset: Dataset, target: MarkovPolicy) -> np.ndarray:
    """pi_e(. | S_t) for every step, shape (n, T+1, m)."""
    return np.asarray(target.probs(dataset.states), dtype=float)


def discounts(dataset: Dataset, gamma: float) -> np.ndarray:
    return gamma ** np.arange(dataset.horizon + 1)


# ---------------------------------------------------------------------------
# bandit


def bandit_is(
    dataset: Dataset,
    mode: Literal["oracle", "context_agnostic", "context_dependent"],
    spec: BanditSpec,
) -> float:
    """E_n[pi_e(A) / pi_b(.) * R] with the oracle or a sample-frequency pi_b."""
    s, a, r = dataset.states[:, 0], dataset.actions[:, 0], dataset.rewards[:, 0]
    if mode == "oracle":
        denom = spec.behavior_probs[a]
    elif mode == "context_agnostic":
        denom = fit_tabular(dataset, context_dependent=False).action_probs[a]
    elif mode == "context_dependent":
        seen = np.zeros((spec.num_contexts, spec.num_actions), dtype=bool)
        seen[s, a] = True
        missing = [(int(c), int(b)) for c, b in zip(*np.nonzero(~seen))]
        if missing:
            raise ValueError(f"unvisited (context, action) cells: {missing}")
        denom = fit_tabular(dataset, context_dependent=True).table[s, a]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(np.mean(spec.target_probs[a] / denom * r))


# ---------------------------------------------------------------------------
# cumulative ratios


@dataclass(frozen=True)
class ISWeights:
    """lam[i, t] = prod_{j<=t} pi_e(A_j|S_j) / pi_b(A_j|.) for trajectory i."""

    lam: np.ndarray
    ratios: np.ndarray
    c_hat: float
    source: str

    @property
    def lam_prev(self) -> np.ndarray:
        """lambda_{t-1} with lambda_{-1} = 1."""
        return np.concatenate([np.ones((self.lam.shape[0], 1)), self.lam[:, :-1]], axis=1)

    @property
    def final(self) -> np.ndarray:
        return self.lam[:, -1]

    def effective_sample_size_ratio(self) -> float:
        """sum lam_T^2 / (sum lam_T)^2."""
        lt = self.final
        return float(np.sum(lt**2) / np.sum(lt) ** 2)


def behavior_action_probs(dataset: Dataset, behavior: Behavior, X: Optional[np.ndarray] = None) -> np.ndarray:
    if isinstance(behavior, ParametricHistoryPolicy):
        return behavior.action_probs(dataset, X)
    return _gather(np.asarray(behavior.probs(dataset.states), dtype=float), dataset.actions)


def compute_weights(
    dataset: Dataset,
    target: MarkovPolicy,
    behavior: Behavior,
    X: Optional[np.ndarray] = None,
    pe_table: Optional[np.ndarray] = None,
) -> ISWeights:
    pe = _gather(target_table(dataset, target) if pe_table is None else pe_table, dataset.actions)
    pb = behavior_action_probs(dataset, behavior, X)
    live = ~dataset.absorbed
    if np.any((pb <= 0) & live):
        i, t = np.argwhere((pb <= 0) & live)[0]
        raise ValueError(f"behavior assigns probability 0 to the observed action at trajectory {i}, t={t}")
    ratios = np.where(live, pe / np.where(live, pb, 1.0), 1.0)
    lam = np.cumprod(ratios, axis=1)
    source = f"estimated(k={behavior.k})" if isinstance(behavior, ParametricHistoryPolicy) else "oracle"
    c_hat = float(ratios[live].max()) if live.any() else 1.0
    return ISWeights(lam, ratios, c_hat, source)


# ---------------------------------------------------------------------------
# OIS / SIS / DR


def ois_terms(dataset: Dataset, weights: ISWeights, gamma: float = 1.0) -> np.ndarray:
    return weights.final * dataset.returns(gamma)


def sis_terms(dataset: Dataset, weights: ISWeights, gamma: float = 1.0) -> np.ndarray:
    return (weights.lam * dataset.rewards) @ discounts(dataset, gamma)


def ois(dataset: Dataset, weights: ISWeights, gamma: float = 1.0) -> float:
    """E_n[lam_T G_T]."""
    return float(ois_terms(dataset, weights, gamma).mean())


def sis(dataset: Dataset, weights: ISWeights, gamma: float = 1.0) -> float:
    """E_n[sum_t gamma^t lam_t R_t]."""
    return float(sis_terms(dataset, weights, gamma).mean())


@dataclass(frozen=True)
class QFunction:
    """Per-timestep action values, optionally shifted by a constant offset.

    ``mode`` is ``"zero"``, ``"tabular"`` (``tables`` of shape (T+1, S, A)) or
    ``"linear"`` (``features(states) -> (..., A, d)`` with ``coefs`` (T+1, d)).
    """

    mode: Literal["zero", "tabular", "linear"] = "zero"
    tables: Optional[np.ndarray] = None
    features: Optional[Callable[[np.ndarray], np.ndarray]] = None
    coefs: Optional[np.ndarray] = None
    offset: float = 0.0

    @classmethod
    def zero(cls) -> "QFunction":
        return cls("zero")

    @classmethod
    def tabular(cls, tables: np.ndarray, offset: float = 0.0) -> "QFunction":
        return cls("tabular", tables=np.asarray(tables, dtype=float), offset=offset)

    @classmethod
    def linear(cls, features: Callable[[np.ndarray], np.ndarray], coefs: np.ndarray, offset: float = 0.0) -> "QFunction":
        return cls("linear", features=features, coefs=np.asarray(coefs, dtype=float), offset=offset)

    def values(self, dataset: Dataset) -> np.ndarray:
        """Q_t(S_t, a) for every step and action, shape (n, T+1, m); 0 on absorbed steps."""
        n, T1 = dataset.actions.shape
        m = dataset.num_actions
        if self.mode == "zero":
            q = np.zeros((n, T1, m))
        elif self.mode == "tabular":
            if self.tables.shape[0] != T1:
                raise ValueError("Q tables do not match the dataset horizon")
            q = self.tables[np.arange(T1)[None, :], dataset.states]
        elif self.mode == "linear":
            phi = self.features(dataset.states)
            q = np.einsum("ntad,td->nta", phi, self.coefs)
        else:
            raise ValueError(f"unknown Q mode {self.mode!r}")
        q = q + self.offset
        return np.where(dataset.absorbed[..., None], 0.0, q)


def dr_terms(
    dataset: Dataset,
    weights: ISWeights,
    q: QFunction,
    target: MarkovPolicy,
    gamma: float = 1.0,
    pe_table: Optional[np.ndarray] = None,
    q_values: Optional[np.ndarray] = None,
) -> np.ndarray:
    pe = target_table(dataset, target) if pe_table is None else pe_table
    qv = q.values(dataset) if q_values is None else q_values
    q_obs = _gather(qv, dataset.actions)
    q_pi = (qv * pe).sum(axis=-1)
    g = discounts(dataset, gamma)
    per_step = weights.lam * (dataset.rewards - q_obs) + weights.lam_prev * q_pi
    return per_step @ g


def dr(
    dataset: Dataset,
    weights: ISWeights,
    q: QFunction,
    target: MarkovPolicy,
    gamma: float = 1.0,
) -> float:
    """E_n[sum_t lam_t g^t (R_t - Q_t(S_t,A_t)) + lam_{t-1} g^t sum_a Q_t(S_t,a) pi_e(a|S_t)]."""
    return float(dr_terms(dataset, weights, q, target, gamma).mean())


def bellman_residuals(
    dataset: Dataset, q: QFunction, target: MarkovPolicy, gamma: float = 1.0, q_values: Optional[np.ndarray] = None
) -> np.ndarray:
    """U_t = R_t - Q_t(S_t, A_t) + gamma * Q_{t+1}(S_{t+1}, pi_e), with Q_{T+1} = 0."""
    qv = q.values(dataset) if q_values is None else q_values
    pe = target_table(dataset, target)
    q_pi = (qv * pe).sum(axis=-1)
    nxt = np.concatenate([q_pi[:, 1:], np.zeros((len(dataset), 1))], axis=1)
    return dataset.rewards - _gather(qv, dataset.actions) + gamma * nxt


# ---------------------------------------------------------------------------
# marginalized IS with linear ratio models


class MISFeatures:
    """Per-timestep features for the marginal ratio model.

    Implementations expose a per-timestep design object with methods
    ``solve``, ``moment_obs``, ``moment_cf``, ``eval_obs`` and ``eval_cf``.
    """

    def designs(self, dataset: Dataset, pe: np.ndarray, k: int, ridge: float = 0.0) -> list:
        raise NotImplementedError


class _DenseDesign:
    def __init__(self, obs: np.ndarray, cf: np.ndarray, pe_t: np.ndarray, ridge: float):
        self.obs = obs  # (n, d)
        self.cf_pi = np.einsum("na,nad->nd", pe_t, cf)  # phi_t(S_t, pi_e)
        n, d = obs.shape
        self.sigma = obs.T @ obs / n
        self.ridge = ridge
        self.n = n

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        a = self.sigma + self.ridge * np.eye(len(rhs))
        if self.ridge == 0.0:
            cond = np.linalg.cond(a) if a.size else 1.0
            if not np.isfinite(cond) or cond > 1e14:
                raise np.linalg.LinAlgError("feature second-moment matrix is singular; use ridge > 0")
        return np.linalg.solve(a, rhs)

    def moment_obs(self, y: np.ndarray) -> np.ndarray:
        return self.obs.T @ y / self.n

    def moment_cf(self, w: np.ndarray) -> np.ndarray:
        return self.cf_pi.T @ w / self.n

    def eval_obs(self, coef: np.ndarray) -> np.ndarray:
        return self.obs @ coef

    def eval_cf(self, coef: np.ndarray) -> np.ndarray:
        return self.cf_pi @ coef


class _OneHotDesign:
    """One-hot features on integer cell codes; only observed cells get a column."""

    def __init__(self, obs_codes: np.ndarray, cf_codes: np.ndarray, pe_t: np.ndarray, ridge: float):
        self.cells, self.obs_idx, counts = np.unique(obs_codes, return_inverse=True, return_counts=True)
        self.obs_idx = self.obs_idx.ravel()
        pos = np.searchsorted(self.cells, cf_codes)
        pos = np.clip(pos, 0, len(self.cells) - 1)
        self.cf_idx = pos
        self.cf_w = np.where(self.cells[pos] == cf_codes, pe_t, 0.0)  # (n, m)
        self.n = len(obs_codes)
        self.diag = counts / self.n
        self.ridge = ridge

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return rhs / (self.diag + self.ridge)

    def moment_obs(self, y: np.ndarray) -> np.ndarray:
        return np.bincount(self.obs_idx, weights=y, minlength=len(self.cells)) / self.n

    def moment_cf(self, w: np.ndarray) -> np.ndarray:
        vals = self.cf_w * w[:, None]
        return np.bincount(self.cf_idx.ravel(), weights=vals.ravel(), minlength=len(self.cells)) / self.n

    def eval_obs(self, coef: np.ndarray) -> np.ndarray:
        return coef[self.obs_idx]

    def eval_cf(self, coef: np.ndarray) -> np.ndarray:
        return (self.cf_w * coef[self.cf_idx]).sum(axis=1)


def _mixed_radix(columns: list[np.ndarray], radices: list[int]) -> np.ndarray:
    code = np.zeros(columns[0].shape, dtype=np.int64)
    for col, r in zip(columns, radices):
        code = code * r + col
    return code


@dataclass(frozen=True)
class TabularHistoryFeatures(MISFeatures):
    """One-hot indicator of the cell (H_{t-k:t}, A_t) on a finite state space.

    Lags before t = 0 are coded with a null state and null action, so early
    steps use the shorter available history.
    """

    num_states: int
    num_actions: int

    def _codes(self, dataset: Dataset, t: int, k: int, action: np.ndarray) -> np.ndarray:
        S, m = self.num_states, self.num_actions
        cols, radices = [], []
        for i in range(k, 0, -1):
            if t - i >= 0:
                cols += [dataset.states[:, t - i], dataset.actions[:, t - i]]
            else:
                cols += [np.full(len(dataset), S), np.full(len(dataset), m)]
            radices += [S + 1, m + 1]
        cols += [dataset.states[:, t]]
        radices += [S + 1]
        base = _mixed_radix(cols, radices) if cols else np.zeros(len(dataset), dtype=np.int64)
        if math.prod(radices) * m >= 2**62:
            raise OverflowError("history too long for integer cell codes")
        return base[..., None] * m + action if action.ndim == 2 else base * m + action

    def designs(self, dataset: Dataset, pe: np.ndarray, k: int, ridge: float = 0.0) -> list:
        out = []
        all_a = np.broadcast_to(np.arange(self.num_actions), (len(dataset), self.num_actions))
        for t in range(dataset.horizon + 1):
            obs = self._codes(dataset, t, k, dataset.actions[:, t])
            cf = self._codes(dataset, t, k, all_a)
            out.append(_OneHotDesign(obs, cf, pe[:, t], ridge))
        return out


@dataclass(frozen=True)
class LinearMISFeatures(MISFeatures):
    """Dense Markov features phi(s, a) from ``fn(states, actions) -> (..., d)``."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    num_actions: int

    def designs(self, dataset: Dataset, pe: np.ndarray, k: int, ridge: float = 0.0) -> list:
        if k != 0:
            raise ValueError("dense MIS features are Markov; use TabularHistoryFeatures for k > 0")
        out = []
        n, m = len(dataset), self.num_actions
        for t in range(dataset.horizon + 1):
            s = dataset.states[:, t]
            obs = np.asarray(self.fn(s, dataset.actions[:, t]), dtype=float).reshape(n, -1)
            cf = np.stack([np.asarray(self.fn(s, np.full(n, a)), dtype=float).reshape(n, -1) for a in range(m)], axis=1)
            out.append(_DenseDesign(obs, cf, pe[:, t], ridge))
        return out


def constant_features(num_actions: int) -> LinearMISFeatures:
    return LinearMISFeatures(lambda s, a: np.ones(np.shape(a) + (1,)), num_actions)


def dense_one_hot_features(num_states: int, num_actions: int) -> LinearMISFeatures:
    def fn(s, a):
        out = np.zeros(np.shape(a) + (num_states * num_actions,))
        np.put_along_axis(out, (np.asarray(s) * num_actions + np.asarray(a))[..., None], 1.0, axis=-1)
        return out

    return LinearMISFeatures(fn, num_actions)


@dataclass(frozen=True)
class MISRatioModel:
    """Fitted marginal ratios w_t = phi_t^T alpha_t on the training dataset."""

    alphas: list
    w: np.ndarray  # (n, T+1) fitted ratios on the training data
    ridge: float
    k: int
    diagnostics: dict = field(default_factory=dict)

    def mean_ratios(self) -> np.ndarray:
        """E_n[w_t] per timestep; close to 1 when features include a constant."""
        return self.w.mean(axis=0)


def _designs(dataset: Dataset, target: MarkovPolicy, features: MISFeatures, k: int, ridge: float):
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    pe = target_table(dataset, target)
    return pe, features.designs(dataset, pe, k, ridge)


def _alpha_recursion(designs: list) -> tuple[list, np.ndarray]:
    n = designs[0].n
    alphas, w = [], []
    w_prev = np.ones(n)
    for des in designs:
        try:
            alpha = des.solve(des.moment_cf(w_prev))
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"{exc}") from exc
        w_prev = des.eval_obs(alpha)
        alphas.append(alpha)
        w.append(w_prev)
    return alphas, np.stack(w, axis=1)


def fit_mis_ratios(
    dataset: Dataset,
    target: MarkovPolicy,
    features: MISFeatures,
    k: int = 0,
    ridge: float = 1e-8,
) -> MISRatioModel:
    """alpha_0 = Sigma_0^{-1} E_n[phi_0(S_0, pi_e)], then
    alpha_t = Sigma_t^{-1} E_n[phi_t(S_t, pi_e) phi_{t-1}^T alpha_{t-1}] with
    Sigma_t = E_n[phi_t phi_t^T] (+ ridge * I)."""
    _, designs = _designs(dataset, target, features, k, ridge)
    alphas, w = _alpha_recursion(designs)
    return MISRatioModel(alphas, w, ridge, k, {"ridge": ridge, "k": k})


def mis_terms(dataset: Dataset, model: MISRatioModel, gamma: float = 1.0) -> np.ndarray:
    return (model.w * dataset.rewards) @ discounts(dataset, gamma)


def mis(dataset: Dataset, model: MISRatioModel, gamma: float = 1.0) -> float:
    """E_n[sum_t gamma^t w_t R_t]."""
    if model.w.shape != dataset.rewards.shape:
        raise ValueError("ratio model was fitted on a dataset of a different shape")
    return float(mis_terms(dataset, model, gamma).mean())


def oracle_mis_terms(dataset: Dataset, ratio_tables: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """MIS with known marginal ratio tables of shape (T+1, S, A)."""
    T1 = dataset.horizon + 1
    w = ratio_tables[np.arange(T1)[None, :], dataset.states, dataset.actions]
    return (w * dataset.rewards) @ discounts(dataset, gamma)


@dataclass(frozen=True)
class DRLResult:
    value: float
    w: np.ndarray
    betas: list
    q_obs: np.ndarray
    q_pi: np.ndarray


def drl_linear_details(
    dataset: Dataset,
    target: MarkovPolicy,
    features: MISFeatures,
    ridge: float = 1e-8,
    gamma: float = 1.0,
    k: int = 0,
) -> DRLResult:
    _, designs = _designs(dataset, target, features, k, ridge)
    _, w = _alpha_recursion(designs)
    T1 = dataset.horizon + 1
    n = len(dataset)
    betas: list = [None] * T1
    q_obs = np.zeros((n, T1))
    q_pi = np.zeros((n, T1))
    next_q_pi = np.zeros(n)  # Q_{T+1} = 0
    for t in reversed(range(T1)):
        des = designs[t]
        target_y = dataset.rewards[:, t] + gamma * next_q_pi
        try:
            beta = des.solve(des.moment_obs(target_y))
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"{exc}") from exc
        betas[t] = beta
        q_obs[:, t] = des.eval_obs(beta)
        q_pi[:, t] = des.eval_cf(beta)
        next_q_pi = q_pi[:, t]
    w_prev = np.concatenate([np.ones((n, 1)), w[:, :-1]], axis=1)
    per_step = w * (dataset.rewards - q_obs) + w_prev * q_pi
    value = float((per_step @ discounts(dataset, gamma)).mean())
    return DRLResult(value, w, betas, q_obs, q_pi)


def drl_linear(
    dataset: Dataset,
    target: MarkovPolicy,
    features: MISFeatures,
    ridge: float = 1e-8,
    gamma: float = 1.0,
    k: int = 0,
) -> float:
    """DR-form estimate with linear-sieve ratios and a linear-sieve Q.

    beta_{T+1} = 0 and beta_t = Sigma_t^{-1} E_n[phi_t (R_t + gamma phi_{t+1}(S_{t+1}, pi_e)^T beta_{t+1})].
    """
    return drl_linear_details(dataset, target, features, ridge, gamma, k).value


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimateRecord:
    """Structured diagnostics emitted alongside an estimate."""

    estimator: str
    k: Union[int, str]
    n: int
    value: float
    c_hat: Optional[float] = None
    ess_ratio: Optional[float] = None
    ridge: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def estimate_record(
    estimator: str, dataset: Dataset, value: float, weights: Optional[ISWeights] = None,
    k: Union[int, str] = "oracle", ridge: Optional[float] = None,
) -> EstimateRecord:
    return EstimateRecord(
        estimator,
        k,
        len(dataset),
        float(value),
        None if weights is None else weights.c_hat,
        None if weights is None else weights.effective_sample_size_ratio(),
        ridge,
    )
