"""History-dependent parametric behavior policies and their maximum likelihood fit.

A policy in the class of history length k scores action a as

    score(a) = sum_{i=0..k} theta_i . phi_i(S_{t-i}, A_{t-i}, a)

and plays softmax(score) mixed with the uniform distribution,
``(1 - mix) * softmax + mix / m``, so every probability is at least ``mix / m``.
Block i only sees lag i, hence zeroing theta_{k'+1..k} gives exactly the
history-length-k' member of the class.

Lags that reach before t = 0 repeat S_0 for the state, use a null action and
have all their features set to zero.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .environments import ContextFreePolicy, Dataset, StateTablePolicy, Trajectory

TabularPolicy = Union[StateTablePolicy, ContextFreePolicy]

DEFAULT_MIX = 1e-3


def _expand_actions(x: np.ndarray, m: int) -> np.ndarray:
    """(..., p) -> (..., m, p*(m-1)); action 0 is the all-zero reference."""
    p = x.shape[-1]
    out = np.zeros(x.shape[:-1] + (m, p * (m - 1)))
    for a in range(1, m):
        out[..., a, (a - 1) * p : a * p] = x
    return out


def _one_hot(idx: np.ndarray, size: int, weight: Optional[np.ndarray] = None) -> np.ndarray:
    out = np.zeros(np.shape(idx) + (size,))
    idx = np.asarray(idx)
    w = 1.0 if weight is None else np.asarray(weight, dtype=float)
    np.put_along_axis(out, np.clip(idx, 0, size - 1)[..., None], np.broadcast_to(w, idx.shape)[..., None], axis=-1)
    return out


class FeatureMap:
    """Block-structured features; subclasses define the lag blocks."""

    num_actions: int

    def block_dim(self, lag: int) -> int:
        raise NotImplementedError

    def block(self, lag: int, states: np.ndarray, lag_actions: Optional[np.ndarray], valid: np.ndarray) -> np.ndarray:
        """Features of lag ``lag`` for every candidate action, shape (..., m, block_dim)."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def dim(self, k: int) -> int:
        return sum(self.block_dim(i) for i in range(k + 1))

    def block_slices(self, k: int) -> list[slice]:
        edges = np.cumsum([0] + [self.block_dim(i) for i in range(k + 1)])
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def design(self, states: np.ndarray, actions: np.ndarray, k: int) -> np.ndarray:
        """Feature tensor (n, T+1, m, dim(k)) for every step of every trajectory."""
        n, T1 = actions.shape
        blocks = [self.block(0, states, None, np.ones((n, T1), dtype=bool))]
        for i in range(1, k + 1):
            j = min(i, T1)
            pad_s = np.repeat(states[:, :1], j, axis=1)
            lag_s = np.concatenate([pad_s, states[:, : T1 - j]], axis=1)
            lag_a = np.concatenate([np.zeros((n, j), dtype=np.int64), actions[:, : T1 - j]], axis=1)
            valid = np.concatenate([np.zeros((n, j), dtype=bool), np.ones((n, T1 - j), dtype=bool)], axis=1)
            blocks.append(self.block(i, lag_s, lag_a, valid))
        return np.concatenate(blocks, axis=-1)


@dataclass(frozen=True)
class TabularLagFeatures(FeatureMap):
    """One-hot current state; one-hot (state, action) cell for each lag."""

    num_states: int
    num_actions: int

    def block_dim(self, lag: int) -> int:
        cells = self.num_states if lag == 0 else self.num_states * self.num_actions
        return cells * (self.num_actions - 1)

    def block(self, lag, states, lag_actions, valid):
        states = np.asarray(states)
        if lag == 0:
            x = _one_hot(states, self.num_states)
        else:
            x = _one_hot(states * self.num_actions + np.asarray(lag_actions), self.num_states * self.num_actions, valid)
        return _expand_actions(x, self.num_actions)

    def to_dict(self) -> dict:
        return {"name": "tabular_lag", "num_states": self.num_states, "num_actions": self.num_actions}


def _monomials(x: np.ndarray, degree: int) -> np.ndarray:
    d = x.shape[-1]
    cols = [np.ones(x.shape[:-1])]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            cols.append(np.prod(x[..., list(combo)], axis=-1))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class PolynomialLagFeatures(FeatureMap):
    """Polynomial basis of the current state; linear state plus action one-hot for lags.

    ``degree=1`` is plain logistic regression on the state.
    """

    state_dim: int
    num_actions: int = 2
    degree: int = 1
    scale: Optional[tuple] = None

    def _scaled(self, states: np.ndarray) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        return s if self.scale is None else s / np.asarray(self.scale)

    def block_dim(self, lag: int) -> int:
        if lag == 0:
            p = math.comb(self.state_dim + self.degree, self.degree)
        else:
            p = self.state_dim + self.num_actions
        return p * (self.num_actions - 1)

    def block(self, lag, states, lag_actions, valid):
        s = self._scaled(states)
        if lag == 0:
            x = _monomials(s, self.degree)
        else:
            x = np.concatenate([s, _one_hot(lag_actions, self.num_actions)], axis=-1)
            x = x * np.asarray(valid, dtype=float)[..., None]
        return _expand_actions(x, self.num_actions)

    def to_dict(self) -> dict:
        return {
            "name": "polynomial_lag",
            "state_dim": self.state_dim,
            "num_actions": self.num_actions,
            "degree": self.degree,
            "scale": None if self.scale is None else list(self.scale),
        }


def sieve_degree(n: int, max_degree: int) -> int:
    """Basis size schedule ceil(n^(1/4)), capped."""
    return max(1, min(max_degree, math.ceil(n ** 0.25)))


def sieve_features(state_dim: int, n: int, max_degree: int = 3, num_actions: int = 2, scale=None) -> PolynomialLagFeatures:
    return PolynomialLagFeatures(state_dim, num_actions, sieve_degree(n, max_degree), scale)


def feature_map_from_dict(d: dict) -> FeatureMap:
    d = dict(d)
    name = d.pop("name")
    if name == "tabular_lag":
        return TabularLagFeatures(**d)
    if name == "polynomial_lag":
        if d.get("scale") is not None:
            d["scale"] = tuple(d["scale"])
        return PolynomialLagFeatures(**d)
    raise ValueError(f"unknown feature map {name!r}")


def default_feature_map(dataset: Dataset) -> FeatureMap:
    if dataset.is_tabular:
        return TabularLagFeatures(dataset.num_states, dataset.num_actions)
    return PolynomialLagFeatures(dataset.states.shape[-1], dataset.num_actions)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HistoryWindow:
    """H_{t-k:t}.  ``lag_states[i-1]`` / ``lag_actions[i-1]`` hold lag i."""

    k: int
    current_state: object
    lag_states: tuple = ()
    lag_actions: tuple = ()
    padded: tuple = ()

    def __post_init__(self) -> None:
        if not (len(self.lag_states) == len(self.lag_actions) == len(self.padded) == self.k):
            raise ValueError("a window of history length k needs k lag states, actions and flags")


def history_windows(trajectory: Trajectory, k: int) -> list[HistoryWindow]:
    s, a = trajectory.states, trajectory.actions
    out = []
    for t in range(len(a)):
        lag_s, lag_a, pad = [], [], []
        for i in range(1, k + 1):
            if t - i >= 0:
                lag_s.append(s[t - i])
                lag_a.append(int(a[t - i]))
                pad.append(False)
            else:
                lag_s.append(s[0])
                lag_a.append(0)
                pad.append(True)
        out.append(HistoryWindow(k, s[t], tuple(lag_s), tuple(lag_a), tuple(pad)))
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ParametricHistoryPolicy:
    features: FeatureMap
    k: int
    theta: np.ndarray
    mix: float = DEFAULT_MIX

    def __post_init__(self) -> None:
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (self.features.dim(self.k),):
            raise ValueError(f"theta must have length {self.features.dim(self.k)}, got {theta.shape}")
        if not 0.0 <= self.mix < 1.0:
            raise ValueError("mix must lie in [0, 1)")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, features: FeatureMap, k: int, mix: float = DEFAULT_MIX) -> "ParametricHistoryPolicy":
        return cls(features, k, np.zeros(features.dim(k)), mix)

    @property
    def num_actions(self) -> int:
        return self.features.num_actions

    @property
    def dim(self) -> int:
        return len(self.theta)

    @property
    def floor_eps(self) -> float:
        return self.mix / self.num_actions

    def with_theta(self, theta: np.ndarray) -> "ParametricHistoryPolicy":
        return replace(self, theta=np.asarray(theta, dtype=float))

    def embed(self, k: int) -> "ParametricHistoryPolicy":
        """Same function as a member of the history-length-k class (k >= self.k)."""
        if k < self.k:
            raise ValueError("can only embed into a longer history")
        theta = np.concatenate([self.theta, np.zeros(self.features.dim(k) - self.dim)])
        return ParametricHistoryPolicy(self.features, k, theta, self.mix)

    def design(self, dataset: Dataset) -> np.ndarray:
        return self.features.design(dataset.states, dataset.actions, self.k)

    def probs_from_design(self, X: np.ndarray) -> np.ndarray:
        p = _softmax(X @ self.theta)
        return (1.0 - self.mix) * p + self.mix / self.num_actions

    def dataset_probs(self, dataset: Dataset, X: Optional[np.ndarray] = None) -> np.ndarray:
        """pi(. | H_{t-k:t}) for every step, shape (n, T+1, m)."""
        return self.probs_from_design(self.design(dataset) if X is None else X)

    def action_probs(self, dataset: Dataset, X: Optional[np.ndarray] = None) -> np.ndarray:
        p = self.dataset_probs(dataset, X)
        return np.take_along_axis(p, dataset.actions[..., None], axis=-1)[..., 0]

    def window_probs(self, window: HistoryWindow) -> np.ndarray:
        if window.k != self.k:
            raise ValueError(f"window has history length {window.k}, policy expects {self.k}")
        blocks = [self.features.block(0, np.asarray(window.current_state), None, np.asarray(True))]
        for i in range(1, self.k + 1):
            blocks.append(
                self.features.block(
                    i,
                    np.asarray(window.lag_states[i - 1]),
                    np.asarray(window.lag_actions[i - 1]),
                    np.asarray(not window.padded[i - 1]),
                )
            )
        return self.probs_from_design(np.concatenate(blocks, axis=-1))

    def log_likelihood(self, dataset: Dataset, X: Optional[np.ndarray] = None) -> float:
        """E_n[sum_t log pi(A_t | H_{t-k:t})] over non-absorbed steps."""
        p = self.action_probs(dataset, X)
        return float(np.sum(np.log(p) * ~dataset.absorbed) / len(dataset))

    def to_dict(self) -> dict:
        return {"k": self.k, "features": self.features.to_dict(), "theta": self.theta.tolist(), "mix": self.mix}

    @classmethod
    def from_dict(cls, d: dict) -> "ParametricHistoryPolicy":
        return cls(feature_map_from_dict(d["features"]), int(d["k"]), np.asarray(d["theta"]), float(d["mix"]))


# ---------------------------------------------------------------------------
# likelihood machinery shared by the fit, scores and Fisher information


class _Flat:
    """Valid steps of a dataset flattened to rows, with their trajectory index.

    With ``compress=True`` identical (features, action) rows are merged and
    carried as integer weights; the likelihood and its derivatives only depend
    on those counts.
    """

    def __init__(self, dataset: Dataset, X: np.ndarray, compress: bool = False):
        keep = ~dataset.absorbed
        self.X = X[keep]  # (N, m, d)
        self.a = dataset.actions[keep]
        self.traj = np.broadcast_to(np.arange(len(dataset))[:, None], keep.shape)[keep]
        self.n = len(dataset)
        self.w = np.ones(len(self.a))
        if compress and len(self.a):
            flat = self.X.reshape(len(self.a), -1)
            # a random projection separates distinct rows with probability one
            proj = np.random.default_rng(12345).uniform(1.0, 2.0, flat.shape[1])
            keys = flat @ proj + self.a * (np.pi * (1.0 + np.abs(proj).sum()))
            _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
            self.X, self.a = self.X[first], self.a[first]
            self.w = np.bincount(inverse.ravel(), minlength=len(first)).astype(float)
            self.traj = None


def _pieces(policy: ParametricHistoryPolicy, flat: _Flat):
    X = flat.X
    m = policy.num_actions
    p = _softmax(X @ policy.theta)
    pi = (1.0 - policy.mix) * p + policy.mix / m
    rows = np.arange(len(flat.a))
    pa, pia = p[rows, flat.a], pi[rows, flat.a]
    mean_x = np.einsum("nm,nmd->nd", p, X, optimize=True)
    d_obs = X[rows, flat.a] - mean_x
    r = (1.0 - policy.mix) * pa / pia
    return p, pia, mean_x, d_obs, r


def _loglik(policy: ParametricHistoryPolicy, flat: _Flat) -> float:
    p = _softmax(flat.X @ policy.theta)
    pia = (1.0 - policy.mix) * p[np.arange(len(flat.a)), flat.a] + policy.mix / policy.num_actions
    return float(flat.w @ np.log(pia))


def _grad_hess(policy: ParametricHistoryPolicy, flat: _Flat):
    p, _, mean_x, d_obs, r = _pieces(policy, flat)
    grad = (flat.w * r) @ d_obs
    centered = flat.X - mean_x[:, None, :]
    z = centered * np.sqrt(flat.w[:, None, None] * r[:, None, None] * p[..., None])
    z = z.reshape(-1, z.shape[-1])
    fisher_part = z.T @ z
    w = np.sqrt(flat.w * np.clip(r * (1.0 - r), 0.0, None))
    y = d_obs * w[:, None]
    hess = y.T @ y - fisher_part
    return grad, hess, fisher_part


@dataclass(frozen=True)
class FitReport:
    theta_hat: np.ndarray
    log_likelihood: float
    gradient_norm_at_solution: float
    iterations: int
    converged: bool
    tolerance: float = 1e-8
    steps: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "theta_hat": np.asarray(self.theta_hat).tolist(),
            "log_likelihood": self.log_likelihood,
            "gradient_norm_at_solution": self.gradient_norm_at_solution,
            "iterations": self.iterations,
            "converged": self.converged,
            "tolerance": self.tolerance,
            "steps": dict(self.steps),
        }


def _newton_direction(grad: np.ndarray, hess: np.ndarray, fisher_part: np.ndarray):
    try:
        c = np.linalg.cholesky(-hess)
        return np.linalg.solve(c.T, np.linalg.solve(c, grad)), "newton"
    except np.linalg.LinAlgError:
        pass
    try:
        reg = fisher_part + 1e-10 * max(1.0, np.trace(fisher_part)) * np.eye(len(grad))
        c = np.linalg.cholesky(reg)
        return np.linalg.solve(c.T, np.linalg.solve(c, grad)), "scoring"
    except np.linalg.LinAlgError:
        return None, "gradient"


def fit_mle(
    dataset: Dataset,
    template: ParametricHistoryPolicy,
    k: Optional[int] = None,
    tol: float = 1e-8,
    max_iter: int = 500,
    X: Optional[np.ndarray] = None,
) -> tuple[ParametricHistoryPolicy, FitReport]:
    """Maximize E_n[sum_t log pi(A_t | H_{t-k:t})] by damped Newton.

    Steps are halved until the likelihood does not decrease.  When the Hessian
    is not negative definite the Fisher-scoring part is used instead, and when
    that is singular too a gradient step is taken.
    """
    if len(dataset) == 0:
        raise ValueError("cannot fit on an empty dataset")
    if dataset.num_actions != template.num_actions:
        raise ValueError("template and dataset disagree on the number of actions")
    if k is not None and k != template.k:
        if k > template.k:
            template = template.embed(k)
        else:
            template = ParametricHistoryPolicy(template.features, k, template.theta[: template.features.dim(k)], template.mix)
    policy = template
    if X is None:
        X = policy.design(dataset)
    elif X.shape[-1] != policy.dim:
        raise ValueError("design dimension does not match the policy class")
    flat = _Flat(dataset, X, compress=True)
    n = len(dataset)
    steps = {"newton": 0, "scoring": 0, "gradient": 0}
    if policy.num_actions == 1 or policy.dim == 0 or len(flat.a) == 0:
        report = FitReport(policy.theta.copy(), 0.0, 0.0, 0, True, tol, steps)
        return policy, report

    ll = _loglik(policy, flat)
    gnorm = math.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad, hess, fisher_part = _grad_hess(policy, flat)
        gnorm = float(np.linalg.norm(grad) / n)
        if gnorm <= tol:
            converged = True
            it -= 1
            break
        direction, kind = _newton_direction(grad, hess, fisher_part)
        if direction is None:
            direction = grad / max(1.0, np.linalg.norm(grad))
        improved = False
        for candidate, name in ((direction, kind), (grad / max(1.0, np.linalg.norm(grad)), "gradient")):
            step = 1.0
            while step > 1e-12:
                trial = policy.with_theta(policy.theta + step * candidate)
                ll_trial = _loglik(trial, flat)
                if ll_trial >= ll - 1e-12 * abs(ll):
                    improved = True
                    break
                step *= 0.5
            if improved:
                steps[name] += 1
                break
        if not improved:
            break
        policy, ll = trial, ll_trial
    else:
        grad, _, _ = _grad_hess(policy, flat)
        gnorm = float(np.linalg.norm(grad) / n)
        converged = gnorm <= tol
    report = FitReport(policy.theta.copy(), ll / n, gnorm, it, converged, tol, steps)
    return policy, report


def fit_tabular(dataset: Dataset, context_dependent: bool) -> TabularPolicy:
    """Sample-frequency estimate n(s,a)/n(s), or n(a)/n when context is ignored."""
    if not dataset.is_tabular:
        raise ValueError("fit_tabular needs a finite state space")
    keep = ~dataset.absorbed
    s, a = dataset.states[keep], dataset.actions[keep]
    m = dataset.num_actions
    if not context_dependent:
        counts = np.bincount(a, minlength=m).astype(float)
        return ContextFreePolicy(counts / counts.sum())
    counts = np.zeros((dataset.num_states, m))
    np.add.at(counts, (s, a), 1.0)
    totals = counts.sum(axis=1)
    missing = np.flatnonzero(totals == 0)
    if len(missing):
        raise ValueError(f"states never visited, estimate undefined there: {missing.tolist()}")
    return StateTablePolicy(counts / totals[:, None])


def trajectory_scores(policy: ParametricHistoryPolicy, dataset: Dataset, X: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-trajectory score d/dtheta sum_t log pi_theta(A_t | H_{t-k:t}), shape (n, d)."""
    if X is None:
        X = policy.design(dataset)
    flat = _Flat(dataset, X)
    out = np.zeros((len(dataset), policy.dim))
    if policy.num_actions == 1 or policy.dim == 0 or len(flat.a) == 0:
        return out
    _, _, _, d_obs, r = _pieces(policy, flat)
    np.add.at(out, flat.traj, r[:, None] * d_obs)
    return out


def score_vector(policy: ParametricHistoryPolicy, trajectory: Trajectory) -> np.ndarray:
    states = np.asarray(trajectory.states)[None]
    actions = np.asarray(trajectory.actions, dtype=np.int64)[None]
    absorbed = np.zeros_like(actions, dtype=bool) if trajectory.absorbed is None else np.asarray(trajectory.absorbed)[None]
    ds = Dataset(states.copy(), actions.copy(), np.asarray(trajectory.rewards, dtype=float)[None].copy(),
                 absorbed.copy(), policy.num_actions)
    return trajectory_scores(policy, ds)[0]


@dataclass(frozen=True)
class FisherInformation:
    matrix: np.ndarray
    min_eigenvalue: float
    ridge: float

    @property
    def regularized(self) -> np.ndarray:
        return self.matrix + self.ridge * np.eye(len(self.matrix))


def fisher_information(
    policy: ParametricHistoryPolicy,
    dataset: Dataset,
    ridge_threshold: float = 1e-10,
    ridge: float = 1e-8,
    scores: Optional[np.ndarray] = None,
) -> FisherInformation:
    """Empirical second moment E_n[s s^T] of per-trajectory scores."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    s = trajectory_scores(policy, dataset) if scores is None else scores
    info = s.T @ s / len(s)
    info = 0.5 * (info + info.T)
    min_eig = float(np.linalg.eigvalsh(info)[0]) if info.size else 0.0
    used = ridge if min_eig < ridge_threshold else 0.0
    return FisherInformation(info, min_eig, used)


# ---------------------------------------------------------------------------
# serialization


def save_policy(policy: ParametricHistoryPolicy, path: Union[str, Path], report: Optional[FitReport] = None) -> None:
    payload = policy.to_dict()
    payload["fit"] = None if report is None else report.to_dict()
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_policy(path: Union[str, Path]) -> ParametricHistoryPolicy:
    return ParametricHistoryPolicy.from_dict(json.loads(Path(path).read_text()))


def fit_history_policies(
    dataset: Dataset, features: FeatureMap, ks: Sequence[int], mix: float = DEFAULT_MIX, **fit_kw
) -> dict[int, tuple[ParametricHistoryPolicy, FitReport]]:
    """Fit the nested classes for every k, sharing one design tensor."""
    kmax = max(ks)
    X_full = features.design(dataset.states, dataset.actions, kmax)
    out = {}
    warm = None
    for k in sorted(ks):
        d = features.dim(k)
        template = ParametricHistoryPolicy.zeros(features, k, mix) if warm is None else warm.embed(k)
        out[k] = fit_mle(dataset, template, X=X_full[..., :d], **fit_kw)
        warm = out[k][0]
    return out
