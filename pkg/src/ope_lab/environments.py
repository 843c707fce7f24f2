"""Data-generating processes: contextual bandit, tabular MDP and CartPole.

All samplers are vectorized across trajectories.  A root seed is expanded into
one Philox substream per block of trajectories, so a block can be regenerated
on its own and parallel generation does not depend on completion order.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Protocol, Union

import numpy as np

BLOCK_SIZE = 1024
_NORM_TOL = 1e-12


class MarkovPolicy(Protocol):
    """Anything that maps an array of states to action probabilities."""

    num_actions: int

    def probs(self, states: np.ndarray) -> np.ndarray:
        ...


def _check_prob_vector(p: np.ndarray, name: str) -> None:
    if np.any(p <= 0):
        raise ValueError(f"{name} must have strictly positive entries, got {p}")
    if abs(p.sum() - 1.0) > _NORM_TOL:
        raise ValueError(f"{name} must sum to 1, got sum {p.sum()!r}")


def _check_rows(p: np.ndarray, name: str) -> None:
    if np.any(p < 0):
        raise ValueError(f"{name} has negative entries")
    err = np.abs(p.sum(axis=-1) - 1.0)
    if np.any(err > _NORM_TOL):
        raise ValueError(f"{name} rows must sum to 1 (max error {err.max():.3g})")


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Counter-based substream for trajectories ``[block*B, (block+1)*B)``."""
    ss = np.random.SeedSequence(seed, spawn_key=(block,))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed, used for replications and sweep cells."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[..., None] >= cdf[..., :-1]).sum(axis=-1)
    return idx.astype(np.int64)


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class BanditSpec:
    """Contextual bandit with context-independent behavior and target policies.

    ``reward_mean[s, a]`` is the mean reward of action ``a`` under context ``s``.
    """

    context_probs: np.ndarray
    reward_mean: np.ndarray
    behavior_probs: np.ndarray
    target_probs: np.ndarray
    reward_noise_sd: float = 1.0

    def __post_init__(self) -> None:
        for name in ("context_probs", "reward_mean", "behavior_probs", "target_probs"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        _check_prob_vector(self.context_probs, "context_probs")
        _check_prob_vector(self.behavior_probs, "behavior_probs")
        _check_prob_vector(self.target_probs, "target_probs")
        if self.reward_mean.shape != (self.num_contexts, self.num_actions):
            raise ValueError(
                f"reward_mean must have shape {(self.num_contexts, self.num_actions)}, "
                f"got {self.reward_mean.shape}"
            )
        if len(self.target_probs) != self.num_actions:
            raise ValueError("behavior_probs and target_probs differ in length")
        if self.reward_noise_sd < 0:
            raise ValueError("reward_noise_sd must be >= 0")

    @property
    def num_contexts(self) -> int:
        return len(self.context_probs)

    @property
    def num_actions(self) -> int:
        return len(self.behavior_probs)

    @property
    def horizon(self) -> int:
        return 0

    @property
    def behavior(self) -> "ContextFreePolicy":
        return ContextFreePolicy(self.behavior_probs)

    @property
    def target(self) -> "ContextFreePolicy":
        return ContextFreePolicy(self.target_probs)

    def true_value(self) -> float:
        return float(self.context_probs @ self.reward_mean @ self.target_probs)

    def to_dict(self) -> dict:
        return {"kind": "bandit", **{k: np.asarray(v).tolist() for k, v in asdict(self).items()}}


def default_bandit(reward_noise_sd: float = 1.0) -> BanditSpec:
    """Two contexts, two actions, r(s, a) = 10a + 0.1(1 + 2s); true value 4.2."""
    s = np.arange(2)[:, None]
    a = np.arange(2)[None, :]
    return BanditSpec(
        context_probs=np.array([0.5, 0.5]),
        reward_mean=10.0 * a + 0.1 * (1 + 2 * s),
        behavior_probs=np.array([0.7, 0.3]),
        target_probs=np.array([0.6, 0.4]),
        reward_noise_sd=reward_noise_sd,
    )


@dataclass(frozen=True)
class TabularMDPSpec:
    """Finite-horizon MDP with ``horizon + 1`` decision steps t = 0..T."""

    transition: np.ndarray  # (S, A, S)
    reward_mean: np.ndarray  # (S, A)
    initial_dist: np.ndarray  # (S,)
    horizon: int
    discount: float = 1.0
    reward_noise_sd: float = 0.0

    def __post_init__(self) -> None:
        for name in ("transition", "reward_mean", "initial_dist"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        S, A = self.reward_mean.shape
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition must have shape {(S, A, S)}, got {self.transition.shape}")
        if self.initial_dist.shape != (S,):
            raise ValueError("initial_dist length must equal num_states")
        _check_rows(self.transition, "transition")
        _check_rows(self.initial_dist, "initial_dist")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.reward_noise_sd < 0:
            raise ValueError("reward_noise_sd must be >= 0")

    @property
    def num_states(self) -> int:
        return self.reward_mean.shape[0]

    @property
    def num_actions(self) -> int:
        return self.reward_mean.shape[1]

    def to_dict(self) -> dict:
        d = {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        return {"kind": "tabular", **d}


@dataclass(frozen=True)
class CartPoleSpec:
    """Euler-integrated cart-pole with binary push actions (1 pushes toward +x)."""

    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force_mag: float = 10.0
    dt: float = 0.02
    x_max: float = 2.4
    theta_max: float = 12 * 2 * math.pi / 360
    horizon: int = 199
    init_range: float = 0.05
    behavior_logit_scale: float = 10.0
    target_logit_scale: float = 20.0

    def __post_init__(self) -> None:
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.x_max <= 0 or self.theta_max <= 0:
            raise ValueError("x_max and theta_max must be positive")

    num_actions = 2

    @property
    def behavior(self) -> "LogisticAnglePolicy":
        return LogisticAnglePolicy(self.behavior_logit_scale)

    @property
    def target(self) -> "LogisticAnglePolicy":
        return LogisticAnglePolicy(self.target_logit_scale)

    def reward(self, states: np.ndarray) -> np.ndarray:
        x, theta = states[..., 0], states[..., 2]
        return (2.0 - x / self.x_max) * (2.0 - theta / self.theta_max) - 1.0

    def failed(self, states: np.ndarray) -> np.ndarray:
        return (np.abs(states[..., 0]) > self.x_max) | (np.abs(states[..., 2]) > self.theta_max)

    def step(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x, x_dot, theta, theta_dot = np.moveaxis(states, -1, 0)
        force = np.where(actions == 1, self.force_mag, -self.force_mag)
        cos, sin = np.cos(theta), np.sin(theta)
        total_mass = self.cart_mass + self.pole_mass
        pm_len = self.pole_mass * self.half_length
        tmp = (force + pm_len * theta_dot**2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * tmp) / (
            self.half_length * (4.0 / 3.0 - self.pole_mass * cos**2 / total_mass)
        )
        x_acc = tmp - pm_len * theta_acc * cos / total_mass
        return np.stack(
            [
                x + self.dt * x_dot,
                x_dot + self.dt * x_acc,
                theta + self.dt * theta_dot,
                theta_dot + self.dt * theta_acc,
            ],
            axis=-1,
        )

    @property
    def reward_bound(self) -> float:
        # |x| <= x_max and |theta| <= theta_max on every rewarded state
        return 8.0

    def to_dict(self) -> dict:
        return {"kind": "cartpole", **asdict(self)}


Spec = Union[BanditSpec, TabularMDPSpec, CartPoleSpec]


# ---------------------------------------------------------------------------
# simple Markov policies


@dataclass(frozen=True)
class ContextFreePolicy:
    """Same action distribution in every state."""

    action_probs: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "action_probs", np.asarray(self.action_probs, dtype=float))
        _check_rows(self.action_probs, "action_probs")

    @property
    def num_actions(self) -> int:
        return len(self.action_probs)

    def probs(self, states: np.ndarray) -> np.ndarray:
        shape = np.shape(states)
        if shape and isinstance(states, np.ndarray) and states.dtype.kind == "f" and states.ndim >= 2:
            shape = shape[:-1]
        return np.broadcast_to(self.action_probs, tuple(shape) + (self.num_actions,))


@dataclass(frozen=True)
class StateTablePolicy:
    """pi(a|s) given as an (S, A) table over integer states."""

    table: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "table", np.asarray(self.table, dtype=float))
        _check_rows(self.table, "policy table")

    @property
    def num_actions(self) -> int:
        return self.table.shape[1]

    def probs(self, states: np.ndarray) -> np.ndarray:
        return self.table[np.asarray(states, dtype=np.int64)]


@dataclass(frozen=True)
class LogisticAnglePolicy:
    """P(A = 1 | s) = 1 / (1 + exp(scale * theta)) on CartPole states."""

    scale: float
    num_actions: int = 2

    def probs(self, states: np.ndarray) -> np.ndarray:
        p1 = 1.0 / (1.0 + np.exp(np.clip(self.scale * states[..., 2], -700, 700)))
        return np.stack([1.0 - p1, p1], axis=-1)


def check_policy_output(p: np.ndarray) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("policy returned probabilities that are negative or do not sum to 1")


# ---------------------------------------------------------------------------
# trajectories and datasets


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    absorbed: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise ValueError("states, actions and rewards must have equal length")

    @property
    def horizon(self) -> int:
        return len(self.rewards) - 1

    def discounted_return(self, gamma: float = 1.0) -> float:
        return float(np.sum(gamma ** np.arange(len(self.rewards)) * self.rewards))


@dataclass(frozen=True)
class Dataset:
    """n trajectories of common length T+1, stored as stacked arrays.

    ``states`` is (n, T+1) of ints for finite state spaces or (n, T+1, d) of
    floats.  ``absorbed[i, t]`` marks padding after early termination; those
    steps carry zero reward, identical behavior/target action choice and are
    left out of policy likelihoods.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    absorbed: np.ndarray
    num_actions: int
    num_states: Optional[int] = None
    reward_bound: float = math.inf
    seed_record: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n, T1 = self.actions.shape
        if self.rewards.shape != (n, T1) or self.states.shape[:2] != (n, T1):
            raise ValueError("states, actions and rewards must share shape (n, T+1)")
        if self.absorbed.shape != (n, T1):
            raise ValueError("absorbed mask has the wrong shape")
        for arr in (self.states, self.actions, self.rewards, self.absorbed):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1] - 1

    @property
    def is_tabular(self) -> bool:
        return self.num_states is not None

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.actions[i], self.rewards[i], self.absorbed[i])

    def __iter__(self) -> Iterator[Trajectory]:
        return (self.trajectory(i) for i in range(len(self)))

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.states[idx].copy(),
            self.actions[idx].copy(),
            self.rewards[idx].copy(),
            self.absorbed[idx].copy(),
            self.num_actions,
            self.num_states,
            self.reward_bound,
            {**self.seed_record, "subset": True},
        )

    def returns(self, gamma: float = 1.0) -> np.ndarray:
        return self.rewards @ (gamma ** np.arange(self.horizon + 1))

    def max_abs_reward(self) -> float:
        return float(np.max(np.abs(self.rewards))) if self.rewards.size else 0.0

    # -- serialization -----------------------------------------------------

    def to_csv(self, path: Union[str, Path], spec: Optional[Spec] = None) -> None:
        """One row per timestep plus a ``.meta.json`` sidecar."""
        path = Path(path)
        n, T1 = self.actions.shape
        traj_id = np.repeat(np.arange(n), T1)
        t = np.tile(np.arange(T1), n)
        st = self.states.reshape(n * T1, -1)
        state_cols = ["state"] if st.shape[1] == 1 else [f"state_{j}" for j in range(st.shape[1])]
        header = ["traj_id", "t", *state_cols, "action", "reward", "absorbed"]
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for i in range(n * T1):
                sv = ",".join(repr(v.item()) for v in st[i])
                fh.write(
                    f"{traj_id[i]},{t[i]},{sv},{self.actions.flat[i]},"
                    f"{float(self.rewards.flat[i])!r},{int(self.absorbed.flat[i])}\n"
                )
        meta = {
            "n": n,
            "horizon": self.horizon,
            "num_actions": self.num_actions,
            "num_states": self.num_states,
            "state_dim": None if self.states.ndim == 2 else self.states.shape[2],
            "reward_bound": self.reward_bound if math.isfinite(self.reward_bound) else None,
            "seed_record": self.seed_record,
            "spec": spec.to_dict() if spec is not None else None,
        }
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Dataset":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".meta.json").read_text())
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n, T1 = meta["n"], meta["horizon"] + 1
        if raw.shape[0] != n * T1:
            raise ValueError(f"{path}: expected {n * T1} rows, found {raw.shape[0]}")
        raw = raw[np.lexsort((raw[:, 1], raw[:, 0]))]
        states = raw[:, 2:-3]
        if meta["state_dim"] is None:
            states = states[:, 0].astype(np.int64).reshape(n, T1)
        else:
            states = states.reshape(n, T1, meta["state_dim"])
        bound = meta["reward_bound"]
        return cls(
            states,
            raw[:, -3].astype(np.int64).reshape(n, T1),
            raw[:, -2].reshape(n, T1),
            raw[:, -1].astype(bool).reshape(n, T1),
            meta["num_actions"],
            meta["num_states"],
            math.inf if bound is None else bound,
            meta["seed_record"],
        )


# ---------------------------------------------------------------------------
# sampling


def _n_blocks(n: int) -> int:
    return (n + BLOCK_SIZE - 1) // BLOCK_SIZE


def sample_bandit_dataset(spec: BanditSpec, n: int, seed: int) -> Dataset:
    """n context-action-reward triplets as horizon-0 trajectories."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ctx, act, rew = [], [], []
    for b in range(_n_blocks(n)):
        m = min(BLOCK_SIZE, n - b * BLOCK_SIZE)
        rng = block_rng(seed, b)
        u = rng.random((m, 2))
        z = rng.standard_normal(m)
        s = _sample_categorical(spec.context_probs, u[:, 0])
        a = _sample_categorical(spec.behavior_probs, u[:, 1])
        ctx.append(s)
        act.append(a)
        rew.append(spec.reward_mean[s, a] + spec.reward_noise_sd * z)
    s, a, r = (np.concatenate(x)[:, None] for x in (ctx, act, rew))
    return Dataset(
        s, a, r, np.zeros_like(a, dtype=bool), spec.num_actions, spec.num_contexts,
        seed_record={"seed": int(seed), "block_size": BLOCK_SIZE},
    )


def _tabular_block(spec: TabularMDPSpec, policy: MarkovPolicy, m: int, rng: np.random.Generator):
    T1 = spec.horizon + 1
    u = rng.random((m, T1, 2))
    z = rng.standard_normal((m, T1))
    s0 = rng.random(m)
    states = np.empty((m, T1), dtype=np.int64)
    actions = np.empty((m, T1), dtype=np.int64)
    states[:, 0] = _sample_categorical(spec.initial_dist, s0)
    for t in range(T1):
        p = np.asarray(policy.probs(states[:, t]))
        if t == 0:
            check_policy_output(p)
        actions[:, t] = _sample_categorical(p, u[:, t, 0])
        if t + 1 < T1:
            states[:, t + 1] = _sample_categorical(spec.transition[states[:, t], actions[:, t]], u[:, t, 1])
    rewards = spec.reward_mean[states, actions] + spec.reward_noise_sd * z
    return states, actions, rewards, np.zeros((m, T1), dtype=bool)


def _cartpole_block(spec: CartPoleSpec, policy: MarkovPolicy, m: int, rng: np.random.Generator):
    T1 = spec.horizon + 1
    u = rng.random((m, T1))
    s = rng.uniform(-spec.init_range, spec.init_range, (m, 4)) if spec.init_range > 0 else np.zeros((m, 4))
    states = np.empty((m, T1, 4))
    actions = np.zeros((m, T1), dtype=np.int64)
    rewards = np.zeros((m, T1))
    absorbed = np.zeros((m, T1), dtype=bool)
    done = np.zeros(m, dtype=bool)
    for t in range(T1):
        states[:, t] = s
        absorbed[:, t] = done
        p = np.asarray(policy.probs(s))
        if t == 0:
            check_policy_output(p)
        a = np.where(done, 0, _sample_categorical(p, u[:, t]))
        actions[:, t] = a
        rewards[:, t] = np.where(done, 0.0, spec.reward(s))
        nxt = spec.step(s, a)
        s = np.where(done[:, None], s, nxt)
        done = done | spec.failed(s)
    return states, actions, rewards, absorbed


def sample_trajectories(
    spec: Union[TabularMDPSpec, CartPoleSpec], behavior: MarkovPolicy, n: int, seed: int
) -> Dataset:
    """n i.i.d. trajectories of length T+1 generated under ``behavior``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if behavior.num_actions != spec.num_actions:
        raise ValueError("behavior policy and spec disagree on the number of actions")
    block = _tabular_block if isinstance(spec, TabularMDPSpec) else _cartpole_block
    parts = [block(spec, behavior, min(BLOCK_SIZE, n - b * BLOCK_SIZE), block_rng(seed, b)) for b in range(_n_blocks(n))]
    states, actions, rewards, absorbed = (np.concatenate(x) for x in zip(*parts))
    if isinstance(spec, TabularMDPSpec):
        num_states = spec.num_states
        bound = float(np.max(np.abs(spec.reward_mean))) + (math.inf if spec.reward_noise_sd > 0 else 0.0)
    else:
        num_states, bound = None, spec.reward_bound
    return Dataset(
        states, actions, rewards, absorbed, spec.num_actions, num_states, bound,
        {"seed": int(seed), "block_size": BLOCK_SIZE},
    )


def sample(spec: Spec, behavior: Optional[MarkovPolicy], n: int, seed: int) -> Dataset:
    if isinstance(spec, BanditSpec):
        if behavior is not None and not isinstance(behavior, ContextFreePolicy):
            raise ValueError("bandit behavior must be context free")
        if behavior is not None and not np.allclose(behavior.action_probs, spec.behavior_probs):
            spec = BanditSpec(spec.context_probs, spec.reward_mean, behavior.action_probs,
                              spec.target_probs, spec.reward_noise_sd)
        return sample_bandit_dataset(spec, n, seed)
    return sample_trajectories(spec, behavior, n, seed)


# ---------------------------------------------------------------------------
# ground truth


class MonteCarloValue(NamedTuple):
    value: float
    se: float
    episodes: int


def monte_carlo_value(
    spec: Spec, target: Optional[MarkovPolicy], episodes: int, discount: float = 1.0, seed: int = 0
) -> MonteCarloValue:
    """Mean discounted return of ``episodes`` on-policy runs, with its standard error."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if isinstance(spec, BanditSpec):
        pi = target if target is not None else spec.target
        data = sample(spec, pi, episodes, seed)
    else:
        if target is None:
            target = spec.target
        data = sample_trajectories(spec, target, episodes, seed)
    g = data.returns(discount)
    se = float(g.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return MonteCarloValue(float(g.mean()), se, episodes)


def q_function(spec: TabularMDPSpec, target: MarkovPolicy, discount: Optional[float] = None) -> np.ndarray:
    """Exact Q_t(s, a) for t = 0..T by backward induction, shape (T+1, S, A)."""
    gamma = spec.discount if discount is None else discount
    pi = np.asarray(target.probs(np.arange(spec.num_states)))
    T1 = spec.horizon + 1
    q = np.zeros((T1, spec.num_states, spec.num_actions))
    v_next = np.zeros(spec.num_states)
    for t in reversed(range(T1)):
        q[t] = spec.reward_mean + gamma * spec.transition @ v_next
        v_next = (q[t] * pi).sum(axis=1)
    return q


def exact_value(spec: TabularMDPSpec, target: MarkovPolicy, discount: Optional[float] = None) -> float:
    q0 = q_function(spec, target, discount)[0]
    pi = np.asarray(target.probs(np.arange(spec.num_states)))
    return float(spec.initial_dist @ (q0 * pi).sum(axis=1))


def state_action_marginals(spec: TabularMDPSpec, policy: MarkovPolicy) -> np.ndarray:
    """d_t(s, a) under ``policy`` for t = 0..T, shape (T+1, S, A)."""
    pi = np.asarray(policy.probs(np.arange(spec.num_states)))
    T1 = spec.horizon + 1
    d = np.empty((T1, spec.num_states, spec.num_actions))
    ds = spec.initial_dist
    for t in range(T1):
        d[t] = ds[:, None] * pi
        ds = np.einsum("sa,sap->p", d[t], spec.transition)
    return d


def marginal_ratios(spec: TabularMDPSpec, behavior: MarkovPolicy, target: MarkovPolicy) -> np.ndarray:
    """True marginal ratios d_e,t(s,a) / d_b,t(s,a); zero where d_b vanishes."""
    de = state_action_marginals(spec, target)
    db = state_action_marginals(spec, behavior)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(db > 0, de / db, 0.0)


# ---------------------------------------------------------------------------
# reference problem


def reference_mdp(horizon: int = 10, reward_noise_sd: float = 1.0) -> tuple[TabularMDPSpec, StateTablePolicy, StateTablePolicy]:
    """Four-state, two-action MDP used throughout the experiments.

    Returns ``(spec, behavior, target)``.  Every state is reachable at every
    step under both policies, so tabular features stay full rank.
    """
    transition = np.array(
        [
            [[0.50, 0.20, 0.20, 0.10], [0.10, 0.20, 0.30, 0.40]],
            [[0.30, 0.40, 0.20, 0.10], [0.10, 0.10, 0.40, 0.40]],
            [[0.40, 0.20, 0.30, 0.10], [0.20, 0.20, 0.20, 0.40]],
            [[0.60, 0.20, 0.10, 0.10], [0.10, 0.30, 0.30, 0.30]],
        ]
    )
    reward_mean = np.array([[0.0, 2.0], [0.5, 2.5], [1.0, 3.0], [1.5, 3.5]])
    spec = TabularMDPSpec(
        transition=transition,
        reward_mean=reward_mean,
        initial_dist=np.array([0.4, 0.3, 0.2, 0.1]),
        horizon=horizon,
        discount=1.0,
        reward_noise_sd=reward_noise_sd,
    )
    behavior = StateTablePolicy(np.array([[0.6, 0.4], [0.5, 0.5], [0.45, 0.55], [0.5, 0.5]]))
    target = StateTablePolicy(np.array([[0.5, 0.5], [0.4, 0.6], [0.5, 0.5], [0.4, 0.6]]))
    return spec, behavior, target
