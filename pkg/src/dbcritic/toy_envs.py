"""Desk-scale tasks with known return laws.

Two families: the iterated Bellman drift of a Gaussian mixture, whose
k-th iterate is an exact affine image of the start, and small tabular MDPs
whose return distributions are enumerated exactly or estimated with many
Monte Carlo rollouts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .dbc_critic import Transition
from .quantile_core import ParticleSet, order_index

TRUNCATION_TOL = 1e-6
PRUNE_PROB = 1e-12


class HorizonError(ValueError):
    """The requested horizon cannot meet the truncation tolerance."""


# --- Gaussian mixtures and the drift task -----------------------------------


@dataclass(frozen=True)
class GaussianMixture:
    weights: tuple
    means: tuple
    stds: tuple

    def __post_init__(self):
        w, m, sd = (tuple(float(v) for v in x) for x in (self.weights, self.means, self.stds))
        if not (len(w) == len(m) == len(sd) >= 1):
            raise ValueError("mixture needs matching, non-empty weight/mean/std lists")
        if min(w) <= 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if min(sd) < 0:
            raise ValueError("mixture stds must be non-negative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", sd)

    def sample(self, n: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return np.asarray(self.means)[comp] + np.asarray(self.stds)[comp] * rng.standard_normal(n)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for w, m, sd in zip(self.weights, self.means, self.stds):
            if sd == 0:
                out = out + w * (x >= m)
            else:
                out = out + w * ndtr((x - m) / sd)
        return out

    def mass(self, lo, hi) -> float:
        return float(self.cdf(hi) - self.cdf(lo))

    def quantile(self, tau, iters: int = 80) -> np.ndarray:
        """Inverse CDF by vectorized bisection."""
        tau = np.asarray(tau, dtype=float)
        spread = max(self.stds) * 12 + 1e-9
        lo = np.full(tau.shape, min(self.means) - spread)
        hi = np.full(tau.shape, max(self.means) + spread)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < tau
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return hi

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "means": list(self.means), "stds": list(self.stds)}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(d["weights"], d["means"], d["stds"])


def _default_mixture() -> GaussianMixture:
    return GaussianMixture((0.5, 0.5), (-2.0, 2.0), (0.3, 0.3))


@dataclass(frozen=True)
class DriftTask:
    """Iterated target ``Z_k = r + gamma * Z_{k-1}`` starting from a mixture."""

    mixture: GaussianMixture = field(default_factory=_default_mixture)
    r: float = 1.0
    gamma: float = 0.9
    iterations: int = 5
    inner_steps: int = 100
    initial_steps: int = 10_000

    def __post_init__(self):
        if isinstance(self.mixture, dict):
            object.__setattr__(self, "mixture", GaussianMixture.from_dict(self.mixture))
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.iterations < 0 or self.inner_steps < 1 or self.initial_steps < 1:
            raise ValueError("iteration and step counts must be positive")

    def to_dict(self) -> dict:
        return {
            "mixture": self.mixture.to_dict(),
            "r": self.r,
            "gamma": self.gamma,
            "iterations": self.iterations,
            "inner_steps": self.inner_steps,
            "initial_steps": self.initial_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DriftTask":
        return cls(**d)


def drift_true_distribution(task: DriftTask, k: int) -> GaussianMixture:
    """Exact law of the k-th drift iterate."""
    if not 0 <= k <= task.iterations:
        raise ValueError(f"iteration {k} outside [0, {task.iterations}]")
    g = task.gamma**k
    shift = task.r * k if task.gamma == 1.0 else task.r * (1.0 - g) / (1.0 - task.gamma)
    mix = task.mixture
    return GaussianMixture(mix.weights, [shift + g * m for m in mix.means], [g * s for s in mix.stds])


def drift_sample_target(samples, r: float, gamma: float) -> ParticleSet:
    src = samples if isinstance(samples, ParticleSet) else ParticleSet(samples)
    return ParticleSet(r + gamma * src.atoms, sorted=src.sorted and gamma >= 0)


def bimodality_gap(samples, mode_lo: float, mode_hi: float, width: float) -> float:
    """Mass within ``width/2`` of either mode minus the mass in an equal
    window at the midpoint.  Ranges from -1 (all mass at the midpoint) to +1.
    """
    if not mode_lo < mode_hi:
        raise ValueError("need mode_lo < mode_hi")
    if width <= 0:
        raise ValueError("width must be positive")
    x = np.asarray(samples.atoms if isinstance(samples, ParticleSet) else samples, dtype=float)
    if x.size == 0:
        raise ValueError("need at least one sample")
    half = 0.5 * width
    mid = 0.5 * (mode_lo + mode_hi)

    def frac(c):
        return float(np.mean(np.abs(x - c) <= half))

    return frac(mode_lo) + frac(mode_hi) - frac(mid)


def mixture_gap(mix: GaussianMixture, mode_lo: float, mode_hi: float, width: float) -> float:
    """Analytic value of :func:`bimodality_gap` for draws from ``mix``."""
    half = 0.5 * width
    mid = 0.5 * (mode_lo + mode_hi)
    return sum(mix.mass(c - half, c + half) for c in (mode_lo, mode_hi)) - mix.mass(mid - half, mid + half)


def drift_modes(task: DriftTask, k: int) -> tuple[float, float, float]:
    """``(mode_lo, mode_hi, width)`` of the k-th iterate for a two-component start.

    The window width is one component standard deviation (``+-0.5 sigma``).
    """
    mix = drift_true_distribution(task, k)
    if len(mix.means) != 2:
        raise ValueError("drift modes are defined for two-component mixtures")
    lo, hi = sorted(mix.means)
    return lo, hi, min(mix.stds)


# --- tabular MDPs ------------------------------------------------------------


@dataclass
class TabularMdp:
    """Finite MDP with a fixed policy and discrete reward laws.

    ``rewards[s][a]`` is a ``(values, probs)`` pair.  Entering an absorbing
    state ends the episode; absorbing states are never acted in.
    """

    P: np.ndarray
    rewards: list
    policy: np.ndarray
    gamma: float
    absorbing: tuple = ()
    horizon_cap: int | None = None
    name: str = "mdp"

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.policy = np.asarray(self.policy, dtype=float)
        self.absorbing = tuple(int(s) for s in self.absorbing)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ValueError(f"P must be (S, A, S), got {self.P.shape}")
        n_s, n_a = self.P.shape[:2]
        if self.policy.shape != (n_s, n_a):
            raise ValueError("policy must be (S, A)")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if np.any(self.P < 0) or np.any(np.abs(self.P.sum(-1) - 1.0) > 1e-12):
            raise ValueError("transition rows must be distributions")
        if np.any(self.policy < 0) or np.any(np.abs(self.policy.sum(-1) - 1.0) > 1e-12):
            raise ValueError("policy rows must be distributions")
        if any(not 0 <= s < n_s for s in self.absorbing):
            raise ValueError("absorbing state out of range")
        table = []
        for s in range(n_s):
            row = []
            for a in range(n_a):
                vals, probs = self.rewards[s][a]
                vals = np.asarray(vals, dtype=float).reshape(-1)
                probs = np.asarray(probs, dtype=float).reshape(-1)
                if vals.size == 0 or vals.shape != probs.shape:
                    raise ValueError(f"bad reward support at ({s}, {a})")
                if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
                    raise ValueError(f"reward probabilities at ({s}, {a}) must sum to 1")
                if not np.all(np.isfinite(vals)):
                    raise ValueError("reward values must be finite")
                row.append((vals, probs))
            table.append(row)
        self.rewards = table

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def r_max(self) -> float:
        return max(float(np.max(np.abs(v))) for row in self.rewards for v, _ in row)

    def live_pairs(self) -> list[tuple[int, int]]:
        """(s, a) pairs reachable under the policy from non-absorbing states."""
        return [
            (s, a)
            for s in range(self.n_states)
            if s not in self.absorbing
            for a in range(self.n_actions)
            if self.policy[s, a] > 0
        ]

    def one_hot_state(self, s) -> np.ndarray:
        return np.eye(self.n_states)[s]

    def one_hot_action(self, a) -> np.ndarray:
        return np.eye(self.n_actions)[a]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gamma": self.gamma,
            "P": self.P.tolist(),
            "rewards": [[{"values": v.tolist(), "probs": p.tolist()} for v, p in row] for row in self.rewards],
            "policy": self.policy.tolist(),
            "absorbing": list(self.absorbing),
            "horizon_cap": self.horizon_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        rewards = [[(c["values"], c["probs"]) for c in row] for row in d["rewards"]]
        return cls(
            d["P"], rewards, d["policy"], d["gamma"], tuple(d.get("absorbing", ())),
            d.get("horizon_cap"), d.get("name", "mdp"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


def horizon_for(mdp: TabularMdp, tol: float = TRUNCATION_TOL) -> int:
    """Smallest T with ``gamma**T * r_max / (1 - gamma) <= tol``."""
    if mdp.gamma == 0.0 or mdp.r_max == 0.0:
        return 1
    t = math.ceil(math.log(tol * (1.0 - mdp.gamma) / mdp.r_max) / math.log(mdp.gamma))
    t = max(t, 1)
    if mdp.horizon_cap is not None and mdp.horizon_cap < t:
        raise HorizonError(
            f"horizon cap {mdp.horizon_cap} leaves truncation error above {tol}; need T >= {t}"
        )
    return t


def _draw(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Categorical draw per row from cumulative probabilities ``cum`` (n, k)."""
    idx = np.sum(u[:, None] >= cum, axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def mdp_sample_transition(mdp: TabularMdp, s: int, rng) -> Transition:
    """One-hot encoded transition from state ``s`` under the fixed policy."""
    if not 0 <= s < mdp.n_states or s in mdp.absorbing:
        raise ValueError(f"invalid start state {s}")
    rng = np.random.default_rng(rng)
    a = int(rng.choice(mdp.n_actions, p=mdp.policy[s]))
    vals, probs = mdp.rewards[s][a]
    r = float(vals[rng.choice(vals.size, p=probs)])
    s_next = int(rng.choice(mdp.n_states, p=mdp.P[s, a]))
    done = s_next in mdp.absorbing
    # the next action is irrelevant once m = 0; draw it anyway from a live row
    a_next = 0 if done else int(rng.choice(mdp.n_actions, p=mdp.policy[s_next]))
    return Transition(
        mdp.one_hot_state(s), mdp.one_hot_action(a), r,
        mdp.one_hot_state(s_next), mdp.one_hot_action(a_next), 0.0 if done else 1.0,
    )


class _Tables:
    """Padded cumulative tables for vectorized rollouts."""

    def __init__(self, mdp: TabularMdp):
        n_s, n_a = mdp.n_states, mdp.n_actions
        width = max(v.size for row in mdp.rewards for v, _ in row)
        self.r_vals = np.zeros((n_s, n_a, width))
        self.r_cum = np.ones((n_s, n_a, width))
        for s in range(n_s):
            for a in range(n_a):
                v, p = mdp.rewards[s][a]
                self.r_vals[s, a, : v.size] = v
                self.r_cum[s, a, : v.size] = np.cumsum(p)
        self.p_cum = np.cumsum(mdp.P, axis=-1)
        self.pi_cum = np.cumsum(mdp.policy, axis=-1)
        self.absorbing = np.zeros(n_s, dtype=bool)
        self.absorbing[list(mdp.absorbing)] = True


def _rollouts(mdp: TabularMdp, tables: _Tables, s: int, a: int, n: int, horizon: int, rng) -> np.ndarray:
    state = np.full(n, s)
    action = np.full(n, a)
    alive = np.ones(n, dtype=bool)
    ret = np.zeros(n)
    disc = 1.0
    for _ in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        st, ac = state[idx], action[idx]
        k = _draw(tables.r_cum[st, ac], rng.random(idx.size))
        ret[idx] += disc * tables.r_vals[st, ac, k]
        nxt = _draw(tables.p_cum[st, ac], rng.random(idx.size))
        state[idx] = nxt
        done = tables.absorbing[nxt]
        alive[idx[done]] = False
        live = idx[~done]
        action[live] = _draw(tables.pi_cum[state[live]], rng.random(live.size))
        disc *= mdp.gamma
    return ret


def _is_acyclic_from(mdp: TabularMdp, s: int) -> bool:
    """True when no live state reachable from ``s`` can be revisited."""
    edges = (mdp.policy[:, :, None] * mdp.P).sum(axis=1) > 0
    state = {}

    def visit(u):
        state[u] = 1
        for v in np.flatnonzero(edges[u]):
            v = int(v)
            if v in mdp.absorbing:
                continue
            if state.get(v) == 1 or (v not in state and not visit(v)):
                return False
        state[u] = 2
        return True

    return visit(s)


def _enumerate(mdp: TabularMdp, s: int, a: int, horizon: int):
    if not _is_acyclic_from(mdp, s):
        raise HorizonError("exact enumeration needs an acyclic absorbing chain")
    atoms, weights = [], []
    stack = [(s, a, 0.0, 1.0, 0)]
    while stack:
        st, ac, acc, prob, depth = stack.pop()
        if depth >= horizon:
            raise HorizonError("exact enumeration needs every path to absorb within the horizon")
        disc = mdp.gamma**depth
        vals, probs = mdp.rewards[st][ac]
        for rv, rp in zip(vals, probs):
            for nxt in np.flatnonzero(mdp.P[st, ac]):
                p = prob * rp * mdp.P[st, ac, nxt]
                if p <= PRUNE_PROB:
                    continue
                ret = acc + disc * rv
                if nxt in mdp.absorbing:
                    atoms.append(ret)
                    weights.append(p)
                    continue
                for an in np.flatnonzero(mdp.policy[nxt]):
                    stack.append((int(nxt), int(an), ret, p * mdp.policy[nxt, an], depth + 1))
    atoms = np.asarray(atoms)
    weights = np.asarray(weights)
    order = np.argsort(atoms, kind="stable")
    atoms, weights = atoms[order], weights[order]
    uniq, inv = np.unique(atoms, return_inverse=True)
    merged = np.bincount(inv, weights=weights)
    return uniq, merged / merged.sum()


@dataclass
class ReturnOracle:
    """Ground-truth return law: sorted atoms with probability weights."""

    atoms: np.ndarray
    weights: np.ndarray
    mode: str
    seed: int | None = None

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.mode not in ("exact", "monte_carlo"):
            raise ValueError(f"unknown oracle mode {self.mode!r}")
        if self.atoms.shape != self.weights.shape or self.atoms.size == 0:
            raise ValueError("oracle needs matching non-empty atoms and weights")
        if np.any(np.diff(self.atoms) < 0):
            raise ValueError("oracle atoms must be sorted")
        self._cum = np.cumsum(self.weights)

    @property
    def size(self) -> int:
        return self.atoms.size

    def quantile(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        if self.mode == "monte_carlo":
            return self.atoms[order_index(self.size, tau) - 1]
        idx = np.searchsorted(self._cum, tau - 1e-12, side="left")
        return self.atoms[np.minimum(idx, self.size - 1)]

    def mean(self) -> float:
        return float(np.dot(self.atoms, self.weights))

    def mean_abs(self) -> float:
        return float(np.dot(np.abs(self.atoms), self.weights))

    def iqr(self) -> float:
        return float(self.quantile(0.75) - self.quantile(0.25))

    def w1_to(self, samples) -> float:
        """W1 between a sample and this law via the quantile coupling on a
        midpoint level grid of the sample's size."""
        x = np.sort(np.asarray(samples.atoms if isinstance(samples, ParticleSet) else samples, float))
        taus = (np.arange(x.size) + 0.5) / x.size
        return float(np.mean(np.abs(x - self.quantile(taus))))

    def w1_oracle(self, other: "ReturnOracle", grid: int = 100_000) -> float:
        taus = (np.arange(grid) + 0.5) / grid
        return float(np.mean(np.abs(self.quantile(taus) - other.quantile(taus))))

    def save(self, path) -> None:
        path = Path(path)
        np.stack([self.atoms, self.weights]).astype("<f8").tofile(path.with_suffix(".bin"))
        meta = {"size": self.size, "seed": self.seed, "mode": self.mode, "dtype": "float64"}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "ReturnOracle":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        data = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(2, meta["size"])
        return cls(data[0], data[1], meta["mode"], meta["seed"])


def oracle_return_distribution(
    mdp: TabularMdp,
    s: int,
    a: int,
    n_samples: int = 1_000_000,
    rng=0,
    mode: str = "auto",
    chunk: int = 250_000,
) -> ReturnOracle:
    """Return law of ``Z(s, a)``.

    ``mode="exact"`` enumerates every trajectory with probability above
    ``1e-12`` (absorbing chains only); ``"monte_carlo"`` runs truncated
    rollouts; ``"auto"`` tries exact first.
    """
    if not 0 <= s < mdp.n_states or s in mdp.absorbing or not 0 <= a < mdp.n_actions:
        raise ValueError(f"invalid state-action pair ({s}, {a})")
    horizon = horizon_for(mdp)
    if mode in ("exact", "auto"):
        try:
            atoms, weights = _enumerate(mdp, s, a, horizon)
            return ReturnOracle(atoms, weights, "exact")
        except HorizonError:
            if mode == "exact":
                raise
    elif mode != "monte_carlo":
        raise ValueError(f"unknown oracle mode {mode!r}")
    gen = np.random.default_rng(rng)
    tables = _Tables(mdp)
    parts = []
    left = n_samples
    while left > 0:
        m = min(chunk, left)
        parts.append(_rollouts(mdp, tables, s, a, m, horizon, gen))
        left -= m
    atoms = np.sort(np.concatenate(parts), kind="stable")
    return ReturnOracle(atoms, np.full(atoms.size, 1.0 / atoms.size), "monte_carlo", rng if isinstance(rng, int) else None)


def cached_oracle(mdp: TabularMdp, s: int, a: int, cache_dir, n_samples: int = 1_000_000, seed: int = 0, mode="auto"):
    """:func:`oracle_return_distribution` memoized on disk."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    stem = cache_dir / f"{mdp.name}_s{s}_a{a}_n{n_samples}_seed{seed}_{mode}"
    if stem.with_suffix(".json").exists():
        return ReturnOracle.load(stem)
    oracle = oracle_return_distribution(mdp, s, a, n_samples, seed, mode)
    oracle.save(stem)
    return oracle


def bellman_pushforward(mdp: TabularMdp, s: int, a: int, oracles: dict, grid: int = 20_000) -> ReturnOracle:
    """Law of ``r + m * gamma * Z(s', a')`` built from next-pair oracles.

    Each next-pair law is discretized on a midpoint level grid.
    """
    taus = (np.arange(grid) + 0.5) / grid
    atoms, weights = [], []
    vals, probs = mdp.rewards[s][a]
    for rv, rp in zip(vals, probs):
        for nxt in np.flatnonzero(mdp.P[s, a]):
            p = rp * mdp.P[s, a, nxt]
            if nxt in mdp.absorbing:
                atoms.append(np.array([rv]))
                weights.append(np.array([p]))
                continue
            for an in np.flatnonzero(mdp.policy[nxt]):
                q = oracles[(int(nxt), int(an))].quantile(taus)
                atoms.append(rv + mdp.gamma * q)
                weights.append(np.full(grid, p * mdp.policy[nxt, an] / grid))
    atoms = np.concatenate(atoms)
    weights = np.concatenate(weights)
    order = np.argsort(atoms, kind="stable")
    return ReturnOracle(atoms[order], weights[order], "exact")


# --- desk suite ----------------------------------------------------------------


def bandit_mdp() -> TabularMdp:
    """One decision, two arms with different reward laws, then termination."""
    P = np.zeros((2, 2, 2))
    P[0, :, 1] = 1.0
    P[1, :, 1] = 1.0
    rewards = [
        [([0.0, 1.0], [0.5, 0.5]), ([0.0, 2.0], [0.25, 0.75])],
        [([0.0], [1.0]), ([0.0], [1.0])],
    ]
    policy = [[0.5, 0.5], [0.5, 0.5]]
    return TabularMdp(P, rewards, policy, 0.9, absorbing=(1,), name="bandit")


def bimodal_chain_mdp() -> TabularMdp:
    """s0 -> s1 -> absorbing s2 with two-point rewards and an early exit."""
    P = np.zeros((3, 1, 3))
    P[0, 0, 1], P[0, 0, 2] = 0.8, 0.2
    P[1, 0, 2] = 1.0
    P[2, 0, 2] = 1.0
    rewards = [
        [([-1.0, 1.0], [0.5, 0.5])],
        [([-1.0, 2.0], [0.5, 0.5])],
        [([0.0], [1.0])],
    ]
    return TabularMdp(P, rewards, [[1.0], [1.0], [1.0]], 0.9, absorbing=(2,), name="bimodal_chain")


def loop_mdp() -> TabularMdp:
    """Five-state ring with gamma 0.9; each step advances or stays."""
    n = 5
    P = np.zeros((n, 1, n))
    for s in range(n):
        P[s, 0, (s + 1) % n] = 0.7
        P[s, 0, s] = 0.3
    rewards = [[([0.0, 0.2 * (s + 1)], [0.5, 0.5])] for s in range(n)]
    return TabularMdp(P, rewards, np.ones((n, 1)), 0.9, name="loop")


def desk_suite() -> dict:
    return {m.name: m for m in (bandit_mdp(), bimodal_chain_mdp(), loop_mdp())}
