"""Quantile regression losses, order-statistic quantiles and particle utilities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class EmptySetError(ValueError):
    pass


@dataclass(frozen=True)
class ParticleSet:
    """An ordered multiset of scalar return atoms.

    ``sorted`` records whether ``atoms`` are known to be non-decreasing;
    unsorted sets keep the order they were produced in (e.g. aligned with a
    vector of quantile levels).
    """

    atoms: np.ndarray
    sorted: bool = False

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float).reshape(-1)
        if atoms.size == 0:
            raise EmptySetError("a ParticleSet needs at least one atom")
        if self.sorted and np.any(np.diff(atoms) < 0):
            raise ValueError("atoms flagged sorted are not non-decreasing")
        object.__setattr__(self, "atoms", atoms)

    def __len__(self):
        return self.atoms.size

    def __array__(self, dtype=None, copy=None):
        return self.atoms if dtype is None else self.atoms.astype(dtype)

    def as_sorted(self) -> "ParticleSet":
        if self.sorted:
            return self
        return ParticleSet(np.sort(self.atoms, kind="stable"), sorted=True)

    def mean(self) -> float:
        return float(self.atoms.mean())

    def to_csv(self, path) -> None:
        np.savetxt(path, self.atoms, fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "ParticleSet":
        return cls(np.loadtxt(Path(path), dtype=float, ndmin=1))


@dataclass(frozen=True)
class QuantileLevels:
    taus: np.ndarray

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=float).reshape(-1)
        if taus.size == 0:
            raise ValueError("need at least one quantile level")
        if np.any(taus <= 0.0) or np.any(taus >= 1.0):
            raise ValueError("quantile levels must lie in the open interval (0, 1)")
        object.__setattr__(self, "taus", taus)

    def __len__(self):
        return self.taus.size

    @classmethod
    def uniform_random(cls, n: int, rng) -> "QuantileLevels":
        return cls(draw_taus(np.random.default_rng(rng), n))

    @classmethod
    def midpoints(cls, n: int) -> "QuantileLevels":
        return cls((np.arange(n) + 0.5) / n)


def draw_taus(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on the open interval (0, 1)."""
    u = rng.random(shape)
    # Generator.random is on [0, 1); nudge the (measure-zero) zero draws inward
    return np.where(u == 0.0, np.finfo(float).tiny, u)


def _values(x) -> np.ndarray:
    atoms = np.asarray(x.atoms if isinstance(x, ParticleSet) else x, dtype=float).reshape(-1)
    if atoms.size == 0:
        raise EmptySetError("empty particle set")
    return atoms


def huber(u, kappa: float):
    """Huber loss; ``kappa = 0`` is taken as the absolute-value limit."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    u = np.asarray(u, dtype=float)
    a = np.abs(u)
    if kappa == 0:
        out = a
    else:
        out = np.where(a <= kappa, 0.5 * u * u, kappa * (a - 0.5 * kappa))
    return float(out) if out.ndim == 0 else out


def huber_grad(u, kappa: float):
    u = np.asarray(u, dtype=float)
    if kappa == 0:
        return np.sign(u)
    return np.clip(u, -kappa, kappa)


def quantile_loss(u, tau, kappa: float = 0.0):
    """Asymmetric (huberized) quantile loss ``|tau - 1(u<0)| * huber(u)``."""
    u = np.asarray(u, dtype=float)
    weight = np.abs(np.asarray(tau, dtype=float) - (u < 0))
    out = weight * np.asarray(huber(u, kappa))
    return float(out) if out.ndim == 0 else out


def quantile_loss_grad(u, tau, kappa: float = 0.0):
    """Derivative of :func:`quantile_loss` with respect to ``u`` (a.e.)."""
    u = np.asarray(u, dtype=float)
    return np.abs(np.asarray(tau, dtype=float) - (u < 0)) * huber_grad(u, kappa)


def order_index(n: int, tau) -> np.ndarray:
    """1-based index ``ceil(n * tau)`` robust to float noise at tau = k/n."""
    scaled = np.asarray(tau, dtype=float) * n
    k = np.ceil(scaled - 1e-12 * np.maximum(1.0, scaled)).astype(int)
    return np.clip(k, 1, n)


def sample_quantile(y, tau):
    """The ``ceil(n tau)``-th order statistic of ``y`` (1-indexed).

    ``tau`` may be a scalar or an array of levels.  Ties keep stable order.
    """
    atoms = _values(y)
    if not (isinstance(y, ParticleSet) and y.sorted):
        atoms = np.sort(atoms, kind="stable")
    taus = np.asarray(tau, dtype=float)
    if np.any(taus <= 0.0) or np.any(taus >= 1.0):
        raise ValueError("tau must lie in (0, 1)")
    out = atoms[order_index(atoms.size, taus) - 1]
    return float(out) if out.ndim == 0 else out


def sample_quantile_rows(y: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Row-wise sample quantiles: ``y`` is (B, n), ``tau`` is (B, k)."""
    srt = np.sort(y, axis=-1, kind="stable")
    idx = order_index(srt.shape[-1], tau) - 1
    return np.take_along_axis(srt, idx, axis=-1)


def empirical_risk(y, theta: float, tau: float) -> float:
    """Sum of kappa=0 quantile losses of the residuals ``y_i - theta``."""
    atoms = _values(y)
    return float(np.sum(quantile_loss(atoms - theta, tau, 0.0)))


def subgradient_counts(y, theta: float) -> tuple[int, int]:
    atoms = _values(y)
    return int(np.sum(atoms < theta)), int(np.sum(atoms <= theta))


def droptop(atoms, drop_count: int) -> ParticleSet:
    """Sort the atoms and discard the ``drop_count`` largest."""
    vals = _values(atoms)
    if drop_count < 0:
        raise ValueError("drop_count must be non-negative")
    if drop_count >= vals.size:
        raise ValueError(f"cannot drop {drop_count} of {vals.size} atoms")
    srt = np.sort(vals, kind="stable")
    return ParticleSet(srt[: srt.size - drop_count], sorted=True)


def _inverse_cdf_on(atoms_sorted: np.ndarray, size: int) -> np.ndarray:
    """Linear interpolation of a sorted sample's inverse CDF onto ``size`` points."""
    n = atoms_sorted.size
    src = (np.arange(n) + 0.5) / n
    dst = (np.arange(size) + 0.5) / size
    return np.interp(dst, src, atoms_sorted)


def wasserstein1(a, b) -> float:
    """1-D W1 through the quantile coupling of order statistics.

    Unequal sizes: the smaller set's empirical inverse CDF is linearly
    interpolated to the larger size before matching.
    """
    xa = np.sort(_values(a), kind="stable")
    xb = np.sort(_values(b), kind="stable")
    if xa.size < xb.size:
        xa = _inverse_cdf_on(xa, xb.size)
    elif xb.size < xa.size:
        xb = _inverse_cdf_on(xb, xa.size)
    return float(np.mean(np.abs(xa - xb)))


def interquartile_range(y) -> float:
    return sample_quantile(y, 0.75) - sample_quantile(y, 0.25)


def normal_quantile_sd(tau: float, n: int, density: float) -> float:
    """Asymptotic standard deviation ``sqrt(tau (1 - tau) / n) / f``."""
    return math.sqrt(tau * (1.0 - tau) / n) / density
