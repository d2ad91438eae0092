"""Isotropic Maxwellians: density, sampling, closed-form W2 and the optimal coupling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .torus_kernel import InvalidInputError


class DegenerateDistributionError(ValueError):
    """The Maxwellian has zero temperature and no density."""


@dataclass(frozen=True)
class MaxwellianParams:
    u: np.ndarray
    T: float

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=float))
        object.__setattr__(self, "u", u)
        if not np.isfinite(self.T) or self.T < 0:
            raise InvalidInputError(f"temperature must be finite and >= 0, got {self.T}")

    @property
    def dim(self) -> int:
        return self.u.shape[0]

    @property
    def is_dirac(self) -> bool:
        return self.T == 0.0


def maxwellian_pdf(p: MaxwellianParams, v) -> np.ndarray | float:
    if p.is_dirac:
        raise DegenerateDistributionError("T = 0: the Maxwellian is a Dirac mass")
    v = np.asarray(v, dtype=float)
    d = p.dim
    r2 = np.sum((v - p.u) ** 2, axis=-1)
    out = np.exp(-r2 / (2.0 * p.T)) / (2.0 * np.pi * p.T) ** (d / 2)
    return float(out) if np.ndim(out) == 0 else out


def maxwellian_sample(p: MaxwellianParams, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    if p.is_dirac:
        return p.u.copy() if size is None else np.tile(p.u, (size, 1))
    shape = (p.dim,) if size is None else (size, p.dim)
    return p.u + np.sqrt(p.T) * rng.standard_normal(shape)


def w2_maxwellians(p1: MaxwellianParams, p2: MaxwellianParams) -> float:
    """Squared 2-Wasserstein distance |u1-u2|^2 + d (sqrt T1 - sqrt T2)^2."""
    if p1.dim != p2.dim:
        raise InvalidInputError(f"dimension mismatch {p1.dim} vs {p2.dim}")
    du = p1.u - p2.u
    return float(du @ du + p1.dim * (np.sqrt(p1.T) - np.sqrt(p2.T)) ** 2)


def coupled_maxwellian_sample(
    p1: MaxwellianParams, p2: MaxwellianParams, rng: np.random.Generator, size: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (v, w) from the W2-optimal coupling of M_{u1,T1} and M_{u2,T2}.

    The coupling is the dilation w = u2 + sqrt(T2/T1) (v - u1). If T1 = 0 the pair
    is (u1, w) with w drawn independently, which keeps both marginals exact.
    With ``size`` the result is two (size, d) arrays of independent pairs.
    """
    if p1.dim != p2.dim:
        raise InvalidInputError(f"dimension mismatch {p1.dim} vs {p2.dim}")
    if p1.is_dirac:
        v = p1.u.copy() if size is None else np.tile(p1.u, (size, 1))
        return v, maxwellian_sample(p2, rng, size)
    z = rng.standard_normal(p1.dim if size is None else (size, p1.dim))
    v = p1.u + np.sqrt(p1.T) * z
    if p2.is_dirac:
        return v, (p2.u.copy() if size is None else np.tile(p2.u, (size, 1)))
    if p1.T == p2.T:
        w = v + (p2.u - p1.u)
    else:
        w = p2.u + np.sqrt(p2.T) * z
    return v, w
