"""Torus geometry on the unit-side torus and the compactly supported smearing kernel."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, special

# Fraction of the unit torus the kernel support may occupy; also caps the partition search.
MAX_PARTITION_DENOMINATOR = 100_000


class InvalidInputError(ValueError):
    """Raised on malformed arguments (non-finite input, wrong dimension, bad range)."""


class NoScaleError(RuntimeError):
    """Raised when no admissible partition scale exists for a kernel."""


def torus_wrap(raw) -> np.ndarray:
    """Reduce coordinates modulo one into [-1/2, 1/2).

    Works elementwise on arrays of any shape. Ties at +1/2 map to -1/2.
    """
    a = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("torus_wrap: non-finite coordinate")
    w = a - np.floor(a + 0.5)
    # floor rounding can leave w == 0.5 for inputs a hair below a half-integer
    return np.where(w >= 0.5, w - 1.0, w)


def minimal_image(diff) -> np.ndarray:
    """Minimal-image representative of a displacement (same as wrapping)."""
    return torus_wrap(diff)


def torus_norm(x) -> np.ndarray:
    """Distance from the origin on the torus, reduced over the last axis."""
    w = torus_wrap(x)
    return np.sqrt(np.sum(w * w, axis=-1))


def torus_distance(a, b) -> float | np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-1:] != b.shape[-1:]:
        raise InvalidInputError(
            f"torus_distance: dimension mismatch {a.shape[-1:]} vs {b.shape[-1:]}"
        )
    out = torus_norm(a - b)
    return float(out) if out.ndim == 0 else out


def bump_profile(s):
    """Unnormalized radial bump exp(-1/(1-(2s)^2)) for s < 1/2, zero beyond."""
    s = np.asarray(s, dtype=float)
    q = 1.0 - 4.0 * s * s
    out = np.zeros_like(s)
    inside = q > 0.0
    out[inside] = np.exp(-1.0 / q[inside])
    return out


def _ball_surface(dim: int) -> float:
    return 2.0 * math.pi ** (dim / 2) / special.gamma(dim / 2)


@dataclass(frozen=True)
class SmearingKernel:
    """Radial smearing function phi^(eps)(x) = eps^-d phibar(x/eps) on the torus.

    ``phibar`` is a radial profile supported in |x| < 1/2 and normalized to unit
    mass; the rescaled kernel is supported in |x| < eps/2.
    """

    epsilon: float
    dim: int
    profile: str = "bump"
    normalization: float = 1.0  # multiplies the unit-scale profile
    phi0: float = 0.0
    grad_bound: float = 0.0
    quad_tol: float = 1e-12
    _profile_fn: Callable = field(default=bump_profile, repr=False, compare=False)

    @property
    def support_radius(self) -> float:
        return 0.5 * self.epsilon

    def radial(self, s) -> np.ndarray:
        """Kernel value as a function of the distance from the origin."""
        s = np.asarray(s, dtype=float)
        eps = self.epsilon
        return self.normalization * self._profile_fn(s / eps) / eps**self.dim

    def __call__(self, x) -> np.ndarray:
        """Evaluate phi at torus points; the last axis holds coordinates."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise InvalidInputError(f"kernel of dim {self.dim} evaluated on {x.shape}")
        return self.radial(torus_norm(x))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw displacements with density phi (rejection from the uniform ball)."""
        n = 1 if size is None else int(size)
        out = np.empty((n, self.dim))
        filled = 0
        R = self.support_radius
        while filled < n:
            m = max(16, int(1.3 * (n - filled) * self.phi0 * _ball_volume(self.dim, R)) + 8)
            g = rng.standard_normal((m, self.dim))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            rad = R * rng.random(m) ** (1.0 / self.dim)
            u = rng.random(m)
            keep = u * self.phi0 < self.radial(rad)
            acc = g[keep] * rad[keep, None]
            take = min(len(acc), n - filled)
            out[filled : filled + take] = acc[:take]
            filled += take
        return out[0] if size is None else out

    def radial_cdf(self, s) -> np.ndarray:
        """P(|xi| <= s) for xi ~ phi, by quadrature."""
        S = _ball_surface(self.dim)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.empty_like(s)
        for k, sk in enumerate(s):
            top = min(sk, self.support_radius)
            if top <= 0:
                out[k] = 0.0
                continue
            val, _ = integrate.quad(
                lambda t: S * t ** (self.dim - 1) * float(self.radial(t)),
                0.0,
                top,
                epsabs=1e-14,
                epsrel=1e-12,
                limit=200,
            )
            out[k] = val
        return out

    def to_json(self) -> str:
        return json.dumps({"profile": self.profile, "epsilon": self.epsilon, "dim": self.dim})


def _ball_volume(dim: int, radius: float) -> float:
    return math.pi ** (dim / 2) / special.gamma(dim / 2 + 1) * radius**dim


_PROFILES = {"bump": bump_profile}


def _unit_mass(profile_fn, dim: int, tol: float) -> float:
    S = _ball_surface(dim)
    val, _ = integrate.quad(
        lambda s: S * s ** (dim - 1) * float(profile_fn(np.array(s))),
        0.0,
        0.5,
        epsabs=tol,
        epsrel=tol,
        limit=200,
    )
    return val


def _grad_bound(profile_fn, norm: float, dim: int, eps: float, h: float = 1e-6) -> float:
    # radial profile, so |grad phi| = |d phi / ds|; centered differences on a fine grid
    s = np.linspace(h, 0.5 - h, 200_001)
    vals = norm * (profile_fn(s + h) - profile_fn(s - h)) / (2 * h)
    return 1.01 * float(np.max(np.abs(vals))) / eps ** (dim + 1)


def kernel_build(epsilon: float, dim: int, profile: str = "bump", quad_tol: float = 1e-12) -> SmearingKernel:
    """Build the rescaled kernel with cached normalization, phi(0) and sup|grad phi|."""
    if not (isinstance(epsilon, (int, float)) and math.isfinite(epsilon) and 0.0 < epsilon <= 1.0):
        raise InvalidInputError(f"epsilon must lie in (0, 1], got {epsilon!r}")
    if dim not in (1, 2, 3):
        raise InvalidInputError(f"dim must be 1, 2 or 3, got {dim!r}")
    try:
        fn = _PROFILES[profile]
    except KeyError:
        raise InvalidInputError(f"unknown kernel profile {profile!r}") from None
    norm = 1.0 / _unit_mass(fn, dim, quad_tol)
    phi0 = norm * float(fn(np.array(0.0))) / epsilon**dim
    grad = _grad_bound(fn, norm, dim, epsilon)
    return SmearingKernel(
        epsilon=float(epsilon),
        dim=dim,
        profile=profile,
        normalization=norm,
        phi0=phi0,
        grad_bound=grad,
        quad_tol=quad_tol,
        _profile_fn=fn,
    )


def kernel_from_json(text: str) -> SmearingKernel:
    spec = json.loads(text)
    return kernel_build(float(spec["epsilon"]), int(spec["dim"]), spec.get("profile", "bump"))


def kernel_sample(k: SmearingKernel, rng: np.random.Generator) -> np.ndarray:
    return k.sample(rng)


def _cube_points(n: int, dim: int) -> np.ndarray:
    g = np.linspace(-1.0, 1.0, n)
    mesh = np.meshgrid(*([g] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def partition_predicate(k: SmearingKernel, r: float, resolution: int = 41) -> bool:
    """Check phi(x) > phi0/2 on a grid of [-5r, 5r]^d (corners included)."""
    pts = 5.0 * r * _cube_points(resolution, k.dim)
    return bool(np.all(k(pts) > 0.5 * k.phi0))


def compute_partition_scale(
    k: SmearingKernel, resolution: int = 41, max_denominator: int = MAX_PARTITION_DENOMINATOR
) -> float:
    """Largest r = 1/n < 1/10 with phi > phi0/2 on the cube [-5r, 5r]^d."""
    # radial kernel: the predicate fails first at the cube corner, so start the scan there
    s = np.linspace(0.0, k.support_radius, 20_001)
    above = s[k.radial(s) > 0.5 * k.phi0]
    s_half = float(above[-1]) if above.size else 0.0
    n = max(11, math.ceil(5.0 * math.sqrt(k.dim) / s_half) - 1) if s_half > 0 else max_denominator + 1
    while n <= max_denominator:
        if partition_predicate(k, 1.0 / n, resolution):
            return 1.0 / n
        n += 1
    raise NoScaleError(
        f"no r = 1/n with n <= {max_denominator} satisfies phi > phi0/2 on [-5r,5r]^{k.dim}"
        f" (epsilon={k.epsilon})"
    )
