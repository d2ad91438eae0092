"""Event-driven simulation of the N-particle thermalization process."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .empirical_fields import ParticleConfig, PreconditionError, fields_from_weights
from .maxwell import MaxwellianParams, maxwellian_sample
from .torus_kernel import InvalidInputError, SmearingKernel, torus_wrap


@dataclass(frozen=True)
class InitialLaw:
    """f0(x, v) = (1 + a cos(2 pi x1)) M_{u0, T(x1)}(v).

    ``temperature_jump`` b and ``jump_width`` w add an optional smoothed
    square-wave temperature, T(x1) = T0 (1 + b tanh(cos(2 pi x1) / w)).
    With b = 0 the temperature is uniform.
    """

    a: float = 0.0
    T0: float = 1.0
    u0: tuple = (0.0, 0.0)
    dim: int = 2
    temperature_jump: float = 0.0
    jump_width: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.a <= 0.5:
            raise InvalidInputError(f"density amplitude must lie in [0, 1/2], got {self.a}")
        if self.T0 <= 0:
            raise InvalidInputError("base temperature must be positive")
        if len(self.u0) != self.dim:
            raise InvalidInputError(f"u0 has {len(self.u0)} components for dim {self.dim}")
        if not 0.0 <= self.temperature_jump < 1.0 or self.jump_width <= 0:
            raise InvalidInputError("temperature_jump must lie in [0, 1) and jump_width > 0")

    @property
    def u0_array(self) -> np.ndarray:
        return np.asarray(self.u0, dtype=float)

    def density(self, x1) -> np.ndarray:
        return 1.0 + self.a * np.cos(2.0 * np.pi * np.asarray(x1, dtype=float))

    def temperature(self, x1) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        if self.temperature_jump == 0.0:
            return np.full(x1.shape, self.T0)
        return self.T0 * (1.0 + self.temperature_jump * np.tanh(np.cos(2.0 * np.pi * x1) / self.jump_width))

    @property
    def temperature_range(self) -> tuple[float, float]:
        s = self.temperature_jump * math.tanh(1.0 / self.jump_width)
        return self.T0 * (1.0 - s), self.T0 * (1.0 + s)

    def pdf(self, x, v) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        T = self.temperature(x[..., 0])
        r2 = np.sum((v - self.u0_array) ** 2, axis=-1)
        return self.density(x[..., 0]) * np.exp(-r2 / (2 * T)) / (2 * np.pi * T) ** (self.dim / 2)

    @property
    def C2(self) -> float:
        """Mass of the lower bound a(v) = (1 - a) min_T M_{u0,T}(v) <= f0(x, v).

        Equals the mass of inf_x f0 when the temperature is uniform and is a
        conservative value otherwise.
        """
        lo, hi = self.temperature_range
        if hi == lo:
            return 1.0 - self.a
        d = self.dim
        s2 = d * math.log(hi / lo) / (1.0 / lo - 1.0 / hi)
        inner = stats.chi2.cdf(s2 / hi, d)
        outer = stats.chi2.sf(s2 / lo, d)
        return (1.0 - self.a) * float(inner + outer)

    @property
    def alpha(self) -> float:
        return 1.0 / (4.0 * self.temperature_range[1])

    @property
    def C1(self) -> float:
        lo, _ = self.temperature_range
        u2 = float(self.u0_array @ self.u0_array)
        return (1.0 + self.a) * (2 * np.pi * lo) ** (-self.dim / 2) * math.exp(u2 / (2 * lo))

    def velocity_moment(self, p: float, n: int = 4001) -> float:
        """E |v|^p under f0, by quadrature in x1 of the Gaussian moment."""
        x1 = np.linspace(-0.5, 0.5, n)
        T = self.temperature(x1)
        if np.any(self.u0_array != 0):
            raise NotImplementedError("velocity_moment assumes u0 = 0")
        # E|v|^p for N(0, T I_d) = (2T)^{p/2} Gamma((d+p)/2) / Gamma(d/2)
        g = (2 * T) ** (p / 2) * math.gamma((self.dim + p) / 2) / math.gamma(self.dim / 2)
        return float(integrate.trapezoid(self.density(x1) * g, x1))

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "T0": self.T0,
            "u0": list(self.u0),
            "dim": self.dim,
            "temperature_jump": self.temperature_jump,
            "jump_width": self.jump_width,
        }


def _inverse_cdf_x1(U: np.ndarray, a: float) -> np.ndarray:
    # F(s) = s + 1/2 + a sin(2 pi s) / (2 pi) on [-1/2, 1/2), strictly increasing for a < 1
    if a == 0.0:
        return U - 0.5
    lo = np.full_like(U, -0.5)
    hi = np.full_like(U, 0.5)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        F = mid + 0.5 + a * np.sin(2 * np.pi * mid) / (2 * np.pi)
        below = F < U
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def sample_initial(law: InitialLaw, N: int, rng: np.random.Generator) -> ParticleConfig:
    """N i.i.d. draws from f0."""
    if N < 1:
        raise InvalidInputError("N must be >= 1")
    d = law.dim
    X = np.empty((N, d))
    X[:, 0] = _inverse_cdf_x1(rng.random(N), law.a)
    if d > 1:
        X[:, 1:] = rng.random((N, d - 1)) - 0.5
    T = law.temperature(X[:, 0])
    V = law.u0_array + np.sqrt(T)[:, None] * rng.standard_normal((N, d))
    return ParticleConfig(torus_wrap(X), V)


def free_stream(cfg: ParticleConfig, dt: float) -> ParticleConfig:
    if dt < 0:
        raise InvalidInputError("dt must be >= 0")
    if dt == 0:
        return cfg.copy()
    return ParticleConfig(torus_wrap(cfg.X + cfg.V * dt), cfg.V.copy())


def config_hash(cfg: ParticleConfig) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(cfg.X).tobytes())
    h.update(np.ascontiguousarray(cfg.V).tobytes())
    return h.hexdigest()[:16]


def velocity_summary(V: np.ndarray) -> dict:
    out = {"mean_speed2": float(np.mean(np.einsum("ij,ij->i", V, V)))}
    for k in range(V.shape[1]):
        out[f"mean_v{k + 1}"] = float(np.mean(V[:, k]))
    return out


@dataclass
class TrajectoryRecorder:
    """Collects observables at fixed snapshot times."""

    times: list
    keep_full: bool = False
    records: list = field(default_factory=list)
    n_jumps: int = 0

    def __post_init__(self):
        self.times = [float(t) for t in self.times]
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise InvalidInputError("snapshot times must be strictly increasing")
        if self.times and self.times[0] < 0:
            raise InvalidInputError("snapshot times must be >= 0")

    def record(self, t: float, cfg: ParticleConfig):
        rec = {"t": t, "hash": config_hash(cfg), **velocity_summary(cfg.V)}
        if self.keep_full:
            rec["config"] = cfg.copy()
        self.records.append(rec)

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "observable", "value"])
        for rec in self.records:
            for key, val in rec.items():
                if key in ("t", "config"):
                    continue
                w.writerow([repr(rec["t"]), key, val if isinstance(val, str) else repr(val)])
        return buf.getvalue()

    def full_csv(self) -> str:
        if not self.keep_full:
            raise InvalidInputError("recorder was created without keep_full")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.records[0]["config"].dim if self.records else 0
        w.writerow(["t", "i"] + [f"x{k + 1}" for k in range(d)] + [f"v{k + 1}" for k in range(d)])
        for rec in self.records:
            c = rec["config"]
            for i in range(c.N):
                w.writerow([repr(rec["t"]), i] + [repr(float(q)) for q in c.X[i]] + [repr(float(q)) for q in c.V[i]])
        return buf.getvalue()


def thermalize(X: np.ndarray, V: np.ndarray, k: SmearingKernel, i: int, target: np.ndarray, rng) -> np.ndarray:
    """Velocity drawn from the empirical Maxwellian at ``target`` (Dirac if T = 0)."""
    w = k(target - X)
    f = fields_from_weights(w, V, X.shape[0])
    if not f.defined:
        raise PreconditionError("jump target outside the support of every particle")
    return maxwellian_sample(MaxwellianParams(f.u, f.T), rng)


def simulate(
    cfg: ParticleConfig,
    k: SmearingKernel,
    t_end: float,
    rng: np.random.Generator,
    rec: TrajectoryRecorder | None = None,
) -> ParticleConfig:
    """Exact event-driven simulation on [0, t_end] starting at time 0.

    Jumps arrive at total rate N; each picks a particle uniformly, moves it by a
    kernel draw and redraws its velocity from the smeared empirical Maxwellian
    at the new position (evaluated with the particle still at its old place).
    """
    if t_end < 0:
        raise InvalidInputError("t_end must be >= 0")
    X = cfg.X.copy()
    V = cfg.V.copy()
    N = X.shape[0]
    snaps = [] if rec is None else [s for s in rec.times if s <= t_end]
    si = 0
    t = 0.0
    while True:
        t_next = t + rng.exponential(1.0 / N)
        while si < len(snaps) and snaps[si] <= min(t_next, t_end):
            X = torus_wrap(X + V * (snaps[si] - t))
            t = snaps[si]
            rec.record(t, ParticleConfig(X, V))
            si += 1
        if t_next > t_end:
            X = torus_wrap(X + V * (t_end - t))
            break
        X = torus_wrap(X + V * (t_next - t))
        t = t_next
        i = int(rng.integers(N))
        xi = k.sample(rng)
        target = torus_wrap(X[i] + xi)
        V[i] = thermalize(X, V, k, i, target, rng)
        X[i] = target
        if rec is not None:
            rec.n_jumps += 1
    return ParticleConfig(X, V)
