"""Grid solver for the regularized and true BGK equations on T^d x [-vmax, vmax]^d.

Lie splitting per time step: exact spectral transport g(x, v) <- g(x - v dt, v),
then relaxation with frozen fields through the integrating factor e^-dt.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .torus_kernel import InvalidInputError, SmearingKernel, torus_wrap

RHO_FLOOR = 1e-14
NEG_CLIP_TOL = 1e-12
CHECKPOINT_MAGIC = b"BGKSTATE"
CHECKPOINT_VERSION = 1


class DegenerateDensityError(RuntimeError):
    pass


class InstabilityError(RuntimeError):
    pass


class NegativityWarning(RuntimeWarning):
    pass


class OutOfRangeError(ValueError):
    pass


def _workers() -> int:
    return int(os.environ.get("BGK_NUM_THREADS", "1"))


@dataclass(frozen=True)
class PhaseGrid:
    nx: int
    nv: int
    vmax: float
    dim: int = 2

    def __post_init__(self):
        if self.nx % 2 or self.nv % 2 or self.nx < 2 or self.nv < 2:
            raise InvalidInputError("nx and nv must be even and >= 2")
        if not self.vmax > 0:
            raise InvalidInputError("vmax must be positive")
        if self.dim not in (1, 2, 3):
            raise InvalidInputError("dim must be 1, 2 or 3")

    @property
    def dx(self) -> float:
        return 1.0 / self.nx

    @property
    def dv(self) -> float:
        return 2.0 * self.vmax / self.nv

    @property
    def x(self) -> np.ndarray:
        return -0.5 + self.dx * np.arange(self.nx)

    @property
    def v(self) -> np.ndarray:
        return -self.vmax + self.dv * (np.arange(self.nv) + 0.5)

    @property
    def spatial_shape(self) -> tuple:
        return (self.nx,) * self.dim

    @property
    def shape(self) -> tuple:
        return (self.nx,) * self.dim + (self.nv,) * self.dim

    @property
    def spatial_axes(self) -> tuple:
        return tuple(range(self.dim))

    @property
    def velocity_axes(self) -> tuple:
        return tuple(range(self.dim, 2 * self.dim))

    @property
    def cell_volume(self) -> float:
        return (self.dx * self.dv) ** self.dim

    def spatial_points(self) -> np.ndarray:
        mesh = np.meshgrid(*([self.x] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    def velocity_weights(self) -> np.ndarray:
        """Columns (1, v_1, ..., v_d, |v|^2) over the flattened velocity nodes."""
        vs = np.stack(np.meshgrid(*([self.v] * self.dim), indexing="ij"), axis=-1).reshape(-1, self.dim)
        return np.column_stack([np.ones(len(vs)), vs, np.einsum("ij,ij->i", vs, vs)])

    def velocity_axis_array(self, k: int) -> np.ndarray:
        """Velocity component k broadcastable against the full phase array."""
        shape = [1] * (2 * self.dim)
        shape[self.dim + k] = self.nv
        return self.v.reshape(shape)


@dataclass
class KineticState:
    grid: PhaseGrid
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise InvalidInputError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    def _flat(self) -> np.ndarray:
        return self.values.reshape(self.grid.nx**self.grid.dim, -1)

    def global_moments(self) -> np.ndarray:
        """(mass, momentum_1..d, energy) as one array."""
        return self._flat().sum(axis=0) @ self.grid.velocity_weights() * self.grid.cell_volume

    def mass(self) -> float:
        return float(self.global_moments()[0])

    def momentum(self) -> np.ndarray:
        return self.global_moments()[1 : 1 + self.grid.dim]

    def energy(self) -> float:
        return float(self.global_moments()[-1])

    def moment_bound(self, q: float) -> float:
        """Discrete proxy of sup_{x,v} g (1 + |v|^q)."""
        v2 = self.grid.velocity_weights()[:, -1]
        return float(np.max(self._flat().max(axis=0) * (1.0 + v2 ** (q / 2))))


@dataclass
class FieldGrid:
    """rho (spatial), u (spatial + (d,)), T (spatial); ``smeared`` marks phi-convolved fields."""

    rho: np.ndarray
    u: np.ndarray
    T: np.ndarray
    smeared: bool = False


# ---------------------------------------------------------------- Maxwellians


def _axis_factors(grid: PhaseGrid, u: np.ndarray, T: np.ndarray) -> list:
    """Unnormalized 1-D Gaussian factors, each of shape spatial + (nv,)."""
    v = grid.v
    return [np.exp(-((v - u[..., k, None]) ** 2) / (2.0 * T[..., None])) for k in range(grid.dim)]


def _discrete_moments(grid: PhaseGrid, factors: list):
    v = grid.v
    mean = []
    second = 0.0
    for f in factors:
        s0 = f.sum(axis=-1)
        m1 = (f * v).sum(axis=-1) / s0
        m2 = (f * v * v).sum(axis=-1) / s0
        mean.append(m1)
        second = second + (m2 - m1 * m1)
    return np.stack(mean, axis=-1), second / grid.dim


def discrete_maxwellian(grid: PhaseGrid, rho, u, T, match_moments: bool = True, iters: int = 6) -> np.ndarray:
    """rho M_{u,T} on the velocity nodes, normalized to discrete mass rho.

    With ``match_moments`` the Gaussian parameters are corrected so that the
    discrete mean velocity and temperature equal (u, T) up to roundoff.
    """
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise DegenerateDensityError("temperature must be positive on the grid")
    up, Tp = u.copy(), T.copy()
    factors = _axis_factors(grid, up, Tp)
    if match_moments:
        for _ in range(iters):
            m, t = _discrete_moments(grid, factors)
            up = up + (u - m)
            Tp = np.maximum(Tp + (T - t), 0.25 * T)
            factors = _axis_factors(grid, up, Tp)
    d = grid.dim
    out = rho.reshape(grid.spatial_shape + (1,) * d)
    for k, f in enumerate(factors):
        f = f / (f.sum(axis=-1, keepdims=True) * grid.dv)
        shape = grid.spatial_shape + tuple(grid.nv if j == k else 1 for j in range(d))
        out = out * f.reshape(shape)
    return np.broadcast_to(out, grid.shape).copy() if out.shape != grid.shape else out


def state_from_law(grid: PhaseGrid, law, match_moments: bool = True) -> KineticState:
    """Grid representation of f0 = (1 + a cos 2 pi x1) M_{u0, T(x1)}."""
    pts = grid.spatial_points()
    x1 = pts[..., 0]
    rho = law.density(x1)
    T = law.temperature(x1)
    u = np.broadcast_to(law.u0_array, grid.spatial_shape + (grid.dim,))
    return KineticState(grid, discrete_maxwellian(grid, rho, u, T, match_moments), 0.0)


def default_vmax(law, sigmas: float = 8.0) -> float:
    return float(np.max(np.abs(law.u0_array)) + sigmas * math.sqrt(law.temperature_range[1]))


# ---------------------------------------------------------------- moments


def _raw_moments(s: KineticState):
    g = s.grid
    raw = (s._flat() @ g.velocity_weights()) * g.dv**g.dim
    raw = raw.reshape(g.spatial_shape + (g.dim + 2,))
    return raw[..., 0], raw[..., 1 : 1 + g.dim], raw[..., -1]


def _fields_from_raw(rho, mom, en, dim: int, smeared: bool) -> FieldGrid:
    if np.min(rho) < RHO_FLOOR:
        loc = np.unravel_index(int(np.argmin(rho)), rho.shape)
        raise DegenerateDensityError(f"density {float(np.min(rho)):.3e} below floor at node {loc}")
    u = mom / rho[..., None]
    T = (en / rho - np.einsum("...k,...k->...", u, u)) / dim
    return FieldGrid(rho, u, np.maximum(T, 0.0), smeared)


def moments(s: KineticState) -> FieldGrid:
    """Plain hydrodynamic fields (rho, u, T) by midpoint quadrature in v."""
    rho, mom, en = _raw_moments(s)
    return _fields_from_raw(rho, mom, en, s.grid.dim, smeared=False)


# ---------------------------------------------------------------- smearing


@dataclass
class GridKernel:
    """phi sampled on the periodic spatial grid, renormalized to unit discrete mass."""

    grid_nx: int
    dim: int
    hat: np.ndarray
    raw_mass: float


_KERNEL_CACHE: dict = {}


def grid_kernel(k: SmearingKernel, nx: int) -> GridKernel:
    key = (k.epsilon, k.dim, k.profile, nx)
    if key not in _KERNEL_CACHE:
        x = -0.5 + np.arange(nx) / nx
        mesh = np.stack(np.meshgrid(*([x] * k.dim), indexing="ij"), axis=-1)
        vals = k(mesh)
        dxd = (1.0 / nx) ** k.dim
        raw = float(vals.sum() * dxd)
        vals = vals / (vals.sum() * dxd)
        # displacement index 0 must sit at array index 0 for the circular convolution
        vals = np.fft.ifftshift(vals)
        hat = sfft.rfftn(vals * dxd, axes=tuple(range(k.dim)))
        _KERNEL_CACHE[key] = GridKernel(nx, k.dim, hat, raw)
    return _KERNEL_CACHE[key]


def convolve(h: np.ndarray, gk: GridKernel) -> np.ndarray:
    """Periodic convolution phi * h over the leading ``dim`` axes."""
    axes = tuple(range(gk.dim))
    shape = h.shape[: gk.dim]
    H = sfft.rfftn(h, axes=axes, workers=_workers())
    extra = (1,) * (h.ndim - gk.dim)
    return sfft.irfftn(H * gk.hat.reshape(gk.hat.shape + extra), s=shape, axes=axes, workers=_workers())


def smear_fields(s: KineticState, k: SmearingKernel) -> FieldGrid:
    """phi-smeared fields: rho^phi = phi*rho, rho^phi u^phi = phi*(rho u), etc."""
    rho, mom, en = _raw_moments(s)
    gk = grid_kernel(k, s.grid.nx)
    return _fields_from_raw(convolve(rho, gk), convolve(mom, gk), convolve(en, gk), s.grid.dim, smeared=True)


def relaxation_fields(s: KineticState, k: SmearingKernel | None) -> FieldGrid:
    return moments(s) if k is None else smear_fields(s, k)


# ---------------------------------------------------------------- time stepping


def transport(s: KineticState, dt: float) -> np.ndarray:
    """Exact free streaming g(x - v dt, v) by Fourier phase shifts in x."""
    g = s.grid
    axes = g.spatial_axes
    G = sfft.rfftn(s.values, axes=axes, workers=_workers())
    d = g.dim
    v = g.v
    for k in range(d):
        n_k = G.shape[k]
        freqs = np.fft.rfftfreq(g.nx, 1.0 / g.nx) if k == d - 1 else np.fft.fftfreq(g.nx, 1.0 / g.nx)
        phase = np.exp(-2j * np.pi * np.outer(freqs, v) * dt)  # (n_k, nv)
        shape = [1] * (2 * d)
        shape[k] = n_k
        shape[d + k] = g.nv
        G *= phase.reshape(shape)
    return sfft.irfftn(G, s=g.spatial_shape, axes=axes, workers=_workers())


def step(
    s: KineticState,
    k: SmearingKernel | None,
    dt: float,
    neg_fail: float = 1e-6,
    match_moments: bool = True,
) -> KineticState:
    """One Lie-splitting step: transport, then relaxation toward rho^phi M^phi."""
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    g = transport(s, dt)
    gmin = float(g.min())
    if gmin < -NEG_CLIP_TOL:
        scale = float(np.max(np.abs(g)))
        if gmin < -neg_fail * scale:
            raise InstabilityError(f"transport produced g = {gmin:.3e} (max {scale:.3e})")
        warnings.warn(f"clipping negative values down to {gmin:.3e}", NegativityWarning, stacklevel=2)
        g = np.maximum(g, 0.0)
    mid = KineticState(s.grid, g, s.t + dt)
    f = relaxation_fields(mid, k)
    target = discrete_maxwellian(s.grid, f.rho, f.u, f.T, match_moments)
    decay = math.exp(-dt)
    g *= decay
    target *= 1.0 - decay
    g += target
    return KineticState(s.grid, g, s.t + dt)


@dataclass
class FieldSeries:
    """Relaxation fields sampled on a time grid, with space-time interpolation."""

    times: np.ndarray
    rho: np.ndarray  # (nt, spatial...)
    u: np.ndarray  # (nt, spatial..., d)
    T: np.ndarray  # (nt, spatial...)
    nx: int
    dim: int
    smeared: bool

    def _time_weights(self, t: float):
        ts = self.times
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise OutOfRangeError(f"time {t} outside field series range [{ts[0]}, {ts[-1]}]")
        if len(ts) == 1:
            return 0, 0, 0.0
        j = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
        w = (t - ts[j]) / (ts[j + 1] - ts[j])
        return j, j + 1, float(np.clip(w, 0.0, 1.0))

    def _spatial(self, arr: np.ndarray, y: np.ndarray):
        """Multilinear periodic interpolation of arr (spatial..., [c]) at points y (M, d)."""
        y = torus_wrap(np.atleast_2d(y))
        s = (y + 0.5) * self.nx
        i0 = np.floor(s).astype(np.int64)
        fr = s - i0
        out = 0.0
        for corner in range(2**self.dim):
            bits = [(corner >> k) & 1 for k in range(self.dim)]
            idx = tuple((i0[:, k] + bits[k]) % self.nx for k in range(self.dim))
            wt = np.ones(y.shape[0])
            for k in range(self.dim):
                wt = wt * (fr[:, k] if bits[k] else 1.0 - fr[:, k])
            val = arr[idx]
            out = out + (wt[:, None] * val if val.ndim == 2 else wt * val)
        return out

    def at(self, y, t: float):
        """(rho, u, T) interpolated at points y and time t."""
        j0, j1, w = self._time_weights(t)
        res = []
        for arr in (self.rho, self.u, self.T):
            a0 = self._spatial(arr[j0], y)
            a1 = self._spatial(arr[j1], y) if w > 0 else a0
            res.append((1.0 - w) * a0 + w * a1)
        return tuple(res)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        d = self.dim
        wr.writerow(["t"] + [f"x{k + 1}_index" for k in range(d)] + ["rho"] + [f"u{k + 1}" for k in range(d)] + ["T"])
        for n, t in enumerate(self.times):
            for idx in np.ndindex(*self.rho.shape[1:]):
                wr.writerow(
                    [repr(float(t))]
                    + list(idx)
                    + [repr(float(self.rho[(n,) + idx]))]
                    + [repr(float(c)) for c in self.u[(n,) + idx]]
                    + [repr(float(self.T[(n,) + idx]))]
                )
        return buf.getvalue()


@dataclass
class BoundReport:
    """Diagnostics along a solve: density floor, temperature floor, moment bounds, drifts."""

    times: list = field(default_factory=list)
    min_rho: list = field(default_factory=list)
    min_rho_phi: list = field(default_factory=list)
    min_T: list = field(default_factory=list)
    moment_bounds: dict = field(default_factory=dict)
    mass: list = field(default_factory=list)
    momentum: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    C2: float | None = None

    def density_floor_ok(self, tol: float = 1e-6) -> bool:
        if self.C2 is None:
            return True
        return all(r >= self.C2 * math.exp(-t) - tol for t, r in zip(self.times, self.min_rho))

    def fitted_A(self) -> list:
        """Non-increasing envelope of min_x T: a discrete proxy for A_t."""
        return list(np.minimum.accumulate(self.min_T))

    def max_drift_rates(self) -> dict:
        """Largest |X(t) - X(0)| / t over the recorded times for mass, momentum, energy."""
        t = np.asarray(self.times)
        out = {}
        for name, hist in (("mass", self.mass), ("momentum", self.momentum), ("energy", self.energy)):
            h = np.asarray(hist, dtype=float).reshape(len(t), -1)
            if len(t) < 2:
                out[name] = 0.0
                continue
            dev = np.max(np.abs(h[1:] - h[0]), axis=1)
            out[name] = float(np.max(dev / (t[1:] - t[0])))
        return out


@dataclass
class SolveResult:
    state: KineticState
    fields: FieldSeries
    bounds: BoundReport
    states: list = field(default_factory=list)


def solve(
    s0: KineticState,
    k: SmearingKernel | None,
    t_end: float,
    dt: float,
    C2: float | None = None,
    keep_states_at=(),
    match_moments: bool = True,
) -> SolveResult:
    """Repeated ``step`` up to t_end, recording relaxation fields and bound diagnostics."""
    if t_end < 0:
        raise InvalidInputError("t_end must be >= 0")
    g = s0.grid
    qs = sorted({2 + g.dim, 3 + g.dim, 4 + g.dim})
    rep = BoundReport(C2=C2, moment_bounds={q: [] for q in qs})
    keep = sorted(float(t) for t in keep_states_at)
    kept = []
    times, rhos, us, Ts = [], [], [], []

    def observe(s: KineticState):
        f = relaxation_fields(s, k)
        plain = moments(s)
        times.append(s.t)
        rhos.append(f.rho)
        us.append(f.u)
        Ts.append(f.T)
        rep.times.append(s.t)
        rep.min_rho.append(float(plain.rho.min()))
        rep.min_rho_phi.append(float(f.rho.min()))
        rep.min_T.append(float(f.T.min()))
        for q in qs:
            rep.moment_bounds[q].append(s.moment_bound(q))
        rep.mass.append(s.mass())
        rep.momentum.append(s.momentum())
        rep.energy.append(s.energy())
        while keep and keep[0] < s.t - 1e-9:
            keep.pop(0)
        while keep and abs(keep[0] - s.t) < 1e-9:
            kept.append(KineticState(s.grid, s.values.copy(), s.t))
            keep.pop(0)

    s = KineticState(g, s0.values.copy(), s0.t)
    observe(s)
    # step on multiples of dt, splitting steps so requested states land exactly
    nsteps = int(math.floor(t_end / dt + 1e-9))
    offsets = [round((n + 1) * dt, 12) for n in range(nsteps)] + [t_end] + [t - s0.t for t in keep if 0 < t - s0.t < t_end]
    targets = []
    for off in sorted(offsets):
        if off > (targets[-1] if targets else 0.0) + 1e-9:
            targets.append(off)
    prev = 0.0
    for off in targets:
        s = step(s, k, off - prev, match_moments=match_moments)
        s.t = s0.t + off
        prev = off
        observe(s)
    series = FieldSeries(
        np.asarray(times), np.asarray(rhos), np.asarray(us), np.asarray(Ts), g.nx, g.dim, smeared=k is not None
    )
    return SolveResult(s, series, rep, kept)


# ---------------------------------------------------------------- checkpoints

_HEADER = struct.Struct("<8sIIIIdddd")


def write_checkpoint(s: KineticState, path) -> None:
    """Flat little-endian layout; see README for the byte map."""
    g = s.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, g.dim, g.nx, g.nv, g.vmax, g.dx, g.dv, s.t))
        fh.write(np.ascontiguousarray(s.values, dtype="<f8").tobytes())


def read_checkpoint(path) -> KineticState:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, dim, nx, nv, vmax, _dx, _dv, t = _HEADER.unpack(head)
        if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
            raise InvalidInputError(f"{path}: not a version-{CHECKPOINT_VERSION} state checkpoint")
        grid = PhaseGrid(nx, nv, vmax, dim)
        values = np.frombuffer(fh.read(), dtype="<f8").reshape(grid.shape).copy()
    return KineticState(grid, values, t)
