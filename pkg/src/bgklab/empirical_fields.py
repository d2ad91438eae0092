"""Smeared empirical fields of a particle configuration, jump weights, good-set tests."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .torus_kernel import InvalidInputError, SmearingKernel, torus_norm, torus_wrap


class PreconditionError(ValueError):
    """An operation was called outside its domain (e.g. zero density at the target)."""


@dataclass
class ParticleConfig:
    """Positions X (N, d) on the torus and velocities V (N, d)."""

    X: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float, ndmin=2)
        V = np.array(self.V, dtype=float, ndmin=2)
        if X.shape != V.shape:
            raise InvalidInputError(f"positions {X.shape} and velocities {V.shape} disagree")
        if X.shape[0] < 1:
            raise InvalidInputError("need at least one particle")
        if not np.all(np.isfinite(V)):
            raise InvalidInputError("non-finite velocity")
        self.X = torus_wrap(X)
        self.V = V

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def copy(self) -> ParticleConfig:
        return ParticleConfig(self.X.copy(), self.V.copy())

    def to_csv(self) -> str:
        d = self.dim
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{k + 1}" for k in range(d)] + [f"v{k + 1}" for k in range(d)])
        for x, v in zip(self.X, self.V):
            w.writerow([repr(float(c)) for c in x] + [repr(float(c)) for c in v])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ParticleConfig:
        rows = list(csv.reader(io.StringIO(text)))
        d = len(rows[0]) // 2
        data = np.array([[float(c) for c in r] for r in rows[1:]])
        return cls(data[:, :d], data[:, d:])


@dataclass(frozen=True)
class HydroTriple:
    rho: float
    u: np.ndarray | None
    T: float | None

    @property
    def defined(self) -> bool:
        return self.u is not None


def undefined_fields() -> HydroTriple:
    """Marker returned where the smeared density vanishes."""
    return HydroTriple(0.0, None, None)


def fields_from_weights(w: np.ndarray, V: np.ndarray, N: int) -> HydroTriple:
    """Hydrodynamic triple from kernel weights phi(x - x_j) and velocities.

    Sums run over the particles with nonzero weight (numpy pairwise summation).
    """
    nz = np.flatnonzero(w > 0.0)
    if nz.size == 0:
        return undefined_fields()
    d = V.shape[1]
    if nz.size == 1:
        # a lone contributor: the Maxwellian is a Dirac mass at its velocity
        j = nz[0]
        return HydroTriple(float(w[j]) / N, V[j].copy(), 0.0)
    ww = w[nz]
    vv = V[nz]
    mass = float(ww.sum())
    u = (ww @ vv) / mass
    dev = vv - u
    sq = float(ww @ np.einsum("ij,ij->i", dev, dev))
    vmax2 = float(np.max(np.einsum("ij,ij->i", vv, vv)))
    if sq <= 1e-14 * mass * vmax2:
        T = 0.0
    else:
        T = sq / (d * mass)
    return HydroTriple(mass / N, u, T)


def smeared_fields(cfg: ParticleConfig, k: SmearingKernel, x) -> HydroTriple:
    """Empirical (rho, u, T) at a single point x, by direct summation over all particles."""
    x = np.asarray(x, dtype=float)
    w = k(x - cfg.X)
    return fields_from_weights(w, cfg.V, cfg.N)


def smeared_fields_naive(X: np.ndarray, V: np.ndarray, k: SmearingKernel, points: np.ndarray):
    """Vectorized direct-sum fields at many points: arrays rho (M,), u (M, d), T (M,).

    Points with zero density get u = 0 and T = 0 with rho = 0; callers check rho.
    """
    points = np.atleast_2d(points)
    N, d = X.shape
    W = k(points[:, None, :] - X[None, :, :])  # (M, N)
    return _fields_from_weight_matrix(W, V, N)


def _fields_from_weight_matrix(W: np.ndarray, V: np.ndarray, N: int):
    mass = W.sum(axis=1)
    safe = np.where(mass > 0, mass, 1.0)
    u = (W @ V) / safe[:, None]
    e = W @ np.einsum("ij,ij->i", V, V)
    d = V.shape[1]
    T = np.maximum(e / safe - np.einsum("ij,ij->i", u, u), 0.0) / d
    u[mass == 0] = 0.0
    T[mass == 0] = 0.0
    return mass / N, u, T


class CellList:
    """Periodic cell list for batched field queries at many points.

    Cells have side >= the kernel support radius, so a query only needs the
    3^d cells around its own. Falls back to direct summation when fewer than
    three cells fit per axis.
    """

    def __init__(self, X: np.ndarray, support_radius: float):
        self.X = np.asarray(X, dtype=float)
        self.N, self.dim = self.X.shape
        self.ncell = int(math.floor(1.0 / support_radius))
        if self.ncell >= 3:
            idx = self._cell_index(self.X)
            order = np.argsort(idx, kind="stable")
            self.order = order
            self.starts = np.searchsorted(idx[order], np.arange(self.ncell**self.dim + 1))

    def _cell_coords(self, P: np.ndarray) -> np.ndarray:
        c = np.floor((P + 0.5) * self.ncell).astype(np.int64)
        return np.clip(c, 0, self.ncell - 1)

    def _cell_index(self, P: np.ndarray) -> np.ndarray:
        c = self._cell_coords(P)
        return np.ravel_multi_index(tuple(c.T), (self.ncell,) * self.dim)

    def _neighbors(self, cell: np.ndarray) -> np.ndarray:
        offs = np.array(np.meshgrid(*([[-1, 0, 1]] * self.dim), indexing="ij")).reshape(self.dim, -1).T
        cells = np.unique(np.ravel_multi_index(tuple(((cell + offs) % self.ncell).T), (self.ncell,) * self.dim))
        parts = [self.order[self.starts[c] : self.starts[c + 1]] for c in cells]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def fields_at(self, V: np.ndarray, k: SmearingKernel, points: np.ndarray):
        points = torus_wrap(np.atleast_2d(points))
        if self.ncell < 3:
            return smeared_fields_naive(self.X, V, k, points)
        M = points.shape[0]
        rho = np.zeros(M)
        u = np.zeros((M, self.dim))
        T = np.zeros(M)
        qidx = self._cell_index(points)
        qorder = np.argsort(qidx, kind="stable")
        bounds = np.searchsorted(qidx[qorder], np.arange(self.ncell**self.dim + 1))
        for c in range(self.ncell**self.dim):
            sel = qorder[bounds[c] : bounds[c + 1]]
            if sel.size == 0:
                continue
            cell = np.array(np.unravel_index(c, (self.ncell,) * self.dim))
            nb = self._neighbors(cell)
            if nb.size == 0:
                continue
            W = k(points[sel, None, :] - self.X[None, nb, :])
            r_, u_, T_ = _fields_from_weight_matrix(W, V[nb], self.N)
            rho[sel], u[sel], T[sel] = r_, u_, T_
        return rho, u, T


def jump_weights(cfg: ParticleConfig, k: SmearingKernel, i: int, xi) -> np.ndarray:
    """p_{i,j}(xi) = phi(x_i + xi - x_j) / sum_k phi(x_i + xi - x_k)."""
    target = cfg.X[i] + np.asarray(xi, dtype=float)
    w = k(target - cfg.X)
    total = float(w.sum())
    if total <= 0.0:
        raise PreconditionError("jump_weights: zero smeared density at x_i + xi")
    return w / total


def density_on_grid(Y: np.ndarray, k: SmearingKernel, n: int, chunk: int = 256) -> np.ndarray:
    """rho(x) = N^-1 sum_j phi(x - y_j) on the periodic grid -1/2 + m/n, exact at nodes.

    Scatters each particle's kernel onto the nodes inside its support.
    """
    N, d = Y.shape
    h = 1.0 / n
    K = int(math.ceil(k.support_radius / h)) + 1
    offs = np.array(np.meshgrid(*([np.arange(-K, K + 1)] * d), indexing="ij")).reshape(d, -1).T
    R = k.support_radius
    # offsets that can reach the support from any base node
    offs = offs[np.linalg.norm(offs, axis=1) * h <= R + h * math.sqrt(d)]
    # wide kernels wrap around the torus: visit every node once, with the minimal image
    wraps = R + 2 * h * math.sqrt(d) >= 0.5
    if wraps:
        offs = np.array(np.meshgrid(*([np.arange(n)] * d), indexing="ij")).reshape(d, -1).T
    out = np.zeros(n**d)
    for s in range(0, N, chunk):
        Yc = Y[s : s + chunk]
        base = np.floor((Yc + 0.5) / h).astype(np.int64)
        nodes = base[:, None, :] + offs[None, :, :]  # (c, S, d)
        disp = (nodes * h - 0.5) - Yc[:, None, :]
        if wraps:
            disp = torus_wrap(disp)
        r2 = np.einsum("csk,csk->cs", disp, disp)
        keep = r2 < R * R
        vals = k.radial(np.sqrt(r2[keep]))
        flat = np.ravel_multi_index(tuple((nodes[keep] % n).T), (n,) * d)
        out += np.bincount(flat, weights=vals, minlength=n**d)
    return out.reshape((n,) * d) / N


def box_counts(Y: np.ndarray, r: float) -> np.ndarray:
    """Particle counts in the partition of the torus into boxes of side r."""
    m = int(round(1.0 / r))
    c = np.clip(np.floor((Y + 0.5) * m).astype(np.int64), 0, m - 1)
    idx = np.ravel_multi_index(tuple(c.T), (m,) * Y.shape[1])
    return np.bincount(idx, minlength=m ** Y.shape[1]).reshape((m,) * Y.shape[1])


@dataclass(frozen=True)
class GoodSetReport:
    in_BA: bool
    in_G1: bool
    in_GMp: dict
    A: float
    A_phi: float
    M: dict
    r: float
    min_density: float
    lipschitz_slack: float
    in_BA_certified: bool

    @property
    def in_G(self) -> bool:
        return self.in_G1 and self.in_BA


def density_floor_constant(C2: float, horizon: float) -> float:
    """A = C2 e^-T / 4."""
    return C2 * math.exp(-horizon) / 4.0


def displacement_tolerance(A: float, r: float, k: SmearingKernel) -> float:
    """A_phi = A r^d phi0 / (2 sup|grad phi|)."""
    return A * r**k.dim * k.phi0 / (2.0 * k.grad_bound)


def good_set_report(
    z: ParticleConfig,
    sigma: ParticleConfig,
    k: SmearingKernel,
    r: float,
    horizon_T: float,
    C2: float,
    p: int | Sequence[int] = 4,
    M: float | Sequence[float] = 1.0,
) -> GoodSetReport:
    if z.N != sigma.N or z.dim != sigma.dim:
        raise InvalidInputError("z and sigma must have the same N and d")
    ps = [p] if np.isscalar(p) else list(p)
    Ms = [M] * len(ps) if np.isscalar(M) else list(M)
    A = density_floor_constant(C2, horizon_T)
    A_phi = displacement_tolerance(A, r, k)
    n = int(round(4.0 / r))
    rho = density_on_grid(sigma.X, k, n)
    thr = A * r**k.dim * k.phi0
    min_rho = float(rho.min())
    slack = k.grad_bound * (1.0 / n) * math.sqrt(k.dim) / 2.0
    disp = float(np.mean(torus_norm(z.X - sigma.X)))
    wnorm = np.linalg.norm(sigma.V, axis=1)
    in_gm = {}
    for pp, MM in zip(ps, Ms):
        in_gm[int(pp)] = bool(np.mean(wnorm**pp) <= MM)
    return GoodSetReport(
        in_BA=min_rho > thr,
        in_G1=disp <= A_phi,
        in_GMp=in_gm,
        A=A,
        A_phi=A_phi,
        M=dict(zip((int(q) for q in ps), Ms)),
        r=r,
        min_density=min_rho,
        lipschitz_slack=slack,
        in_BA_certified=min_rho - slack > thr,
    )
