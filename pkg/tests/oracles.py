"""Independent reference computations shared by the test modules."""

import itertools
import math

import numpy as np

from bgklab.kinetic_solver import KineticState, PhaseGrid, solve


def gaussian_on_nodes(grid, u, T):
    """Continuous Maxwellian sampled at the velocity nodes, broadcast over space."""
    mesh = np.meshgrid(*([grid.v] * grid.dim), indexing="ij")
    r2 = sum((m - u[k]) ** 2 for k, m in enumerate(mesh))
    M = np.exp(-r2 / (2 * T)) / (2 * np.pi * T) ** (grid.dim / 2)
    return np.broadcast_to(M, grid.shape).copy()


def bimodal_state(grid, shift=1.5, T=0.5):
    """Spatially uniform two-beam velocity distribution with unit density."""
    u1 = np.zeros(grid.dim)
    u1[0] = shift
    return KineticState(grid, 0.5 * gaussian_on_nodes(grid, u1, T) + 0.5 * gaussian_on_nodes(grid, -u1, T))


def discrete_velocity_moments(grid, values):
    """(rho, u, T) of a spatially uniform state, by midpoint sums at one node."""
    f = values[(0,) * grid.dim]
    mesh = np.meshgrid(*([grid.v] * grid.dim), indexing="ij")
    dv = grid.dv**grid.dim
    rho = f.sum() * dv
    u = np.array([(f * m).sum() * dv / rho for m in mesh])
    T = sum(((m - u[k]) ** 2 * f).sum() for k, m in enumerate(mesh)) * dv / (rho * grid.dim)
    return rho, u, T


def homogeneous_error(dt, t_end=1.0, nx=8, nv=48, vmax=8.0):
    """Sup-norm distance to e^-t g0 + (1 - e^-t) rho M_{u,T} for the bimodal start."""
    grid = PhaseGrid(nx, nv, vmax, 2)
    s0 = bimodal_state(grid)
    rho, u, T = discrete_velocity_moments(grid, s0.values)
    res = solve(s0, None, t_end, dt)
    exact = math.exp(-t_end) * s0.values + (1 - math.exp(-t_end)) * rho * gaussian_on_nodes(grid, u, T)
    return float(np.max(np.abs(res.state.values - exact)))


def brute_force_w2(a, b, dim):
    """Exhaustive minimum over all permutations of the mean squared torus+velocity cost."""
    n = len(a)
    C = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            dx = a[i, :dim] - b[j, :dim]
            dx = dx - np.floor(dx + 0.5)
            dv = a[i, dim:] - b[j, dim:]
            C[i, j] = float(dx @ dx + dv @ dv)
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n
