"""Convergence experiments: constants, empirical W2, N-sweeps and cutoff sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sstats
from scipy.optimize import linear_sum_assignment

from . import __version__
from .coupling import GoodSetParams, simulate_coupled
from .empirical_fields import ParticleConfig, good_set_report
from .kinetic_solver import PhaseGrid, SolveResult, default_vmax, solve, state_from_law
from .particle_system import InitialLaw
from .rng import stream
from .torus_kernel import InvalidInputError, NoScaleError, SmearingKernel, compute_partition_scale, kernel_build, torus_wrap

log = logging.getLogger(__name__)

MAX_W2_POINTS = 4096


# ---------------------------------------------------------------- constants


@dataclass(frozen=True)
class ConstantsReport:
    phi0: float
    grad_bound: float
    r: float
    A: float
    A_phi: float
    M: float
    Gamma_phi: float
    N_phi: float

    def regime_ok(self, n_values) -> bool:
        """True when every N in the sweep exceeds N_phi."""
        return min(n_values) > self.N_phi

    def to_dict(self) -> dict:
        """Plain dict; NaN (e.g. an unset moment cap) becomes None so the JSON stays strict."""
        return {key: (None if isinstance(val, float) and math.isnan(val) else val) for key, val in dataclasses.asdict(self).items()}


def constants_report(
    k: SmearingKernel, r: float, horizon: float, C2: float, M: float = float("nan"), dim: int | None = None
) -> ConstantsReport:
    d = k.dim if dim is None else dim
    phi0, grad = k.phi0, k.grad_bound
    gamma = (phi0**3 + grad**2) / (r ** (5 * d) * phi0**2)
    n_phi = phi0**4 / r ** (6 * d) + grad**8 / (r ** (5 * d) * phi0**2) ** 4
    A = C2 * math.exp(-horizon) / 4.0
    A_phi = A * r**d * phi0 / (2.0 * grad)
    return ConstantsReport(phi0, grad, r, A, A_phi, M, gamma, n_phi)


# ---------------------------------------------------------------- empirical W2


def phase_cost_matrix(a: np.ndarray, b: np.ndarray, dim: int) -> np.ndarray:
    """Squared ground cost: torus distance^2 on positions + Euclidean^2 on velocities."""
    dx = torus_wrap(a[:, None, :dim] - b[None, :, :dim])
    dv = a[:, None, dim:] - b[None, :, dim:]
    return np.einsum("ijk,ijk->ij", dx, dx) + np.einsum("ijk,ijk->ij", dv, dv)


def empirical_w2(cloud_a, cloud_b, dim: int | None = None) -> float:
    """Squared W2 between two equal-weight clouds of (x, v) points, by exact assignment.

    Rows are points laid out as (x_1..x_d, v_1..v_d).
    """
    a = np.atleast_2d(np.asarray(cloud_a, dtype=float))
    b = np.atleast_2d(np.asarray(cloud_b, dtype=float))
    if a.shape != b.shape:
        raise InvalidInputError(f"cloud shapes differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n > MAX_W2_POINTS:
        raise InvalidInputError(f"{n} points exceeds the {MAX_W2_POINTS}-point limit; subsample the clouds first")
    d = a.shape[1] // 2 if dim is None else dim
    C = phase_cost_matrix(a, b, d)
    rows, cols = linear_sum_assignment(C)
    return float(C[rows, cols].sum() / n)


def bootstrap_w2(cloud_a, cloud_b, n_boot: int, rng: np.random.Generator, dim: int | None = None) -> np.ndarray:
    """W2^2 estimates on paired bootstrap resamples (same indices for both clouds)."""
    a = np.asarray(cloud_a)
    n = a.shape[0]
    out = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(n, size=n)
        out[b] = empirical_w2(a[idx], np.asarray(cloud_b)[idx], dim)
    return out


# ---------------------------------------------------------------- sampling grid solutions


def sample_grid_uniforms(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Uniforms for ``sample_grid_solution``: 2 per phase coordinate (cell, jitter)."""
    return rng.random((n, 4 * dim))


def sample_grid_solution(values: np.ndarray, grid: PhaseGrid, U: np.ndarray) -> np.ndarray:
    """Draw points from a grid density by sequential inverse transforms.

    Each phase coordinate is drawn from its conditional law given the earlier
    ones (x_1, ..., x_d, v_1, ..., v_d), then jittered uniformly inside the
    cell. Feeding the same uniforms to two nearby densities yields nearby
    samples, which keeps W2 comparisons between solutions low-variance.
    """
    d = grid.dim
    P = np.clip(values, 0.0, None)
    n = U.shape[0]
    naxes = 2 * d
    # partial marginals: marg[k] has the first k+1 axes
    marg = [None] * naxes
    acc = P
    for k in range(naxes - 1, -1, -1):
        marg[k] = acc
        acc = acc.sum(axis=-1)
    idx = np.zeros((n, 0), dtype=np.int64)
    for k in range(naxes):
        rows = marg[k][tuple(idx.T)] if k else np.broadcast_to(marg[0], (n, marg[0].shape[0]))
        cdf = np.cumsum(rows, axis=1)
        cdf /= cdf[:, -1:]
        choice = (cdf < U[:, k : k + 1]).sum(axis=1)
        choice = np.minimum(choice, rows.shape[1] - 1)
        idx = np.concatenate([idx, choice[:, None]], axis=1)
    pts = np.empty((n, naxes))
    jit = U[:, naxes : 2 * naxes] - 0.5
    pts[:, :d] = torus_wrap(grid.x[idx[:, :d]] + jit[:, :d] * grid.dx)
    pts[:, d:] = grid.v[idx[:, d:]] + jit[:, d:] * grid.dv
    return pts


# ---------------------------------------------------------------- configs


@dataclass
class RunConfig:
    dim: int = 2
    N_list: list = field(default_factory=lambda: [64, 128, 256, 512])
    epsilon_list: list = field(default_factory=lambda: [0.25])
    t_end: float = 0.5
    snapshot_times: list = field(default_factory=lambda: [0.0, 0.125, 0.25, 0.375, 0.5])
    replicas: int = 32
    seed: int = 1
    nx: int = 32
    nv: int = 32
    vmax: float | None = None
    dt: float = 0.01
    initial_law: dict = field(default_factory=lambda: {"a": 0.5, "T0": 1.0})
    output_dir: str = "results"
    w2_points: int = 1024
    w2_repeats: int = 4
    good_set_stats: bool = True
    diagonal: list = field(default_factory=list)

    def __post_init__(self):
        if not self.N_list or not self.epsilon_list or not self.snapshot_times:
            raise InvalidInputError("N_list, epsilon_list and snapshot_times must be nonempty")
        if not self.t_end >= 0:
            raise InvalidInputError("t_end must be >= 0")
        if self.replicas < 2:
            raise InvalidInputError("replicas must be >= 2")
        if any(s < 0 or s > self.t_end + 1e-12 for s in self.snapshot_times):
            raise InvalidInputError("snapshot times must lie in [0, t_end]")

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> RunConfig:
        return cls.from_json(Path(path).read_text())

    def law(self) -> InitialLaw:
        kw = dict(self.initial_law)
        kw.setdefault("u0", tuple([0.0] * self.dim))
        kw["u0"] = tuple(kw["u0"])
        return InitialLaw(dim=self.dim, **kw)

    def grid(self) -> PhaseGrid:
        vmax = self.vmax if self.vmax is not None else default_vmax(self.law())
        return PhaseGrid(self.nx, self.nv, vmax, self.dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_resolved(eps: float, grid: PhaseGrid):
    if eps < 4 * grid.dx:
        raise InvalidInputError(f"epsilon {eps} is below 4 dx = {4 * grid.dx}; refine nx")


def manifest_json(cfg: RunConfig, **extra) -> str:
    return json.dumps({"code_version": __version__, "config": cfg.to_dict(), **extra}, indent=2, sort_keys=True)


def fit_loglog(x, y) -> dict:
    """Least-squares slope of log y against log x with a 95% interval."""
    x = np.log(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or not np.all(y > 0):
        return {"slope": float("nan"), "intercept": float("nan"), "slope_ci_low": float("nan"), "slope_ci_high": float("nan")}
    y = np.log(y)
    if len(x) == 2:
        s = (y[1] - y[0]) / (x[1] - x[0])
        return {"slope": float(s), "intercept": float(y[0] - s * x[0]), "slope_ci_low": float("nan"), "slope_ci_high": float("nan")}
    fit = sstats.linregress(x, y)
    q = sstats.t.ppf(0.975, len(x) - 2)
    return {
        "slope": float(fit.slope),
        "intercept": float(fit.intercept),
        "slope_ci_low": float(fit.slope - q * fit.stderr),
        "slope_ci_high": float(fit.slope + q * fit.stderr),
    }



def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(c)) if isinstance(c, (float, np.floating)) else c for c in row])


def moment_cap(res: SolveResult, p: int = 4) -> float:
    """M = 2 max_t int |v|^p g(t): the cap used for the moment good set."""
    g = res.state.grid
    vals = []
    s = res.state
    v2 = sum(g.velocity_axis_array(k) ** 2 for k in range(g.dim))
    vals.append(float((s.values * v2 ** (p / 2)).sum() * g.cell_volume))
    for st in res.states:
        vals.append(float((st.values * v2 ** (p / 2)).sum() * g.cell_volume))
    return 2.0 * max(vals)


# ---------------------------------------------------------------- chaos sweep


@dataclass
class ChaosResult:
    cells: dict  # (N, eps) -> CouplingStats
    direct_w2: dict  # (N, eps) -> DirectW2
    fits: dict  # eps -> fit dict


def run_chaos_sweep(cfg: RunConfig, out_dir: str | Path | None = None, direct_w2: bool = True) -> ChaosResult:
    """For each epsilon solve g once, then run coupled replicas for every N.

    Writes one directory per (N, eps) cell (manifest.json, in_series.csv,
    fields.csv) and a top-level summary.csv with the log-log fits.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    law = cfg.law()
    grid = cfg.grid()
    cells, direct, fits = {}, {}, {}
    summary_rows = []
    for eps in cfg.epsilon_list:
        _check_resolved(eps, grid)
        k = kernel_build(eps, cfg.dim)
        try:
            r = compute_partition_scale(k)
        except NoScaleError:
            r = float("nan")
        t0 = time.perf_counter()
        res = solve(state_from_law(grid, law), k, cfg.t_end, cfg.dt, C2=law.C2, keep_states_at=cfg.snapshot_times)
        log.info("solved regularized BGK eps=%g in %.1fs", eps, time.perf_counter() - t0)
        M4 = moment_cap(res, 4)
        consts = constants_report(k, r, cfg.t_end, law.C2, M=M4)
        gparams = GoodSetParams(r, cfg.t_end, law.C2, M4) if cfg.good_set_stats and np.isfinite(r) else None
        states_at = {round(s.t, 9): s for s in res.states}
        for N in cfg.N_list:
            t0 = time.perf_counter()
            run = simulate_coupled(law, N, k, res.fields, cfg.t_end, cfg.snapshot_times, cfg.replicas, cfg.seed, gparams)
            st = run.stats
            cells[(N, eps)] = st
            cell = out / f"N{N}_eps{eps:g}"
            cell.mkdir(exist_ok=True)
            regime = "inside proven regime (N > N_phi)" if consts.regime_ok([N]) else "outside proven regime (N <= N_phi)"
            (cell / "manifest.json").write_text(
                manifest_json(cfg, N=N, epsilon=eps, kernel=json.loads(k.to_json()), constants=consts.to_dict(), regime=regime)
            )
            (cell / "in_series.csv").write_text(st.to_csv())
            (cell / "fields.csv").write_text(res.fields.to_csv())
            if direct_w2:
                dw = DirectW2(*_direct_w2(run.snapshots, states_at, grid, cfg, N))
                direct[(N, eps)] = dw
                _write_csv(
                    cell / "w2_direct.csv",
                    ["t", "W2sq_raw", "W2sq_raw_stderr", "W2sq_null", "W2sq_null_stderr", "W2sq_debiased", "IN_mean", "IN_stderr"],
                    zip(st.times, dw.raw, dw.raw_stderr, dw.null, dw.null_stderr, dw.debiased, st.IN_mean, st.IN_stderr),
                )
            log.info("N=%d eps=%g: I_N(t_end)=%.4g +- %.2g (%.1fs)", N, eps, st.IN_mean[-1], st.IN_stderr[-1], time.perf_counter() - t0)
        ns = [n for n in cfg.N_list]
        fit = fit_loglog(ns, [cells[(n, eps)].IN_mean[-1] for n in ns])
        fits[eps] = fit
        for n in ns:
            st = cells[(n, eps)]
            summary_rows.append(
                (n, eps, cfg.t_end, st.IN_mean[-1], st.IN_stderr[-1], fit["slope"], fit["slope_ci_low"], fit["slope_ci_high"],
                 "inside proven regime (N > N_phi)" if consts.regime_ok(cfg.N_list) else "outside proven regime (N <= N_phi)")
            )
    _write_csv(
        out / "summary.csv",
        ["N", "eps", "t", "IN_mean", "IN_stderr", "slope_logIN_logN", "slope_ci_low", "slope_ci_high", "regime"],
        summary_rows,
    )
    return ChaosResult(cells, direct, fits)


def _direct_w2(snapshots, states_at, grid, cfg: RunConfig, N: int):
    """Direct W2^2(f_1^N(t), g(t)) from pooled Z_N particles vs i.i.d. draws from the grid g(t).

    Returns (times, raw, raw stderr, null, null stderr). ``null`` is W2^2 between
    two independent n-point draws from g(t): the finite-sample floor of the
    raw estimate, subtracted to give the debiased value.
    """
    n = min(cfg.w2_points, N * len(snapshots))
    times = [cc.t for cc in snapshots[0]]
    raw, raw_se, null, null_se = [], [], [], []
    for ti, t in enumerate(times):
        st = states_at.get(round(t, 9))
        if st is None:
            for lst in (raw, raw_se, null, null_se):
                lst.append(float("nan"))
            continue
        pool = np.concatenate([np.hstack([rep[ti].z.X, rep[ti].z.V]) for rep in snapshots])
        a, b = [], []
        for m in range(cfg.w2_repeats):
            rng = stream(cfg.seed, 1_000_003, N, ti, m)
            sub = pool[rng.choice(pool.shape[0], size=n, replace=False)]
            g1 = sample_grid_solution(st.values, grid, sample_grid_uniforms(rng, n, grid.dim))
            g2 = sample_grid_solution(st.values, grid, sample_grid_uniforms(rng, n, grid.dim))
            a.append(empirical_w2(sub, g1, grid.dim))
            b.append(empirical_w2(g2, g1, grid.dim))
        for vals, mean, se in ((a, raw, raw_se), (b, null, null_se)):
            vals = np.asarray(vals)
            mean.append(float(vals.mean()))
            se.append(float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan"))
    return times, np.asarray(raw), np.asarray(raw_se), np.asarray(null), np.asarray(null_se)


@dataclass
class DirectW2:
    times: np.ndarray
    raw: np.ndarray
    raw_stderr: np.ndarray
    null: np.ndarray
    null_stderr: np.ndarray

    @property
    def debiased(self) -> np.ndarray:
        return self.raw - self.null

    @property
    def debiased_stderr(self) -> np.ndarray:
        return np.hypot(self.raw_stderr, self.null_stderr)


# ---------------------------------------------------------------- cutoff sweep


@dataclass
class CutoffResult:
    eps: list
    w2sq: np.ndarray
    w2sq_stderr: np.ndarray
    fit: dict
    diagonal: list = field(default_factory=list)


def paired_w2(values_a, values_b, grid: PhaseGrid, n: int, repeats: int, seed: int, key: int = 0):
    """W2^2 between two grid solutions from ``repeats`` independent draws of n points each.

    Both clouds of one repeat use the same uniforms.
    """
    vals = []
    for m in range(repeats):
        U = sample_grid_uniforms(stream(seed, 2_000_003, key, m), n, grid.dim)
        a = sample_grid_solution(values_a, grid, U)
        b = sample_grid_solution(values_b, grid, U)
        vals.append(empirical_w2(a, b, grid.dim))
    vals = np.asarray(vals)
    se = float(vals.std(ddof=1) / math.sqrt(repeats)) if repeats > 1 else float("nan")
    return float(vals.mean()), se


def run_cutoff_sweep(cfg: RunConfig, out_dir: str | Path | None = None) -> CutoffResult:
    """W2(f(t_end), g_eps(t_end))^2 for each epsilon, with a log-log fit against epsilon."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    law = cfg.law()
    grid = cfg.grid()
    s0 = state_from_law(grid, law)
    t0 = time.perf_counter()
    f_res = solve(s0, None, cfg.t_end, cfg.dt, C2=law.C2)
    log.info("solved true BGK in %.1fs", time.perf_counter() - t0)
    w2s, ses = [], []
    g_results = {}
    for n_eps, eps in enumerate(cfg.epsilon_list):
        _check_resolved(eps, grid)
        k = kernel_build(eps, cfg.dim)
        g_res = solve(s0, k, cfg.t_end, cfg.dt, C2=law.C2)
        g_results[eps] = g_res
        w, se = paired_w2(f_res.state.values, g_res.state.values, grid, cfg.w2_points, cfg.w2_repeats, cfg.seed, n_eps)
        w2s.append(w)
        ses.append(se)
        cell = out / f"cutoff_eps{eps:g}"
        cell.mkdir(exist_ok=True)
        (cell / "manifest.json").write_text(manifest_json(cfg, epsilon=eps, kernel=json.loads(k.to_json())))
        (cell / "fields.csv").write_text(g_res.fields.to_csv())
        log.info("eps=%g: W2^2(f, g) = %.4g +- %.2g", eps, w, se)
    (out / "true_bgk_fields.csv").write_text(f_res.fields.to_csv())
    fit = fit_loglog(cfg.epsilon_list, w2s)
    rows = [(eps, cfg.t_end, w, se, fit["slope"], fit["slope_ci_low"], fit["slope_ci_high"]) for eps, w, se in zip(cfg.epsilon_list, w2s, ses)]
    _write_csv(out / "summary.csv", ["eps", "t", "W2sq_f_g", "W2sq_stderr", "slope_logW2sq_logeps", "slope_ci_low", "slope_ci_high"], rows)
    diag = []
    for N, eps in cfg.diagonal:
        diag.append(_diagonal_cell(cfg, law, grid, int(N), float(eps), f_res, g_results, out))
    if diag:
        _write_csv(
            out / "diagonal.csv",
            ["N", "eps", "t", "W2_fN_f", "sqrt_IN", "W2_g_f", "triangle_bound"],
            [(d["N"], d["eps"], cfg.t_end, d["W2_fN_f"], d["sqrt_IN"], d["W2_g_f"], d["bound"]) for d in diag],
        )
    return CutoffResult(list(cfg.epsilon_list), np.asarray(w2s), np.asarray(ses), fit, diag)


def _diagonal_cell(cfg, law, grid, N, eps, f_res, g_results, out):
    """W2(f_1^N, f) against sqrt(I_N) + W2(g, f) at t_end."""
    _check_resolved(eps, grid)
    k = kernel_build(eps, cfg.dim)
    g_res = g_results.get(eps) or solve(state_from_law(grid, law), k, cfg.t_end, cfg.dt)
    run = simulate_coupled(law, N, k, g_res.fields, cfg.t_end, [cfg.t_end], cfg.replicas, cfg.seed)
    pool = np.concatenate([np.hstack([rep[-1].z.X, rep[-1].z.V]) for rep in run.snapshots])
    n = min(cfg.w2_points, pool.shape[0])
    vals = []
    for m in range(cfg.w2_repeats):
        rng = stream(cfg.seed, 3_000_017, N, m)
        sub = pool[rng.choice(pool.shape[0], size=n, replace=False)]
        f_pts = sample_grid_solution(f_res.state.values, grid, sample_grid_uniforms(rng, n, grid.dim))
        vals.append(empirical_w2(sub, f_pts, grid.dim))
    w_fN_f = math.sqrt(float(np.mean(vals)))
    w_gf = math.sqrt(paired_w2(f_res.state.values, g_res.state.values, grid, cfg.w2_points, cfg.w2_repeats, cfg.seed, 99)[0])
    sq = math.sqrt(float(run.stats.IN_mean[-1]))
    return {"N": N, "eps": eps, "W2_fN_f": w_fN_f, "sqrt_IN": sq, "W2_g_f": w_gf, "bound": sq + w_gf}


# ---------------------------------------------------------------- good-set statistics


@dataclass
class GoodSetFrequency:
    N: list
    bad: list  # counts of configurations outside B_A
    samples: int
    fit: dict

    @property
    def frequency(self) -> np.ndarray:
        return np.asarray(self.bad, dtype=float) / self.samples

    @property
    def corrected_frequency(self) -> np.ndarray:
        """(k + 1/2) / (S + 1): finite on the log scale when a count is zero."""
        return (np.asarray(self.bad, dtype=float) + 0.5) / (self.samples + 1)


def good_set_frequencies(
    values: np.ndarray,
    grid: PhaseGrid,
    k: SmearingKernel,
    r: float,
    horizon: float,
    C2: float,
    N_list,
    samples: int,
    seed: int,
) -> GoodSetFrequency:
    """Frequency of configurations outside B_A among i.i.d. draws of N positions from a grid density."""
    bad = []
    for N in N_list:
        count = 0
        for s in range(samples):
            pts = sample_grid_solution(values, grid, sample_grid_uniforms(stream(seed, 4_000_037, N, s), N, grid.dim))
            cfg = ParticleConfig(pts[:, : grid.dim], pts[:, grid.dim :])
            count += not good_set_report(cfg, cfg, k, r, horizon, C2).in_BA
        bad.append(count)
    corrected = (np.asarray(bad, dtype=float) + 0.5) / (samples + 1)
    return GoodSetFrequency(list(N_list), bad, samples, fit_loglog(N_list, corrected))
