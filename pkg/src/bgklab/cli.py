"""Command-line entry point: ``bgk <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import RunConfig, constants_report, manifest_json, run_chaos_sweep, run_cutoff_sweep
from .kinetic_solver import solve, state_from_law, write_checkpoint
from .particle_system import TrajectoryRecorder, sample_initial, simulate
from .rng import stream
from .torus_kernel import InvalidInputError, NoScaleError, compute_partition_scale, kernel_build

log = logging.getLogger("bgklab")


def _out(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_chaos(args) -> int:
    cfg = RunConfig.from_file(args.config)
    out = _out(args, cfg)
    res = run_chaos_sweep(cfg, out, direct_w2=not args.no_direct)
    for eps, fit in res.fits.items():
        print(f"eps={eps:g}: slope log I_N vs log N = {fit['slope']:.3f} [{fit['slope_ci_low']:.3f}, {fit['slope_ci_high']:.3f}]")
    return 0


def cmd_cutoff(args) -> int:
    cfg = RunConfig.from_file(args.config)
    out = _out(args, cfg)
    res = run_cutoff_sweep(cfg, out)
    for eps, w in zip(res.eps, res.w2sq):
        print(f"eps={eps:g}: W2^2(f, g) = {w:.4g}")
    print(f"slope log W2^2 vs log eps = {res.fit['slope']:.3f}")
    return 0


def cmd_constants(args) -> int:
    k = kernel_build(args.epsilon, args.dim)
    try:
        r = compute_partition_scale(k)
    except NoScaleError:
        print(f"no admissible partition scale for eps={args.epsilon}", file=sys.stderr)
        return 2
    rep = constants_report(k, r, args.horizon, args.C2, M=args.M)
    out = rep.to_dict()
    if args.N is not None:
        out["N"] = args.N
        out["regime"] = "inside proven regime (N > N_phi)" if rep.regime_ok([args.N]) else "outside proven regime (N <= N_phi)"
    print(json.dumps(out, indent=2))
    return 0


def cmd_solve(args) -> int:
    cfg = RunConfig.from_file(args.config)
    out = _out(args, cfg)
    law = cfg.law()
    k = None if args.true_bgk else kernel_build(cfg.epsilon_list[0], cfg.dim)
    res = solve(state_from_law(cfg.grid(), law), k, cfg.t_end, cfg.dt, C2=law.C2)
    (out / "fields.csv").write_text(res.fields.to_csv())
    b = res.bounds
    rows = ["t,min_rho,min_rho_phi,min_T,mass,energy"]
    for n, t in enumerate(b.times):
        rows.append(",".join(repr(float(q)) for q in (t, b.min_rho[n], b.min_rho_phi[n], b.min_T[n], b.mass[n], b.energy[n])))
    (out / "bounds.csv").write_text("\n".join(rows) + "\n")
    write_checkpoint(res.state, out / "state.bin")
    kspec = None if k is None else json.loads(k.to_json())
    (out / "manifest.json").write_text(manifest_json(cfg, mode="true" if k is None else "regularized", kernel=kspec))
    print(f"density floor ok: {b.density_floor_ok()}; min T = {min(b.min_T):.4g}")
    return 0


def cmd_simulate(args) -> int:
    cfg = RunConfig.from_file(args.config)
    out = _out(args, cfg)
    law = cfg.law()
    N, eps = int(cfg.N_list[0]), float(cfg.epsilon_list[0])
    k = kernel_build(eps, cfg.dim)
    rec = TrajectoryRecorder(sorted(set(cfg.snapshot_times)), keep_full=args.full)
    cfg0 = sample_initial(law, N, stream(cfg.seed, 0, 0))
    final = simulate(cfg0, k, cfg.t_end, stream(cfg.seed, 0, 1), rec)
    (out / "trajectory.csv").write_text(rec.summary_csv())
    if args.full:
        (out / "configs.csv").write_text(rec.full_csv())
    (out / "final.csv").write_text(final.to_csv())
    (out / "manifest.json").write_text(manifest_json(cfg, N=N, epsilon=eps, t_end=cfg.t_end, kernel=json.loads(k.to_json()), jumps=rec.n_jumps))
    print(f"{rec.n_jumps} jumps; mean |v|^2 at t_end = {float(np.mean(np.sum(final.V**2, axis=1))):.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bgk", description="Particle approximation of the BGK equation.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (
        ("chaos-sweep", cmd_chaos, "coupled-replica sweep over N"),
        ("cutoff-sweep", cmd_cutoff, "regularized vs true BGK over epsilon"),
        ("solve", cmd_solve, "run the grid solver once"),
        ("simulate", cmd_simulate, "run the N-particle process once"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.set_defaults(func=fn)
        if name == "chaos-sweep":
            sp.add_argument("--no-direct", action="store_true", help="skip the direct W2 estimate")
        if name == "solve":
            sp.add_argument("--true-bgk", action="store_true", help="unsmeared relaxation fields")
        if name == "simulate":
            sp.add_argument("--full", action="store_true", help="also write every particle at each snapshot")

    sp = sub.add_parser("constants", help="kernel constants, A, A_phi, Gamma_phi, N_phi")
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--horizon", type=float, default=0.5)
    sp.add_argument("--C2", type=float, default=0.5)
    sp.add_argument("--M", type=float, default=float("nan"), help="moment cap to report")
    sp.add_argument("--N", type=int, help="particle number to check against N_phi")
    sp.set_defaults(func=cmd_constants)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InvalidInputError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"bgk: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
