"""Command-line entry point ``eit``.

Exit status: 0 success, 2 usage error, 3 configuration or input
validation error, 4 numerical failure, 1 anything else. Failures print one
line ``eit: error[<category>]: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import (
    EstimationError,
    EvaluationGrid,
    ForwardModel,
    MonteCarloDesign,
    read_measurements,
    ratio_estimate,
    write_estimate_csv,
    write_measurements,
    write_pgm,
)
from .cem import CemError, CemSystem, reference_patterns
from .cholesky import NotPositiveDefinite
from .config import ConfigError, RunConfig, parse_config, validate, with_seed, write_config
from .field import BasisSpec, FieldError
from .harness import FULL_LEVELS, LevelError, run_convergence, write_gnuplot
from .mesh import ElectrodeConfig, MeshError, build_disk_mesh, write_mesh
from .qmc import IntegrandError, LatticeError, ShiftSet, cbc_construct, load_generating_vector, pod_weights, write_generating_vector
from .simulate import GroundTruth, NoiseModel, simulate_measurements, truth_field_on_grid

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4

_NUMERIC = (CemError, NotPositiveDefinite, EstimationError, LevelError, IntegrandError,
            ArithmeticError, FloatingPointError)
_CONFIG = (ConfigError, MeshError, FieldError, LatticeError, ValueError, FileNotFoundError)


class Outputs:
    """Tracks files written by a command and records them in ``manifest.txt``."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def add(self, p: Path) -> None:
        self.files.append(Path(p))

    def write_manifest(self) -> Path:
        lines = []
        for p in sorted(set(self.files)):
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            lines.append(f"{digest}  {p.relative_to(self.root).as_posix()}")
        m = self.root / "manifest.txt"
        m.write_text("\n".join(lines) + "\n")
        return m


def _load_config(args, require=()) -> RunConfig:
    cfg = parse_config(args.config, require) if args.config else validate(RunConfig(), require)
    if getattr(args, "seed", None) is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def _electrodes(cfg: RunConfig) -> ElectrodeConfig:
    return ElectrodeConfig(cfg.electrodes, cfg.width, cfg.impedances)


def _spec(cfg: RunConfig) -> BasisSpec:
    return BasisSpec(cfg.theta, cfg.dimension, cfg.radius, cfg.amplitude)


def _truth(cfg: RunConfig) -> GroundTruth:
    if cfg.truth == "inclusion":
        return GroundTruth.inclusion(cfg.inclusion_center, cfg.inclusion_radius, cfg.inclusion_contrast, cfg.radius)
    return GroundTruth.parametric(_spec(cfg), seed=cfg.truth_seed)


def _inversion_setup(cfg: RunConfig, measurements: str | None):
    path = measurements or cfg.measurements
    if not path:
        raise ConfigError(["measurements path is required for this command"])
    data = read_measurements(path)
    spec = _spec(cfg)
    if abs(data.radius - spec.radius) > 0:
        raise ConfigError([f"measurement radius {data.radius} differs from config radius {spec.radius}"])
    mesh = build_disk_mesh(data.radius, cfg.coarse_h, data.electrodes)
    forward = ForwardModel(CemSystem(mesh, data.electrodes), spec, data.patterns)
    return data, spec, forward


def cmd_mesh(args) -> int:
    z = args.z if args.z is not None else 0.005
    electrodes = ElectrodeConfig.uniform(args.electrodes, args.width, z)
    mesh = build_disk_mesh(args.radius, args.h, electrodes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mesh(mesh, out)
    print(f"{out}: {mesh.n_vertices} vertices, {len(mesh.triangles)} triangles, h = {mesh.mesh_width_h:.4f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Outputs(Path(args.out))
    electrodes = _electrodes(cfg)
    truth = _truth(cfg)
    data = simulate_measurements(
        truth, cfg.fine_h, electrodes, reference_patterns(cfg.electrodes),
        NoiseModel(cfg.noise_gamma, cfg.noise_seed), cfg.radius, inversion_h=cfg.coarse_h,
    )
    data.metadata["experiment"] = cfg.experiment
    write_measurements(data, out.path("measurements.csv"))
    grid = EvaluationGrid(cfg.radius, cfg.grid)
    write_pgm(truth_field_on_grid(truth, grid), grid, out.path("truth.pgm"))
    out.path("config.cfg").write_text(write_config(replace(cfg, measurements="measurements.csv")))
    meta = "".join(f"{k} = {v}\n" for k, v in sorted(data.metadata.items()))
    out.path("metadata.txt").write_text(write_config(cfg) + meta)
    out.write_manifest()
    print(f"wrote {out.root / 'measurements.csv'}")
    return EXIT_OK


def cmd_invert(args) -> int:
    cfg = _load_config(args)
    if args.n is not None:
        cfg = replace(cfg, log2_n=args.n)
    if args.shifts is not None:
        cfg = replace(cfg, shifts=args.shifts)
    if args.grid is not None:
        cfg = replace(cfg, grid=args.grid)
    method = args.method or (cfg.method if cfg.method != "both" else "qmc")
    validate(cfg)
    data, spec, forward = _inversion_setup(cfg, args.measurements)
    grid = EvaluationGrid(data.radius, cfg.grid)
    n = 2**cfg.log2_n
    if method == "qmc":
        rule = load_generating_vector(cfg.vector, spec.dimension, n)
        est = ratio_estimate(rule, ShiftSet(cfg.shifts, spec.dimension, cfg.shift_seed), data, spec, grid, forward)
    else:
        est = ratio_estimate(MonteCarloDesign(n, cfg.shifts, cfg.shift_seed), None, data, spec, grid, forward)
    out = Outputs(Path(args.out))
    write_estimate_csv(est, out.path("posterior.csv"))
    lo, hi = write_pgm(est.mean_field, grid, out.path("mean.pgm"))
    mlo, mhi = write_pgm(est.credible_margin, grid, out.path("margin.pgm"))
    diag = [
        f"method {method}", f"n {n}", f"shifts {cfg.shifts}",
        f"mean_range {lo!r} {hi!r}", f"margin_range {mlo!r} {mhi!r}",
        f"variance_clamped {est.clamp_count}",
    ]
    diag += [f"shift {r} log_z {float(lz)!r} max_loglik {float(m)!r} effective_nodes {float(e)!r}"
             for r, (lz, m, e) in enumerate(zip(est.log_z, est.max_loglik, est.effective_nodes))]
    out.path("diagnostics.txt").write_text("\n".join(diag) + "\n")
    out.path("config.cfg").write_text(write_config(cfg))
    out.write_manifest()
    print(f"posterior mean in [{lo:.4f}, {hi:.4f}], max margin {mhi:.4f}")
    return EXIT_OK


def cmd_converge(args) -> int:
    cfg = _load_config(args)
    if args.levels is not None:
        cfg = replace(cfg, levels=args.levels)
    if args.full_scale:
        cfg = replace(cfg, levels=f"{FULL_LEVELS[0]}:{FULL_LEVELS[-1]}")
    if args.shifts is not None:
        cfg = replace(cfg, shifts=args.shifts)
    if args.method is not None:
        cfg = replace(cfg, method=args.method)
    if args.grid is not None:
        cfg = replace(cfg, grid=args.grid)
    validate(cfg)
    if cfg.shifts < 2:
        raise ConfigError(["a convergence study needs shifts >= 2"])
    data, spec, forward = _inversion_setup(cfg, args.measurements)
    grid = EvaluationGrid(data.radius, cfg.grid)
    out = Outputs(Path(args.out))
    methods = ["qmc", "mc"] if cfg.method == "both" else [cfg.method]
    plots = {}
    for method in methods:
        sub = out.root / method if len(methods) > 1 else out.root
        progress = None if args.quiet else (
            lambda m, n, r, t: print(f"{m} n={n} rms={r:.6g} ({t:.1f} s)", flush=True))
        study = run_convergence(data, spec, forward, grid, method, cfg.level_range, cfg.shifts,
                                cfg.shift_seed, cfg.vector, progress)
        for p in study.write(sub):
            out.add(p)
        plots[method.upper()] = (sub / "rms.csv").relative_to(out.root).as_posix()
        print(f"{method}: rate {study.rate:.4f}, constant {study.constant:.6g}")
    write_gnuplot(plots, out.path("figure3.gp"), title=cfg.experiment)
    out.path("config.cfg").write_text(write_config(cfg))
    out.write_manifest()
    return EXIT_OK


def cmd_cbc(args) -> int:
    cfg = _load_config(args)
    theta = args.theta if args.theta is not None else cfg.theta
    rho = BasisSpec(theta, args.s, cfg.radius, cfg.amplitude).weights
    weights = pod_weights(args.sigma, args.p, tuple(args.beta_scale * rho), eps=args.eps)
    rule, errors = cbc_construct(args.n, args.s, weights, return_errors=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_generating_vector(rule, out)
    print(f"{out}: n = {rule.n}, s = {rule.s}, lambda = {weights.lam:.6g}, "
          f"worst-case error {errors[-1] ** 0.5:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eit", description="Bayesian EIT with randomly shifted lattice rules.")
    ap.add_argument("--version", action="version", version=f"eit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="write a disk mesh with electrode tags")
    p.add_argument("--radius", type=float, default=14.0)
    p.add_argument("--electrodes", type=int, default=16)
    p.add_argument("--width", type=float, default=2.8)
    p.add_argument("--h", type=float, required=True)
    p.add_argument("--z", type=float, default=None, help="contact impedance (only validated)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    def common(p, seed=True):
        p.add_argument("--config", default=None)
        p.add_argument("--out", required=True)
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override every seed in the config")

    p = sub.add_parser("simulate", help="synthetic noisy measurements")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("invert", help="posterior mean and credible margins")
    common(p)
    p.add_argument("--measurements", default=None)
    p.add_argument("--n", type=int, default=None, help="log2 of the point count")
    p.add_argument("--shifts", type=int, default=None)
    p.add_argument("--method", choices=["qmc", "mc"], default=None)
    p.add_argument("--grid", type=int, default=None)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("converge", help="RMS error against n")
    common(p)
    p.add_argument("--measurements", default=None)
    p.add_argument("--levels", default=None, help="e.g. 10:14")
    p.add_argument("--shifts", type=int, default=None)
    p.add_argument("--method", choices=["qmc", "mc", "both"], default=None)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--full-scale", action="store_true", help="levels 10..20")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("cbc", help="CBC generating vector for POD weights")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--beta-scale", type=float, default=1.0, help="c in beta_j = c * rho_j")
    p.add_argument("--theta", type=float, default=None)
    p.set_defaults(func=cmd_cbc)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _NUMERIC as exc:
        category, code = "numerical", EXIT_NUMERIC
        err = exc
    except _CONFIG as exc:
        category, code = "config", EXIT_CONFIG
        err = exc
    except Exception as exc:  # noqa: BLE001
        category, code = "internal", EXIT_FAILURE
        err = exc
    msg = str(err).replace("\n", " ")
    print(f"eit: error[{category}]: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
