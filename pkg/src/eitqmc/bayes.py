"""Gaussian likelihood, ratio estimator for the posterior mean, credible margins.

The posterior mean of the conductivity at a point x is the ratio

    a_hat(x) = Z'(x) / Z,   Z'(x) = E[a(x, y) L(y)],   Z = E[L(y)],

of two prior expectations over the parameter box, with L the Gaussian
likelihood of the observed electrode voltages. Both expectations are
estimated on the same node set (randomly shifted lattice or i.i.d. points),
one forward solve per node.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from numba import njit

from .cem import CemSystem, pattern_matrix
from .field import BasisSpec, check_points, field_bounds, field_batch
from .mesh import ElectrodeConfig
from .qmc import LatticeRule, ShiftSet, lattice_points, to_parameter_box

CHEBYSHEV_FACTOR = 4.47214  # sqrt(1 / 0.05) to six digits
DEFAULT_CHUNK = 512


class EstimationError(RuntimeError):
    """Forward failure at a node, or a degenerate weight sum."""

    def __init__(self, message: str, node: int | None = None, shift: int | None = None):
        super().__init__(message)
        self.node = node
        self.shift = shift


def thread_count() -> int:
    """Worker threads for forward sweeps, from ``EIT_THREADS`` (default 1)."""
    raw = os.environ.get("EIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"EIT_THREADS must be an integer, got {raw!r}") from None


# -- measurements ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Noisy voltages ``delta`` (M x P) for P current patterns.

    ``covariance`` is the M x M noise covariance of each pattern's voltage
    vector; patterns are independent, so the full covariance is block
    diagonal.
    """

    delta: np.ndarray
    patterns: np.ndarray
    covariance: np.ndarray
    electrodes: ElectrodeConfig
    radius: float = 14.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        delta = np.array(self.delta, dtype=float)
        pats = pattern_matrix(self.patterns)
        cov = np.array(self.covariance, dtype=float)
        m = self.electrodes.n_electrodes
        if delta.ndim != 2 or delta.shape[0] != m:
            raise ValueError(f"delta must have {m} rows, got shape {delta.shape}")
        if pats.shape != delta.shape:
            raise ValueError(f"{delta.shape[1]} measurement columns but patterns have shape {pats.shape}")
        if cov.shape != (m, m) or not np.array_equal(cov, cov.T):
            raise ValueError("covariance must be a symmetric M x M matrix")
        eig = np.linalg.eigvalsh(cov)
        if not eig[0] > 0:
            raise ValueError(f"covariance is not positive definite (smallest eigenvalue {eig[0]!r})")
        chol = np.linalg.cholesky(cov)
        whiten = np.linalg.solve(chol, np.eye(m))
        for name, arr in [("delta", delta), ("patterns", pats), ("covariance", cov), ("_whiten", whiten)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "mu_min", float(eig[0]))

    @property
    def n_patterns(self) -> int:
        return self.delta.shape[1]

    @property
    def gamma_scale(self) -> float | None:
        """gamma_0 when the covariance is gamma_0 * I, else None."""
        c = self.covariance[0, 0]
        return float(c) if np.array_equal(self.covariance, c * np.eye(len(self.covariance))) else None

    def with_delta(self, delta: np.ndarray) -> "MeasurementSet":
        return MeasurementSet(delta, self.patterns, self.covariance, self.electrodes, self.radius, dict(self.metadata))

    def with_covariance(self, covariance: np.ndarray) -> "MeasurementSet":
        return MeasurementSet(self.delta, self.patterns, covariance, self.electrodes, self.radius, dict(self.metadata))


def write_measurements(data: MeasurementSet, path: str | Path) -> None:
    """CSV with ``# key = value`` metadata lines, a header row, one column per pattern."""
    lines = []
    scale = data.gamma_scale
    if scale is not None:
        lines.append(f"# gamma_scale = {scale!r}")
    else:
        lines.append("# covariance = " + ",".join(repr(float(v)) for v in data.covariance.ravel()))
    e = data.electrodes
    lines.append(f"# radius = {data.radius!r}")
    lines.append(f"# electrodes = {e.n_electrodes}")
    lines.append(f"# width = {e.width!r}")
    lines.append("# contact_impedances = " + ",".join(repr(float(v)) for v in e.contact_impedances))
    for p in data.patterns.T:
        lines.append("# pattern = " + ",".join(repr(float(v)) for v in p))
    for key in sorted(data.metadata):
        lines.append(f"# meta.{key} = {data.metadata[key]}")
    lines.append("electrode," + ",".join(f"p{k + 1}" for k in range(data.n_patterns)))
    for m, row in enumerate(data.delta):
        lines.append(f"{m + 1}," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_measurements(path: str | Path) -> MeasurementSet:
    meta: dict[str, str] = {}
    extra: dict[str, str] = {}
    patterns, rows = [], []
    text = Path(path).read_text().splitlines()
    header_seen = False
    for lineno, raw in enumerate(text, 1):
        line = raw.strip()
        if not line:
            continue
        try:
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                key, value = key.strip(), value.strip()
                if key == "pattern":
                    patterns.append([float(v) for v in value.split(",")])
                elif key.startswith("meta."):
                    extra[key[5:]] = value
                else:
                    meta[key] = value
            elif not header_seen:
                header_seen = True
            else:
                rows.append([float(v) for v in line.split(",")[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    try:
        m = int(meta["electrodes"])
        z = tuple(float(v) for v in meta["contact_impedances"].split(","))
        electrodes = ElectrodeConfig(m, float(meta["width"]), z)
        if "gamma_scale" in meta:
            cov = float(meta["gamma_scale"]) * np.eye(m)
        else:
            cov = np.array([float(v) for v in meta["covariance"].split(",")]).reshape(m, m)
        radius = float(meta["radius"])
    except KeyError as exc:
        raise ValueError(f"{path}: missing metadata key {exc}") from None
    return MeasurementSet(np.array(rows), np.array(patterns).T, cov, electrodes, radius, extra)


# -- forward model and likelihood ----------------------------------------------


class ForwardModel:
    """Parameter vectors to electrode voltages on a fixed mesh.

    The conductivity enters the stiffness matrix through its values at the
    triangle centroids, so the basis is tabulated there once.
    """

    def __init__(self, system: CemSystem, spec: BasisSpec, patterns, chunk: int = DEFAULT_CHUNK):
        self.system = system
        self.spec = spec
        self.currents = pattern_matrix(patterns)
        self.psi = np.ascontiguousarray(spec.psi(system.centroids))
        self.chunk = int(chunk)
        system.symbolic  # build before any worker thread needs it

    def __call__(self, y) -> np.ndarray:
        """Voltages (M, P) for one parameter vector."""
        return self.observe(np.atleast_2d(y))[0]

    def observe(self, ys: np.ndarray, threads: int | None = None) -> np.ndarray:
        """Voltages (B, M, P) for a stack of parameter vectors.

        Chunks may run on worker threads; each writes its own slice of the
        output, so the result does not depend on the thread count.
        """
        ys = np.ascontiguousarray(ys, dtype=float)
        out = np.empty((len(ys), self.system.n_electrodes, self.currents.shape[1]))
        bounds = [(i, min(i + self.chunk, len(ys))) for i in range(0, len(ys), self.chunk)]

        def work(b):
            lo, hi = b
            cond = field_batch(ys[lo:hi], self.psi)
            out[lo:hi] = self.system.observe_batch(cond, self.currents)

        threads = thread_count() if threads is None else threads
        if threads > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(threads) as pool:
                list(pool.map(work, bounds))
        else:
            for b in bounds:
                work(b)
        return out


@njit(cache=True, nogil=True)
def _misfit(obs, delta, whiten, out):
    """out[b] = -1/2 sum_p |W (delta_p - obs[b, :, p])|^2 in a fixed order."""
    nb, m, p = obs.shape
    r = np.empty(m)
    for b in range(nb):
        acc = 0.0
        for c in range(p):
            for i in range(m):
                r[i] = delta[i, c] - obs[b, i, c]
            for i in range(m):
                v = 0.0
                for j in range(i + 1):
                    v += whiten[i, j] * r[j]
                acc += v * v
        out[b] = -0.5 * acc
    return out


def log_likelihood_batch(observations: np.ndarray, data: MeasurementSet) -> np.ndarray:
    """Log-likelihood for each (M, P) slice of a (B, M, P) stack of predicted voltages."""
    obs = np.ascontiguousarray(observations, dtype=float)
    return _misfit(obs, data.delta, data._whiten, np.empty(len(obs)))


def log_likelihood(y, data: MeasurementSet, forward: Callable) -> float:
    """-1/2 sum_p (delta_p - O_p(y))^T Gamma^{-1} (delta_p - O_p(y))."""
    obs = np.asarray(forward(y), dtype=float)
    return float(log_likelihood_batch(obs[None], data)[0])


# -- node designs -------------------------------------------------------------------


@dataclass(frozen=True)
class MonteCarloDesign:
    """``trials`` independent sets of ``n`` i.i.d. uniform points in the box."""

    n: int
    trials: int
    seed: int


def node_sets(design, shifts, s: int) -> Iterator[np.ndarray]:
    """Per-shift (or per-trial) node arrays of shape (n, s) in the box.

    ``shifts`` is a ShiftSet or an (R, s') array of shifts with s' >= s.
    """
    if isinstance(design, LatticeRule):
        if design.s < s:
            raise ValueError(f"lattice has dimension {design.s} < {s}")
        if shifts is None:
            raise ValueError("a lattice design needs a ShiftSet")
        rule = LatticeRule(design.n, design.z[:s])
        arr = shifts.shifts if isinstance(shifts, ShiftSet) else np.atleast_2d(np.asarray(shifts, dtype=float))
        for shift in arr:
            yield to_parameter_box(lattice_points(rule, shift[:s]))
    elif isinstance(design, MonteCarloDesign):
        rng = np.random.default_rng(design.seed)
        for _ in range(design.trials):
            yield rng.random((design.n, s)) - 0.5
    else:
        raise TypeError(f"unknown design {type(design).__name__}")


# -- evaluation grid ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EvaluationGrid:
    """Cell centres of a ``resolution`` x ``resolution`` grid on the bounding square, kept inside the disk."""

    radius: float
    resolution: int = 128

    def __post_init__(self):
        if self.resolution < 1 or not self.radius > 0:
            raise ValueError("grid needs resolution >= 1 and radius > 0")
        h = 2 * self.radius / self.resolution
        c = -self.radius + h * (np.arange(self.resolution) + 0.5)
        # row 0 is the top of the image (largest x2)
        x1, x2 = np.meshgrid(c, c[::-1])
        mask = np.hypot(x1, x2) <= self.radius
        pts = np.column_stack([x1[mask], x2[mask]])
        mask.setflags(write=False)
        pts.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


# -- estimator ------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _weighted_moments(w, values, s1, c1, s2, c2, sw, cw):
    """Neumaier-compensated running sums of w, w*a and w*a^2 over rows of values."""
    nb, ng = values.shape
    for b in range(nb):
        wb = w[b]
        t = sw[0] + wb
        if abs(sw[0]) >= abs(wb):
            cw[0] += (sw[0] - t) + wb
        else:
            cw[0] += (wb - t) + sw[0]
        sw[0] = t
        for g in range(ng):
            a = values[b, g]
            v = wb * a
            t = s1[g] + v
            if abs(s1[g]) >= abs(v):
                c1[g] += (s1[g] - t) + v
            else:
                c1[g] += (v - t) + s1[g]
            s1[g] = t
            v = v * a
            t = s2[g] + v
            if abs(s2[g]) >= abs(v):
                c2[g] += (s2[g] - t) + v
            else:
                c2[g] += (v - t) + s2[g]
            s2[g] = t


@dataclass(frozen=True, eq=False)
class PosteriorEstimate:
    """Posterior mean, variance and credible margin of the conductivity on a grid.

    ``per_shift_mean[r]`` is the single-shift ratio Z'/Z; ``log_z[r]`` is the
    log of the shift's normalizing-constant estimate Z including the stabilizing
    offset; ``max_loglik[r]`` is that offset.
    """

    grid: np.ndarray
    mean_field: np.ndarray
    variance_field: np.ndarray
    credible_margin: np.ndarray
    per_shift_mean: np.ndarray
    per_shift_variance: np.ndarray
    log_z: np.ndarray
    max_loglik: np.ndarray
    effective_nodes: np.ndarray
    clamp_count: int
    n: int


def credible_margin(variance) -> np.ndarray:
    """Chebyshev half-width 4.47214 * sqrt(variance) of a conservative 95% envelope."""
    v = np.asarray(variance, dtype=float)
    if np.any(v < 0):
        raise ValueError("variance must be non-negative")
    return CHEBYSHEV_FACTOR * np.sqrt(v)


def ratio_estimate(
    design,
    shifts: ShiftSet | None,
    data: MeasurementSet | None,
    spec: BasisSpec,
    grid,
    forward: ForwardModel | None = None,
    *,
    flat_likelihood: bool = False,
    log_scale: float = 0.0,
    field_values: Callable | None = None,
    chunk: int = 4096,
) -> PosteriorEstimate:
    """Ratio estimator of the posterior-mean conductivity at the grid points.

    Parameters
    ----------
    design : LatticeRule (with ``shifts``) or MonteCarloDesign.
    data : measurements; ignored when ``flat_likelihood`` is set.
    grid : EvaluationGrid or an (G, 2) array of points in the disk.
    forward : maps parameter stacks to voltages; built by the caller so the
        mesh and its symbolic factorization are shared across calls.
    flat_likelihood : replace the likelihood by 1, so the estimate reduces to
        the prior mean of the field.
    log_scale : constant added to every log-likelihood, i.e. the likelihood
        multiplied by exp(log_scale). It only enters ``log_z``; the stabilized
        weights exp(loglik - max loglik) do not see it, so the estimate is
        unchanged bit for bit.
    field_values : optional replacement for the field, mapping (B, s) nodes to
        (B, G) values; used to plug in test integrands.

    Notes
    -----
    Per shift, the log-likelihood is computed at every node first, then the
    weights w = exp(loglik - max) and the sums of w, w a, w a^2 are accumulated
    in node order. Per-shift variance is E[a^2 w]/E[w] - (E[a w]/E[w])^2; the
    pooled variance is the average over shifts, clamped at zero.
    """
    pts = grid.points if isinstance(grid, EvaluationGrid) else check_points(spec, grid)
    psi = np.ascontiguousarray(spec.psi(pts))
    if not flat_likelihood and (data is None or forward is None):
        raise ValueError("data and forward model are required unless the likelihood is flat")
    means, variances, log_z, lmax, ess = [], [], [], [], []
    n_nodes = None
    for r, nodes in enumerate(node_sets(design, shifts, spec.dimension)):
        n_nodes = len(nodes)
        if flat_likelihood:
            ll = np.zeros(len(nodes))
        else:
            try:
                obs = forward.observe(nodes)
            except Exception as exc:
                node = _failing_node(forward, nodes)
                raise EstimationError(f"forward solve failed at node {node}, shift {r}: {exc}", node, r) from exc
            ll = log_likelihood_batch(obs, data)
            if not np.all(np.isfinite(ll)):
                k = int(np.flatnonzero(~np.isfinite(ll))[0])
                raise EstimationError(f"non-finite log-likelihood at node {k}, shift {r}", k, r)
        m = float(np.max(ll))
        w = np.exp(ll - m)
        g = len(pts)
        s1, c1, s2, c2 = (np.zeros(g) for _ in range(4))
        sw, cw = np.zeros(1), np.zeros(1)
        for lo in range(0, len(nodes), chunk):
            hi = min(lo + chunk, len(nodes))
            vals = field_values(nodes[lo:hi]) if field_values else field_batch(nodes[lo:hi], psi)
            _weighted_moments(w[lo:hi], np.ascontiguousarray(vals, dtype=float), s1, c1, s2, c2, sw, cw)
        z = sw[0] + cw[0]
        if not z > 0:
            raise EstimationError(f"stabilized weights sum to {z!r} in shift {r}", None, r)
        mean = (s1 + c1) / z
        second = (s2 + c2) / z
        means.append(mean)
        variances.append(second - mean * mean)
        log_z.append(log_scale + m + math.log(z / len(nodes)))
        lmax.append(m)
        ess.append(z * z / float(np.sum(w * w)))
    means = np.array(means)
    variances = np.array(variances)
    pooled_var = np.mean(variances, axis=0)
    clamp = int(np.count_nonzero(pooled_var < 0))
    pooled_var = np.maximum(pooled_var, 0.0)
    return PosteriorEstimate(
        grid=np.asarray(pts),
        mean_field=np.mean(means, axis=0),
        variance_field=pooled_var,
        credible_margin=credible_margin(pooled_var),
        per_shift_mean=means,
        per_shift_variance=variances,
        log_z=np.array(log_z),
        max_loglik=np.array(lmax),
        effective_nodes=np.array(ess),
        clamp_count=clamp,
        n=int(n_nodes),
    )


def _failing_node(forward: ForwardModel, nodes: np.ndarray) -> int | None:
    for k, y in enumerate(nodes):
        try:
            forward.observe(y[None], threads=1)
        except Exception:
            return k
    return None


def posterior_variance(*args, **kwargs) -> np.ndarray:
    """Pointwise posterior variance; same inputs as ``ratio_estimate``."""
    return ratio_estimate(*args, **kwargs).variance_field


def check_bounds(estimate: PosteriorEstimate, spec: BasisSpec, rtol: float = 1e-12) -> bool:
    """Whether every per-shift mean lies in [a_min, a_max]."""
    lo, hi = field_bounds(spec)
    f = estimate.per_shift_mean
    return bool(np.all(f >= lo * (1 - rtol)) and np.all(f <= hi * (1 + rtol)))


# -- output ------------------------------------------------------------------------------


def write_estimate_csv(est: PosteriorEstimate, path: str | Path) -> None:
    rows = ["x,y,mean,variance,margin"]
    cols = (est.grid[:, 0], est.grid[:, 1], est.mean_field, est.variance_field, est.credible_margin)
    for row in zip(*(np.asarray(c, dtype=float).tolist() for c in cols)):
        rows.append(",".join(repr(v) for v in row))
    Path(path).write_text("\n".join(rows) + "\n")


def write_pgm(values: np.ndarray, grid: EvaluationGrid, path: str | Path,
              value_range: tuple[float, float] | None = None) -> tuple[float, float]:
    """Plain (P2) graymap of grid values.

    Gray level 1 + round(254 * (v - lo) / (hi - lo)) inside the disk, 0
    outside; ``lo`` and ``hi`` default to the data range and are written to
    the header as a comment. Returns (lo, hi).
    """
    values = np.asarray(values, dtype=float)
    lo, hi = value_range if value_range else (float(values.min()), float(values.max()))
    span = hi - lo if hi > lo else 1.0
    img = np.zeros(grid.mask.shape, dtype=int)
    img[grid.mask] = 1 + np.rint(254 * np.clip((values - lo) / span, 0, 1)).astype(int)
    lines = ["P2", f"# range {lo!r} {hi!r}", "# gray = 1 + round(254 * (v - lo) / (hi - lo)); 0 outside the disk",
             f"{img.shape[1]} {img.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in img]
    Path(path).write_text("\n".join(lines) + "\n")
    return lo, hi
