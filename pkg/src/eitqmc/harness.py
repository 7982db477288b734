"""Convergence studies of the ratio estimator: RMS error against n for QMC and MC."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bayes import ForwardModel, MeasurementSet, MonteCarloDesign, ratio_estimate
from .field import BasisSpec
from .qmc import ShiftSet, load_generating_vector

DESK_LEVELS = tuple(range(10, 15))
FULL_LEVELS = tuple(range(10, 21))


class LevelError(RuntimeError):
    """Estimation failed at one level of a study."""

    def __init__(self, message: str, level: int):
        super().__init__(message)
        self.level = level


def rms_error(per_shift_fields) -> float:
    """Spread of single-shift estimates about their mean.

    sqrt( 1/(R(R-1)) * sum_r' max_x |mean_r f_r(x) - f_r'(x)|^2 ), with the
    sup over the domain replaced by the max over the grid.
    """
    f = np.asarray(per_shift_fields, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    R = len(f)
    if R < 2:
        raise ValueError(f"need at least 2 shifts, got {R}")
    mean = f.mean(axis=0)
    sup = np.max(np.abs(mean[None, :] - f), axis=1)
    return math.sqrt(math.fsum((sup * sup).tolist()) / (R * (R - 1)))


def rate_fit(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares line through (log2 n, log2 rms); returns (slope, 2**intercept)."""
    pts = [(float(n), float(r)) for n, r in points]
    if len({n for n, _ in pts}) < 2:
        raise ValueError("rate fit needs at least two distinct n")
    if any(n <= 0 or r <= 0 for n, r in pts):
        raise ValueError("rate fit needs positive n and rms")
    x = [math.log2(n) for n, _ in pts]
    y = [math.log2(r) for _, r in pts]
    k = len(pts)
    mx, my = math.fsum(x) / k, math.fsum(y) / k
    sxx = math.fsum((a - mx) ** 2 for a in x)
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    slope = sxy / sxx
    return slope, 2.0 ** (my - slope * mx)


@dataclass
class ConvergenceStudy:
    method: str
    levels: tuple[int, ...]
    shifts: int
    rms: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    rate: float = float("nan")
    constant: float = float("nan")

    @property
    def n_values(self) -> list[int]:
        return [2**m for m in self.levels]

    def write(self, out: str | Path) -> list[Path]:
        """Write rms.csv (n, rms), fit.txt and timing.txt.

        Returns the deterministic files; wall-clock times go to the separate
        ``timing.txt`` log so reruns give byte-identical CSV.
        """
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        rms = out / "rms.csv"
        rms.write_text("n,rms\n" + "".join(f"{n},{r!r}\n" for n, r in zip(self.n_values, self.rms)))
        (out / "timing.txt").write_text(
            "".join(f"n {n} seconds {s:.3f}\n" for n, s in zip(self.n_values, self.seconds)))
        fit = out / "fit.txt"
        fit.write_text(f"method {self.method}\nrate {self.rate!r}\nconstant {self.constant!r}\n")
        return [rms, fit]


def run_convergence(
    data: MeasurementSet,
    spec: BasisSpec,
    forward: ForwardModel,
    grid,
    method: str = "qmc",
    levels: Sequence[int] = DESK_LEVELS,
    shifts: int = 16,
    seed: int = 0,
    vector: str = "embedded",
    progress=None,
) -> ConvergenceStudy:
    """RMS error of the ratio estimator at n = 2^level for each level.

    QMC uses the first s components of the generating vector with R shifts
    drawn from ``seed``; MC uses R independent i.i.d. samples seeded by
    (seed, level). Every level computes fresh estimates.
    """
    if method not in ("qmc", "mc"):
        raise ValueError(f"method must be 'qmc' or 'mc', got {method!r}")
    study = ConvergenceStudy(method, tuple(int(m) for m in levels), int(shifts))
    s = spec.dimension
    for m in study.levels:
        n = 2**m
        t0 = time.perf_counter()
        try:
            if method == "qmc":
                rule = load_generating_vector(vector, s, n)
                est = ratio_estimate(rule, ShiftSet(shifts, s, seed), data, spec, grid, forward)
            else:
                design = MonteCarloDesign(n, shifts, (seed, m))
                est = ratio_estimate(design, None, data, spec, grid, forward)
        except Exception as exc:
            raise LevelError(f"level {m} (n = {n}): {exc}", m) from exc
        study.rms.append(rms_error(est.per_shift_mean))
        study.seconds.append(time.perf_counter() - t0)
        if progress:
            progress(method, n, study.rms[-1], study.seconds[-1])
    if len(study.levels) >= 2 and all(r > 0 for r in study.rms):
        study.rate, study.constant = rate_fit(list(zip(study.n_values, study.rms)))
    return study


def write_gnuplot(studies: dict[str, str], path: str | Path, title: str = "RMS error") -> Path:
    """Gnuplot script plotting each study's rms.csv with its least-squares fit.

    ``studies`` maps a label to the rms.csv path relative to the script.
    """
    lines = [
        "set datafile separator ','",
        "set logscale xy 2",
        "set xlabel 'n'",
        "set ylabel 'R.M.S. error'",
        f"set title '{title}'",
        "set key top right",
    ]
    plots = []
    for i, (label, csv) in enumerate(studies.items()):
        lines.append(f"f{i}(x) = c{i} * x**r{i}")
        lines.append(f"c{i} = 1; r{i} = -0.5")
        lines.append(f"fit log(f{i}(x)) '{csv}' every ::1 using 1:(log($2)) via c{i}, r{i}")
        plots.append(f"'{csv}' every ::1 using 1:2 with points title '{label}'")
        plots.append(f"f{i}(x) with lines title sprintf('{label} fit %.4g n^{{%.3f}}', c{i}, r{i})")
    lines.append("plot " + ", \\\n     ".join(plots))
    p = Path(path)
    p.write_text("\n".join(lines) + "\n")
    return p
