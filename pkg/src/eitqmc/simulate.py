"""Synthetic electrode data: fine-mesh forward solves plus seeded Gaussian noise."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .bayes import MeasurementSet
from .cem import CemSystem, observation_operator, pattern_matrix
from .field import BasisSpec, eval_field
from .mesh import ElectrodeConfig, build_disk_mesh

INVERSE_CRIME_RATIO = 1.5


class InverseCrimeWarning(UserWarning):
    """Simulation and inversion meshes are too close in resolution."""


@dataclass(frozen=True)
class GroundTruth:
    """Target conductivity: a parametric field draw or a disk inclusion.

    kind "parametric": y is given directly or drawn as U(-1/2, 1/2)^s from
    ``seed``; ``spec`` is the basis. kind "inclusion": background 1 plus
    ``contrast`` on the disk of ``inclusion_radius`` about ``center``.
    """

    kind: str
    spec: BasisSpec | None = None
    y: tuple[float, ...] | None = None
    seed: int | None = None
    center: tuple[float, float] = (-4.0, -5.0)
    inclusion_radius: float = 3.0
    contrast: float = 0.2
    domain_radius: float = 14.0

    def __post_init__(self):
        if self.kind == "parametric":
            if self.spec is None:
                raise ValueError("parametric truth needs a BasisSpec")
            if self.y is None:
                if self.seed is None:
                    raise ValueError("parametric truth needs y or a seed")
                y = np.random.default_rng(self.seed).random(self.spec.dimension) - 0.5
                object.__setattr__(self, "y", tuple(float(v) for v in y))
            y = tuple(float(v) for v in self.y)
            if len(y) != self.spec.dimension or any(abs(v) > 0.5 for v in y):
                raise ValueError("y must have one entry per basis function, each in [-1/2, 1/2]")
            object.__setattr__(self, "y", y)
        elif self.kind == "inclusion":
            if not self.contrast > -1:
                raise ValueError(f"contrast must exceed -1, got {self.contrast}")
            if not self.inclusion_radius > 0:
                raise ValueError("inclusion radius must be positive")
            if math.hypot(*self.center) + self.inclusion_radius > self.domain_radius:
                raise ValueError(
                    f"inclusion of radius {self.inclusion_radius} at {self.center} "
                    f"leaves the disk of radius {self.domain_radius}"
                )
        else:
            raise ValueError(f"unknown truth kind {self.kind!r}")

    @classmethod
    def inclusion(cls, center=(-4.0, -5.0), radius=3.0, contrast=0.2, domain_radius=14.0):
        return cls("inclusion", center=tuple(center), inclusion_radius=radius,
                   contrast=contrast, domain_radius=domain_radius)

    @classmethod
    def parametric(cls, spec: BasisSpec, seed: int | None = None, y=None):
        return cls("parametric", spec=spec, seed=seed, y=None if y is None else tuple(y),
                   domain_radius=spec.radius)

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if self.kind == "parametric":
            return eval_field(self.spec, np.array(self.y), pts)
        d = np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1])
        return 1.0 + self.contrast * (d <= self.inclusion_radius)

    def describe(self) -> dict:
        if self.kind == "parametric":
            return {"truth": "parametric", "truth_seed": self.seed,
                    "truth_y": ",".join(repr(v) for v in self.y)}
        return {"truth": "inclusion", "truth_center": f"{self.center[0]!r},{self.center[1]!r}",
                "truth_radius": self.inclusion_radius, "truth_contrast": self.contrast}


@dataclass(frozen=True)
class NoiseModel:
    """i.i.d. N(0, gamma0) noise on every voltage entry, drawn from PCG64(seed).

    ``covariance_scale`` is the gamma_0 recorded for the likelihood; it
    defaults to ``gamma0`` and must be set explicitly for noise-free data.
    """

    gamma0: float
    seed: int
    covariance_scale: float | None = None

    def __post_init__(self):
        if not self.gamma0 >= 0:
            raise ValueError(f"noise variance must be non-negative, got {self.gamma0}")
        scale = self.gamma0 if self.covariance_scale is None else self.covariance_scale
        if not scale > 0:
            raise ValueError("likelihood covariance scale must be positive; set covariance_scale for noise-free data")

    @property
    def likelihood_scale(self) -> float:
        return self.gamma0 if self.covariance_scale is None else self.covariance_scale

    def sample(self, shape) -> np.ndarray:
        return math.sqrt(self.gamma0) * np.random.default_rng(self.seed).standard_normal(shape)


def simulate_measurements(
    truth: GroundTruth,
    fine_h: float,
    electrodes: ElectrodeConfig,
    patterns,
    noise: NoiseModel,
    radius: float = 14.0,
    inversion_h: float | None = None,
    mesh=None,
) -> MeasurementSet:
    """Noisy voltages for ``truth`` on a mesh of width ``fine_h``.

    The truth is sampled at triangle centroids. When ``inversion_h`` is
    given and ``inversion_h / fine_h < 1.5`` an ``InverseCrimeWarning`` is
    issued and recorded in the metadata. ``mesh`` overrides the generated
    fine mesh.
    """
    if truth.kind == "inclusion" and math.hypot(*truth.center) + truth.inclusion_radius > radius:
        raise ValueError("inclusion lies outside the domain")
    mesh = build_disk_mesh(radius, fine_h, electrodes) if mesh is None else mesh
    meta = dict(truth.describe())
    meta.update(fine_h=fine_h, fine_vertices=mesh.n_vertices, noise_gamma0=noise.gamma0, noise_seed=noise.seed)
    if inversion_h is not None:
        meta["inversion_h"] = inversion_h
        if inversion_h / fine_h < INVERSE_CRIME_RATIO:
            msg = f"inversion mesh width {inversion_h} is within a factor {INVERSE_CRIME_RATIO} of the simulation width {fine_h}"
            warnings.warn(msg, InverseCrimeWarning, stacklevel=2)
            meta["inverse_crime_warning"] = msg
    system = CemSystem(mesh, electrodes)
    currents = pattern_matrix(patterns)
    clean = observation_operator(system, truth(system.centroids), None, currents)
    delta = clean + noise.sample(clean.shape)
    cov = noise.likelihood_scale * np.eye(electrodes.n_electrodes)
    return MeasurementSet(delta, currents, cov, electrodes, radius, meta)


def truth_field_on_grid(truth: GroundTruth, grid) -> np.ndarray:
    """Exact target conductivity at grid points (an EvaluationGrid or (G, 2) array).

    The inclusion formula is evaluated wherever asked; a parametric truth
    rejects points outside its disk.
    """
    pts = grid.points if hasattr(grid, "points") else np.asarray(grid, dtype=float).reshape(-1, 2)
    return truth(pts)
