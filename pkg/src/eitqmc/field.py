"""Log-sine parametric conductivity on the disk.

    a(x, y) = exp( sum_j y_j psi_j(x) ),
    psi_j(x) = amplitude / (k_j^2 + l_j^2)^theta * sin(pi k_j x_1 / R) * sin(pi l_j x_2 / R)

with (k_j, l_j) running over N x N in order of decreasing coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    """Truncated sine basis: ``dimension`` terms, decay exponent ``theta``."""

    theta: float
    dimension: int
    radius: float = 14.0
    amplitude: float = 5.0

    def __post_init__(self):
        if not self.theta > 1:
            raise FieldError(f"theta must exceed 1, got {self.theta}")
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise FieldError(f"dimension must be a positive integer, got {self.dimension}")
        if not self.radius > 0:
            raise FieldError(f"radius must be positive, got {self.radius}")
        if not self.amplitude > 0:
            raise FieldError(f"amplitude must be positive, got {self.amplitude}")

    @cached_property
    def _basis(self) -> tuple[np.ndarray, np.ndarray]:
        pairs, weights = enumerate_basis(self)
        return pairs, weights

    @property
    def pairs(self) -> np.ndarray:
        return self._basis[0]

    @property
    def weights(self) -> np.ndarray:
        """Sup norms of the basis functions, non-increasing."""
        return self._basis[1]

    def psi(self, points: np.ndarray) -> np.ndarray:
        """Basis functions at the points, shape (dimension, len(points))."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        k = self.pairs[:, 0:1]
        l = self.pairs[:, 1:2]
        w = math.pi / self.radius
        return (
            self.weights[:, None]
            * np.sin(w * k * pts[None, :, 0])
            * np.sin(w * l * pts[None, :, 1])
        )


def enumerate_basis(spec: BasisSpec) -> tuple[np.ndarray, np.ndarray]:
    """First ``spec.dimension`` index pairs and their coefficients.

    Pairs are sorted by decreasing ``amplitude / (k^2 + l^2)^theta``; ties go
    to the smaller ``k + l``, then the smaller ``k``. Every sine product
    reaches 1 in absolute value inside the disk (at x = (R/2k, R/2l)), so the
    coefficient is the exact sup norm over the domain.
    """
    s = int(spec.dimension)
    # the s pairs (1, 1..s) have k^2 + l^2 <= 1 + s^2 < any pair with max(k, l) > s
    kmax = s + 1
    k, l = np.meshgrid(np.arange(1, kmax + 1), np.arange(1, kmax + 1), indexing="ij")
    k, l = k.ravel(), l.ravel()
    order = np.lexsort((k, k + l, k * k + l * l))[:s]
    pairs = np.column_stack([k[order], l[order]])
    weights = spec.amplitude / (pairs[:, 0] ** 2 + pairs[:, 1] ** 2).astype(float) ** spec.theta
    pairs.setflags(write=False)
    weights.setflags(write=False)
    return pairs, weights


def check_params(spec: BasisSpec, y) -> np.ndarray:
    """Validate a parameter vector (or stack of vectors) against the box."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != spec.dimension:
        raise FieldError(f"expected {spec.dimension} parameters, got {y.shape[-1]}")
    if np.any(np.abs(y) > 0.5) or not np.all(np.isfinite(y)):
        raise FieldError("parameters must lie in [-1/2, 1/2]")
    return y


def check_points(spec: BasisSpec, points, tol: float = 1e-9) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    r = np.hypot(pts[:, 0], pts[:, 1])
    outside = r > spec.radius * (1 + tol)
    if outside.any():
        p = pts[np.flatnonzero(outside)[0]].tolist()
        raise FieldError(f"point {p} lies outside the disk of radius {spec.radius}")
    return pts


def eval_field(spec: BasisSpec, y, points) -> np.ndarray:
    """Conductivity exp(sum_j y_j psi_j(x)) at each point."""
    y = check_params(spec, y)
    pts = check_points(spec, points)
    return np.exp(y @ spec.psi(pts))


def field_bounds(spec: BasisSpec | None) -> tuple[float, float]:
    """(a_min, a_max) valid for every y in the closed parameter box."""
    if spec is None:
        return 1.0, 1.0
    a_max = math.exp(0.5 * math.fsum(spec.weights))
    return 1.0 / a_max, a_max


@njit(cache=True, nogil=True)
def exp_linear(y, psi, out):
    """out[b, g] = exp(sum_j y[b, j] * psi[j, g]) in a fixed summation order."""
    nb, s = y.shape
    ng = psi.shape[1]
    for b in range(nb):
        for g in range(ng):
            acc = 0.0
            for j in range(s):
                acc += y[b, j] * psi[j, g]
            out[b, g] = np.exp(acc)
    return out


def field_batch(y: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Field values for a stack of parameters given precomputed ``psi``."""
    y = np.ascontiguousarray(y, dtype=float)
    out = np.empty((len(y), psi.shape[1]))
    return exp_linear(y, np.ascontiguousarray(psi), out)


def write_params(y, path) -> None:
    """One-line CSV of a parameter vector."""
    with open(path, "w") as fh:
        fh.write(",".join(repr(float(v)) for v in np.asarray(y).ravel()) + "\n")


def read_params(path) -> np.ndarray:
    with open(path) as fh:
        line = fh.readline().strip()
    return np.array([float(v) for v in line.split(",")])
