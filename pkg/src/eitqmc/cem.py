"""Complete electrode model on P1 finite elements.

The unknowns are the nodal potentials and the electrode voltages. The
constant shared by both is fixed by requiring the electrode voltages to sum
to zero: the last voltage is eliminated as ``U_M = -sum(U_1..U_{M-1})``,
which keeps the reduced system symmetric positive definite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .cholesky import SymbolicCholesky, _scaled_solve_batch
from .mesh import ElectrodeConfig, Mesh

Conductivity = Union[Callable[[np.ndarray], np.ndarray], np.ndarray, float]


class CemError(RuntimeError):
    """Forward solve failure."""


class ConductivityError(CemError, ValueError):
    """Conductivity is not positive and finite at some quadrature point."""


@dataclass(frozen=True)
class CurrentPattern:
    """Net currents injected through the electrodes; they must sum to zero."""

    currents: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(v) for v in self.currents)
        scale = max(1.0, max(abs(v) for v in c))
        if abs(math.fsum(c)) > 1e-12 * scale:
            raise ValueError(f"currents must sum to zero, got sum {math.fsum(c)!r}")
        object.__setattr__(self, "currents", c)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.currents, dtype=dtype)

    def __len__(self):
        return len(self.currents)


def reference_patterns(n_electrodes: int) -> list[CurrentPattern]:
    """Patterns e_1 - e_{k+1}, k = 1..M-1: inject at electrode 1, drain at k+1."""
    patterns = []
    for k in range(1, n_electrodes):
        c = [0.0] * n_electrodes
        c[0], c[k] = 1.0, -1.0
        patterns.append(CurrentPattern(tuple(c)))
    return patterns


def pattern_matrix(patterns: Sequence[CurrentPattern] | np.ndarray) -> np.ndarray:
    """Stack patterns as the columns of an (M, P) array."""
    if isinstance(patterns, np.ndarray):
        cols = [CurrentPattern(tuple(c)) for c in patterns.T]
    else:
        cols = [p if isinstance(p, CurrentPattern) else CurrentPattern(tuple(p)) for p in patterns]
    return np.column_stack([np.asarray(p) for p in cols])


@dataclass(frozen=True)
class CemSolution:
    """Nodal potential and electrode voltages, grounded so sum(U) = 0."""

    nodal_potential: np.ndarray
    electrode_voltages: np.ndarray
    currents: np.ndarray
    energy: float
    apriori_ratio: float


def _local_stiffness(mesh: Mesh):
    """Unit-conductivity P1 stiffness matrices, shape (T, 3, 3), and areas."""
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # gradients of the barycentric coordinates
    grads = np.empty((len(p), 3, 2))
    grads[:, 1] = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
    grads[:, 2] = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    return area[:, None, None] * np.einsum("tik,tjk->tij", grads, grads), area


class CemSystem:
    """Reduced CEM system for one mesh and electrode configuration.

    The sparsity pattern and the conductivity-independent electrode block are
    computed once; ``matrix(a)`` then only scatters the scaled element
    stiffness matrices into a fixed CSC layout.
    """

    def __init__(self, mesh: Mesh, electrodes: ElectrodeConfig):
        mesh.validate()
        if mesh.n_electrodes != electrodes.n_electrodes:
            raise CemError(
                f"mesh has {mesh.n_electrodes} electrodes, config has {electrodes.n_electrodes}"
            )
        self.mesh = mesh
        self.electrodes = electrodes
        n, m = mesh.n_vertices, electrodes.n_electrodes
        self.n_vertices, self.n_electrodes = n, m
        self.n_dof = n + m - 1

        self.local_stiffness, self.areas = _local_stiffness(mesh)
        self.centroids = mesh.centroids

        # electrode terms of the full (n + m) form
        tags = mesh.electrode_of_edge
        on = tags >= 0
        edges = mesh.boundary_edges[on]
        el = tags[on]
        length = mesh.edge_lengths()[on]
        inv_z = 1.0 / electrodes.z[el]
        i, j = edges[:, 0], edges[:, 1]
        rows = np.concatenate([i, j, i, j, i, j, n + el, n + el, n + el])
        cols = np.concatenate([i, j, j, i, n + el, n + el, i, j, n + el])
        vals = np.concatenate(
            [
                inv_z * length / 3,
                inv_z * length / 3,
                inv_z * length / 6,
                inv_z * length / 6,
                -inv_z * length / 2,
                -inv_z * length / 2,
                -inv_z * length / 2,
                -inv_z * length / 2,
                inv_z * length,
            ]
        )
        full = sp.coo_matrix((vals, (rows, cols)), shape=(n + m, n + m)).tocsr()
        self.ground = self._grounding(n, m)
        electrode_block = (self.ground.T @ full @ self.ground).tocsc()

        # fixed CSC layout: union of stiffness and electrode patterns
        tri = mesh.triangles
        kr = np.repeat(tri, 3, axis=1).ravel()
        kc = np.tile(tri, (1, 3)).ravel()
        eb = electrode_block.tocoo()
        pattern = sp.coo_matrix(
            (
                np.ones(len(kr) + eb.nnz),
                (np.concatenate([kr, eb.row]), np.concatenate([kc, eb.col])),
            ),
            shape=(self.n_dof, self.n_dof),
        ).tocsc()
        pattern.sum_duplicates()
        pattern.sort_indices()
        self.indptr = pattern.indptr.copy()
        self.indices = pattern.indices.copy()
        col_of = np.repeat(np.arange(self.n_dof), np.diff(self.indptr))
        keys = col_of.astype(np.int64) * self.n_dof + self.indices
        self._stiff_pos = np.searchsorted(keys, kc.astype(np.int64) * self.n_dof + kr)
        self.nnz = len(keys)
        self._electrode_data = np.zeros(self.nnz)
        epos = np.searchsorted(keys, eb.col.astype(np.int64) * self.n_dof + eb.row)
        np.add.at(self._electrode_data, epos, eb.data)
        self.unit_stiffness = sp.coo_matrix(
            (self.local_stiffness.ravel(), (kr, kc)), shape=(n, n)
        ).tocsr()
        self._kloc_flat = np.ascontiguousarray(self.local_stiffness.reshape(-1, 9))
        self._kpos_flat = np.ascontiguousarray(self._stiff_pos.reshape(-1, 9))
        self._symbolic = None
        for arr in (self.indptr, self.indices, self._stiff_pos, self._electrode_data):
            arr.setflags(write=False)

    @staticmethod
    def _grounding(n: int, m: int) -> sp.csr_matrix:
        """Map (u, U_1..U_{M-1}) to (u, U_1..U_M) with U_M = -sum of the others."""
        rows = list(range(n + m - 1)) + [n + m - 1] * (m - 1)
        cols = list(range(n + m - 1)) + list(range(n, n + m - 1))
        vals = [1.0] * (n + m - 1) + [-1.0] * (m - 1)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n + m, n + m - 1))

    # -- conductivity handling -------------------------------------------------

    def element_conductivity(self, conductivity: Conductivity) -> np.ndarray:
        """Conductivity at each triangle centroid, validated positive."""
        if callable(conductivity):
            a = np.asarray(conductivity(self.centroids), dtype=float)
        else:
            a = np.asarray(conductivity, dtype=float)
            if a.ndim == 0:
                a = np.full(len(self.areas), float(a))
        if a.shape != (len(self.areas),):
            raise ConductivityError(
                f"expected {len(self.areas)} element conductivities, got shape {a.shape}"
            )
        bad = ~(np.isfinite(a) & (a > 0))
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ConductivityError(
                f"conductivity {a[k]!r} at quadrature point {self.centroids[k].tolist()} "
                "is not positive"
            )
        return a

    def matrix(self, conductivity: Conductivity) -> sp.csc_matrix:
        """Reduced SPD system matrix of dimension n_vertices + M - 1."""
        a = self.element_conductivity(conductivity)
        data = self._electrode_data + np.bincount(
            self._stiff_pos,
            weights=(a[:, None, None] * self.local_stiffness).ravel(),
            minlength=self.nnz,
        )
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.n_dof, self.n_dof))

    def rhs(self, currents: np.ndarray) -> np.ndarray:
        """Reduced right-hand sides for an (M,) or (M, P) current array."""
        c = np.asarray(currents, dtype=float)
        b = np.zeros((self.n_dof,) + c.shape[1:])
        b[self.n_vertices :] = c[:-1] - c[-1]
        return b

    def expand(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split reduced solutions into nodal potentials and all M voltages."""
        u = x[: self.n_vertices]
        ut = x[self.n_vertices :]
        U = np.concatenate([ut, -ut.sum(axis=0, keepdims=True)], axis=0)
        return u, U

    def factorize(self, conductivity: Conductivity):
        A = self.matrix(conductivity)
        try:
            lu = splu(A, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise CemError(f"factorization failed: {exc}") from exc
        return A, lu

    # -- batched sampling path ------------------------------------------------

    @property
    def symbolic(self) -> SymbolicCholesky:
        if self._symbolic is None:
            self._symbolic = SymbolicCholesky(
                self.indptr, self.indices, n_last=self.n_electrodes - 1
            )
        return self._symbolic

    def observe_batch(self, element_conductivity: np.ndarray, currents: np.ndarray) -> np.ndarray:
        """Electrode voltages for a batch of element conductivities.

        Parameters
        ----------
        element_conductivity : (B, T) array of centroid values
        currents : (M, P) array of current patterns

        Returns
        -------
        (B, M, P) array; entry [b] equals ``observation_operator`` for sample b.
        """
        a = np.ascontiguousarray(element_conductivity, dtype=float)
        if a.ndim != 2 or a.shape[1] != len(self.areas):
            raise ConductivityError(f"expected shape (B, {len(self.areas)}), got {a.shape}")
        bad = ~(np.isfinite(a) & (a > 0))
        if bad.any():
            s, t = np.argwhere(bad)[0]
            raise ConductivityError(
                f"sample {s}: conductivity {a[s, t]!r} at quadrature point "
                f"{self.centroids[t].tolist()} is not positive"
            )
        sym = self.symbolic
        rhs = np.ascontiguousarray(self.rhs(currents)[sym.perm])
        keep = sym.inv_perm[self.n_vertices :]
        out = np.empty((len(a), len(keep), rhs.shape[1]))
        failed = _scaled_solve_batch(
            a,
            self._kloc_flat,
            self._kpos_flat,
            self._electrode_data,
            sym.amap,
            sym.lp,
            sym.li,
            sym.rp,
            sym.rpos,
            sym.rcol,
            rhs,
            sym.start,
            keep,
            out,
        )
        if failed >= 0:
            raise CemError(f"sample {failed}: system matrix is not positive definite")
        return np.concatenate([out, -out.sum(axis=1, keepdims=True)], axis=1)

    # -- diagnostics -----------------------------------------------------------

    def electrode_currents(self, u: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Currents (1/z_m) * integral over E_m of (U_m - u), per electrode."""
        tags = self.mesh.electrode_of_edge
        on = tags >= 0
        edges = self.mesh.boundary_edges[on]
        el = tags[on]
        length = self.mesh.edge_lengths()[on]
        extra = (None,) * (u.ndim - 1)
        lw = length[(slice(None),) + extra]
        trace = 0.5 * lw * (u[edges[:, 0]] + u[edges[:, 1]])
        flux = (lw * U[el] - trace) / self.electrodes.z[el][(slice(None),) + extra]
        out = np.zeros((self.n_electrodes,) + u.shape[1:])
        np.add.at(out, el, flux)
        return out

    def hnorm(self, u: np.ndarray, U: np.ndarray) -> float:
        """Quotient-space norm: gradient energy plus electrode trace misfit."""
        grad = float(u @ (self.unit_stiffness @ u))
        tags = self.mesh.electrode_of_edge
        on = tags >= 0
        edges = self.mesh.boundary_edges[on]
        length = self.mesh.edge_lengths()[on]
        d0 = u[edges[:, 0]] - U[tags[on]]
        d1 = u[edges[:, 1]] - U[tags[on]]
        trace = float(np.sum(length * (d0 * d0 + d0 * d1 + d1 * d1) / 3))
        return math.sqrt(max(grad, 0.0) + trace)


def assemble_system(mesh: Mesh, conductivity: Conductivity, electrodes: ElectrodeConfig) -> sp.csc_matrix:
    """Grounded CEM matrix for one conductivity; see ``CemSystem``."""
    return CemSystem(mesh, electrodes).matrix(conductivity)


def solve_cem(
    mesh: Mesh | CemSystem,
    conductivity: Conductivity,
    electrodes: ElectrodeConfig | None,
    pattern: CurrentPattern | Sequence[float],
) -> CemSolution:
    """Solve the CEM for a single current pattern.

    ``apriori_ratio`` is ``||(u, U)||_H * min(a_min, 1/z_max) / |I|``, which
    stays bounded across conductivities (0 for zero current).
    """
    system = mesh if isinstance(mesh, CemSystem) else CemSystem(mesh, electrodes)
    if not isinstance(pattern, CurrentPattern):
        pattern = CurrentPattern(tuple(pattern))
    currents = np.asarray(pattern)
    a = system.element_conductivity(conductivity)
    A, lu = system.factorize(a)
    b = system.rhs(currents)
    x = lu.solve(b)
    resid = np.linalg.norm(A @ x - b)
    if not np.all(np.isfinite(x)) or resid > 1e-10 * max(np.linalg.norm(b), 1e-300):
        if np.linalg.norm(b) > 0:
            raise CemError(f"linear solve did not converge (residual {resid:.3e})")
    u, U = system.expand(x)
    energy = float(x @ (A @ x))
    norm_I = float(np.linalg.norm(currents))
    coercivity = min(float(a.min()), 1.0 / max(system.electrodes.contact_impedances))
    ratio = system.hnorm(u, U) * coercivity / norm_I if norm_I > 0 else 0.0
    return CemSolution(u, U, currents, energy, ratio)


def observation_operator(
    mesh: Mesh | CemSystem,
    conductivity: Conductivity,
    electrodes: ElectrodeConfig | None,
    patterns: Sequence[CurrentPattern] | np.ndarray,
) -> np.ndarray:
    """Electrode voltages for each pattern as the columns of an (M, P) array.

    One factorization serves every pattern.
    """
    system = mesh if isinstance(mesh, CemSystem) else CemSystem(mesh, electrodes)
    currents = pattern_matrix(patterns)
    _, lu = system.factorize(conductivity)
    x = lu.solve(system.rhs(currents))
    return system.expand(x)[1]
