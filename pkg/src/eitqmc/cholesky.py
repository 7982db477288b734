"""Sparse Cholesky with a fixed symbolic structure, for many refactorizations.

Sampling the forward map factorizes thousands of matrices that share one
sparsity pattern. The fill-reducing ordering and the pattern of the factor
are computed once (``SymbolicCholesky``); the numeric left-looking
factorization and the triangular solves run in compiled loops.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.sparse.linalg import splu


class NotPositiveDefinite(ArithmeticError):
    pass


@njit(cache=True, nogil=True)
def _factor(adata, amap, lp, li, rp, rpos, rcol, lx, x):
    """Left-looking numeric Cholesky into lx. Returns -1 or the failing column."""
    n = len(lp) - 1
    for j in range(n):
        for q in range(lp[j], lp[j + 1]):
            src = amap[q]
            x[li[q]] = adata[src] if src >= 0 else 0.0
        for r in range(rp[j], rp[j + 1]):
            pos = rpos[r]
            k = rcol[r]
            ljk = lx[pos]
            for q in range(pos, lp[k + 1]):
                x[li[q]] -= lx[q] * ljk
        d = x[j]
        if not d > 0.0:
            return j
        ljj = np.sqrt(d)
        lx[lp[j]] = ljj
        inv = 1.0 / ljj
        for q in range(lp[j] + 1, lp[j + 1]):
            lx[q] = x[li[q]] * inv
    return -1


@njit(cache=True, nogil=True)
def _solve(lp, li, lx, b, start):
    """Overwrite b (n, p) with (L L^T)^{-1} b.

    Rows before ``start`` must be zero in b on entry; they are left untouched,
    so only the trailing part of the solution is computed.
    """
    n = len(lp) - 1
    p = b.shape[1]
    for j in range(start, n):
        ljj = lx[lp[j]]
        for c in range(p):
            b[j, c] /= ljj
        for q in range(lp[j] + 1, lp[j + 1]):
            i = li[q]
            v = lx[q]
            for c in range(p):
                b[i, c] -= v * b[j, c]
    for j in range(n - 1, start - 1, -1):
        ljj = lx[lp[j]]
        for q in range(lp[j] + 1, lp[j + 1]):
            i = li[q]
            v = lx[q]
            for c in range(p):
                b[j, c] -= v * b[i, c]
        for c in range(p):
            b[j, c] /= ljj


@njit(cache=True, nogil=True)
def _scaled_solve_batch(
    scale, kloc, kpos, base, amap, lp, li, rp, rpos, rcol, rhs, start, keep, out
):
    """For each row of ``scale``: assemble, factor and solve, keeping rows ``keep``.

    The matrix data is ``base`` plus ``scale[b, t] * kloc[t, :]`` scattered to
    ``kpos[t, :]``. ``rhs`` and ``keep`` are in factor (permuted) ordering;
    ``rhs`` vanishes before row ``start`` and ``keep`` lies at or after it.
    Returns -1 or the index of the first failing sample.
    """
    nb, nt = scale.shape
    nloc = kloc.shape[1]
    adata = np.empty(len(base))
    lx = np.empty(len(li))
    x = np.empty(len(lp) - 1)
    b = np.empty_like(rhs)
    for s in range(nb):
        adata[:] = base
        for t in range(nt):
            c = scale[s, t]
            for e in range(nloc):
                adata[kpos[t, e]] += c * kloc[t, e]
        if _factor(adata, amap, lp, li, rp, rpos, rcol, lx, x) >= 0:
            return s
        b[:, :] = rhs
        _solve(lp, li, lx, b, start)
        for r in range(len(keep)):
            for c in range(rhs.shape[1]):
                out[s, r, c] = b[keep[r], c]
    return -1


class SymbolicCholesky:
    """Ordering and factor pattern for a symmetric CSC pattern.

    Parameters
    ----------
    indptr, indices : CSC structure of the full symmetric matrix, sorted
        row indices per column.
    n_last : the last ``n_last`` unknowns are eliminated last, in their
        original order. When a right-hand side is supported on them only,
        the trailing block of the factor is all a solve needs.
    """

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, n_last: int = 0):
        n = len(indptr) - 1
        self.n = n
        self.start = n - n_last
        probe = sp.csc_matrix(
            (np.ones(len(indices)), indices, indptr), shape=(n, n)
        )[: self.start, : self.start]
        # diagonally dominant stand-in with the same pattern, only for the ordering
        probe = probe + sp.diags(np.asarray(abs(probe).sum(axis=0)).ravel() + 1.0)
        lu = splu(probe.tocsc(), permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
        perm = np.arange(n, dtype=np.int64)
        perm[lu.perm_c] = np.arange(self.start)  # perm[new] = old
        self.perm = perm
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        self.inv_perm = inv

        # permuted lower-triangular pattern with source positions in A.data
        col = np.repeat(np.arange(n), np.diff(indptr))
        pr, pc = inv[indices], inv[col]
        lower = pr >= pc
        src = np.flatnonzero(lower)
        pr, pc = pr[lower], pc[lower]

        a_rows = [[] for _ in range(n)]
        a_src = [dict() for _ in range(n)]
        for r, c, s in zip(pr.tolist(), pc.tolist(), src.tolist()):
            a_src[c][r] = s
            a_rows[c].append(r)

        # column patterns of L via the elimination tree
        children = [[] for _ in range(n)]
        patterns = []
        for j in range(n):
            s = set(a_rows[j])
            s.add(j)
            for c in children[j]:
                s.update(patterns[c])
            s.discard(j)
            below = sorted(i for i in s if i > j)
            patterns.append(below)
            if below:
                children[below[0]].append(j)
        lp = np.zeros(n + 1, dtype=np.int64)
        for j in range(n):
            lp[j + 1] = lp[j] + 1 + len(patterns[j])
        li = np.empty(lp[-1], dtype=np.int64)
        amap = np.full(lp[-1], -1, dtype=np.int64)
        for j in range(n):
            rows = [j] + patterns[j]
            li[lp[j] : lp[j + 1]] = rows
            srcs = a_src[j]
            amap[lp[j] : lp[j + 1]] = [srcs.get(r, -1) for r in rows]
        self.lp, self.li, self.amap = lp, li, amap

        # row structure: for each row j, entries (j, k) with k < j
        strict = np.ones(lp[-1], dtype=bool)
        strict[lp[:-1]] = False
        q = np.flatnonzero(strict)
        rows = li[q]
        cols = np.repeat(np.arange(n), np.diff(lp))[q]
        order = np.lexsort((cols, rows))
        self.rpos = q[order]
        self.rcol = cols[order]
        self.rp = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))]).astype(np.int64)
        self.nnz = int(lp[-1])

    def factor(self, adata: np.ndarray, lx: np.ndarray | None = None, work: np.ndarray | None = None):
        """Numeric factor values for matrix data laid out as the input CSC."""
        lx = np.empty(self.nnz) if lx is None else lx
        work = np.empty(self.n) if work is None else work
        bad = _factor(adata, self.amap, self.lp, self.li, self.rp, self.rpos, self.rcol, lx, work)
        if bad >= 0:
            raise NotPositiveDefinite(f"non-positive pivot at column {self.perm[bad]}")
        return lx

    def solve(self, lx: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Solve A x = b for b of shape (n,) or (n, p)."""
        vec = b.ndim == 1
        work = np.ascontiguousarray(b.reshape(self.n, -1)[self.perm], dtype=float)
        _solve(self.lp, self.li, lx, work, 0)
        out = np.empty_like(work)
        out[self.perm] = work
        return out[:, 0] if vec else out
