"""Randomly shifted rank-1 lattice rules.

Point sets, random shifts, POD weights, component-by-component (CBC)
construction of generating vectors for the unanchored weighted Sobolev
space, and shifted-lattice / Monte Carlo means over the box [-1/2, 1/2]^s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numba import njit

EMBEDDED_VECTOR = "lattice-33002-1024-1048576"
EMBEDDED_MODULUS = 2**20


class LatticeError(ValueError):
    pass


class IntegrandError(RuntimeError):
    """An integrand evaluation failed; carries the offending point."""

    def __init__(self, message: str, point: np.ndarray, index: int, shift_index: int | None):
        super().__init__(message)
        self.point = point
        self.index = index
        self.shift_index = shift_index


def _is_power_of_two(n: int) -> bool:
    return n >= 2 and n & (n - 1) == 0


@dataclass(frozen=True)
class LatticeRule:
    """Rank-1 lattice with n = 2^m points and odd generating vector z."""

    n: int
    z: tuple[int, ...]

    def __post_init__(self):
        n = int(self.n)
        if not _is_power_of_two(n):
            raise LatticeError(f"n must be a power of two >= 2, got {self.n}")
        z = tuple(int(v) for v in self.z)
        if not z:
            raise LatticeError("generating vector is empty")
        for j, v in enumerate(z):
            if not 1 <= v <= n - 1 or v % 2 == 0:
                raise LatticeError(f"component {j} = {v} is not an odd integer in [1, {n - 1}]")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "z", z)

    @property
    def s(self) -> int:
        return len(self.z)


@dataclass(frozen=True)
class ShiftSet:
    """R i.i.d. uniform shifts in [0, 1)^s drawn from ``numpy`` PCG64(seed)."""

    count: int
    dimension: int
    seed: int

    def __post_init__(self):
        if self.count < 1 or self.dimension < 1:
            raise LatticeError("shift count and dimension must be positive")

    @cached_property
    def shifts(self) -> np.ndarray:
        arr = np.random.default_rng(self.seed).random((self.count, self.dimension))
        arr.setflags(write=False)
        return arr

    def __iter__(self):
        return iter(self.shifts)

    def __len__(self):
        return self.count


def lattice_points(rule: LatticeRule, shift=None) -> np.ndarray:
    """Points {k z / n + shift}, k = 0..n-1, as an (n, s) array.

    The unshifted part is formed in integer arithmetic, so with a zero shift
    every coordinate is an exact multiple of 1/n.
    """
    k = np.arange(rule.n, dtype=np.int64)[:, None]
    pts = (k * np.array(rule.z, dtype=np.int64)[None, :] % rule.n) / rule.n
    if shift is None:
        return pts
    shift = np.asarray(shift, dtype=float)
    if shift.shape != (rule.s,):
        raise LatticeError(f"shift has shape {shift.shape}, expected ({rule.s},)")
    pts = pts + shift
    pts -= np.floor(pts)
    return pts


def to_parameter_box(points) -> np.ndarray:
    return np.asarray(points, dtype=float) - 0.5


# -- generating vectors ----------------------------------------------------


def read_generating_vector(path: str | Path) -> tuple[list[int], int | None]:
    """Read a vector file: optional ``# modulus n`` line, then one integer per line."""
    values, modulus = [], None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tok = line[1:].split()
            if len(tok) == 2 and tok[0] == "modulus":
                modulus = int(tok[1])
            continue
        try:
            values.append(int(line.split()[0]))
        except ValueError:
            raise LatticeError(f"{path}:{lineno}: not an integer: {line!r}") from None
    return values, modulus


def write_generating_vector(rule: LatticeRule, path: str | Path) -> None:
    Path(path).write_text(f"# modulus {rule.n}\n" + "".join(f"{v}\n" for v in rule.z))


def load_generating_vector(source: str | Path, s: int, n: int) -> LatticeRule:
    """First ``s`` components of a stored vector, as a rule with ``n`` points.

    ``source`` is ``"embedded"`` (an extensible Kuo vector, valid for every
    n = 2^m up to 2^20) or a path to a vector file. Components are reduced
    modulo n when the file's modulus is a larger power of two.
    """
    if s < 1:
        raise LatticeError(f"dimension must be >= 1, got {s}")
    if str(source) == "embedded":
        ref = resources.files("eitqmc") / "data" / f"{EMBEDDED_VECTOR}.txt"
        with resources.as_file(ref) as p:
            values, modulus = read_generating_vector(p)
    else:
        values, modulus = read_generating_vector(source)
    if len(values) < s:
        raise LatticeError(f"vector has {len(values)} components, {s} requested")
    values = values[:s]
    for j, v in enumerate(values):
        if v % 2 == 0:
            raise LatticeError(f"component {j} = {v} is even (not coprime to n)")
    if modulus is not None:
        if modulus < n or modulus % n:
            raise LatticeError(f"vector built for modulus {modulus} cannot serve n = {n}")
        values = [v % n for v in values]
    return LatticeRule(n, tuple(values))


# -- POD weights -------------------------------------------------------------


def zeta(x: float, tol: float = 1e-17) -> float:
    """Riemann zeta for real x > 1.

    Partial sum to N - 1 plus the Euler-Maclaurin tail; correction terms are
    added until the next one falls below ``tol``, which bounds the remainder.
    """
    if not x > 1:
        raise ValueError(f"zeta needs x > 1, got {x}")
    N = 16
    head = math.fsum(k ** (-x) for k in range(1, N))
    terms = [N ** (1 - x) / (x - 1), 0.5 * N ** (-x)]
    # Bernoulli numbers B_2, B_4, ...
    bern = [1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6,
            -3617 / 510, 43867 / 798, -174611 / 330, 854513 / 138, -236364091 / 2730]
    rising = x  # x (x+1) ... (x + 2m - 2)
    for m, b in enumerate(bern, start=1):
        term = b / math.factorial(2 * m) * rising * N ** (-x - 2 * m + 1)
        if abs(term) < tol:
            break
        terms.append(term)
        rising *= (x + 2 * m - 1) * (x + 2 * m)
    else:
        raise ArithmeticError("Euler-Maclaurin tail did not reach tolerance")
    return math.fsum([head] + terms)


def _lambda_for(p: float, sigma: float, eps: float) -> float:
    if not 0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 1/2), got {eps}")
    if 2 / 3 < p < 1 / sigma:
        return p / (2 - p)
    if 0 < p < min(2 / 3, 1 / sigma):
        return 1 / (2 - 2 * eps)
    raise ValueError(
        f"p = {p} with sigma = {sigma} is in neither admissible range: "
        f"(2/3, 1/sigma) = (0.6667, {1 / sigma:.4g}) or "
        f"(0, min(2/3, 1/sigma)) = (0, {min(2 / 3, 1 / sigma):.4g})"
    )


@dataclass(frozen=True)
class PodWeights:
    """gamma_u = (((|u|+1)!)^sigma prod_{j in u} beta_j / sqrt(2 zeta(2 lam) / (2 pi^2)^lam))^(2/(1+lam))

    The weight factors as ``order_weight(|u|) * prod(product_weights[j])``.
    """

    sigma: float
    lam: float
    beta: tuple[float, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.sigma < 1:
            raise ValueError(f"sigma must be >= 1, got {self.sigma}")
        if not 0.5 < self.lam <= 1:
            raise ValueError(f"lambda must lie in (1/2, 1], got {self.lam}")
        b = tuple(float(v) for v in self.beta)
        if not b or any(not v > 0 for v in b):
            raise ValueError("beta must be a non-empty positive sequence")
        object.__setattr__(self, "beta", b)

    @property
    def s(self) -> int:
        return len(self.beta)

    @cached_property
    def kernel_constant(self) -> float:
        """2 zeta(2 lam) / (2 pi^2)^lam."""
        return 2 * zeta(2 * self.lam) / (2 * math.pi**2) ** self.lam

    @cached_property
    def product_weights(self) -> np.ndarray:
        b = np.array(self.beta) / math.sqrt(self.kernel_constant)
        return b ** (2 / (1 + self.lam))

    @cached_property
    def order_weights(self) -> np.ndarray:
        """Gamma_l = ((l+1)!)^(2 sigma / (1 + lam)) for l = 0..s."""
        ell = np.arange(self.s + 1)
        log_fact = np.array([math.lgamma(v + 2) for v in ell])
        return np.exp(2 * self.sigma / (1 + self.lam) * log_fact)

    def gamma(self, u: Sequence[int]) -> float:
        """Weight of the subset u of {0, .., s-1} (0-based); gamma of the empty set is 1."""
        u = list(u)
        if not u:
            return 1.0
        return float(self.order_weights[len(u)] * np.prod(self.product_weights[u]))


@dataclass(frozen=True, eq=False)
class GeneralPodWeights:
    """POD weights from explicit factors: gamma_u = order_weights[|u|] * prod(product_weights[u]).

    ``order_weights`` has length s + 1 with entry 0 equal to 1. Accepted by
    the CBC and error routines wherever ``PodWeights`` is.
    """

    order_weights: np.ndarray
    product_weights: np.ndarray

    def __post_init__(self):
        o = np.array(self.order_weights, dtype=float)
        p = np.array(self.product_weights, dtype=float)
        if len(o) != len(p) + 1 or o[0] != 1 or np.any(o <= 0) or np.any(p <= 0):
            raise ValueError("need s + 1 positive order weights starting at 1 and s positive product weights")
        object.__setattr__(self, "order_weights", o)
        object.__setattr__(self, "product_weights", p)

    @property
    def s(self) -> int:
        return len(self.product_weights)

    def gamma(self, u: Sequence[int]) -> float:
        u = list(u)
        return float(self.order_weights[len(u)] * np.prod(self.product_weights[u])) if u else 1.0


def pod_weights(sigma: float, p: float, beta: Sequence[float], eps: float = 0.05) -> PodWeights:
    """POD weights with lambda picked from the summability exponent p.

    lambda = p / (2 - p) for p in (2/3, 1/sigma), and 1 / (2 - 2 eps) for
    p in (0, min(2/3, 1/sigma)).
    """
    return PodWeights(float(sigma), _lambda_for(float(p), float(sigma), eps), tuple(beta))


def _elementary_symmetric(x: np.ndarray) -> np.ndarray:
    """e_l(x) for l = 0..len(x)."""
    e = np.zeros(len(x) + 1)
    e[0] = 1.0
    for v in x:
        e[1:] = e[1:] + v * e[:-1]
    return e


def cbc_error_bound(weights: PodWeights, n: int, lam: float, shifts: int = 1) -> float:
    """Right-hand side of the CBC error bound for a unit-norm integrand.

    ( (2/n) sum_{u != empty} gamma_u^lam (2 zeta(2 lam)/(2 pi^2)^lam)^|u| )^(1/(2 lam)) / sqrt(R)
    """
    c = 2 * zeta(2 * lam) / (2 * math.pi**2) ** lam
    e = _elementary_symmetric(weights.product_weights**lam * c)
    total = math.fsum((weights.order_weights[1:] ** lam * e[1:]).tolist())
    return (2.0 / n * total) ** (1 / (2 * lam)) / math.sqrt(shifts)


# -- worst-case error and CBC ---------------------------------------------------


def _omega_table(n: int) -> np.ndarray:
    x = np.arange(n) / n
    return x * x - x + 1.0 / 6.0


@njit(cache=True)
def _candidate_errors(n, omega, left, right, candidates, out):
    """out[c] = sum_k left[k] + omega[(k z_c) mod n] * right[k]."""
    base = 0.0
    for k in range(n):
        base += left[k]
    for c in range(len(candidates)):
        z = candidates[c]
        idx = 0
        acc = 0.0
        for k in range(n):
            acc += omega[idx] * right[k]
            idx += z
            if idx >= n:
                idx -= n
        out[c] = base + acc
    return out


def worst_case_error_sq(z: Sequence[int], n: int, weights: PodWeights) -> float:
    """Shift-averaged squared worst-case error of the lattice (n, z).

    e^2 = (1/n) sum_k sum_{u != empty} gamma_u prod_{j in u} B2({k z_j / n}),
    with B2(x) = x^2 - x + 1/6, evaluated with the POD recursion over |u|.
    """
    z = list(z)
    omega = _omega_table(n)
    k = np.arange(n, dtype=np.int64)
    p = np.zeros((len(z) + 1, n))
    p[0] = 1.0
    for j, zj in enumerate(z):
        w = weights.product_weights[j] * omega[(k * zj) % n]
        p[1 : j + 2] = p[1 : j + 2] + w * p[0 : j + 1]
    gam = weights.order_weights[1 : len(z) + 1]
    return float(np.sum(gam @ p[1:]) / n)


def cbc_construct(n: int, s: int, weights: PodWeights, return_errors: bool = False):
    """Component-by-component generating vector for POD weights.

    Each z_j minimizes the shift-averaged worst-case error given z_1..z_{j-1}
    over the odd integers in [1, n-1] (ties go to the smallest candidate);
    z_1 = 1 since every odd choice gives the same one-dimensional point set.
    Cost O(s n^2).
    """
    if not _is_power_of_two(n):
        raise LatticeError(f"n must be a power of two >= 2, got {n}")
    if s < 1 or s > weights.s:
        raise LatticeError(f"s = {s} must lie in [1, {weights.s}]")
    omega = _omega_table(n)
    gam = weights.order_weights
    bw = weights.product_weights
    k = np.arange(n, dtype=np.int64)
    candidates = np.arange(1, n, 2, dtype=np.int64)
    # p[l, k]: sum over |u| = l of prod b_j omega_j(k), for the chosen prefix
    p = np.zeros((s + 1, n))
    p[0] = 1.0
    z: list[int] = []
    errors = []
    scratch = np.empty(len(candidates))
    for j in range(s):
        left = gam[1 : j + 1] @ p[1 : j + 1] if j else np.zeros(n)
        right = bw[j] * (gam[1 : j + 2] @ p[0 : j + 1])
        if j == 0:
            zj = 1
            err = (left.sum() + (omega * right).sum()) / n
        else:
            vals = _candidate_errors(n, omega, left, right, candidates, scratch) / n
            c = int(np.argmin(vals))
            zj, err = int(candidates[c]), float(vals[c])
        z.append(zj)
        errors.append(float(err))
        w = bw[j] * omega[(k * zj) % n]
        p[1 : j + 2] = p[1 : j + 2] + w * p[0 : j + 1]
    rule = LatticeRule(n, tuple(z))
    return (rule, errors) if return_errors else rule


# -- cubature ------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _neumaier_columns(values, out):
    n, d = values.shape
    for c in range(d):
        s = 0.0
        comp = 0.0
        for i in range(n):
            v = values[i, c]
            t = s + v
            if abs(s) >= abs(v):
                comp += (s - t) + v
            else:
                comp += (v - t) + s
            s = t
        out[c] = s + comp
    return out


def compensated_sum(values: np.ndarray) -> np.ndarray:
    """Column sums of a 1-D or 2-D array in row order with Neumaier compensation."""
    arr = np.asarray(values, dtype=float)
    flat = np.ascontiguousarray(arr.reshape(len(arr), -1))
    out = _neumaier_columns(flat, np.empty(flat.shape[1]))
    return out.reshape(arr.shape[1:])


def _evaluate(integrand: Callable, pts: np.ndarray, shift_index: int | None) -> np.ndarray:
    try:
        vals = np.asarray(integrand(pts), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite integrand value")
        return vals
    except Exception as exc:
        for i, y in enumerate(pts):
            try:
                v = np.asarray(integrand(y[None, :]), dtype=float)
                if not np.all(np.isfinite(v)):
                    raise FloatingPointError("non-finite integrand value")
            except Exception as inner:
                raise IntegrandError(
                    f"integrand failed at point {i} (shift {shift_index}): {inner}",
                    y.copy(), i, shift_index,
                ) from exc
        raise


def qmc_mean(integrand: Callable, rule: LatticeRule, shifts: ShiftSet | np.ndarray):
    """Randomly shifted lattice estimate of the mean of ``integrand`` over the box.

    ``integrand`` maps an (n, s) array of points in [-1/2, 1/2]^s to an (n,) or
    (n, d) array. Returns (per-shift means, pooled mean).
    """
    shift_arr = shifts.shifts if isinstance(shifts, ShiftSet) else np.atleast_2d(shifts)
    per_shift = []
    for r, shift in enumerate(shift_arr):
        pts = to_parameter_box(lattice_points(rule, shift))
        vals = _evaluate(integrand, pts, r)
        per_shift.append(compensated_sum(vals) / rule.n)
    per_shift = np.array(per_shift)
    return per_shift, compensated_sum(per_shift) / len(per_shift)


def mc_points(n: int, trials: int, s: int, seed: int) -> np.ndarray:
    """i.i.d. uniform points in the box, shape (trials, n, s)."""
    return np.random.default_rng(seed).random((trials, n, s)) - 0.5


def mc_mean(integrand: Callable, n: int, trials: int, seed: int, s: int):
    """Plain Monte Carlo analogue of ``qmc_mean`` with ``trials`` independent samples."""
    rng = np.random.default_rng(seed)
    per_trial = []
    for r in range(trials):
        pts = rng.random((n, s)) - 0.5
        vals = _evaluate(integrand, pts, r)
        per_trial.append(compensated_sum(vals) / n)
    per_trial = np.array(per_trial)
    return per_trial, compensated_sum(per_trial) / len(per_trial)


def standard_error(per_shift: np.ndarray) -> np.ndarray:
    """Standard error of the pooled mean from R independent estimates."""
    per_shift = np.asarray(per_shift, dtype=float)
    R = len(per_shift)
    return np.std(per_shift, axis=0, ddof=1) / math.sqrt(R)
