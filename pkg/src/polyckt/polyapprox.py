"""Minimax and least-squares polynomial activation fitting.

Fits are carried out in the Chebyshev basis of the target interval and only
converted to monomial coefficients at the end; raw Vandermonde systems in the
monomial basis are never solved, so degrees up to ~20 stay well conditioned.
The target function must accept and return numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.special import erf

from . import numcore

__all__ = [
    "Polynomial",
    "ApproxReport",
    "remez",
    "lstsq_fit",
    "max_error",
    "eval_poly",
    "relu_fn",
    "gelu_fn",
    "TARGET_FNS",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def relu_fn(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, 0.0)


def gelu_fn(x):
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


TARGET_FNS = {"relu": relu_fn, "gelu": gelu_fn}


@dataclass
class Polynomial:
    """Monomial coefficients in ascending order with a fitted domain."""

    coeffs: np.ndarray
    domain: tuple[float, float]

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        a, b = float(self.domain[0]), float(self.domain[1])
        if not a < b:
            raise ValueError(f"degenerate domain [{a}, {b}]")
        self.domain = (a, b)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        acc = np.full_like(x, self.coeffs[-1])
        for k in range(self.coeffs.size - 2, -1, -1):
            acc = acc * x + self.coeffs[k]
        return acc

    def to_record(self) -> str:
        """One-line text record: degree, domain endpoints, then coefficients.

        17 significant digits round-trips any 64-bit float exactly.
        """
        parts = [str(self.degree), f"{self.domain[0]:.17g}", f"{self.domain[1]:.17g}"]
        parts += [f"{c:.17g}" for c in self.coeffs]
        return ", ".join(parts)

    @classmethod
    def from_record(cls, line: str) -> "Polynomial":
        parts = [p.strip() for p in line.strip().split(",")]
        if len(parts) < 4:
            raise ValueError(f"malformed polynomial record: {line!r}")
        degree = int(parts[0])
        a, b = float(parts[1]), float(parts[2])
        coeffs = np.array([float(p) for p in parts[3:]])
        if coeffs.size != degree + 1:
            raise ValueError(
                f"record declares degree {degree} but carries {coeffs.size} coefficients"
            )
        return cls(coeffs, (a, b))


@dataclass
class ApproxReport:
    """Fit result: the polynomial plus error diagnostics."""

    polynomial: Polynomial
    max_abs_error: float
    error_argmax: float
    extrema: list[tuple[float, float]] = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    method: str = "remez"


def _golden_refine(err_abs, lo, hi, iters=60):
    """Vectorized golden-section maximization of err_abs on brackets [lo, hi]."""
    lo = lo.astype(np.float64).copy()
    hi = hi.astype(np.float64).copy()
    for _ in range(iters):
        x1 = hi - _GOLDEN * (hi - lo)
        x2 = lo + _GOLDEN * (hi - lo)
        take_right = err_abs(x1) < err_abs(x2)
        lo = np.where(take_right, x1, lo)
        hi = np.where(take_right, hi, x2)
    mid = 0.5 * (lo + hi)
    return mid, err_abs(mid)


def _local_extrema_indices(e_abs):
    """Indices of strict-or-plateau local maxima of |error| on a grid."""
    n = e_abs.size
    left = np.empty(n, dtype=bool)
    right = np.empty(n, dtype=bool)
    left[0] = True
    left[1:] = e_abs[1:] >= e_abs[:-1]
    right[-1] = True
    right[:-1] = e_abs[:-1] >= e_abs[1:]
    return np.nonzero(left & right)[0]


def _select_alternating(xs, es, count):
    """Compress same-sign runs and trim ends to an alternating set of size count."""
    keep_x: list[float] = []
    keep_e: list[float] = []
    for x, e in zip(xs, es):
        s = 1.0 if e >= 0 else -1.0
        if keep_e and (1.0 if keep_e[-1] >= 0 else -1.0) == s:
            if abs(e) > abs(keep_e[-1]):
                keep_x[-1], keep_e[-1] = x, e
        else:
            keep_x.append(x)
            keep_e.append(e)
    while len(keep_x) > count:
        if abs(keep_e[0]) < abs(keep_e[-1]):
            keep_x.pop(0)
            keep_e.pop(0)
        else:
            keep_x.pop()
            keep_e.pop()
    return keep_x, keep_e


def remez(
    f,
    degree: int,
    domain: tuple[float, float],
    tol: float = 1e-10,
    max_iters: int = 100,
    grid_size: int = 4096,
) -> ApproxReport:
    """Minimax fit by multi-point Remez exchange.

    The reference set starts at the Chebyshev extremum nodes of the interval.
    Each iteration solves the leveled-error system in the Chebyshev basis,
    locates error extrema on a dense grid, sharpens them by golden-section
    search in their bracketing cells, and exchanges the whole reference.
    Convergence: the reference errors are leveled to within ``tol`` relative
    spread. Non-convergence is reported via the ``converged`` flag, not an
    exception.
    """
    a, b = float(domain[0]), float(domain[1])
    if not a < b:
        raise ValueError(f"degenerate fitting range [{a}, {b}]")
    if degree < 0:
        raise ValueError("degree must be non-negative")
    n = int(degree)
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)

    def fx_of_t(t):
        return np.asarray(f(mid + half * t), dtype=np.float64)

    # Chebyshev extremum nodes on [-1, 1], warped slightly off symmetry so that
    # targets with an exactly interpolable odd or even part (relu is the
    # canonical case) cannot start from a degenerate zero leveled error.
    t_ref = -np.cos(np.pi * np.arange(n + 2) / (n + 1))
    t_ref = t_ref + (1.0 - t_ref**2) / (4.0 * (n + 2))
    t_grid = np.linspace(-1.0, 1.0, grid_size + 1)
    f_grid = fx_of_t(t_grid)
    zero_tol = 1e-13 * max(1.0, float(np.abs(f_grid).max()))

    c_cheb = np.zeros(n + 1)
    iterations = 0
    converged = False
    ref_err = np.zeros(n + 2)
    for iterations in range(1, max_iters + 1):
        T = C.chebvander(t_ref, n)
        sign_col = ((-1.0) ** np.arange(n + 2)).reshape(-1, 1)
        sol = np.linalg.solve(np.hstack([T, sign_col]), fx_of_t(t_ref))
        c_cheb = sol[:-1]

        def err_t(t):
            return C.chebval(t, c_cheb) - fx_of_t(t)

        e_grid = err_t(t_grid)
        e_abs = np.abs(e_grid)
        if e_abs.max() <= zero_tol:
            ref_err = err_t(t_ref)
            converged = True
            break
        idx = _local_extrema_indices(e_abs)
        lo = t_grid[np.maximum(idx - 1, 0)]
        hi = t_grid[np.minimum(idx + 1, grid_size)]
        t_cand, _ = _golden_refine(lambda t: np.abs(err_t(t)), lo, hi)
        e_cand = err_t(t_cand)
        order = np.argsort(t_cand)
        xs, es = _select_alternating(t_cand[order], e_cand[order], n + 2)
        if len(xs) < n + 2:
            # degenerate iterate (leveled error collapsed); pad the candidate
            # set with the current reference and retry the selection
            t_all = np.concatenate([t_cand, t_ref])
            e_all = err_t(t_all)
            order = np.argsort(t_all)
            xs, es = _select_alternating(t_all[order], e_all[order], n + 2)
        if len(xs) < n + 2:
            ref_err = err_t(t_ref)
            converged = bool(np.abs(e_grid).max() <= zero_tol)
            break
        t_ref = np.asarray(xs)
        ref_err = np.asarray(es)
        emax = np.abs(ref_err).max()
        emin = np.abs(ref_err).min()
        if emax <= zero_tol or (emax - emin) / emax < tol:
            converged = True
            break

    # final leveling solve on the converged reference; this pins the result
    # to the optimum of the reference instead of the previous iterate
    T = C.chebvander(t_ref, n)
    sign_col = ((-1.0) ** np.arange(n + 2)).reshape(-1, 1)
    c_cheb = np.linalg.solve(np.hstack([T, sign_col]), fx_of_t(t_ref))[:-1]
    ref_err = C.chebval(t_ref, c_cheb) - fx_of_t(t_ref)

    poly = _cheb_to_polynomial(c_cheb, a, b)
    err, argmax = max_error(poly, f, (a, b), grid_size=max(grid_size, 20000))
    extrema = [(mid + half * t, e) for t, e in zip(np.atleast_1d(t_ref), np.atleast_1d(ref_err))]
    return ApproxReport(
        polynomial=poly,
        max_abs_error=err,
        error_argmax=argmax,
        extrema=extrema,
        iterations=iterations,
        converged=converged,
        method="remez",
    )


def _cheb_to_polynomial(c_cheb, a, b):
    series = C.Chebyshev(c_cheb, domain=[a, b])
    mono = series.convert(kind=np.polynomial.Polynomial)
    return Polynomial(np.asarray(mono.coef, dtype=np.float64), (a, b))


def lstsq_fit(
    f,
    degree: int,
    domain: tuple[float, float],
    n_samples: int = 4096,
) -> ApproxReport:
    """Least-squares fit on a uniform grid, solved in the Chebyshev basis.

    numpy's chebfit runs a pivoted SVD least-squares solve on the orthogonal
    Chebyshev design matrix, which stays well conditioned at high degree.
    """
    a, b = float(domain[0]), float(domain[1])
    if not a < b:
        raise ValueError(f"degenerate fitting range [{a}, {b}]")
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if n_samples < degree + 1:
        raise ValueError(
            f"{n_samples} samples cannot determine degree {degree} coefficients"
        )
    x = np.linspace(a, b, n_samples)
    t = (2.0 * x - (a + b)) / (b - a)
    y = np.asarray(f(x), dtype=np.float64)
    c_cheb = C.chebfit(t, y, degree)
    poly = _cheb_to_polynomial(c_cheb, a, b)
    err, argmax = max_error(poly, f, (a, b), grid_size=max(n_samples, 20000))
    return ApproxReport(
        polynomial=poly,
        max_abs_error=err,
        error_argmax=argmax,
        extrema=[],
        iterations=1,
        converged=True,
        method="lstsq",
    )


def max_error(
    poly: Polynomial, f, domain: tuple[float, float], grid_size: int = 20000
) -> tuple[float, float]:
    """Max |poly - f| on the interval: dense grid plus one local refinement.

    Returns (error, argmax location). grid_size must be at least 1000 so the
    bracketing cells are narrow enough for the golden-section polish.
    """
    a, b = float(domain[0]), float(domain[1])
    if not a < b:
        raise ValueError(f"degenerate range [{a}, {b}]")
    if grid_size < 1000:
        raise ValueError("grid_size must be at least 1000")
    x = np.linspace(a, b, grid_size + 1)

    def err_abs(xs):
        return np.abs(poly(xs) - np.asarray(f(xs), dtype=np.float64))

    e = err_abs(x)
    i = int(np.argmax(e))
    lo = np.array([x[max(i - 1, 0)]])
    hi = np.array([x[min(i + 1, grid_size)]])
    xr, er = _golden_refine(err_abs, lo, hi)
    if er[0] >= e[i]:
        return float(er[0]), float(xr[0])
    return float(e[i]), float(x[i])


def eval_poly(poly: Polynomial, x: "numcore.Tensor") -> "numcore.Tensor":
    """Apply a fitted polynomial elementwise on the autodiff tape."""
    return numcore.elementwise_poly(x, poly.coeffs)
