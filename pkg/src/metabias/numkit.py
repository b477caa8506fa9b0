"""Numeric kernels shared by the estimation modules.

Normal and Student-t distribution functions, central finite differences and a
box-constrained maximizer. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize, special, stats

__all__ = [
    "BoxBounds",
    "OptimResult",
    "OptimTolerances",
    "SymmetricMatrix",
    "norm_pdf",
    "norm_cdf",
    "norm_logcdf",
    "norm_logsf",
    "norm_quantile",
    "t_quantile",
    "numeric_gradient",
    "numeric_hessian",
    "hessian_from_gradient",
    "maximize_bounded",
]

GRADIENT_STEP = 1e-5
HESSIAN_STEP = 1e-4

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_finite(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {x!r}")
    return arr


def _scalar_or_array(arr):
    return float(arr) if arr.ndim == 0 else arr


def norm_pdf(x):
    """Standard normal density. Accepts scalars or arrays."""
    arr = _check_finite(x)
    return _scalar_or_array(_INV_SQRT_2PI * np.exp(-0.5 * arr * arr))


def norm_cdf(x):
    """Standard normal CDF, accurate to double precision in both tails."""
    arr = _check_finite(x)
    return _scalar_or_array(special.ndtr(arr))


def norm_logcdf(x):
    """log Phi(x), stable far into the lower tail (asymptotic series)."""
    arr = np.asarray(x, dtype=float)
    if np.any(np.isnan(arr)):
        raise ValueError("norm_logcdf got NaN")
    return _scalar_or_array(special.log_ndtr(arr))


def norm_logsf(x):
    """log(1 - Phi(x)) computed as log Phi(-x)."""
    arr = np.asarray(x, dtype=float)
    if np.any(np.isnan(arr)):
        raise ValueError("norm_logsf got NaN")
    return _scalar_or_array(special.log_ndtr(-arr))


def norm_quantile(p):
    """Inverse of :func:`norm_cdf` on the open unit interval."""
    arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValueError(f"probability must lie in (0, 1), got {p!r}")
    z = special.ndtri(arr)
    # one Newton step polishes the rational approximation
    z = z - (special.ndtr(z) - arr) / (_INV_SQRT_2PI * np.exp(-0.5 * z * z))
    return _scalar_or_array(z)


def t_quantile(p, df):
    """Quantile of Student's t distribution with ``df`` degrees of freedom."""
    if not (0.0 < p < 1.0) or not math.isfinite(p):
        raise ValueError(f"probability must lie in (0, 1), got {p!r}")
    if df < 1 or not math.isfinite(df):
        raise ValueError(f"df must be >= 1, got {df!r}")
    return float(stats.t.ppf(p, df))


def _relative_steps(x, step):
    return step * np.maximum(1.0, np.abs(x))


def _eval(f, x):
    val = float(f(x))
    if not math.isfinite(val):
        raise ValueError(f"objective is not finite at probe point {x!r}")
    return val


def numeric_gradient(f: Callable[[np.ndarray], float], x, step: float = GRADIENT_STEP) -> np.ndarray:
    """Central-difference gradient with step ``step * max(1, |x_j|)``."""
    x = np.asarray(x, dtype=float)
    h = _relative_steps(x, step)
    grad = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        grad[j] = (_eval(f, x + e) - _eval(f, x - e)) / (2.0 * h[j])
    return grad


@dataclass(frozen=True)
class SymmetricMatrix:
    """Square symmetric matrix; symmetry is enforced on construction."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("SymmetricMatrix needs a square 2-d array")
        object.__setattr__(self, "entries", 0.5 * (a + a.T))

    @property
    def dimension(self) -> int:
        return self.entries.shape[0]

    def __getitem__(self, idx):
        return self.entries[idx]

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)

    def is_positive_definite(self) -> bool:
        if self.dimension == 0:
            return False
        return bool(np.all(np.isfinite(self.entries)) and self.eigenvalues().min() > 0.0)

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.entries)

    def tolist(self):
        return self.entries.tolist()


def numeric_hessian(f: Callable[[np.ndarray], float], x, step: float = HESSIAN_STEP) -> SymmetricMatrix:
    """Central-difference Hessian, symmetrised by averaging with its transpose."""
    x = np.asarray(x, dtype=float)
    k = x.size
    h = _relative_steps(x, step)
    f0 = _eval(f, x)
    H = np.empty((k, k))
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        H[i, i] = (_eval(f, x + ei) - 2.0 * f0 + _eval(f, x - ei)) / h[i] ** 2
        for j in range(i + 1, k):
            ej = np.zeros(k)
            ej[j] = h[j]
            H[i, j] = (
                _eval(f, x + ei + ej)
                - _eval(f, x + ei - ej)
                - _eval(f, x - ei + ej)
                + _eval(f, x - ei - ej)
            ) / (4.0 * h[i] * h[j])
            H[j, i] = H[i, j]
    return SymmetricMatrix(H)


def hessian_from_gradient(
    grad: Callable[[np.ndarray], np.ndarray], x, step: float = GRADIENT_STEP
) -> SymmetricMatrix:
    """Hessian by central differences of an analytic gradient, symmetrised.

    Much less sensitive to the step than second differences of function
    values when the surface is sharply curved.
    """
    x = np.asarray(x, dtype=float)
    k = x.size
    h = _relative_steps(x, step)
    H = np.empty((k, k))
    for i in range(k):
        e = np.zeros(k)
        e[i] = h[i]
        up = np.asarray(grad(x + e), dtype=float)
        dn = np.asarray(grad(x - e), dtype=float)
        if up.shape != (k,) or not (np.all(np.isfinite(up)) and np.all(np.isfinite(dn))):
            raise ValueError(f"gradient is not finite near x along coordinate {i}")
        H[i] = (up - dn) / (2.0 * h[i])
    return SymmetricMatrix(H)


@dataclass(frozen=True)
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be 1-d vectors of equal length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise ValueError("need lower[j] <= upper[j] for every j")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, k: int) -> "BoxBounds":
        return cls(np.full(k, -np.inf), np.full(k, np.inf))

    def __len__(self):
        return self.lower.size

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def active(self, x, tol: float = 1e-7) -> np.ndarray:
        """Mask of coordinates sitting on a finite bound."""
        x = np.asarray(x, dtype=float)
        scale_lo = tol * np.maximum(1.0, np.abs(np.where(np.isfinite(self.lower), self.lower, 0.0)))
        scale_hi = tol * np.maximum(1.0, np.abs(np.where(np.isfinite(self.upper), self.upper, 0.0)))
        at_lo = np.isfinite(self.lower) & (x - self.lower <= scale_lo)
        at_hi = np.isfinite(self.upper) & (self.upper - x <= scale_hi)
        return at_lo | at_hi

    def as_scipy(self):
        return [
            (None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi)
            for lo, hi in zip(self.lower, self.upper)
        ]


@dataclass(frozen=True)
class OptimTolerances:
    ftol: float = 1e-10
    gtol: float = 1e-6
    max_iter: int = 500


@dataclass
class OptimResult:
    point: np.ndarray
    value: float
    converged: bool
    iterations: int
    projected_gradient: float = math.inf
    method: str = "L-BFGS-B"
    message: str = ""
    gradient: Optional[np.ndarray] = field(default=None, repr=False)


def projected_gradient(grad, x, bounds: BoxBounds) -> np.ndarray:
    """Gradient of a *maximisation* problem with components pushing out of the box zeroed."""
    g = np.asarray(grad, dtype=float).copy()
    at_lo = x <= bounds.lower
    at_hi = x >= bounds.upper
    g[at_lo & (g < 0)] = 0.0
    g[at_hi & (g > 0)] = 0.0
    return g


def maximize_bounded(
    f: Callable[[np.ndarray], float],
    start,
    bounds: BoxBounds,
    tolerances: OptimTolerances = OptimTolerances(),
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> OptimResult:
    """Maximise ``f`` over a box.

    Runs L-BFGS-B first. If the projected gradient is not small at its
    result, L-BFGS-B is rerun with the gradient test alone; if that still
    fails, a bounded Nelder-Mead pass restarts from the best point and
    L-BFGS-B polishes the result. ``converged`` requires a projected
    gradient sup-norm below ``tolerances.gtol * max(1, |f|)``.

    Non-finite objective values inside the box are treated as ``-inf`` and
    steer the search away. A non-finite value at ``start`` raises.
    """
    x0 = np.asarray(start, dtype=float)
    if x0.shape != bounds.lower.shape:
        raise ValueError("start and bounds have different lengths")
    if not bounds.contains(x0):
        raise ValueError("start lies outside the bounds")
    f0 = float(f(x0))
    if not math.isfinite(f0):
        raise ValueError("objective is not finite at the starting point")

    def neg(x):
        val = float(f(x))
        return -val if math.isfinite(val) else 1e300

    if gradient is None:
        def grad_of(x):
            return _safe_numeric_gradient(f, x, bounds)
    else:
        def grad_of(x):
            return np.asarray(gradient(x), dtype=float)

    def neg_grad(x):
        g = grad_of(x)
        return np.where(np.isfinite(g), -g, 0.0)

    scipy_bounds = bounds.as_scipy()
    iterations = 0

    def run_lbfgsb(x, ftol=tolerances.ftol):
        nonlocal iterations
        res = optimize.minimize(
            neg,
            x,
            jac=neg_grad,
            method="L-BFGS-B",
            bounds=scipy_bounds,
            options={
                "maxiter": tolerances.max_iter,
                "ftol": ftol,
                "gtol": tolerances.gtol,
                "maxls": 40,
            },
        )
        iterations += int(res.nit)
        return res

    def pg_norm_at(x):
        g = grad_of(x)
        pg = projected_gradient(g, x, bounds)
        return g, pg, (float(np.max(np.abs(pg))) if pg.size else 0.0)

    def stationary(x):
        value = float(f(x))
        _, _, norm = pg_norm_at(x)
        return math.isfinite(value) and norm <= _gradient_tolerance(tolerances.gtol, value)

    def keep_better(x_new, x_old):
        x_new = bounds.clip(x_new)
        return x_new if neg(x_new) <= neg(x_old) else x_old

    res = run_lbfgsb(x0)
    x_best = bounds.clip(res.x)
    method = "L-BFGS-B"
    message = str(res.message)
    if not stationary(x_best):
        # flat objective: the relative-reduction test can stop early, so
        # polish with the gradient test alone
        res = run_lbfgsb(x_best, ftol=0.0)
        x_best = keep_better(res.x, x_best)
        message = str(res.message)
    if not stationary(x_best):
        # line search stalled (e.g. against a non-finite region)
        nm = optimize.minimize(
            neg,
            x_best,
            method="Nelder-Mead",
            bounds=scipy_bounds,
            options={"maxiter": 200 * x0.size, "xatol": 1e-9, "fatol": tolerances.ftol, "adaptive": True},
        )
        iterations += int(nm.nit)
        x_best = keep_better(nm.x, x_best)
        res = run_lbfgsb(x_best, ftol=0.0)
        x_best = keep_better(res.x, x_best)
        method = "L-BFGS-B+Nelder-Mead"
        message = str(res.message)

    value = float(f(x_best))
    g, pg, pg_norm = pg_norm_at(x_best)
    converged = bool(
        math.isfinite(value)
        and np.all(np.isfinite(pg))
        and pg_norm <= _gradient_tolerance(tolerances.gtol, value)
        and iterations <= 3 * tolerances.max_iter
    )
    return OptimResult(
        point=x_best,
        value=value,
        converged=converged,
        iterations=iterations,
        projected_gradient=pg_norm,
        method=method,
        message=message,
        gradient=g,
    )


def _gradient_tolerance(gtol, value):
    # log-likelihoods of a few hundred studies sit far from unit scale
    return gtol * max(1.0, abs(value))


def _safe_numeric_gradient(f, x, bounds, step=GRADIENT_STEP):
    """Finite differences that switch to one-sided probes at the box edge."""
    x = np.asarray(x, dtype=float)
    h = _relative_steps(x, step)
    grad = np.empty_like(x)
    fx = float(f(x))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        up_ok = x[j] + h[j] <= bounds.upper[j]
        dn_ok = x[j] - h[j] >= bounds.lower[j]
        if up_ok and dn_ok:
            grad[j] = (float(f(x + e)) - float(f(x - e))) / (2.0 * h[j])
        elif up_ok:
            grad[j] = (float(f(x + e)) - fx) / h[j]
        elif dn_ok:
            grad[j] = (fx - float(f(x - e))) / h[j]
        else:
            grad[j] = 0.0
    return grad
