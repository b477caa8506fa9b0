"""Copas-Shi sensitivity analysis.

The selection parameters (alpha0, alpha1) of the publication model
``Y = alpha0 + alpha1 / s + delta`` are held fixed while (theta, tau, rho)
are estimated from the likelihood of the published studies conditional on
publication. Sweeping (alpha0, alpha1) traces a curve of estimates indexed by
the implied expected number of unpublished studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats

from . import remeta
from ._selection import conditional_mean_var, published_terms
from .dataset import MetaDataset
from .numkit import (
    HESSIAN_STEP,
    BoxBounds,
    OptimTolerances,
    SymmetricMatrix,
    maximize_bounded,
    hessian_from_gradient,
    norm_quantile,
)

__all__ = [
    "SensitivityPoint",
    "SensitivityCurve",
    "GridConfig",
    "cond_loglik",
    "cond_loglik_grad",
    "fit_conditional",
    "expected_unpublished",
    "residual_gof_p",
    "alphas_from_anchors",
    "grid_alphas",
    "run_grid",
    "select_point",
]

TAU_MAX = 5.0
RHO_MAX = 0.9999
GOF_THRESHOLD = 0.1


def _selection_index(alphas, s):
    a0, a1 = alphas
    return a0 + a1 / s


def cond_loglik(params, alphas, dataset: MetaDataset) -> float:
    """Log-likelihood of the published effects conditional on publication.

    ``params`` is (theta, tau, rho); additive constants are excluded. Returns
    ``-inf`` where the value is not finite.
    """
    return _cond_ll(params, alphas, dataset.yi, dataset.sei)


def _cond_ll(params, alphas, y, s):
    theta, tau, rho = params
    if tau < 0 or abs(rho) >= 1:
        return -math.inf
    u = _selection_index(alphas, s)
    ll = published_terms(theta, tau, rho, u, y, s) - special.log_ndtr(u)
    total = float(np.sum(ll))
    return total if math.isfinite(total) else -math.inf


def cond_loglik_grad(params, alphas, dataset: MetaDataset) -> np.ndarray:
    """Analytic gradient of :func:`cond_loglik` in (theta, tau, rho)."""
    return _cond_grad(params, alphas, dataset.yi, dataset.sei)


def _cond_grad(params, alphas, y, s):
    theta, tau, rho = params
    u = _selection_index(alphas, s)
    _, dth, dta, drh, _ = published_terms(theta, tau, rho, u, y, s, grad=True)
    return np.array([dth.sum(), dta.sum(), drh.sum()])


def expected_unpublished(alphas, dataset_or_se) -> float:
    """Expected number of unpublished studies implied by (alpha0, alpha1).

    Sum over published studies of the odds of non-publication,
    (1 - Phi(u_i)) / Phi(u_i) with u_i = alpha0 + alpha1 / s_i. Returns
    ``inf`` when some publication probability underflows to zero.
    """
    s = dataset_or_se.sei if isinstance(dataset_or_se, MetaDataset) else np.asarray(dataset_or_se, float)
    u = _selection_index(alphas, s)
    # odds = Phi(-u) / Phi(u), computed in log space
    log_odds = special.log_ndtr(-u) - special.log_ndtr(u)
    with np.errstate(over="ignore"):
        return float(np.sum(np.exp(log_odds)))


@dataclass(frozen=True)
class SensitivityPoint:
    alpha0: float
    alpha1: float
    theta_hat: float
    tau_hat: float
    rho_hat: float
    se_theta: float
    expected_m: float
    gof_p: float
    converged: bool
    loglik: float = math.nan
    p_low: float = math.nan
    p_high: float = math.nan

    def ci(self, level: float = 0.95) -> Tuple[float, float]:
        z = norm_quantile(1.0 - (1.0 - level) / 2.0)
        return self.theta_hat - z * self.se_theta, self.theta_hat + z * self.se_theta

    def p_value(self) -> float:
        """Two-sided z-test of theta = 0."""
        if not (self.se_theta > 0 and math.isfinite(self.se_theta)):
            return math.nan
        return float(2.0 * stats.norm.sf(abs(self.theta_hat / self.se_theta)))


def _better(res, best) -> bool:
    """Converged beats non-converged; then strictly higher objective; ties keep the earlier start."""
    if best is None:
        return True
    if res.converged != best.converged:
        return res.converged
    return res.value > best.value + 1e-10


def _bounds():
    return BoxBounds(np.array([-np.inf, 0.0, -RHO_MAX]), np.array([np.inf, TAU_MAX, RHO_MAX]))


def _se_theta(g, x, bounds):
    """SE of theta from the observed information over the identified free coordinates."""
    free = ~bounds.active(x, tol=2.0 * HESSIAN_STEP)
    free[0] = True
    idx = np.flatnonzero(free)

    def sub(q):
        z = x.copy()
        z[idx] = q
        return g(z)[idx]

    try:
        H = hessian_from_gradient(sub, x[idx]).entries
    except ValueError:
        return math.nan, False
    info = -H
    # rho is unidentified when selection is negligible: zero curvature, zero coupling
    keep = [0]
    scale = max(abs(info[0, 0]), 1e-300)
    for j in range(1, idx.size):
        if abs(info[j, j]) > 1e-8 * scale or abs(info[0, j]) > 1e-6 * math.sqrt(scale * max(abs(info[j, j]), 1e-300)):
            keep.append(j)
    info = SymmetricMatrix(info[np.ix_(keep, keep)])
    if not info.is_positive_definite():
        return math.nan, False
    var = info.inverse()[0, 0]
    return float(math.sqrt(var)), True


def fit_conditional(
    alphas,
    dataset: MetaDataset,
    start: Optional[Sequence[float]] = None,
    reference: Optional[remeta.RandomEffectsFit] = None,
    with_gof: bool = True,
    tolerances: OptimTolerances = OptimTolerances(),
) -> SensitivityPoint:
    """Maximise the conditional likelihood over (theta, tau, rho) at fixed alphas.

    Starts from the ML random-effects fit with rho in {-0.5, 0, 0.5}, from
    tau near zero with rho = -0.9 and 0.9, and from ``start`` when given
    (typically the neighbouring grid point). The best
    converged start wins; a point whose optimiser or information matrix
    fails is returned with ``converged=False``.
    """
    if dataset.n_published < 2:
        raise ValueError("need at least 2 published studies")
    y, s = dataset.yi, dataset.sei
    alphas = (float(alphas[0]), float(alphas[1]))
    bounds = _bounds()
    if reference is None:
        reference = remeta.fit_arrays(y, s, "ML")
    tau0 = min(max(reference.tau_hat, 0.05), TAU_MAX / 2)
    starts = [np.array(start, dtype=float)] if start is not None else []
    starts += [np.array([reference.theta_hat, tau0, r]) for r in (0.0, -0.5, 0.5)]
    # the likelihood can peak again near tau = 0 with |rho| close to 1
    starts += [np.array([reference.theta_hat, 1e-3, r]) for r in (-0.9, 0.9)]

    f = lambda p: _cond_ll(p, alphas, y, s)
    g = lambda p: _cond_grad(p, alphas, y, s)
    best = None
    for x0 in starts:
        x0 = bounds.clip(x0)
        x0[1] = max(x0[1], 1e-3)
        if not math.isfinite(f(x0)):
            continue
        res = maximize_bounded(f, x0, bounds, tolerances, gradient=g)
        if _better(res, best):
            best = res
    if best is None:
        raise ValueError("conditional likelihood is not finite at any start")
    x = best.point
    se, info_ok = _se_theta(g, x, bounds)
    point = SensitivityPoint(
        alpha0=alphas[0],
        alpha1=alphas[1],
        theta_hat=float(x[0]),
        tau_hat=float(x[1]),
        rho_hat=float(x[2]),
        se_theta=se,
        expected_m=expected_unpublished(alphas, s),
        gof_p=math.nan,
        converged=bool(best.converged and info_ok),
        loglik=best.value,
    )
    if with_gof and dataset.n_published >= 3:
        point = replace(point, gof_p=residual_gof_p(point, dataset))
    return point


def residual_gof_p(point: SensitivityPoint, dataset: MetaDataset) -> float:
    """Goodness-of-fit p-value for residual funnel asymmetry.

    Published effects are standardised against their mean and variance
    given publication under the fitted model; an Egger-type regression of
    those residuals on precision (1/s) with an intercept follows, and the
    two-sided t test of the intercept (N - 2 df) gives the p-value.
    """
    if dataset.n_published < 3:
        raise ValueError("goodness-of-fit test needs at least 3 published studies")
    y, s = dataset.yi, dataset.sei
    u = _selection_index((point.alpha0, point.alpha1), s)
    mean, var = conditional_mean_var(point.theta_hat, point.tau_hat, point.rho_hat, u, s)
    resid = (y - mean) / np.sqrt(var)
    x = 1.0 / s
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, resid, rcond=None)
    e = resid - X @ coef
    df = y.size - 2
    sigma2 = float(np.dot(e, e)) / df
    cov = sigma2 * np.linalg.inv(X.T @ X)
    se = math.sqrt(max(cov[0, 0], 0.0))
    if se == 0.0 or not math.isfinite(se):
        return 1.0 if abs(coef[0]) < 1e-12 else 0.0
    t = coef[0] / se
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))


@dataclass(frozen=True)
class GridConfig:
    """Publication-probability anchors for the (alpha0, alpha1) sweep.

    ``p_low`` is the publication probability of the least precise study and
    ``p_high`` that of the most precise one. The ladder runs from
    ``p_low_start`` down to ``p_low_stop`` in steps of ``p_low_step``.
    """

    p_low_start: float = 0.99
    p_low_stop: float = 0.20
    p_low_step: float = 0.01
    p_high: float = 0.9999
    gof_threshold: float = GOF_THRESHOLD

    def __post_init__(self):
        for name in ("p_low_start", "p_low_stop", "p_high"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.p_low_step <= 0:
            raise ValueError("p_low_step must be positive")
        if self.p_low_start < self.p_low_stop:
            raise ValueError("p_low ladder must decline")

    def p_low_ladder(self) -> np.ndarray:
        count = int(math.floor((self.p_low_start - self.p_low_stop) / self.p_low_step + 1e-9)) + 1
        return np.round(self.p_low_start - self.p_low_step * np.arange(count), 10)


def alphas_from_anchors(p_low: float, p_high: float, s_max: float, s_min: float) -> Tuple[float, float]:
    """Solve alpha0 + alpha1/s_max = z(p_low), alpha0 + alpha1/s_min = z(p_high)."""
    z_lo = norm_quantile(p_low)
    z_hi = norm_quantile(p_high)
    gap = 1.0 / s_min - 1.0 / s_max
    if gap <= 1e-12:
        return float(z_lo), 0.0
    a1 = (z_hi - z_lo) / gap
    a0 = z_lo - a1 / s_max
    return float(a0), float(a1)


def grid_alphas(dataset: MetaDataset, config: GridConfig = GridConfig()) -> List[Tuple[float, float, float]]:
    """(p_low, alpha0, alpha1) triples along the ladder; p_high is clamped to >= p_low."""
    s = dataset.sei
    out = []
    for p_low in config.p_low_ladder():
        p_high = max(config.p_high, float(p_low))
        a0, a1 = alphas_from_anchors(float(p_low), p_high, float(s.max()), float(s.min()))
        out.append((float(p_low), a0, a1))
    return out


@dataclass
class SensitivityCurve:
    points: List[SensitivityPoint]
    selected: Optional[int] = None
    selection_flagged: bool = False

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.expected_m)

    @property
    def selected_point(self) -> Optional[SensitivityPoint]:
        return None if self.selected is None else self.points[self.selected]

    def _converged(self):
        return [p for p in self.points if p.converged and math.isfinite(p.expected_m)]

    def theta_at(self, m: float) -> float:
        """theta interpolated linearly in expected_m over converged points."""
        pts = self._converged()
        ms = np.array([p.expected_m for p in pts])
        th = np.array([p.theta_hat for p in pts])
        return float(np.interp(m, ms, th))

    def ci_at(self, m: float, level: float = 0.95) -> Tuple[float, float]:
        pts = self._converged()
        ms = np.array([p.expected_m for p in pts])
        lo = np.array([p.ci(level)[0] for p in pts])
        hi = np.array([p.ci(level)[1] for p in pts])
        return float(np.interp(m, ms, lo)), float(np.interp(m, ms, hi))

    def nearest(self, m: float) -> SensitivityPoint:
        pts = self._converged()
        return min(pts, key=lambda p: abs(p.expected_m - m))


def _sweep(dataset: MetaDataset, config: GridConfig, with_gof=True) -> Iterator[SensitivityPoint]:
    reference = remeta.fit_arrays(dataset.yi, dataset.sei, "ML")
    prev = None
    for p_low, a0, a1 in grid_alphas(dataset, config):
        start = None if prev is None else (prev.theta_hat, prev.tau_hat, prev.rho_hat)
        pt = fit_conditional((a0, a1), dataset, start=start, reference=reference, with_gof=with_gof)
        pt = replace(pt, p_low=p_low, p_high=max(config.p_high, p_low))
        if pt.converged:
            prev = pt
        yield pt


def _choose(points: Sequence[SensitivityPoint], threshold: float):
    ok = [i for i, p in enumerate(points) if p.converged]
    if not ok:
        return None, False
    for i in ok:
        if points[i].gof_p > threshold:
            return i, False
    return ok[-1], True


def run_grid(dataset: MetaDataset, config: GridConfig = GridConfig()) -> SensitivityCurve:
    """Fit every grid point, order by expected_m and mark the selected estimate.

    The selected point is the converged one with the smallest expected_m
    whose goodness-of-fit p-value exceeds ``config.gof_threshold``; when none
    qualifies the largest-expected_m converged point is chosen and
    ``selection_flagged`` is set.

    Raises
    ------
    RuntimeError
        If no grid point converged.
    """
    curve = SensitivityCurve(list(_sweep(dataset, config)))
    idx, flagged = _choose(curve.points, config.gof_threshold)
    if idx is None:
        raise RuntimeError("no Copas grid point converged")
    curve.selected = idx
    curve.selection_flagged = flagged
    return curve


def select_point(dataset: MetaDataset, config: GridConfig = GridConfig()) -> Tuple[Optional[SensitivityPoint], bool]:
    """Selected estimate only, walking the grid lazily.

    Gives the same answer as ``run_grid(...).selected_point`` but stops at
    the first qualifying point. Returns ``(point, flagged)``; ``point`` is
    ``None`` when nothing converged.
    """
    seen = []
    for pt in _sweep(dataset, config):
        seen.append(pt)
        if pt.converged and pt.gof_p > config.gof_threshold:
            # expected_m is nondecreasing along the ladder
            return pt, False
    ordered = sorted(seen, key=lambda p: p.expected_m)
    idx, flagged = _choose(ordered, config.gof_threshold)
    return (None, False) if idx is None else (ordered[idx], flagged)
