"""Selection-model MLE using registry information on unpublished studies.

Published studies contribute the joint density of their effect and of being
published; registered but unpublished studies contribute their probability of
non-publication, which depends only on the planned sample size ``n``. With
these extra terms all five parameters (theta, tau, rho, alpha0, alpha1) are
estimable together. The selection index is ``u = alpha0 + alpha1 * sqrt(n)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import special

from . import remeta
from ._selection import mills, published_terms
from .dataset import MetaDataset
from .numkit import (
    HESSIAN_STEP,
    BoxBounds,
    OptimTolerances,
    SymmetricMatrix,
    hessian_from_gradient,
    maximize_bounded,
    norm_quantile,
    t_quantile,
)

__all__ = [
    "PARAM_NAMES",
    "FullMLEConfig",
    "CopasRegistryFit",
    "CIBundle",
    "full_loglik",
    "full_loglik_grad",
    "probit_start",
    "fit_full_mle",
    "ci_bundle",
]

PARAM_NAMES = ("theta", "tau", "rho", "alpha0", "alpha1")
LOWER = np.array([-10.0, 1e-8, -0.9999, -20.0, -5.0])
UPPER = np.array([10.0, 5.0, 0.9999, 20.0, 5.0])


@dataclass(frozen=True)
class FullMLEConfig:
    rho_starts: Tuple[float, ...] = (-0.8, -0.4, 0.0, 0.4, 0.8)
    lower: Tuple[float, ...] = tuple(LOWER)
    upper: Tuple[float, ...] = tuple(UPPER)
    tolerances: OptimTolerances = OptimTolerances()

    @property
    def bounds(self) -> BoxBounds:
        return BoxBounds(np.array(self.lower), np.array(self.upper))


@dataclass(frozen=True)
class CopasRegistryFit:
    """Maximum likelihood fit of the full selection model.

    ``info`` is the observed information over the parameters named in
    ``free`` (those not held at a bound of the box); ``se_theta`` comes from
    its inverse.
    """

    theta: float
    tau: float
    rho: float
    alpha0: float
    alpha1: float
    info: SymmetricMatrix
    se_theta: float
    loglik: float
    converged: bool
    n_published: int
    n_unpublished: int
    free: Tuple[str, ...] = PARAM_NAMES
    message: str = ""
    start_values: Tuple[float, ...] = field(default=(), repr=False)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.theta, self.tau, self.rho, self.alpha0, self.alpha1])


@dataclass(frozen=True)
class CIBundle:
    normal: Tuple[float, float]
    t: Tuple[float, float]
    se_sharp: Tuple[float, float]
    level: float
    df_used: int
    se_used_sharp: float


def _split(dataset: MetaDataset):
    pub_n = dataset.n_pub
    if np.any(~np.isfinite(pub_n)) or dataset.n_unpublished and np.any(~np.isfinite(dataset.n_unpub)):
        raise ValueError("the full likelihood needs n for every study")
    return dataset.yi, dataset.sei, np.sqrt(pub_n), np.sqrt(dataset.n_unpub)


def _ll(params, y, s, rn_pub, rn_unpub):
    theta, tau, rho, a0, a1 = params
    if tau < 0 or abs(rho) >= 1:
        return -math.inf
    total = float(np.sum(published_terms(theta, tau, rho, a0 + a1 * rn_pub, y, s)))
    if rn_unpub.size:
        total += float(np.sum(special.log_ndtr(-(a0 + a1 * rn_unpub))))
    return total if math.isfinite(total) else -math.inf


def _grad(params, y, s, rn_pub, rn_unpub):
    theta, tau, rho, a0, a1 = params
    _, dth, dta, drh, du = published_terms(theta, tau, rho, a0 + a1 * rn_pub, y, s, grad=True)
    g = np.array([dth.sum(), dta.sum(), drh.sum(), du.sum(), np.dot(du, rn_pub)])
    if rn_unpub.size:
        # d/du log Phi(-u) = -phi(u) / Phi(-u)
        dl = -mills(-(a0 + a1 * rn_unpub))
        g[3] += dl.sum()
        g[4] += np.dot(dl, rn_unpub)
    return g


def full_loglik(params, dataset: MetaDataset) -> float:
    """Full log-likelihood at ``(theta, tau, rho, alpha0, alpha1)``.

    Additive constants are excluded. Returns ``-inf`` outside the parameter
    space or where the value is not finite.
    """
    return _ll(np.asarray(params, dtype=float), *_split(dataset))


def full_loglik_grad(params, dataset: MetaDataset) -> np.ndarray:
    """Analytic gradient of :func:`full_loglik`."""
    return _grad(np.asarray(params, dtype=float), *_split(dataset))


def probit_start(dataset: MetaDataset, bounds: Optional[BoxBounds] = None) -> Tuple[float, float]:
    """Probit regression of the publication indicator on sqrt(n) over all studies.

    The estimate is clipped to the (alpha0, alpha1) box, which also keeps it
    finite when every study is published.
    """
    if bounds is None:
        bounds = FullMLEConfig().bounds
    box = BoxBounds(bounds.lower[3:], bounds.upper[3:])
    _, _, rn_pub, rn_unpub = _split(dataset)
    x = np.concatenate([rn_pub, rn_unpub])
    d = np.concatenate([np.ones(rn_pub.size), np.zeros(rn_unpub.size)])
    sign = 2.0 * d - 1.0

    def f(a):
        return float(np.sum(special.log_ndtr(sign * (a[0] + a[1] * x))))

    def g(a):
        lam = sign * mills(sign * (a[0] + a[1] * x))
        return np.array([lam.sum(), np.dot(lam, x)])

    res = maximize_bounded(f, box.clip([0.0, 0.0]), box, gradient=g)
    return float(res.point[0]), float(res.point[1])


def _information(g, x, bounds: BoxBounds):
    """Observed information over the coordinates away from the box edges.

    Computed by differencing the analytic gradient, which stays accurate
    where the surface is sharply curved (rho near +-1 with tau near 0).

    A coordinate within one finite-difference step of a bound is held fixed;
    the likelihood is typically still increasing across that bound, so the
    curvature there does not describe the sampling variability.
    """
    free = ~bounds.active(x, tol=2.0 * HESSIAN_STEP)
    free[0] = True
    idx = np.flatnonzero(free)

    def sub(q):
        z = x.copy()
        z[idx] = q
        return g(z)[idx]

    names = tuple(PARAM_NAMES[i] for i in idx)
    try:
        H = hessian_from_gradient(sub, x[idx])
    except ValueError:
        return SymmetricMatrix(np.full((idx.size, idx.size), np.nan)), names
    return SymmetricMatrix(-H.entries), names


def fit_full_mle(dataset: MetaDataset, config: FullMLEConfig = FullMLEConfig()) -> CopasRegistryFit:
    """Maximise the full likelihood over the parameter box.

    (theta, tau) start at the REML fit of the published studies and
    (alpha0, alpha1) at the probit fit of publication on sqrt(n); rho is
    started at each value in ``config.rho_starts``. The best start (converged
    first, then highest log-likelihood, then start order) is kept. The fit is
    flagged as not converged when the optimiser fails or the observed
    information is not positive definite.
    """
    if dataset.n_published < 2:
        raise ValueError("need at least 2 published studies")
    if dataset.n_unpublished == 0:
        warnings.warn("no unpublished studies: selection parameters are weakly identified", RuntimeWarning, stacklevel=2)
    data = _split(dataset)
    bounds = config.bounds
    f = lambda p: _ll(p, *data)
    g = lambda p: _grad(p, *data)

    try:
        reml = remeta.fit_random_effects(dataset, "REML")
        theta0, tau0 = reml.theta_hat, reml.tau_hat
    except remeta.ConvergenceError:
        theta0, tau0 = float(np.mean(data[0])), 0.1
    a0, a1 = probit_start(dataset, bounds)

    best, best_start = None, None
    for r in config.rho_starts:
        x0 = bounds.clip([theta0, max(tau0, 1e-3), r, a0, a1])
        if not math.isfinite(f(x0)):
            continue
        res = maximize_bounded(f, x0, bounds, config.tolerances, gradient=g)
        if best is None or (res.converged, res.value) > (best.converged, best.value + 1e-10):
            best, best_start = res, x0
    n_pub, n_unpub = dataset.n_published, dataset.n_unpublished
    if best is None:
        empty = SymmetricMatrix(np.full((5, 5), np.nan))
        x = bounds.clip([theta0, tau0, 0.0, a0, a1])
        return CopasRegistryFit(*map(float, x), info=empty, se_theta=math.nan, loglik=-math.inf,
                                converged=False, n_published=n_pub, n_unpublished=n_unpub,
                                message="log-likelihood not finite at any start")
    x = best.point
    info, names = _information(g, x, bounds)
    pd = info.is_positive_definite()
    se = math.nan
    if pd:
        var = info.inverse()[0, 0]
        se = math.sqrt(var) if var > 0 else math.nan
    converged = bool(best.converged and pd and math.isfinite(se))
    if not best.converged:
        msg = f"optimizer: {best.message}"
    elif not pd:
        msg = "observed information is not positive definite"
    else:
        msg = best.message
    return CopasRegistryFit(
        theta=float(x[0]),
        tau=float(x[1]),
        rho=float(x[2]),
        alpha0=float(x[3]),
        alpha1=float(x[4]),
        info=info,
        se_theta=float(se),
        loglik=float(best.value),
        converged=converged,
        n_published=n_pub,
        n_unpublished=n_unpub,
        free=names,
        message=msg,
        start_values=tuple(float(v) for v in best_start),
    )


def ci_bundle(fit: CopasRegistryFit, knha_se: float, level: float = 0.95) -> CIBundle:
    """Normal, t and max-SE intervals for theta.

    The t quantile uses N - 1 degrees of freedom with N the number of
    published studies. The third interval replaces the standard error by
    ``max(se_theta, knha_se)``.
    """
    if not fit.converged:
        raise ValueError("confidence intervals need a converged fit")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if not (knha_se >= 0.0 and math.isfinite(knha_se)):
        raise ValueError("knha_se must be a finite non-negative number")
    p = 1.0 - (1.0 - level) / 2.0
    df = fit.n_published - 1
    z = norm_quantile(p)
    t = t_quantile(p, df)
    se = fit.se_theta
    se_sharp = max(se, knha_se)
    th = fit.theta
    return CIBundle(
        normal=(th - z * se, th + z * se),
        t=(th - t * se, th + t * se),
        se_sharp=(th - t * se_sharp, th + t * se_sharp),
        level=level,
        df_used=df,
        se_used_sharp=se_sharp,
    )
