"""Random-effects meta-analysis without selection adjustment.

REML and ML estimation of the between-study variance, normal and
Knapp-Hartung confidence intervals, and the Egger and Macaskill
funnel-asymmetry regression tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import stats

from .dataset import MetaDataset
from .numkit import norm_quantile, t_quantile

__all__ = [
    "ConvergenceError",
    "RandomEffectsFit",
    "AsymmetryTest",
    "fit_random_effects",
    "fit_arrays",
    "dersimonian_laird",
    "ci_normal",
    "ci_knapp_hartung",
    "knapp_hartung_se",
    "egger_test",
    "macaskill_test",
    "re_loglik",
]

MAX_ITER = 100
TOL = 1e-10


class ConvergenceError(RuntimeError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass(frozen=True)
class RandomEffectsFit:
    theta_hat: float
    tau2_hat: float
    se_theta: float
    k: int
    method: str
    iterations: int = 0

    @property
    def tau_hat(self) -> float:
        return math.sqrt(self.tau2_hat)


@dataclass(frozen=True)
class AsymmetryTest:
    statistic: float
    p_value: float
    df: int
    test: str
    coefficient: float = math.nan
    se: float = math.nan


def dersimonian_laird(y, v) -> float:
    """Method-of-moments between-study variance, truncated at zero."""
    w = 1.0 / v
    sw = w.sum()
    mu = np.dot(w, y) / sw
    q = np.dot(w, (y - mu) ** 2)
    c = sw - np.dot(w, w) / sw
    if c <= 0:
        return 0.0
    return max(0.0, (q - (y.size - 1)) / c)


def re_loglik(tau2, y, v, method="REML"):
    """Profile (restricted) log-likelihood of the random-effects model, constants dropped."""
    w = 1.0 / (v + tau2)
    sw = w.sum()
    mu = np.dot(w, y) / sw
    ll = -0.5 * (np.sum(np.log(v + tau2)) + np.dot(w, (y - mu) ** 2))
    if method == "REML":
        ll -= 0.5 * math.log(sw)
    return ll


def _score_step(tau2, y, v, method):
    w = 1.0 / (v + tau2)
    sw = w.sum()
    mu = np.dot(w, y) / sw
    r = y - mu
    if method == "ML":
        num = np.dot(w * w, r * r) - sw
        den = np.dot(w, w)
    else:
        # P = W - w w' / sum(w) for the intercept-only model
        Py = w * r
        trP = sw - np.dot(w, w) / sw
        PP_tr = np.dot(w, w) - 2.0 * np.dot(w ** 3, np.ones_like(w)) / sw + (np.dot(w, w) / sw) ** 2
        num = np.dot(Py, Py) - trP
        den = PP_tr
    return num / den


def fit_arrays(y, s, method: str = "REML") -> RandomEffectsFit:
    """Random-effects fit from effect estimates ``y`` and standard errors ``s``."""
    method = method.upper()
    if method not in ("REML", "ML"):
        raise ValueError(f"method must be REML or ML, got {method!r}")
    y = np.asarray(y, dtype=float)
    s = np.asarray(s, dtype=float)
    if y.size < 2:
        raise ValueError("need at least 2 studies")
    v = s * s
    tau2 = dersimonian_laird(y, v)
    ll = re_loglik(tau2, y, v, method)
    # the score changes sign once; keep iterates inside the bracket it
    # implies and bisect when scoring oscillates without contracting
    lo, hi = 0.0, math.inf
    prev_step = math.inf
    for it in range(1, MAX_ITER + 1):
        step = _score_step(tau2, y, v, method)
        if step > 0:
            lo = max(lo, tau2)
        elif step < 0:
            hi = min(hi, tau2)
        new = max(0.0, tau2 + step)
        if new > 0.0 and math.isfinite(hi) and (not lo <= new <= hi or abs(step) > 0.5 * abs(prev_step)):
            new = 0.5 * (lo + hi)
            step = new - tau2
        prev_step = step
        new_ll = re_loglik(new, y, v, method)
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 30:
            step *= 0.5
            new = max(0.0, tau2 + step)
            new_ll = re_loglik(new, y, v, method)
            halvings += 1
        change = abs(new - tau2)
        tau2, ll = new, new_ll
        if change < TOL * max(1.0, tau2):
            break
    else:
        raise ConvergenceError(f"{method} tau^2 iteration did not converge", last_iterate=tau2)
    w = 1.0 / (v + tau2)
    theta = float(np.dot(w, y) / w.sum())
    return RandomEffectsFit(
        theta_hat=theta,
        tau2_hat=float(tau2),
        se_theta=float(math.sqrt(1.0 / w.sum())),
        k=int(y.size),
        method=method,
        iterations=it,
    )


def fit_random_effects(dataset: MetaDataset, method: str = "REML") -> RandomEffectsFit:
    """REML (default) or ML random-effects fit on the published studies."""
    return fit_arrays(dataset.yi, dataset.sei, method)


def ci_normal(fit: RandomEffectsFit, level: float = 0.95) -> Tuple[float, float]:
    z = norm_quantile(1.0 - (1.0 - level) / 2.0)
    return fit.theta_hat - z * fit.se_theta, fit.theta_hat + z * fit.se_theta


def knapp_hartung_se(y, s, fit: RandomEffectsFit) -> float:
    """Rescaled standard error, untruncated (no max(1, q) adjustment)."""
    y = np.asarray(y, dtype=float)
    w = 1.0 / (np.asarray(s, dtype=float) ** 2 + fit.tau2_hat)
    k = y.size
    if k < 2:
        raise ValueError("Knapp-Hartung needs k >= 2")
    q = np.dot(w, (y - fit.theta_hat) ** 2) / (k - 1)
    return float(math.sqrt(q / w.sum()))


def ci_knapp_hartung(
    dataset: MetaDataset, fit: Optional[RandomEffectsFit] = None, level: float = 0.95
) -> Tuple[float, float, float]:
    """Knapp-Hartung interval; returns ``(lower, upper, se_hk)``."""
    if dataset.n_published < 2:
        raise ValueError("Knapp-Hartung needs k >= 2")
    if fit is None:
        fit = fit_random_effects(dataset)
    se_hk = knapp_hartung_se(dataset.yi, dataset.sei, fit)
    t = t_quantile(1.0 - (1.0 - level) / 2.0, fit.k - 1)
    return fit.theta_hat - t * se_hk, fit.theta_hat + t * se_hk, se_hk


def _wls(x, y, w):
    """Weighted least squares of y on (1, x); returns coefficients, SEs, df."""
    X = np.column_stack([np.ones_like(x), x])
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    yw = y * sw
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ coef
    df = y.size - 2
    sigma2 = np.dot(resid, resid) / df
    cov = sigma2 * np.linalg.inv(Xw.T @ Xw)
    return coef, np.sqrt(np.diag(cov)), df


def _t_test(est, se, df, name, coef_index_value):
    if se == 0.0:
        stat = 0.0 if est == 0.0 else math.copysign(math.inf, est)
    else:
        stat = est / se
    p = float(2.0 * stats.t.sf(abs(stat), df))
    return AsymmetryTest(
        statistic=float(stat), p_value=min(1.0, p), df=int(df), test=name,
        coefficient=float(coef_index_value), se=float(se),
    )


def egger_test(dataset: MetaDataset) -> AsymmetryTest:
    """Egger's regression: y/s on 1/s, two-sided t test of the intercept."""
    if dataset.n_published < 3:
        raise ValueError("Egger's test needs at least 3 published studies")
    y, s = dataset.yi, dataset.sei
    coef, se, df = _wls(1.0 / s, y / s, np.ones_like(s))
    return _t_test(coef[0], se[0], df, "Egger", coef[0])


def macaskill_test(dataset: MetaDataset, weighting: str = "auto") -> AsymmetryTest:
    """Macaskill's regression of the effect on total sample size.

    Tests the slope with N - 2 degrees of freedom. ``weighting`` selects
    the WLS weights:

    ``"pooled"``
        inverse of the log-odds-ratio variance computed from the pooled
        event proportion, 1 / (1/(n_t p(1-p)) + 1/(n_c p(1-p))).
        Needs arm counts.
    ``"inverse_variance"``
        1 / s_i^2.
    ``"auto"``
        ``pooled`` when every published study has arm counts with a
        non-degenerate pooled proportion, otherwise ``inverse_variance``.
    """
    if dataset.n_published < 3:
        raise ValueError("Macaskill's test needs at least 3 published studies")
    pub = dataset.published
    if any(s.n is None for s in pub):
        raise ValueError("Macaskill's test needs n for every published study")
    y = dataset.yi
    n = np.array([s.n for s in pub], dtype=float)
    if weighting not in ("auto", "pooled", "inverse_variance"):
        raise ValueError(f"unknown weighting {weighting!r}")
    w = None
    if weighting in ("auto", "pooled"):
        w = _pooled_weights(pub)
        if w is None and weighting == "pooled":
            raise ValueError("pooled weighting needs arm counts with 0 < pooled rate < 1")
    if w is None:
        w = 1.0 / dataset.sei ** 2
    coef, se, df = _wls(n, y, w)
    return _t_test(coef[1], se[1], df, "Macaskill", coef[1])


def _pooled_weights(pub):
    if not all(s.has_counts for s in pub):
        return None
    et, tt, ec, tc = (np.array(col, dtype=float) for col in zip(*(s.counts() for s in pub)))
    p = (et + ec) / (tt + tc)
    if np.any(p <= 0) or np.any(p >= 1):
        return None
    q = p * (1.0 - p)
    return 1.0 / (1.0 / (tt * q) + 1.0 / (tc * q))
