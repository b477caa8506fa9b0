"""Shared pieces of the Copas-type selection likelihoods.

For a published study with effect ``y``, standard error ``s`` (taken as the
true within-study SD) and selection index ``u`` the log density of ``y``
given publication, up to the ``-log Phi(u)`` normaliser, is::

    -log(V)/2 - (y - theta)^2 / (2 V) + log Phi(v)
    V = tau^2 + s^2
    v = (u + rho s (y - theta) / V) / sqrt(1 - rho^2 s^2 / V)

Additive constants are dropped throughout.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def mills(x):
    """phi(x) / Phi(x) without overflow in the lower tail."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - _LOG_SQRT_2PI - special.log_ndtr(x))


def published_terms(theta, tau, rho, u, y, s, grad=False):
    """Per-study log terms and, optionally, their derivatives.

    Returns ``ll`` (array) or ``(ll, d_theta, d_tau, d_rho, d_u)`` where each
    derivative is an array over studies; ``d_u`` is the derivative with
    respect to the selection index ``u``.
    """
    V = tau * tau + s * s
    r = y - theta
    A = u + rho * s * r / V
    B2 = 1.0 - rho * rho * s * s / V
    B = np.sqrt(B2)
    v = A / B
    ll = -0.5 * np.log(V) - 0.5 * r * r / V + special.log_ndtr(v)
    if not grad:
        return ll
    lam = mills(v)
    dv_dtheta = -rho * s / (V * B)
    dA_dtau = -2.0 * rho * s * r * tau / (V * V)
    dB_dtau = rho * rho * s * s * tau / (V * V * B)
    dv_dtau = dA_dtau / B - A * dB_dtau / B2
    dv_drho = (s * r / V) / B + A * rho * s * s / (V * B2 * B)
    d_theta = r / V + lam * dv_dtheta
    d_tau = -tau / V + r * r * tau / (V * V) + lam * dv_dtau
    d_rho = lam * dv_drho
    d_u = lam / B
    return ll, d_theta, d_tau, d_rho, d_u


def conditional_mean_var(theta, tau, rho, u, s):
    """Mean and variance of a published effect under the selection model."""
    lam = mills(u)
    mean = theta + rho * s * lam
    var = tau * tau + s * s * (1.0 - rho * rho * lam * (u + lam))
    return mean, var
