"""Closed-form reference values used across the test suite.

Each function is independent of the package under test: plain numpy/scipy
evaluations of exact formulas.
"""
import math

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binom, norm


def two_vortex_drift(d, m):
    """Drift of X=((d,0),(-d,0)), M=(m,m): b1 = (0, m/(8 pi d)), b2 = -b1."""
    b = m / (8 * math.pi * d)
    return np.array([[0.0, b], [0.0, -b]])


def lamb_oseen_vorticity(gamma, t0, sigma, t, r2):
    s = 4 * sigma * (t + t0)
    return gamma / (math.pi * s) * np.exp(-r2 / s)


def lamb_oseen_speed(gamma, t0, sigma, t, r):
    """Azimuthal speed ``gamma/(2 pi r) (1 - exp(-r^2/(4 sigma (t+t0))))``."""
    s = 4 * sigma * (t + t0)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = gamma / (2 * math.pi * r) * -np.expm1(-r**2 / s)
    return np.where(r > 0, v, 0.0)


def gaussian_kl(mu):
    """KL(N(0,1) | N(mu,1))."""
    return mu**2 / 2


def gaussian_tv(mu):
    """Half L1 distance between N(0,1) and N(mu,1)."""
    return 2 * norm.cdf(abs(mu) / 2) - 1


def gaussian_fisher(mu):
    """Relative Fisher information of N(0,1) against N(mu,1)."""
    return mu**2


def beta_k1_tail(k, thr):
    """P(Y > thr) for Y ~ Beta(k, 1)."""
    return 1 - thr**k


def b_kl(k, l, phi):
    """B_k^l = C(l-1, k-1) (1-e^-phi)^(l-k) e^(-k phi)."""
    return math.comb(l - 1, k - 1) * (1 - math.exp(-phi)) ** (l - k) * math.exp(-k * phi)


def log_family_phi(C, t):
    L = math.log1p(t)
    return C * (L + 0.5 * L * L)


def sign_ld_moment(N, s):
    """log E exp(s S^2 / N), S a sum of N fair +-1 signs."""
    j = np.arange(N + 1)
    S = 2 * j - N
    return float(logsumexp(s * S**2 / N, b=binom.pmf(j, N, 0.5)))


def i0_scan(c1, c2):
    i = 1
    while (i / (i + 1)) ** 5 < c2 / c1:
        i += 1
    return i
