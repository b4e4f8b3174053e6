"""Layer financial terms and secondary-uncertainty loss sampling.

The scalar cores are numba-compiled so the parallel mapper kernels can inline
them; each one is also usable from plain Python through its ``py_func``.
Only ``+ - * / min max`` appear in the term functions, so compiled and
interpreted evaluation agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from numba import njit

from .tables import EeltEntry, LayerTerms

# tolerances for the beta special functions
_FPMIN = 1e-300
_CF_EPS = 1e-16
_CF_MAXIT = 10_000
_INV_MAXIT = 400

M_CLAMP = 1e-9
SIGMA_CLAMP = 0.99


class BetaParameterError(ValueError):
    """Raised for non-finite or non-positive beta shape parameters."""


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise BetaParameterError(f"{name} must be finite and > 0, got {v!r}")


@dataclass(frozen=True)
class AggregateState:
    """Running aggregate position of one (trial, layer) pair."""

    cumulative: float = 0.0
    paid: float = 0.0


# --------------------------------------------------------------------------
# financial terms
# --------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def occurrence_payout(loss, ret, lim, share):
    return share * min(lim, max(0.0, loss - ret))


@njit(cache=True, nogil=True)
def aggregate_clip(cumulative, ret, lim):
    return min(lim, max(0.0, cumulative - ret))


def apply_occurrence_terms(loss: float, terms: LayerTerms) -> float:
    """Per-event payout: retention and limit on the gross loss, then the share."""
    if loss < 0:
        raise ValueError(f"loss must be >= 0, got {loss}")
    return occurrence_payout.py_func(loss, terms.occ_ret, terms.occ_lim, terms.share)


def apply_aggregate_terms(
    state: AggregateState, occurrence_payout: float, terms: LayerTerms
) -> tuple[AggregateState, float]:
    """Feed one occurrence payout through the annual aggregate terms.

    Returns the new state and the payout released by this occurrence, i.e.
    ``f(cumulative + payout) - f(cumulative)`` with ``f`` the aggregate clip.
    """
    if occurrence_payout < 0:
        raise ValueError(f"occurrence payout must be >= 0, got {occurrence_payout}")
    if occurrence_payout == 0:
        return state, 0.0
    clip = aggregate_clip.py_func
    cumulative = state.cumulative + occurrence_payout
    paid = clip(cumulative, terms.agg_ret, terms.agg_lim)
    increment = paid - clip(state.cumulative, terms.agg_ret, terms.agg_lim)
    return AggregateState(cumulative, paid), increment


# --------------------------------------------------------------------------
# regularized incomplete beta and its inverse
# --------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _betacf(a, b, x):
    # modified Lentz evaluation of the continued fraction for I_x(a, b)
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            break
    return h


@njit(cache=True, nogil=True)
def _lbeta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


@njit(cache=True, nogil=True)
def betainc(x, a, b):
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(a * math.log(x) + b * math.log1p(-x) - _lbeta(a, b))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


@njit(cache=True, nogil=True)
def _inverse_start(u, a, b):
    # Abramowitz-Stegun style starting point
    if a >= 1.0 and b >= 1.0:
        pp = u if u < 0.5 else 1.0 - u
        t = math.sqrt(-2.0 * math.log(pp))
        x = (2.30753 + t * 0.27061) / (1.0 + t * (0.99229 + t * 0.04481)) - t
        if u < 0.5:
            x = -x
        al = (x * x - 3.0) / 6.0
        h = 2.0 / (1.0 / (2.0 * a - 1.0) + 1.0 / (2.0 * b - 1.0))
        w = x * math.sqrt(al + h) / h - (1.0 / (2.0 * b - 1.0) - 1.0 / (2.0 * a - 1.0)) * (
            al + 5.0 / 6.0 - 2.0 / (3.0 * h)
        )
        return a / (a + b * math.exp(2.0 * w))
    lna = math.log(a / (a + b))
    lnb = math.log(b / (a + b))
    t = math.exp(a * lna) / a
    v = math.exp(b * lnb) / b
    w = t + v
    if u < t / w:
        return (a * w * u) ** (1.0 / a)
    return 1.0 - (b * w * (1.0 - u)) ** (1.0 / b)


@njit(cache=True, nogil=True)
def betaincinv(u, a, b):
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    lo = 0.0
    hi = 1.0
    lbeta = _lbeta(a, b)
    x = _inverse_start(u, a, b)
    if not (0.0 < x < 1.0):
        x = 0.5
    for _ in range(_INV_MAXIT):
        f = betainc(x, a, b) - u
        if f == 0.0:
            return x
        if f < 0.0:
            lo = x
        else:
            hi = x
        pdf = math.exp((a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - lbeta)
        xn = x - f / pdf if pdf > 0.0 else -1.0
        if not (lo < xn < hi):
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= 2e-16 * x or xn == lo or xn == hi:
            return xn
        x = xn
    return x


def regularized_incomplete_beta(x: float, p: BetaParams) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    return betainc(float(x), float(p.alpha), float(p.beta))


def inverse_incomplete_beta(u: float, p: BetaParams) -> float:
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    return betaincinv(float(u), float(p.alpha), float(p.beta))


# --------------------------------------------------------------------------
# secondary uncertainty
# --------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def beta_moments(mean_loss, sigma_i, sigma_c, max_loss):
    """Method-of-moments shape parameters for the loss fraction of ``max_loss``."""
    m = mean_loss / max_loss
    if m < M_CLAMP:
        m = M_CLAMP
    elif m > 1.0 - M_CLAMP:
        m = 1.0 - M_CLAMP
    s = math.sqrt(sigma_i * sigma_i + sigma_c * sigma_c) / max_loss
    cap = SIGMA_CLAMP * math.sqrt(m * (1.0 - m))
    if s > cap:
        s = cap
    nu = m * (1.0 - m) / (s * s) - 1.0
    return m * nu, (1.0 - m) * nu


@njit(cache=True, nogil=True)
def sample_loss(z_pe, z_e, mean_loss, sigma_i, sigma_c, max_loss, secondary):
    if not secondary:
        return mean_loss
    if max_loss <= 0.0:
        return 0.0
    if sigma_i == 0.0 and sigma_c == 0.0:
        # zero spread: the distribution collapses onto its mean
        return mean_loss
    u = z_pe + z_e
    if u >= 1.0:
        u -= 1.0
    a, b = beta_moments(mean_loss, sigma_i, sigma_c, max_loss)
    return max_loss * betaincinv(u, a, b)


def sample_event_loss(entry: EeltEntry, z_pe: float, secondary_uncertainty: bool = True) -> float:
    """Loss drawn for one event occurrence.

    With secondary uncertainty the loss is ``max_loss`` times an inverse beta
    quantile at ``u = frac(z_pe + z_e)``; without it the mean loss is used.
    """
    return sample_loss(
        float(z_pe),
        entry.z_e,
        entry.mean_loss,
        entry.sigma_i,
        entry.sigma_c,
        entry.max_loss,
        bool(secondary_uncertainty),
    )
