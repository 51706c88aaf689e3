"""Grid kernels for the analytic 1-D quantities.

Each kernel has a vectorised numpy implementation (``*_np``) and a scalar-loop
implementation compiled by numba (``*_nb``). The public names at the bottom of
the module point at one or the other according to ``_accel.USE_NUMBA``.

Labeling-branch codes shared by all kernels:

    +1  v.u_perp > 0, smooth branch 1 - Phi((q - m_perp)/sigma)
    -1  v.u_perp < 0, smooth branch Phi((q - m_perp)/sigma)
    +2  degenerate, v.u > 0: 0.5 * (1 + sign(z))
    -2  degenerate, v.u < 0: 0.5 * (1 - sign(z))
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, ndtr

from ._accel import USE_NUMBA, njit

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG_HALF = math.log(0.5)
_SQRT_2PI = math.sqrt(2.0 * math.pi)
# pdf values below this are treated as zero mass in the KL integrand
KL_CLAMP = 1e-300


# ---------------------------------------------------------------- numpy path


def norm_cdf_np(x):
    return ndtr(x)


def mixture_logpdf_np(z, m1, m2, sigma):
    a = -0.5 * ((z - m1) / sigma) ** 2
    b = -0.5 * ((z - m2) / sigma) ** 2
    return _LOG_HALF + np.logaddexp(a, b) - math.log(sigma) - _LOG_SQRT_2PI


def _posterior_first_np(z, m1, m2, sigma):
    # posterior weight of the first component given z
    return expit((m1 - m2) * (2.0 * z - m1 - m2) / (2.0 * sigma * sigma))


def induced_label_np(z, m1, m2, w1, w2, sigma, slope, branch):
    z = np.asarray(z, dtype=np.float64)
    if branch == 2:
        return 0.5 * (1.0 + np.sign(z))
    if branch == -2:
        return 0.5 * (1.0 - np.sign(z))
    q = slope * z
    p1 = ndtr((q - w1) / sigma)
    p2 = ndtr((q - w2) / sigma)
    if branch == 1:
        p1 = 1.0 - p1
        p2 = 1.0 - p2
    r = _posterior_first_np(z, m1, m2, sigma)
    return r * p1 + (1.0 - r) * p2


def step_limit(branch, side):
    """One-sided limit at z=0 of a degenerate step label (side -1 left, +1 right)."""
    up = 1.0 if side > 0 else 0.0
    return up if branch == 2 else 1.0 - up


def jump_average(z, integrand, labels, params):
    """Integrand values with the z=0 node replaced by the mean of both one-sided limits.

    A degenerate label jumps at z=0; when 0 is a panel boundary of the grid this
    keeps the composite rule exact on either side of the jump.
    """
    vals = integrand(*labels)
    i0 = np.flatnonzero(z == 0.0)
    if i0.size == 0 or not any(abs(int(p[6])) == 2 for p in params):
        return vals
    vals = np.array(vals, dtype=np.float64)
    sides = []
    for side in (-1, 1):
        fl = []
        for f, p in zip(labels, params):
            f = np.array(f, dtype=np.float64)
            if abs(int(p[6])) == 2:
                f[i0] = step_limit(int(p[6]), side)
            fl.append(f)
        sides.append(integrand(*fl)[i0])
    vals[i0] = 0.5 * (sides[0] + sides[1])
    return vals


def objective_terms_np(z, wq, s, t, a, b):
    """Squared source loss and squared-L2 density mismatch on one grid."""
    ps = np.exp(mixture_logpdf_np(z, s[0], s[1], s[4]))
    pt = np.exp(mixture_logpdf_np(z, t[0], t[1], t[4]))
    fs = induced_label_np(z, s[0], s[1], s[2], s[3], s[4], s[5], int(s[6]))
    h = ndtr(a * z + b)
    sq = jump_average(z, lambda f: ps * (h - f) ** 2, [fs], [s])
    return float(wq @ sq), float(wq @ ((ps - pt) ** 2))


def measure_terms_np(z, wq, s, t, a, b):
    """All scalar measures at once.

    Returns (e_S_sq, e_S_abs, e_T_abs, mismatch_S, mismatch_T, tv, mismatch_sq, kl).
    """
    ls = mixture_logpdf_np(z, s[0], s[1], s[4])
    lt = mixture_logpdf_np(z, t[0], t[1], t[4])
    ps = np.exp(ls)
    pt = np.exp(lt)
    fs = induced_label_np(z, s[0], s[1], s[2], s[3], s[4], s[5], int(s[6]))
    ft = induced_label_np(z, t[0], t[1], t[2], t[3], t[4], t[5], int(t[6]))
    h = ndtr(a * z + b)
    kl_int = np.where(ps < KL_CLAMP, 0.0, ps * (ls - lt))
    labeled = jump_average(
        z,
        lambda f, g: np.stack([ps * (h - f) ** 2, ps * np.abs(f - h), pt * np.abs(g - h), ps * np.abs(f - g), pt * np.abs(f - g)]).T,
        [fs, ft],
        [s, t],
    )
    return (
        *(float(v) for v in wq @ labeled),
        float(wq @ np.abs(ps - pt)),
        float(wq @ ((ps - pt) ** 2)),
        float(wq @ kl_int),
    )


# ---------------------------------------------------------------- numba path


@njit
def _ncdf(x):
    return 0.5 * math.erfc(-x / _SQRT2)


@njit
def _mix_logpdf(z, m1, m2, sigma):
    a = -0.5 * ((z - m1) / sigma) ** 2
    b = -0.5 * ((z - m2) / sigma) ** 2
    hi = a if a > b else b
    lo = b if a > b else a
    return _LOG_HALF + hi + math.log1p(math.exp(lo - hi)) - math.log(sigma) - _LOG_SQRT_2PI


@njit
def _label(z, m1, m2, w1, w2, sigma, slope, branch):
    if branch == 2 or branch == -2:
        sg = 0.0
        if z > 0.0:
            sg = 1.0
        elif z < 0.0:
            sg = -1.0
        if branch == 2:
            return 0.5 * (1.0 + sg)
        return 0.5 * (1.0 - sg)
    q = slope * z
    p1 = _ncdf((q - w1) / sigma)
    p2 = _ncdf((q - w2) / sigma)
    if branch == 1:
        p1 = 1.0 - p1
        p2 = 1.0 - p2
    d = (m1 - m2) * (2.0 * z - m1 - m2) / (2.0 * sigma * sigma)
    if d >= 0.0:
        r = 1.0 / (1.0 + math.exp(-d))
    else:
        e = math.exp(d)
        r = e / (1.0 + e)
    return r * p1 + (1.0 - r) * p2


@njit
def norm_cdf_nb(x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = _ncdf(x[i])
    return out


@njit
def mixture_logpdf_nb(z, m1, m2, sigma):
    out = np.empty(z.shape[0])
    for i in range(z.shape[0]):
        out[i] = _mix_logpdf(z[i], m1, m2, sigma)
    return out


@njit
def induced_label_nb(z, m1, m2, w1, w2, sigma, slope, branch):
    out = np.empty(z.shape[0])
    for i in range(z.shape[0]):
        out[i] = _label(z[i], m1, m2, w1, w2, sigma, slope, branch)
    return out


@njit
def _pair_terms(zi, m1, m2, inv_var):
    # unnormalised component densities exp(-(z-m)^2 / 2 sigma^2)
    e1 = math.exp(-0.5 * (zi - m1) * (zi - m1) * inv_var)
    e2 = math.exp(-0.5 * (zi - m2) * (zi - m2) * inv_var)
    return e1, e2


@njit
def _label_fused(zi, e1, e2, m1, m2, w1, w2, sigma, slope, branch):
    # same value as _label, reusing the component densities already computed
    if branch == 2 or branch == -2:
        return _label(zi, m1, m2, w1, w2, sigma, slope, branch)
    tot = e1 + e2
    if tot <= 0.0:
        return _label(zi, m1, m2, w1, w2, sigma, slope, branch)
    q = slope * zi
    p1 = _ncdf((q - w1) / sigma)
    p2 = _ncdf((q - w2) / sigma)
    if branch == 1:
        p1 = 1.0 - p1
        p2 = 1.0 - p2
    r = e1 / tot
    return r * p1 + (1.0 - r) * p2


@njit
def _step_limit(branch, side):
    up = 1.0 if side > 0 else 0.0
    return up if branch == 2 else 1.0 - up


@njit
def objective_terms_nb(z, wq, s, t, a, b):
    sq = 0.0
    dm = 0.0
    bs = int(s[6])
    ivs = 1.0 / (s[4] * s[4])
    ivt = 1.0 / (t[4] * t[4])
    cs = 0.5 / (s[4] * _SQRT_2PI)
    ct = 0.5 / (t[4] * _SQRT_2PI)
    for i in range(z.shape[0]):
        zi = z[i]
        e1, e2 = _pair_terms(zi, s[0], s[1], ivs)
        f1, f2 = _pair_terms(zi, t[0], t[1], ivt)
        ps = cs * (e1 + e2)
        pt = ct * (f1 + f2)
        dm += wq[i] * (ps - pt) * (ps - pt)
        if ps == 0.0:
            continue
        h = _ncdf(a * zi + b)
        if zi == 0.0 and (bs == 2 or bs == -2):
            fl = _step_limit(bs, -1)
            fr = _step_limit(bs, 1)
            sq += wq[i] * ps * 0.5 * ((h - fl) * (h - fl) + (h - fr) * (h - fr))
            continue
        fs = _label_fused(zi, e1, e2, s[0], s[1], s[2], s[3], s[4], s[5], bs)
        sq += wq[i] * ps * (h - fs) * (h - fs)
    return sq, dm


@njit
def _acc_labeled(acc, w, ps, pt, fs, ft, h):
    acc[0] += w * ps * (h - fs) * (h - fs)
    acc[1] += w * ps * abs(fs - h)
    acc[2] += w * pt * abs(ft - h)
    acc[3] += w * ps * abs(fs - ft)
    acc[4] += w * pt * abs(fs - ft)


@njit
def measure_terms_nb(z, wq, s, t, a, b):
    acc = np.zeros(8)
    bs = int(s[6])
    bt = int(t[6])
    ivs = 1.0 / (s[4] * s[4])
    ivt = 1.0 / (t[4] * t[4])
    cs = 0.5 / (s[4] * _SQRT_2PI)
    ct = 0.5 / (t[4] * _SQRT_2PI)
    for i in range(z.shape[0]):
        zi = z[i]
        w = wq[i]
        e1, e2 = _pair_terms(zi, s[0], s[1], ivs)
        f1, f2 = _pair_terms(zi, t[0], t[1], ivt)
        ps = cs * (e1 + e2)
        pt = ct * (f1 + f2)
        fs = _label_fused(zi, e1, e2, s[0], s[1], s[2], s[3], s[4], s[5], bs)
        ft = _label_fused(zi, f1, f2, t[0], t[1], t[2], t[3], t[4], t[5], bt)
        h = _ncdf(a * zi + b)
        if zi == 0.0 and (bs == 2 or bs == -2 or bt == 2 or bt == -2):
            # average the two one-sided limits at the jump
            for side in (-1, 1):
                fsl = _step_limit(bs, side) if (bs == 2 or bs == -2) else fs
                ftl = _step_limit(bt, side) if (bt == 2 or bt == -2) else ft
                _acc_labeled(acc, 0.5 * w, ps, pt, fsl, ftl, h)
        else:
            _acc_labeled(acc, w, ps, pt, fs, ft, h)
        acc[5] += w * abs(ps - pt)
        acc[6] += w * (ps - pt) * (ps - pt)
        if ps >= KL_CLAMP:
            ls = _mix_logpdf(zi, s[0], s[1], s[4])
            lt = _mix_logpdf(zi, t[0], t[1], t[4])
            acc[7] += w * ps * (ls - lt)
    return acc[0], acc[1], acc[2], acc[3], acc[4], acc[5], acc[6], acc[7]


# ---------------------------------------------------------------- dispatch

if USE_NUMBA:
    norm_cdf = norm_cdf_nb
    mixture_logpdf = mixture_logpdf_nb
    induced_label = induced_label_nb
    objective_terms = objective_terms_nb
    measure_terms = measure_terms_nb
else:
    norm_cdf = norm_cdf_np
    mixture_logpdf = mixture_logpdf_np
    induced_label = induced_label_np
    objective_terms = objective_terms_np
    measure_terms = measure_terms_np
