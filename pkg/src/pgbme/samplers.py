"""Random-variate primitives used by the Gibbs sampler.

All functions take a :class:`numpy.random.Generator`; use :func:`rng_stream`
to obtain a reproducible, independently keyed stream.
"""
from __future__ import annotations

import enum

import numpy as np
from scipy.linalg import lapack, solve_triangular
from scipy.special import log_ndtr, ndtr, ndtri

from .errors import DecompositionError, SamplingError

__all__ = [
    "rng_stream",
    "TruncRegion",
    "draw_truncnorm",
    "draw_latent_pair",
    "draw_mvnorm",
    "draw_inverse_wishart",
    "draw_inverse_gamma",
    "draw_regression",
    "draw_gaussian_canonical",
    "cholesky",
]

# Below this probability mass a truncated draw is refused.
MIN_MASS = 1e-300
_LOG_MIN_MASS = np.log(MIN_MASS)
# Standardised bound beyond which the exponential-proposal tail sampler is used.
TAIL_SWITCH = 5.0
_MAX_REJECTION_ROUNDS = 10_000


def rng_stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Counter-based generator keyed on ``(seed, stream_id)``.

    Equal keys give identical sequences; distinct stream ids give
    non-overlapping Philox streams.
    """
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF,
                    int(stream_id) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class TruncRegion(enum.IntEnum):
    """Constraint on a latent pair (z1, z2).

    ``NOT_BOTH_POSITIVE`` and ``BOTH_POSITIVE`` are the y = 0 / y = 1 events of
    the partially observed model. ``BOTH_NEGATIVE`` serves the directed
    (GBME) baseline and ``UNCONSTRAINED`` serves held-out dyads.
    """

    NOT_BOTH_POSITIVE = 0
    BOTH_POSITIVE = 1
    BOTH_NEGATIVE = 2
    UNCONSTRAINED = 3


def _log_mass(a, b):
    # log(Phi(b) - Phi(a)), stable in both tails.
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.empty(np.broadcast(a, b).shape)
    a, b = np.broadcast_arrays(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        right = a > 0
        la, lb = log_ndtr(-a[right]), log_ndtr(-b[right])
        out[right] = la + np.log1p(-np.exp(lb - la))
        left = ~right
        la, lb = log_ndtr(a[left]), log_ndtr(b[left])
        out[left] = lb + np.log1p(-np.exp(la - lb))
    return np.where(np.isnan(out), -np.inf, out)


def _tail_right(a, b, rng):
    """Standard normal on (a, b) with a > TAIL_SWITCH, by rejection."""
    n = a.shape[0]
    x = np.empty(n)
    # uniform proposal when the interval is short, translated exponential otherwise
    short = np.isfinite(b) & (0.5 * (b * b - a * a) < 1.0)
    alpha = 0.5 * (a + np.sqrt(a * a + 4.0))
    todo = np.arange(n)
    for _ in range(_MAX_REJECTION_ROUNDS):
        if todo.size == 0:
            return x
        aa, bb, al, sh = a[todo], b[todo], alpha[todo], short[todo]
        prop = np.where(
            sh,
            aa + (np.where(sh, bb, aa + 1.0) - aa) * rng.random(todo.size),
            aa + rng.standard_exponential(todo.size) / al,
        )
        logacc = np.where(sh, -0.5 * (prop * prop - aa * aa),
                          -0.5 * (prop - al) ** 2)
        u = rng.random(todo.size)
        ok = (np.log(u) <= logacc) & (prop > aa) & (prop < bb)
        x[todo[ok]] = prop[ok]
        todo = todo[~ok]
    raise SamplingError("tail rejection sampler failed to terminate")


def _require_mass(ok, a, b):
    if not np.all(ok):
        k = int(np.argmin(ok))
        raise SamplingError(
            f"truncation interval ({a[k]:.6g}, {b[k]:.6g}) has probability "
            f"mass below {MIN_MASS:g}")


def _trunc_std(a, b, rng):
    """Standard normal draws truncated to (a, b), elementwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    shape = np.broadcast(a, b).shape
    a = np.broadcast_to(a, shape).ravel()
    b = np.broadcast_to(b, shape).ravel()
    if np.any(np.isnan(a) | np.isnan(b)):
        raise ValueError("truncation bounds must not be NaN")
    if np.any(a >= b):
        k = int(np.argmax(a >= b))
        raise SamplingError(f"empty truncation interval ({a[k]:.6g}, {b[k]:.6g})")
    x = np.empty(a.shape[0])
    right = a > TAIL_SWITCH
    left = b < -TAIL_SWITCH
    mid = ~(right | left)
    for sel, lo, hi, sign in ((right, a, b, 1.0), (left, -b, -a, -1.0)):
        if sel.any():
            lo, hi = lo[sel], hi[sel]
            _require_mass(_log_mass(lo, hi) >= _LOG_MIN_MASS, lo, hi)
            x[sel] = sign * _tail_right(lo, hi, rng)
    if mid.any():
        am, bm = a[mid], b[mid]
        # invert on whichever side keeps the tail probabilities small
        upper = am > 0
        pa = ndtr(np.where(upper, -am, am))
        pb = ndtr(np.where(upper, -bm, bm))
        _require_mass(np.abs(pb - pa) >= MIN_MASS, am, bm)
        u = rng.random(am.shape[0])
        q = pa + u * (pb - pa)
        xm = np.where(upper, -ndtri(q), ndtri(q))
        lo = np.nextafter(am, np.inf)
        hi = np.nextafter(bm, -np.inf)
        x[mid] = np.clip(xm, lo, hi)
    return x.reshape(shape)


def draw_truncnorm(mean, sd, lower, upper, rng: np.random.Generator, size=None):
    """Normal(mean, sd^2) draws conditioned on (lower, upper).

    Broadcasts over array arguments. Inverse-CDF sampling is used unless the
    standardised interval lies entirely beyond 5 sd, where an exponential
    proposal rejection sampler takes over.

    Raises
    ------
    SamplingError
        If the interval carries less than 1e-300 probability.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    a = (np.asarray(lower, dtype=float) - mean) / sd
    b = (np.asarray(upper, dtype=float) - mean) / sd
    if size is not None:
        a = np.broadcast_to(a, size)
        b = np.broadcast_to(b, size)
    out = mean + sd * _trunc_std(a, b, rng)
    if out.ndim == 0:
        return float(out)
    return out


def _pair_independent(m1, m2, codes, rng):
    n = m1.shape[0]
    lo1 = np.full(n, -np.inf)
    hi1 = np.full(n, np.inf)
    lo2, hi2 = lo1.copy(), hi1.copy()

    pos = codes == TruncRegion.BOTH_POSITIVE
    lo1[pos] = 0.0
    lo2[pos] = 0.0
    neg = codes == TruncRegion.BOTH_NEGATIVE
    hi1[neg] = 0.0
    hi2[neg] = 0.0

    nbp = np.flatnonzero(codes == TruncRegion.NOT_BOTH_POSITIVE)
    if nbp.size:
        a1, a2 = m1[nbp], m2[nbp]
        lp1, ln1 = log_ndtr(a1), log_ndtr(-a1)
        lp2, ln2 = log_ndtr(a2), log_ndtr(-a2)
        logw = np.stack([ln1 + ln2, ln1 + lp2, lp1 + ln2], axis=1)
        top = logw.max(axis=1)
        total = top + np.log(np.exp(logw - top[:, None]).sum(axis=1))
        if np.any(total < _LOG_MIN_MASS):
            raise SamplingError("not-both-positive region has negligible mass")
        w = np.exp(logw - total[:, None])
        cum = np.cumsum(w, axis=1)
        u = rng.random(nbp.size)
        orth = (u[:, None] > cum[:, :2]).sum(axis=1)
        # orthant 0: (-,-), 1: (-,+), 2: (+,-)
        first_neg = orth < 2
        second_neg = orth != 1
        hi1[nbp[first_neg]] = 0.0
        lo1[nbp[~first_neg]] = 0.0
        hi2[nbp[second_neg]] = 0.0
        lo2[nbp[~second_neg]] = 0.0

    m = np.concatenate([m1, m2])
    z = m + _trunc_std(np.concatenate([lo1, lo2]) - m,
                       np.concatenate([hi1, hi2]) - m, rng)
    return z[:n], z[n:]


def _bounds_given_partner(codes, partner):
    lo = np.full(codes.shape, -np.inf)
    hi = np.full(codes.shape, np.inf)
    lo[codes == TruncRegion.BOTH_POSITIVE] = 0.0
    hi[codes == TruncRegion.BOTH_NEGATIVE] = 0.0
    hi[(codes == TruncRegion.NOT_BOTH_POSITIVE) & (partner > 0)] = 0.0
    return lo, hi


def draw_latent_pair(m1, m2, rho, region, rng: np.random.Generator,
                     init=None, n_sweeps: int = 5):
    """Draw (z1, z2) from a unit-variance bivariate normal restricted to a region.

    Vectorised over dyads: ``m1``, ``m2`` and ``region`` broadcast together.
    For ``rho == 0`` the draw is exact (the not-both-positive region is split
    into its three admissible orthants). For ``rho != 0`` a short Gibbs
    sub-sweep of ``n_sweeps`` univariate conditional draws is run starting
    from ``init`` (a feasible pair), or from the exact ``rho = 0`` draw.
    """
    if not -1.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (-1, 1), got {rho}")
    scalar = np.ndim(m1) == 0 and np.ndim(m2) == 0 and np.ndim(region) == 0
    m1, m2, codes = np.broadcast_arrays(np.asarray(m1, dtype=float),
                                        np.asarray(m2, dtype=float),
                                        np.asarray(region, dtype=np.int8))
    shape = m1.shape
    m1, m2, codes = m1.ravel(), m2.ravel(), codes.ravel()

    if rho == 0.0:
        z1, z2 = _pair_independent(m1, m2, codes, rng)
    else:
        c = np.sqrt(1.0 - rho * rho)
        free = codes == TruncRegion.UNCONSTRAINED
        if init is None:
            z1, z2 = _pair_independent(m1, m2, codes, rng)
        else:
            z1 = np.array(init[0], dtype=float).ravel().copy()
            z2 = np.array(init[1], dtype=float).ravel().copy()
        for _ in range(n_sweeps):
            lo, hi = _bounds_given_partner(codes, z2)
            mu = m1 + rho * (z2 - m2)
            z1 = mu + c * _trunc_std((lo - mu) / c, (hi - mu) / c, rng)
            lo, hi = _bounds_given_partner(codes, z1)
            mu = m2 + rho * (z1 - m1)
            z2 = mu + c * _trunc_std((lo - mu) / c, (hi - mu) / c, rng)
        if free.any():
            e1 = rng.standard_normal(free.sum())
            e2 = rng.standard_normal(free.sum())
            z1[free] = m1[free] + e1
            z2[free] = m2[free] + rho * e1 + c * e2
    if scalar:
        return float(z1[0]), float(z2[0])
    return z1.reshape(shape), z2.reshape(shape)


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises DecompositionError naming the failing minor."""
    a = np.asarray(a, dtype=float)
    if a.shape == (0, 0):
        return a.copy()
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise DecompositionError(
            f"matrix is not positive definite (leading minor {info})", minor=info)
    if info < 0:
        raise DecompositionError(f"invalid argument to dpotrf ({info})")
    return c


def draw_mvnorm(mean, cov, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    chol = cholesky(cov)
    return mean + chol @ rng.standard_normal(mean.shape[0])


def draw_gaussian_canonical(precision, linear, rng: np.random.Generator):
    """Draw from N(P^{-1} h, P^{-1}) given precision P and linear term h."""
    chol = cholesky(precision)
    w = solve_triangular(chol, linear, lower=True)
    mean_plus = w + rng.standard_normal(w.shape[0])
    return solve_triangular(chol, mean_plus, lower=True, trans="T")


def draw_inverse_wishart(scale, dof: float, rng: np.random.Generator, size=None):
    """Inverse-Wishart draw with mean scale / (dof - p - 1).

    The Wishart(scale^{-1}, dof) variate is built with the Bartlett
    decomposition and inverted. ``size`` gives a stack of independent draws.
    """
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if not dof > p - 1:
        raise ValueError(f"degrees of freedom must exceed {p - 1}, got {dof}")
    chol_s = cholesky(scale)
    if size is None:
        bart = np.zeros((p, p))
        bart[np.diag_indices(p)] = np.sqrt(rng.chisquare(dof - np.arange(p)))
        il = np.tril_indices(p, -1)
        bart[il] = rng.standard_normal(len(il[0]))
        # Sigma = (L^{-T} A A' L^{-1})^{-1} = T'T with T = A^{-1} L'
        t = solve_triangular(bart, chol_s.T, lower=True)
        out = t.T @ t
        return 0.5 * (out + out.T)
    bart = np.zeros((size, p, p))
    idx = np.arange(p)
    bart[:, idx, idx] = np.sqrt(rng.chisquare(dof - idx, size=(size, p)))
    il = np.tril_indices(p, -1)
    bart[:, il[0], il[1]] = rng.standard_normal((size, len(il[0])))
    t = np.linalg.solve(bart, np.broadcast_to(chol_s.T, (size, p, p)))
    out = np.swapaxes(t, 1, 2) @ t
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def draw_inverse_gamma(shape: float, rate: float, rng: np.random.Generator, size=None):
    """Inverse-gamma draw (density proportional to x^{-shape-1} exp(-rate/x))."""
    if shape <= 0 or rate <= 0:
        raise ValueError("inverse gamma needs positive shape and rate")
    g = rng.standard_gamma(shape, size=size)
    if size is None:
        return float(rate / max(g, np.finfo(float).tiny))
    return rate / np.maximum(g, np.finfo(float).tiny)


def draw_regression(design, response, noise_var: float, prior_mean, prior_cov,
                    rng: np.random.Generator) -> np.ndarray:
    """Conjugate normal posterior draw of regression coefficients."""
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    prior_mean = np.asarray(prior_mean, dtype=float)
    q = prior_mean.shape[0]
    design = design.reshape(-1, q)
    if design.shape[0] != response.shape[0]:
        raise ValueError("design rows and response length differ")
    prior_prec = np.linalg.inv(prior_cov)
    prec = design.T @ design / noise_var + prior_prec
    lin = design.T @ response / noise_var + prior_prec @ prior_mean
    return draw_gaussian_canonical(prec, lin, rng)
