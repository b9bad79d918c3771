"""Gibbs sampler for the partially observed bilinear mixed-effects model and
its two baselines (directed GBME and pooled probit).

A sweep updates, in order: latent utilities, (beta_d, s, r) jointly,
(beta_s, beta_r), Sigma_ab, the latent positions U and V with their
variances, an exact rebalancing of the U/V scales, a scale move and
optionally rho.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.special import log_ndtr, ndtr

from . import samplers
from .errors import (DecompositionError, FitError, NumericalError,
                     SamplingError, ValidationError)
from .model import (AdditiveEffects, CovariateSet, ImputedCovariates,
                    LatentUtilities, MultiplicativeEffects, ObservedNetwork,
                    RegressionCoefficients, centered_mean_matrix)
from .samplers import TruncRegion

log = logging.getLogger(__name__)

__all__ = [
    "Variant",
    "FitConfig",
    "ModelState",
    "PosteriorDraws",
    "init_state",
    "update_latent",
    "update_additive",
    "update_sigma_ab",
    "update_multiplicative",
    "update_latent_variances",
    "update_position_balance",
    "update_rho",
    "update_scale",
    "run_chain",
    "sweep",
]

# Bound on pooled-probit starting coefficients; caps separated fits.
INIT_COEF_BOUND = 10.0


class Variant(str, enum.Enum):
    PGBME = "pgbme"
    GBME = "gbme"
    PROBIT = "probit"


@dataclass
class FitConfig:
    k_dim: int = 2
    n_iter: int = 20_000
    n_burn: int = 10_000
    thin: int = 10
    estimate_rho: bool = False
    rho: float = 0.0
    model_variant: Variant = Variant.PGBME
    prior_beta_var: float = 10.0
    prior_sigma_ab_scale: tuple = ((1.0, 0.0), (0.0, 1.0))
    prior_sigma_ab_dof: float = 4.0
    prior_ig_shape: float = 1.0
    prior_ig_rate: float = 1.0
    rho_proposal_sd: float = 0.05
    scale_move: bool = True
    seed: int = 0
    stream_id: int = 0
    keep_latent: bool = False
    check_invariants: bool = True

    def __post_init__(self):
        self.model_variant = Variant(self.model_variant)
        self.prior_sigma_ab_scale = tuple(
            tuple(float(v) for v in row) for row in np.asarray(self.prior_sigma_ab_scale))
        if self.k_dim < 0:
            raise ValidationError("k_dim must be >= 0")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if not 0 <= self.n_burn < self.n_iter:
            raise ValidationError("need 0 <= n_burn < n_iter")
        if not -1.0 < self.rho < 1.0:
            raise ValidationError("rho must lie in (-1, 1)")
        if self.prior_beta_var <= 0:
            raise ValidationError("prior_beta_var must be positive")

    @property
    def n_saved(self) -> int:
        return (self.n_iter - self.n_burn) // self.thin

    @property
    def effective_k(self) -> int:
        return 0 if self.model_variant is Variant.PROBIT else self.k_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model_variant"] = self.model_variant.value
        d["prior_sigma_ab_scale"] = [list(r) for r in self.prior_sigma_ab_scale]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **kw) -> "FitConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class ModelState:
    coef: RegressionCoefficients
    add: AdditiveEffects
    mult: MultiplicativeEffects
    latent: LatentUtilities

    @property
    def rho(self) -> float:
        return self.latent.rho

    def mean_matrix(self, cov: CovariateSet) -> np.ndarray:
        return centered_mean_matrix(self.coef.beta_d, cov.dyad_x, self.add.s,
                                    self.add.r, self.mult.u, self.mult.v)

    def copy(self) -> "ModelState":
        return ModelState(self.coef.copy(), self.add.copy(), self.mult.copy(),
                          LatentUtilities(self.latent.z.copy(), self.latent.rho))


_SCALAR_TRACES = ("sigma_a2", "sigma_b2", "sigma_ab", "sigma_u2", "sigma_v2", "rho")


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in draws stored as stacked arrays.

    ``arrays`` maps parameter names to arrays with the saved-draw index first.
    ``replicates`` records the covariate replicate used at every iteration.
    """

    config: FitConfig
    arrays: dict
    replicates: np.ndarray
    node_names: list = field(default_factory=list)
    dyad_names: list = field(default_factory=list)
    node_ids: list = field(default_factory=list)

    def __len__(self):
        return int(self.arrays["iteration"].shape[0])

    @property
    def variant(self) -> Variant:
        return self.config.model_variant

    def state(self, k: int) -> ModelState:
        a = self.arrays
        z = a["z"][k] if "z" in a else np.zeros((a["s"].shape[1],) * 2)
        return ModelState(
            RegressionCoefficients(a["beta_s"][k].copy(), a["beta_r"][k].copy(),
                                   a["beta_d"][k].copy()),
            AdditiveEffects(a["a"][k].copy(), a["b"][k].copy(), a["s"][k].copy(),
                            a["r"][k].copy(), a["sigma_ab"][k].copy()),
            MultiplicativeEffects(a["u"][k].copy(), a["v"][k].copy(),
                                  float(a["sigma_u2"][k]), float(a["sigma_v2"][k])),
            LatentUtilities(z.copy(), float(a["rho"][k])),
        )

    @property
    def states(self) -> list:
        return [self.state(k) for k in range(len(self))]

    def trace_columns(self) -> list:
        cols = [f"beta_d[{n}]" for n in self.dyad_names]
        cols += [f"beta_s[{n}]" for n in self.node_names]
        cols += [f"beta_r[{n}]" for n in self.node_names]
        return cols + list(_SCALAR_TRACES)

    def traces(self) -> np.ndarray:
        a = self.arrays
        sab = a["sigma_ab"]
        return np.column_stack([
            a["beta_d"], a["beta_s"], a["beta_r"],
            sab[:, 0, 0], sab[:, 1, 1], sab[:, 0, 1],
            a["sigma_u2"], a["sigma_v2"], a["rho"],
        ])

    def coefficient_draws(self) -> dict:
        """Map of coefficient label to its vector of saved draws."""
        out = {}
        for block, names in (("beta_d", self.dyad_names), ("beta_s", self.node_names),
                             ("beta_r", self.node_names)):
            for k, n in enumerate(names):
                out[f"{block}[{n}]"] = self.arrays[block][:, k]
        return out


class _Recorder:
    def __init__(self, cfg: FitConfig, n: int, p_n: int, p_d: int):
        s = cfg.n_saved
        k = cfg.effective_k
        self.a = {
            "iteration": np.zeros(s, dtype=np.int64),
            "replicate": np.zeros(s, dtype=np.int64),
            "beta_s": np.zeros((s, p_n)), "beta_r": np.zeros((s, p_n)),
            "beta_d": np.zeros((s, p_d)),
            "a": np.zeros((s, n)), "b": np.zeros((s, n)),
            "s": np.zeros((s, n)), "r": np.zeros((s, n)),
            "sigma_ab": np.zeros((s, 2, 2)),
            "u": np.zeros((s, n, k)), "v": np.zeros((s, n, k)),
            "sigma_u2": np.zeros(s), "sigma_v2": np.zeros(s), "rho": np.zeros(s),
        }
        if cfg.keep_latent:
            self.a["z"] = np.zeros((s, n, n))
        self.count = 0

    def record(self, it: int, rep: int, st: ModelState):
        a, c = self.a, self.count
        a["iteration"][c] = it
        a["replicate"][c] = rep
        a["beta_s"][c] = st.coef.beta_s
        a["beta_r"][c] = st.coef.beta_r
        a["beta_d"][c] = st.coef.beta_d
        a["a"][c], a["b"][c] = st.add.a, st.add.b
        a["s"][c], a["r"][c] = st.add.s, st.add.r
        a["sigma_ab"][c] = st.add.sigma_ab
        a["u"][c], a["v"][c] = st.mult.u, st.mult.v
        a["sigma_u2"][c], a["sigma_v2"][c] = st.mult.sigma_u2, st.mult.sigma_v2
        a["rho"][c] = st.latent.rho
        if "z" in a:
            a["z"][c] = st.latent.z
        self.count += 1

    def truncated(self) -> dict:
        return {k: v[: self.count] for k, v in self.a.items()}


# ----------------------------------------------------------------------------
# design caches


class _DyadDesign:
    """Gram blocks for the centered regression of z on [x_ij, e_i, e_j].

    ``g0`` is X'X over ordered pairs; ``g1`` pairs each row (i, j) with row
    (j, i) and is only needed when rho != 0.
    """

    def __init__(self, cov: CovariateSet):
        d = cov.dyad_x
        n, p = cov.n_nodes, cov.p_dyad
        self.n, self.p = n, p
        self.dyad_x = d
        ds = d.sum(axis=1).T  # p x N, column i = sum_j x_ij
        dr = d.sum(axis=0).T  # p x N, column j = sum_i x_ij
        eye = np.eye(n)
        jmi = np.ones((n, n)) - eye
        dd0 = np.einsum("ijp,ijq->pq", d, d)
        self.g0 = np.block([
            [dd0, ds, dr],
            [ds.T, (n - 1) * eye, jmi],
            [dr.T, jmi, (n - 1) * eye],
        ])
        dd1 = np.einsum("ijp,jiq->pq", d, d)
        self.g1 = np.block([
            [dd1, dr, ds],
            [dr.T, jmi, (n - 1) * eye],
            [ds.T, (n - 1) * eye, jmi],
        ])
        self.xtx_node = cov.node_x.T @ cov.node_x
        self.node_x = cov.node_x

    def xty(self, y: np.ndarray) -> np.ndarray:
        return np.concatenate([
            np.einsum("ijp,ij->p", self.dyad_x, y), y.sum(axis=1), y.sum(axis=0)])


class _PairDesign:
    """Undirected design [x_i + x_j, (x_ij + x_ji)/2] for the pooled probit."""

    def __init__(self, cov: CovariateSet, pairs):
        i, j = pairs
        xn = cov.node_x[i] + cov.node_x[j]
        xd = 0.5 * (cov.dyad_x[i, j] + cov.dyad_x[j, i])
        self.x = np.hstack([xn, xd])
        self.p_node = cov.p_node


def _pairs(n):
    return np.triu_indices(n, 1)


# ----------------------------------------------------------------------------
# initialisation


def _probit_mle(x: np.ndarray, y: np.ndarray):
    def nll(beta):
        eta = x @ beta
        sgn = 2.0 * y - 1.0
        lp = log_ndtr(sgn * eta)
        # d/deta log Phi(s eta) = s phi(eta)/Phi(s eta)
        ratio = np.exp(-0.5 * eta ** 2 - 0.5 * np.log(2 * np.pi) - lp)
        grad = -(x.T @ (sgn * ratio))
        return -lp.sum(), grad

    q = x.shape[1]
    res = optimize.minimize(nll, np.zeros(q), jac=True, method="L-BFGS-B",
                            bounds=[(-INIT_COEF_BOUND, INIT_COEF_BOUND)] * q)
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
        raise ArithmeticError(res.message)
    return res.x


def init_state(net: ObservedNetwork, cov: CovariateSet, cfg: FitConfig,
               rng=None) -> ModelState:
    """Deterministic starting state.

    Coefficients come from a pooled-probit maximum-likelihood fit of the
    undirected ties on [x_i + x_j, x_ij]; both nodal blocks start at the
    pooled nodal coefficient. Random effects start at zero and z at +/-0.5
    consistent with y. ``rng`` is accepted for interface symmetry and unused.
    """
    n = net.n_nodes
    if cov.n_nodes != n:
        raise ValidationError(
            f"covariates have {cov.n_nodes} nodes but the network has {n}")
    iu = _pairs(n)
    obs = net.observed[iu]
    design = _PairDesign(cov, (iu[0][obs], iu[1][obs]))
    y = net.adjacency[iu][obs].astype(float)
    try:
        if y.size == 0:
            raise ArithmeticError("no observed dyads")
        beta = _probit_mle(design.x, y)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("pooled probit start failed (%s); starting from zero", exc)
        beta = np.zeros(design.x.shape[1])
    p_n = cov.p_node
    coef = RegressionCoefficients(beta[:p_n].copy(), beta[:p_n].copy(),
                                  beta[p_n:].copy())
    add = AdditiveEffects.zeros(n)
    add.recenter(coef, cov)
    mult = MultiplicativeEffects.zeros(n, cfg.effective_k)
    z = np.where(net.adjacency == 1, 0.5, -0.5)
    z[~net.observed] = 0.0
    np.fill_diagonal(z, 0.0)
    if cfg.model_variant is Variant.PROBIT:
        z = z.astype(float)
    return ModelState(coef, add, mult, LatentUtilities(z.astype(float), cfg.rho))


# ----------------------------------------------------------------------------
# full conditionals


def _region_codes(y, observed, variant: Variant):
    if variant is Variant.GBME:
        codes = np.where(y == 1, TruncRegion.BOTH_POSITIVE, TruncRegion.BOTH_NEGATIVE)
    else:
        codes = np.where(y == 1, TruncRegion.BOTH_POSITIVE,
                         TruncRegion.NOT_BOTH_POSITIVE)
    codes = np.where(observed, codes, TruncRegion.UNCONSTRAINED)
    return codes.astype(np.int8)


def _locate_failure(m1, m2, codes, iu, rho):
    for k in range(len(m1)):
        try:
            samplers.draw_latent_pair(m1[k], m2[k], 0.0, int(codes[k]),
                                      samplers.rng_stream(0))
        except SamplingError:
            return int(iu[0][k]), int(iu[1][k])
    return None


def update_latent(state: ModelState, net: ObservedNetwork, cov: CovariateSet,
                  rng, variant: Variant = Variant.PGBME) -> LatentUtilities:
    """Redraw every dyad's latent pair given all other parameters (in place)."""
    variant = Variant(variant)
    n = net.n_nodes
    iu = _pairs(n)
    z = state.latent.z
    y = net.adjacency[iu]
    observed = net.observed[iu]
    if variant is Variant.PROBIT:
        eta = _probit_eta(state, cov)[iu]
        lo = np.where(y == 1, 0.0, -np.inf)
        hi = np.where(y == 1, np.inf, 0.0)
        w = eta.copy()
        if observed.any():
            try:
                w[observed] = samplers.draw_truncnorm(
                    eta[observed], 1.0, lo[observed], hi[observed], rng)
            except SamplingError as exc:
                raise SamplingError(f"latent update failed: {exc}") from exc
        z[iu] = w
        z[iu[1], iu[0]] = w
        return state.latent

    m = state.mean_matrix(cov)
    m1, m2 = m[iu], m[iu[1], iu[0]]
    codes = _region_codes(y, observed, variant)
    rho = state.latent.rho
    init = (z[iu], z[iu[1], iu[0]]) if rho != 0.0 else None
    try:
        z1, z2 = samplers.draw_latent_pair(m1, m2, rho, codes, rng, init=init)
    except SamplingError as exc:
        where = _locate_failure(m1, m2, codes, iu, rho)
        raise SamplingError(f"latent update failed at dyad {where}: {exc}") from exc
    z[iu] = z1
    z[iu[1], iu[0]] = z2
    return state.latent


def _probit_eta(state: ModelState, cov: CovariateSet) -> np.ndarray:
    xn = cov.node_x @ state.coef.beta_s
    xd = 0.5 * (cov.dyad_x + cov.dyad_x.transpose(1, 0, 2)) @ state.coef.beta_d
    eta = xn[:, None] + xn[None, :] + xd
    np.fill_diagonal(eta, 0.0)
    return eta


def update_additive(state: ModelState, net: ObservedNetwork, cov: CovariateSet,
                    cfg: FitConfig, rng, design: _DyadDesign | None = None):
    """Joint draw of (beta_d, s, r), then (beta_s, beta_r) given (s, r).

    Returns the updated (coef, add) pair; ``state`` is modified in place.
    """
    design = design or _DyadDesign(cov)
    n, p = design.n, design.p
    rho = state.latent.rho
    resid = state.latent.z.copy()
    if state.mult.k_dim:
        resid -= state.mult.u @ state.mult.v.T
    np.fill_diagonal(resid, 0.0)

    if rho == 0.0:
        prec = design.g0.copy()
        lin = design.xty(resid)
    else:
        c = 1.0 - rho * rho
        prec = (design.g0 - rho * design.g1) / c
        lin = (design.xty(resid) - rho * design.xty(resid.T)) / c

    sig_inv = np.linalg.inv(state.add.sigma_ab)
    ms = cov.node_x @ state.coef.beta_s
    mr = cov.node_x @ state.coef.beta_r
    prec[np.arange(p), np.arange(p)] += 1.0 / cfg.prior_beta_var
    si = p + np.arange(n)
    ri = p + n + np.arange(n)
    prec[si, si] += sig_inv[0, 0]
    prec[ri, ri] += sig_inv[1, 1]
    prec[si, ri] += sig_inv[0, 1]
    prec[ri, si] += sig_inv[1, 0]
    lin[si] += sig_inv[0, 0] * ms + sig_inv[0, 1] * mr
    lin[ri] += sig_inv[1, 0] * ms + sig_inv[1, 1] * mr
    try:
        theta = samplers.draw_gaussian_canonical(prec, lin, rng)
    except DecompositionError as exc:
        raise DecompositionError(
            f"dyadic/additive-effect block: {exc}", minor=exc.minor) from exc
    state.coef.beta_d = theta[:p]
    state.add.s = theta[p:p + n]
    state.add.r = theta[p + n:]

    p_n = cov.p_node
    if p_n:
        x = cov.node_x
        prec2 = np.kron(sig_inv, design.xtx_node) + np.eye(2 * p_n) / cfg.prior_beta_var
        ws = sig_inv[0, 0] * state.add.s + sig_inv[0, 1] * state.add.r
        wr = sig_inv[1, 0] * state.add.s + sig_inv[1, 1] * state.add.r
        lin2 = np.concatenate([x.T @ ws, x.T @ wr])
        try:
            beta = samplers.draw_gaussian_canonical(prec2, lin2, rng)
        except DecompositionError as exc:
            raise DecompositionError(
                f"nodal covariate block: {exc}", minor=exc.minor) from exc
        state.coef.beta_s = beta[:p_n]
        state.coef.beta_r = beta[p_n:]
    state.add.uncenter(state.coef, cov)
    return state.coef, state.add


def update_sigma_ab(state: ModelState, cfg: FitConfig, rng) -> np.ndarray:
    ab = np.column_stack([state.add.a, state.add.b])
    scale = np.asarray(cfg.prior_sigma_ab_scale) + ab.T @ ab
    state.add.sigma_ab = samplers.draw_inverse_wishart(
        scale, cfg.prior_sigma_ab_dof + ab.shape[0], rng)
    return state.add.sigma_ab


def _batched_canonical(prec, lin, rng):
    chol = np.linalg.cholesky(prec)
    w = np.linalg.solve(chol, lin[..., None])[..., 0]
    w = w + rng.standard_normal(w.shape)
    return np.linalg.solve(np.swapaxes(chol, -1, -2), w[..., None])[..., 0]


def update_multiplicative(state: ModelState, cfg: FitConfig, rng,
                          cov: CovariateSet | None = None) -> MultiplicativeEffects:
    """Redraw the sender and receiver positions and their variances.

    With rho = 0 the rows of U are conditionally independent given V (and
    vice versa), so each block is drawn at once; otherwise nodes are visited
    in turn with the partner-utility correction.
    """
    mult = state.mult
    k = mult.k_dim
    if k == 0:
        return mult
    if cov is None:
        raise ValidationError("covariates are required for the multiplicative update")
    n = mult.u.shape[0]
    base = centered_mean_matrix(state.coef.beta_d, cov.dyad_x, state.add.s,
                                state.add.r, np.zeros((n, 0)), np.zeros((n, 0)))
    e = state.latent.z - base
    np.fill_diagonal(e, 0.0)
    rho = state.latent.rho
    eye = np.eye(k)
    try:
        if rho == 0.0:
            v = mult.v
            prec = v.T @ v - np.einsum("ik,il->ikl", v, v) + eye / mult.sigma_u2
            mult.u = _batched_canonical(prec, e @ v, rng)
            u = mult.u
            prec = u.T @ u - np.einsum("ik,il->ikl", u, u) + eye / mult.sigma_v2
            mult.v = _batched_canonical(prec, e.T @ u, rng)
        else:
            c = 1.0 - rho * rho
            u, v = mult.u, mult.v
            idx = np.arange(n)
            for i in range(n):
                others = idx != i
                partner = e[others, i] - u[others] @ v[i]
                resp = e[i, others] - rho * partner
                vo = v[others]
                prec = vo.T @ vo / c + eye / mult.sigma_u2
                u[i] = samplers.draw_gaussian_canonical(prec, vo.T @ resp / c, rng)
                partner = e[i, others] - v[others] @ u[i]
                resp = e[others, i] - rho * partner
                uo = u[others]
                prec = uo.T @ uo / c + eye / mult.sigma_v2
                v[i] = samplers.draw_gaussian_canonical(prec, uo.T @ resp / c, rng)
    except (np.linalg.LinAlgError, DecompositionError) as exc:
        raise DecompositionError(f"latent position update: {exc}") from exc
    update_latent_variances(state, cfg, rng)
    return mult


def update_latent_variances(state: ModelState, cfg: FitConfig, rng):
    """sigma_u2 ~ IG(shape + NK/2, rate + |U|^2/2), likewise sigma_v2."""
    mult = state.mult
    n, k = mult.u.shape
    shape = cfg.prior_ig_shape + n * k / 2.0
    mult.sigma_u2 = samplers.draw_inverse_gamma(
        shape, cfg.prior_ig_rate + 0.5 * float(np.sum(mult.u ** 2)), rng)
    mult.sigma_v2 = samplers.draw_inverse_gamma(
        shape, cfg.prior_ig_rate + 0.5 * float(np.sum(mult.v ** 2)), rng)
    return mult.sigma_u2, mult.sigma_v2


def update_position_balance(state: ModelState, cfg: FitConfig, rng) -> float:
    """Exact move along the U/V scale ridge.

    (U, V, sigma_u2, sigma_v2) -> (cU, V/c, c^2 sigma_u2, sigma_v2/c^2)
    leaves UV' and hence the likelihood unchanged. Under the Haar measure
    w = c^2 has density proportional to w^{-1} exp(-q_u/w - q_v w), with
    q_u = rate/sigma_u2 and q_v = rate/sigma_v2, a generalized inverse
    Gaussian with index 0. Returns the drawn c.
    """
    mult = state.mult
    if mult.k_dim == 0:
        return 1.0
    q_u = cfg.prior_ig_rate / mult.sigma_u2
    q_v = cfg.prior_ig_rate / mult.sigma_v2
    w = float(np.sqrt(q_u / q_v) * stats.geninvgauss.rvs(
        0.0, 2.0 * np.sqrt(q_u * q_v), random_state=rng))
    c = np.sqrt(w)
    mult.u = mult.u * c
    mult.v = mult.v / c
    mult.sigma_u2 *= w
    mult.sigma_v2 /= w
    return float(c)


def _pair_loglik(e1, e2, rho):
    c = 1.0 - rho * rho
    return -0.5 * e1.size * np.log(c) - np.sum(e1 * e1 - 2 * rho * e1 * e2 + e2 * e2) / (2 * c)


def update_rho(state: ModelState, cov: CovariateSet, cfg: FitConfig, rng) -> float:
    """Random-walk Metropolis step for rho under a uniform prior on (-1, 1).

    Estimates of rho are known to depend strongly on the starting value;
    treat them with caution.
    """
    n = cov.n_nodes
    iu = _pairs(n)
    e = state.latent.z - state.mean_matrix(cov)
    e1, e2 = e[iu], e[iu[1], iu[0]]
    cur = state.latent.rho
    prop = cur + cfg.rho_proposal_sd * rng.standard_normal()
    u = rng.random()
    if -1.0 < prop < 1.0:
        if np.log(u) < _pair_loglik(e1, e2, prop) - _pair_loglik(e1, e2, cur):
            state.latent.rho = float(prop)
    return state.latent.rho


def _log_scale_density(t, A, B, C, E):
    return -A * np.exp(2 * t) - B * np.exp(-2 * t) - C * np.exp(-t) + E * t


def update_scale(state: ModelState, net: ObservedNetwork, cov: CovariateSet,
                 cfg: FitConfig, rng) -> float:
    """Parameter-expansion move along the scale ridge.

    Every location quantity (z, coefficients, s, r, a, b) is multiplied by g,
    U and V by sqrt(g), Sigma_ab by g^2 and the latent-space variances by g.
    The sign pattern of z, hence consistency with y, is unchanged. log g is
    drawn from its exact conditional under the group's Haar measure with an
    independence Metropolis step around the (log-concave) mode. Returns the
    accepted g (1.0 on rejection).
    """
    n = net.n_nodes
    k = state.mult.k_dim
    iu = _pairs(n)
    e = state.latent.z - state.mean_matrix(cov)
    rho = state.latent.rho
    e1, e2 = e[iu], e[iu[1], iu[0]]
    quad = np.sum(e1 * e1 - 2 * rho * e1 * e2 + e2 * e2) / (1 - rho * rho)
    coef = state.coef
    beta2 = float(coef.beta_d @ coef.beta_d + coef.beta_s @ coef.beta_s
                  + coef.beta_r @ coef.beta_r)
    A = 0.5 * quad + 0.5 * beta2 / cfg.prior_beta_var
    psi = np.asarray(cfg.prior_sigma_ab_scale)
    B = 0.5 * float(np.trace(psi @ np.linalg.inv(state.add.sigma_ab)))
    C = 0.0
    dims = n * (n - 1) + len(coef.beta_d) + 2 * len(coef.beta_s) + 2 * n + 6
    # (a_i, b_i) normalising constants and the inverse-Wishart prior
    E = dims - 2 * n - 2 * (cfg.prior_sigma_ab_dof + 3)
    if k:
        C = cfg.prior_ig_rate * (1 / state.mult.sigma_u2 + 1 / state.mult.sigma_v2)
        E += n * k + 2 - n * k - 2 * (cfg.prior_ig_shape + 1)
    # Newton iterations for the mode of the concave log density in t = log g
    t = 0.0
    for _ in range(50):
        g1 = -2 * A * np.exp(2 * t) + 2 * B * np.exp(-2 * t) + C * np.exp(-t) + E
        h = -4 * A * np.exp(2 * t) - 4 * B * np.exp(-2 * t) - C * np.exp(-t)
        step = g1 / h
        t -= np.clip(step, -1.0, 1.0)
        if abs(step) < 1e-12:
            break
    sd = 1.2 / np.sqrt(-h)
    prop = t + sd * rng.standard_normal()
    log_q = lambda x: -0.5 * ((x - t) / sd) ** 2
    log_acc = (_log_scale_density(prop, A, B, C, E) - _log_scale_density(0.0, A, B, C, E)
               + log_q(0.0) - log_q(prop))
    if not np.log(rng.random()) < log_acc:
        return 1.0
    g = float(np.exp(prop))
    sq = np.sqrt(g)
    state.latent.z *= g
    coef.beta_d = coef.beta_d * g
    coef.beta_s = coef.beta_s * g
    coef.beta_r = coef.beta_r * g
    add = state.add
    add.a, add.b, add.s, add.r = add.a * g, add.b * g, add.s * g, add.r * g
    add.sigma_ab = add.sigma_ab * g * g
    if k:
        state.mult.u = state.mult.u * sq
        state.mult.v = state.mult.v * sq
        state.mult.sigma_u2 *= g
        state.mult.sigma_v2 *= g
    return g


def _update_probit_coef(state, design: _PairDesign, pairs, observed, cfg, rng):
    w = state.latent.z[pairs][observed]
    x = design.x[observed]
    q = x.shape[1]
    beta = samplers.draw_regression(x, w, 1.0, np.zeros(q),
                                    cfg.prior_beta_var * np.eye(q), rng)
    p_n = design.p_node
    state.coef.beta_s = beta[:p_n].copy()
    state.coef.beta_r = beta[:p_n].copy()
    state.coef.beta_d = beta[p_n:].copy()


def sweep(state: ModelState, net: ObservedNetwork, cov: CovariateSet,
          cfg: FitConfig, rng, design=None, _step=None):
    """One full Gibbs sweep, in place. ``_step`` (a one-item list) receives
    the name of the step being executed, for error reporting."""
    step = _step if _step is not None else [None]
    variant = cfg.model_variant
    step[0] = "latent"
    update_latent(state, net, cov, rng, variant)
    if variant is Variant.PROBIT:
        step[0] = "coefficients"
        pairs = _pairs(net.n_nodes)
        design = design or _PairDesign(cov, pairs)
        _update_probit_coef(state, design, pairs, net.observed[pairs], cfg, rng)
        state.add.recenter(state.coef, cov)
        return state
    step[0] = "additive"
    update_additive(state, net, cov, cfg, rng, design)
    step[0] = "sigma_ab"
    update_sigma_ab(state, cfg, rng)
    step[0] = "multiplicative"
    update_multiplicative(state, cfg, rng, cov)
    update_position_balance(state, cfg, rng)
    if cfg.scale_move:
        step[0] = "scale"
        update_scale(state, net, cov, cfg, rng)
    if cfg.estimate_rho:
        step[0] = "rho"
        update_rho(state, cov, cfg, rng)
    return state


def _as_imputed(cov) -> ImputedCovariates:
    if isinstance(cov, ImputedCovariates):
        return cov
    return ImputedCovariates([cov])


def run_chain(net: ObservedNetwork, cov, cfg: FitConfig, rng=None,
              state: ModelState | None = None, callback=None) -> PosteriorDraws:
    """Run one chain and return its thinned post-burn-in draws.

    When several covariate replicates are supplied, one is drawn uniformly
    at random at the start of every iteration.

    Raises
    ------
    FitError
        Wrapping the failing step; ``exc.draws`` holds the draws saved so far.
    """
    imputed = _as_imputed(cov)
    first = imputed[0]
    if first.n_nodes != net.n_nodes:
        raise ValidationError(
            f"covariates have {first.n_nodes} nodes but the network has {net.n_nodes}")
    if rng is None:
        rng = samplers.rng_stream(cfg.seed, cfg.stream_id)
    if state is None:
        state = init_state(net, first, cfg)
    n_rep = len(imputed)
    if cfg.model_variant is Variant.PROBIT:
        pairs = _pairs(net.n_nodes)
        designs = [_PairDesign(c, pairs) for c in imputed.replicates]
    else:
        designs = [_DyadDesign(c) for c in imputed.replicates]
    rec = _Recorder(cfg, net.n_nodes, first.p_node, first.p_dyad)
    reps = np.zeros(cfg.n_iter, dtype=np.int64)
    current = 0
    step = [None]

    def draws():
        return PosteriorDraws(cfg, rec.truncated(), reps.copy(),
                              list(first.node_names), list(first.dyad_names),
                              list(net.node_ids))

    for it in range(cfg.n_iter):
        try:
            step[0] = "imputation"
            if n_rep > 1:
                m = int(rng.integers(n_rep))
                if m != current:
                    current = m
                    state.add.recenter(state.coef, imputed[m])
            reps[it] = current
            sweep(state, net, imputed[current], cfg, rng, designs[current], step)
            if cfg.check_invariants:
                step[0] = "invariants"
                _check_state(state, net, cfg)
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise FitError(f"iteration {it}, step {step[0]}: {exc}", it, step[0],
                           draws()) from exc
        t = it - cfg.n_burn
        if t >= 0 and (t + 1) % cfg.thin == 0:
            rec.record(it, current, state)
        if callback is not None:
            callback(it, state)
    return draws()


def _check_state(state: ModelState, net: ObservedNetwork, cfg: FitConfig):
    if cfg.model_variant is not Variant.GBME:
        if not state.latent.consistent_with(net):
            raise NumericalError("latent utilities inconsistent with observed ties")
    else:
        z = state.latent.z
        y = net.adjacency == 1
        ok = np.where(y, z > 0, z < 0) | ~net.observed
        np.fill_diagonal(ok, True)
        if not ok.all():
            raise NumericalError("latent utilities inconsistent with observed ties")
    if cfg.model_variant is not Variant.PROBIT:
        sab = state.add.sigma_ab
        if not (sab[0, 0] > 0 and np.linalg.det(sab) > 0):
            raise NumericalError("Sigma_ab lost positive definiteness")
        if not (state.mult.sigma_u2 > 0 and state.mult.sigma_v2 > 0):
            raise NumericalError("latent-space variance is not positive")
