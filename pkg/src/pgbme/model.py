"""Model quantities and deterministic math for the partially observed
bilinear mixed-effects network model.

Directed latent utilities follow

    (z_ij, z_ji) ~ N((m_ij, m_ji), [[1, rho], [rho, 1]])
    m_ij = mu_ij + a_i + b_j + u_i'v_j
    mu_ij = beta_s.x_i + beta_r.x_j + beta_d.x_ij

and an undirected tie is observed iff both utilities are positive.
Diagonal entries of every N x N container are unused slots; all code skips
``i == j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .errors import ValidationError

__all__ = [
    "ObservedNetwork",
    "CovariateSet",
    "ImputedCovariates",
    "RegressionCoefficients",
    "AdditiveEffects",
    "MultiplicativeEffects",
    "LatentUtilities",
    "linear_predictor",
    "linear_predictor_matrix",
    "systematic_mean",
    "systematic_mean_matrix",
    "centered_mean_matrix",
    "joint_tie_probability",
    "joint_tie_probability_matrix",
    "offdiag_mask",
]


def offdiag_mask(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


@dataclass
class ObservedNetwork:
    """Symmetric binary adjacency of an undirected network.

    ``observed`` marks dyads whose outcome is known; held-out dyads are
    treated as missing by the sampler. Defaults to every off-diagonal dyad.
    """

    adjacency: np.ndarray
    observed: np.ndarray | None = None
    node_ids: list | None = None

    def __post_init__(self):
        y = np.asarray(self.adjacency)
        if y.ndim != 2 or y.shape[0] != y.shape[1]:
            raise ValidationError(f"adjacency must be square, got shape {y.shape}")
        off = ~np.eye(y.shape[0], dtype=bool)
        if not np.all(np.isin(y[off], (0, 1))):
            raise ValidationError("adjacency entries must be 0 or 1")
        y = (y != 0).astype(np.int8)
        np.fill_diagonal(y, 0)
        if not np.array_equal(y, y.T):
            raise ValidationError("adjacency must be symmetric (y_ij == y_ji)")
        self.adjacency = y
        n = y.shape[0]
        if self.observed is None:
            self.observed = offdiag_mask(n)
        else:
            obs = np.asarray(self.observed, dtype=bool).copy()
            if obs.shape != y.shape or not np.array_equal(obs, obs.T):
                raise ValidationError("observed mask must be a symmetric N x N array")
            np.fill_diagonal(obs, False)
            self.observed = obs
        if self.node_ids is None:
            self.node_ids = list(range(n))
        elif len(self.node_ids) != n:
            raise ValidationError("node_ids length does not match adjacency")

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]


@dataclass
class CovariateSet:
    """Nodal design (used for both sender and receiver roles) and dyadic
    design array. A dyadic intercept, when wanted, is a constant column of
    ``dyad_x``."""

    node_x: np.ndarray
    dyad_x: np.ndarray
    node_names: list = field(default_factory=list)
    dyad_names: list = field(default_factory=list)

    def __post_init__(self):
        node_x = np.asarray(self.node_x, dtype=float)
        if node_x.ndim == 1:
            node_x = node_x[:, None]
        dyad_x = np.asarray(self.dyad_x, dtype=float)
        if dyad_x.ndim == 2:
            dyad_x = dyad_x[:, :, None]
        n = node_x.shape[0]
        if dyad_x.ndim != 3 or dyad_x.shape[:2] != (n, n):
            raise ValidationError(
                f"dyad_x must be N x N x p_d with N={n}, got {dyad_x.shape}")
        dyad_x = dyad_x.copy()
        idx = np.arange(n)
        dyad_x[idx, idx, :] = 0.0
        if not np.all(np.isfinite(node_x)) or not np.all(np.isfinite(dyad_x)):
            raise ValidationError(
                "covariates contain non-finite values; supply imputed replicates")
        self.node_x = node_x
        self.dyad_x = dyad_x
        if not self.node_names:
            self.node_names = [f"node{k + 1}" for k in range(node_x.shape[1])]
        if not self.dyad_names:
            self.dyad_names = [f"dyad{k + 1}" for k in range(dyad_x.shape[2])]

    @property
    def n_nodes(self) -> int:
        return self.node_x.shape[0]

    @property
    def p_node(self) -> int:
        return self.node_x.shape[1]

    @property
    def p_dyad(self) -> int:
        return self.dyad_x.shape[2]


@dataclass
class ImputedCovariates:
    replicates: list

    def __post_init__(self):
        if isinstance(self.replicates, CovariateSet):
            self.replicates = [self.replicates]
        self.replicates = list(self.replicates)
        if not self.replicates:
            raise ValidationError("at least one covariate replicate is required")
        shapes = {(c.n_nodes, c.p_node, c.p_dyad) for c in self.replicates}
        if len(shapes) != 1:
            raise ValidationError(f"imputed replicates disagree in shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.replicates)

    def __getitem__(self, k) -> CovariateSet:
        return self.replicates[k]


@dataclass
class RegressionCoefficients:
    beta_s: np.ndarray
    beta_r: np.ndarray
    beta_d: np.ndarray

    def __post_init__(self):
        self.beta_s = np.atleast_1d(np.asarray(self.beta_s, dtype=float))
        self.beta_r = np.atleast_1d(np.asarray(self.beta_r, dtype=float))
        self.beta_d = np.atleast_1d(np.asarray(self.beta_d, dtype=float))

    @classmethod
    def zeros(cls, p_node: int, p_dyad: int) -> "RegressionCoefficients":
        return cls(np.zeros(p_node), np.zeros(p_node), np.zeros(p_dyad))

    def copy(self):
        return RegressionCoefficients(
            self.beta_s.copy(), self.beta_r.copy(), self.beta_d.copy())


@dataclass
class AdditiveEffects:
    """Sender/receiver effects in both raw (a, b) and centered (s, r) form.

    Centering identity: s = X beta_s + a and r = X beta_r + b.
    """

    a: np.ndarray
    b: np.ndarray
    s: np.ndarray
    r: np.ndarray
    sigma_ab: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdditiveEffects":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n), np.eye(2))

    def recenter(self, coef: RegressionCoefficients, cov: CovariateSet):
        """Recompute (s, r) from (a, b) under new coefficients/covariates."""
        self.s = cov.node_x @ coef.beta_s + self.a
        self.r = cov.node_x @ coef.beta_r + self.b

    def uncenter(self, coef: RegressionCoefficients, cov: CovariateSet):
        """Recompute (a, b) from (s, r)."""
        self.a = self.s - cov.node_x @ coef.beta_s
        self.b = self.r - cov.node_x @ coef.beta_r

    def copy(self):
        return AdditiveEffects(self.a.copy(), self.b.copy(), self.s.copy(),
                               self.r.copy(), self.sigma_ab.copy())


@dataclass
class MultiplicativeEffects:
    u: np.ndarray
    v: np.ndarray
    sigma_u2: float = 1.0
    sigma_v2: float = 1.0

    def __post_init__(self):
        if self.sigma_u2 <= 0 or self.sigma_v2 <= 0:
            raise ValidationError("latent-space variances must be positive")

    @classmethod
    def zeros(cls, n: int, k: int) -> "MultiplicativeEffects":
        return cls(np.zeros((n, k)), np.zeros((n, k)))

    @property
    def k_dim(self) -> int:
        return self.u.shape[1]

    def copy(self):
        return MultiplicativeEffects(self.u.copy(), self.v.copy(),
                                     self.sigma_u2, self.sigma_v2)


@dataclass
class LatentUtilities:
    z: np.ndarray
    rho: float = 0.0
    sigma2: float = 1.0

    def consistent_with(self, net: ObservedNetwork) -> bool:
        """True iff every observed dyad's latent pair agrees with its tie."""
        z = self.z
        both_pos = (z > 0) & (z.T > 0)
        y = net.adjacency.astype(bool)
        ok = np.where(y, both_pos, ~both_pos)
        return bool(np.all(ok[net.observed]))


def _check_pair(i, j, n):
    if i == j:
        raise ValidationError("self-ties are undefined (i == j)")
    if not (0 <= i < n and 0 <= j < n):
        raise ValidationError(f"node index out of range: ({i}, {j}) for N={n}")


def linear_predictor(coef: RegressionCoefficients, cov: CovariateSet,
                     i: int, j: int) -> float:
    """mu_ij = beta_s.x_i + beta_r.x_j + beta_d.x_ij."""
    _check_pair(i, j, cov.n_nodes)
    if coef.beta_s.shape != (cov.p_node,) or coef.beta_r.shape != (cov.p_node,):
        raise ValidationError("nodal coefficient length does not match node_x")
    if coef.beta_d.shape != (cov.p_dyad,):
        raise ValidationError("dyadic coefficient length does not match dyad_x")
    return float(coef.beta_s @ cov.node_x[i] + coef.beta_r @ cov.node_x[j]
                 + coef.beta_d @ cov.dyad_x[i, j])


def linear_predictor_matrix(coef: RegressionCoefficients,
                            cov: CovariateSet) -> np.ndarray:
    xs = cov.node_x @ coef.beta_s
    xr = cov.node_x @ coef.beta_r
    mu = xs[:, None] + xr[None, :] + cov.dyad_x @ coef.beta_d
    np.fill_diagonal(mu, 0.0)
    return mu


def systematic_mean(mu_ij: float, add: AdditiveEffects,
                    mult: MultiplicativeEffects, i: int, j: int) -> float:
    _check_pair(i, j, len(add.a))
    return float(mu_ij + add.a[i] + add.b[j] + mult.u[i] @ mult.v[j])


def systematic_mean_matrix(coef, cov, add, mult) -> np.ndarray:
    """Uncentered form mu_ij + a_i + b_j + u_i'v_j for all ordered pairs."""
    m = (linear_predictor_matrix(coef, cov) + add.a[:, None] + add.b[None, :]
         + mult.u @ mult.v.T)
    np.fill_diagonal(m, 0.0)
    return m


def centered_mean_matrix(beta_d, dyad_x, s, r, u, v) -> np.ndarray:
    """Centered form beta_d.x_ij + s_i + r_j + u_i'v_j."""
    m = dyad_x @ beta_d + s[:, None] + r[None, :]
    if u.shape[1]:
        m = m + u @ v.T
    np.fill_diagonal(m, 0.0)
    return m


def _orthant_quad(m1: float, m2: float, rho: float) -> float:
    # P(X1 < m1, X2 < m2) for standard bivariate normal with correlation rho,
    # as int_{-inf}^{m1} phi(x) Phi((m2 - rho x)/sqrt(1 - rho^2)) dx.
    c = np.sqrt(1.0 - rho * rho)
    f = lambda x: np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi) * ndtr((m2 - rho * x) / c)
    lo = min(m1, -12.0)
    val, _ = integrate.quad(f, lo - 10.0, m1, epsabs=1e-13, epsrel=1e-11, limit=200)
    return float(min(max(val, 0.0), 1.0))


def joint_tie_probability(m_ij: float, m_ji: float, rho: float = 0.0) -> float:
    """P(z_ij > 0 and z_ji > 0) under unit variances and correlation rho."""
    if not -1.0 < rho < 1.0:
        raise ValidationError(f"rho must lie in (-1, 1), got {rho}")
    if not (np.isfinite(m_ij) and np.isfinite(m_ji)):
        raise ValidationError("means must be finite")
    if rho == 0.0:
        return float(ndtr(m_ij) * ndtr(m_ji))
    return _orthant_quad(m_ij, m_ji, rho)


def joint_tie_probability_matrix(m: np.ndarray, rho: float = 0.0) -> np.ndarray:
    """Symmetric matrix of joint tie probabilities from a mean matrix."""
    if rho == 0.0:
        p = ndtr(m)
        out = p * p.T
    else:
        n = m.shape[0]
        out = np.zeros_like(m, dtype=float)
        iu, ju = np.triu_indices(n, 1)
        for i, j in zip(iu, ju):
            out[i, j] = out[j, i] = joint_tie_probability(m[i, j], m[j, i], rho)
    np.fill_diagonal(out, 0.0)
    return out
