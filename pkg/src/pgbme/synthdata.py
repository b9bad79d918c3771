"""Synthetic directed networks, undirected masking and the parameter
recovery / coverage study."""
from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import samplers
from .errors import NumericalError, ValidationError
from .gibbs import FitConfig, ModelState, Variant, run_chain
from .model import (AdditiveEffects, CovariateSet, LatentUtilities,
                    MultiplicativeEffects, ObservedNetwork,
                    RegressionCoefficients, centered_mean_matrix)

log = logging.getLogger(__name__)

__all__ = ["SimSpec", "SimResult", "generate_directed", "mask_undirected",
           "simulate_observed", "run_recovery_study", "COEF_LABELS"]

# Labels of the four regression coefficients the study tracks, in order.
COEF_LABELS = ("beta_d[x1]", "beta_d[x2]", "beta_s[w]", "beta_r[w]")
# Fraction of failed replications above which a study is aborted.
MAX_FAILURE_RATE = 0.10


@dataclass
class SimSpec:
    n_nodes: int = 50
    true_beta_d: tuple = (1.0, -0.5)
    true_beta_s: float = 0.0
    true_beta_r: float = 0.5
    intercept: float = 0.0
    k_dim: int = 2
    sigma_ab_true: tuple = ((0.5, 0.0), (0.0, 0.5))
    sigma_u2_true: float = 0.5
    sigma_v2_true: float = 0.5
    n_replications: int = 100
    seed: int = 0
    symmetric_dyad: bool = False

    def __post_init__(self):
        self.true_beta_d = tuple(float(b) for b in self.true_beta_d)
        self.sigma_ab_true = tuple(
            tuple(float(v) for v in row) for row in np.asarray(self.sigma_ab_true))
        if self.n_nodes < 2:
            raise ValidationError("need at least two nodes")

    @property
    def truth(self) -> dict:
        t = {f"beta_d[x{k + 1}]": b for k, b in enumerate(self.true_beta_d)}
        t["beta_d[intercept]"] = self.intercept
        t["beta_s[w]"] = self.true_beta_s
        t["beta_r[w]"] = self.true_beta_r
        return t

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["true_beta_d"] = list(self.true_beta_d)
        d["sigma_ab_true"] = [list(r) for r in self.sigma_ab_true]
        return d


@dataclass
class SimResult:
    spec: SimSpec
    config: FitConfig
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def _by_label(self, key):
        out = {}
        for rec in self.records:
            out.setdefault(rec["coef"], []).append(rec[key])
        return out

    @property
    def coverage(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self._by_label("covered").items()}

    @property
    def median_estimates(self) -> dict:
        return {k: float(np.median(v)) for k, v in self._by_label("mean").items()}

    def summary(self) -> dict:
        return {
            "truth": self.spec.truth,
            "n_replications": self.spec.n_replications,
            "n_completed": len({r["rep"] for r in self.records}),
            "failures": self.failures,
            "median_posterior_mean": self.median_estimates,
            "coverage_95": self.coverage,
            "spec": self.spec.to_dict(),
            "config": self.config.to_dict(),
        }


def generate_directed(spec: SimSpec, rng):
    """Draw covariates, random effects and a directed network from the model.

    Returns ``(directed, cov, truth)`` where ``truth`` is the generating
    :class:`ModelState` (rho = 0, z included).
    """
    n, k = spec.n_nodes, spec.k_dim
    node_x = rng.standard_normal((n, 1))
    p = len(spec.true_beta_d)
    dx = rng.standard_normal((n, n, p))
    if spec.symmetric_dyad:
        dx = np.triu(dx.transpose(2, 0, 1), 1)
        dx = (dx + dx.transpose(0, 2, 1)).transpose(1, 2, 0)
    dyad_x = np.concatenate([dx, np.ones((n, n, 1))], axis=2)
    cov = CovariateSet(node_x, dyad_x, node_names=["w"],
                       dyad_names=[f"x{j + 1}" for j in range(p)] + ["intercept"])

    coef = RegressionCoefficients(np.array([spec.true_beta_s]),
                                  np.array([spec.true_beta_r]),
                                  np.array(list(spec.true_beta_d) + [spec.intercept]))
    sab = np.asarray(spec.sigma_ab_true)
    ab = rng.multivariate_normal(np.zeros(2), sab, size=n, method="cholesky")
    add = AdditiveEffects(ab[:, 0].copy(), ab[:, 1].copy(), np.zeros(n), np.zeros(n), sab)
    add.recenter(coef, cov)
    u = np.sqrt(spec.sigma_u2_true) * rng.standard_normal((n, k))
    v = np.sqrt(spec.sigma_v2_true) * rng.standard_normal((n, k))
    mult = MultiplicativeEffects(u, v, spec.sigma_u2_true, spec.sigma_v2_true)
    m = centered_mean_matrix(coef.beta_d, cov.dyad_x, add.s, add.r, u, v)
    z = m + rng.standard_normal((n, n))
    np.fill_diagonal(z, 0.0)
    directed = (z > 0).astype(np.int8)
    np.fill_diagonal(directed, 0)
    truth = ModelState(coef, add, mult, LatentUtilities(z, 0.0))
    return directed, cov, truth


def mask_undirected(directed) -> ObservedNetwork:
    """Keep a tie only where both directions are present."""
    d = np.asarray(directed)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValidationError("directed adjacency must be square")
    d = d != 0
    y = (d & d.T).astype(np.int8)
    np.fill_diagonal(y, 0)
    return ObservedNetwork(y)


def simulate_observed(spec: SimSpec, rng):
    directed, cov, truth = generate_directed(spec, rng)
    return mask_undirected(directed), cov, truth, directed


def _replication(args):
    spec, cfg, rep = args
    rng = samplers.rng_stream(spec.seed, rep)
    net, cov, truth, _ = simulate_observed(spec, rng)
    fit_cfg = cfg.replace(seed=spec.seed, stream_id=(1 << 32) + rep)
    try:
        draws = run_chain(net, cov, fit_cfg)
    except NumericalError as exc:
        return rep, None, str(exc)
    rows = []
    truth_vals = spec.truth
    for label, x in draws.coefficient_draws().items():
        lo, hi = np.quantile(x, [0.025, 0.975])
        t = truth_vals[label]
        rows.append({"rep": rep, "coef": label, "truth": t, "mean": float(x.mean()),
                     "lo95": float(lo), "hi95": float(hi),
                     "covered": bool(lo <= t <= hi)})
    return rep, rows, None


def run_recovery_study(spec: SimSpec, cfg: FitConfig, jobs: int = 1) -> SimResult:
    """Generate, mask and fit ``spec.n_replications`` networks.

    Failed replications are recorded and skipped; more than 10% failures
    raise :class:`NumericalError`.
    """
    if Variant(cfg.model_variant) is not Variant.PGBME:
        raise ValidationError("the recovery study fits the partially observed model")
    if cfg.effective_k != spec.k_dim:
        log.info("fitting K=%d to data generated with K=%d", cfg.k_dim, spec.k_dim)
    result = SimResult(spec, cfg)
    tasks = [(spec, cfg, r) for r in range(spec.n_replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_replication, tasks))
    else:
        outs = [_replication(t) for t in tasks]
    for rep, rows, err in sorted(outs, key=lambda o: o[0]):
        if rows is None:
            log.warning("replication %d failed: %s", rep, err)
            result.failures.append({"rep": rep, "error": err})
        else:
            result.records.extend(rows)
    if len(result.failures) > MAX_FAILURE_RATE * spec.n_replications:
        raise NumericalError(
            f"{len(result.failures)} of {spec.n_replications} replications failed")
    return result
