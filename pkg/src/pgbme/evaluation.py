"""Posterior prediction surfaces, ranking metrics and model comparison."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import PgbmeError, UndefinedMetricError, ValidationError
from .gibbs import FitConfig, PosteriorDraws, Variant, run_chain
from .model import (AdditiveEffects, CovariateSet, ImputedCovariates,
                    MultiplicativeEffects, ObservedNetwork,
                    RegressionCoefficients, joint_tie_probability_matrix,
                    systematic_mean_matrix)
from .samplers import rng_stream

__all__ = [
    "PredictionSurface",
    "PerfReport",
    "HoldoutSpec",
    "predict_surface",
    "auc_roc",
    "auc_pr",
    "make_holdout",
    "evaluate_variants",
    "k_selection_table",
]


@dataclass
class PredictionSurface:
    """Posterior mean tie probabilities. Diagonals are set to 0.

    ``directed_prob[i, j]`` is the probability that i wants a tie with j;
    ``joint_prob`` is the (symmetric) probability of an observed tie.
    """

    directed_prob: np.ndarray
    joint_prob: np.ndarray
    node_ids: list


@dataclass
class PerfReport:
    variant: str
    sample: str
    auc_roc: float
    auc_pr: float
    n_pos: int
    n_neg: int


@dataclass
class HoldoutSpec:
    frac: float = 0.1
    seed: int = 0


def _draw_probabilities(draws: PosteriorDraws, k: int, cov: CovariateSet):
    a = draws.arrays
    if draws.variant is Variant.PROBIT:
        xn = cov.node_x @ a["beta_s"][k]
        xd = 0.5 * (cov.dyad_x + cov.dyad_x.transpose(1, 0, 2)) @ a["beta_d"][k]
        p = ndtr(xn[:, None] + xn[None, :] + xd)
        return p, p
    coef = RegressionCoefficients(a["beta_s"][k], a["beta_r"][k], a["beta_d"][k])
    add = AdditiveEffects(a["a"][k], a["b"][k], a["s"][k], a["r"][k], a["sigma_ab"][k])
    mult = MultiplicativeEffects(a["u"][k], a["v"][k])
    m = systematic_mean_matrix(coef, cov, add, mult)
    return ndtr(m), joint_tie_probability_matrix(m, float(a["rho"][k]))


def predict_surface(draws: PosteriorDraws, cov) -> PredictionSurface:
    """Average per-draw probabilities over the saved draws.

    ``cov`` may be a single covariate set or the imputed replicates used in
    the fit; in the latter case each draw is paired with the replicate it
    was sampled under.
    """
    if len(draws) == 0:
        raise ValidationError("no posterior draws to predict from")
    n = draws.arrays["a"].shape[1]
    reps = None
    if isinstance(cov, ImputedCovariates):
        reps = draws.arrays["replicate"]
        if reps.max(initial=0) >= len(cov):
            raise ValidationError("draws reference more covariate replicates than supplied")
        n_cov = cov[0].n_nodes
        p_shape = (cov[0].p_node, cov[0].p_dyad)
    else:
        n_cov = cov.n_nodes
        p_shape = (cov.p_node, cov.p_dyad)
    if n_cov != n:
        raise ValidationError(f"draws have {n} nodes but covariates have {n_cov}")
    if p_shape != (draws.arrays["beta_s"].shape[1], draws.arrays["beta_d"].shape[1]):
        raise ValidationError("covariate dimensions do not match the fitted coefficients")
    directed = np.zeros((n, n))
    joint = np.zeros((n, n))
    for k in range(len(draws)):
        c = cov[int(reps[k])] if reps is not None else cov
        d, j = _draw_probabilities(draws, k, c)
        directed += d
        joint += j
    directed /= len(draws)
    joint /= len(draws)
    joint = 0.5 * (joint + joint.T)
    np.fill_diagonal(directed, 0.0)
    np.fill_diagonal(joint, 0.0)
    return PredictionSurface(directed, joint, list(draws.node_ids) or list(range(n)))


def _check_labels(scores, labels):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels differ in length")
    return scores, labels


def auc_roc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted 1/2."""
    scores, labels = _check_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC area needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Average precision: sum over score thresholds of
    (recall step) x (precision at that threshold), sweeping scores downward.
    Tied scores enter as a single threshold."""
    scores, labels = _check_labels(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR area needs at least one positive label")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of each run of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp_t = tp[ends]
    precision = tp_t / (ends + 1.0)
    recall_step = np.diff(np.r_[0, tp_t]) / n_pos
    return float(np.sum(recall_step * precision))


def make_holdout(net: ObservedNetwork, spec: HoldoutSpec) -> np.ndarray:
    """Symmetric mask of held-out dyads, stratified by outcome.

    Holds out ``round(frac * count)`` (at least one) of the observed tied and
    untied dyads each; all nodes stay in the training network.
    """
    if not 0 < spec.frac < 1:
        raise ValidationError("holdout fraction must lie in (0, 1)")
    n = net.n_nodes
    iu = np.triu_indices(n, 1)
    obs = net.observed[iu]
    y = net.adjacency[iu]
    rng = rng_stream(spec.seed, 0x401D)
    held = np.zeros(iu[0].size, dtype=bool)
    for val in (1, 0):
        idx = np.flatnonzero(obs & (y == val))
        k = max(1, int(round(spec.frac * idx.size)))
        if idx.size < 2:
            raise ValidationError(
                f"cannot hold out dyads with y={val}: only {idx.size} observed")
        held[rng.choice(idx, size=k, replace=False)] = True
    mask = np.zeros((n, n), dtype=bool)
    mask[iu[0][held], iu[1][held]] = True
    return mask | mask.T


def _pair_scores(surface: PredictionSurface, net: ObservedNetwork, mask):
    iu = np.triu_indices(net.n_nodes, 1)
    sel = mask[iu]
    return surface.joint_prob[iu][sel], net.adjacency[iu][sel]


def _report(variant, sample, scores, labels):
    return PerfReport(variant, sample, auc_roc(scores, labels), auc_pr(scores, labels),
                      int(labels.sum()), int(labels.size - labels.sum()))


def evaluate_variants(net: ObservedNetwork, cov, configs, split: HoldoutSpec | None = None):
    """Fit each configuration on the training dyads and score in/out of sample.

    Undirected dyads are ranked by posterior mean joint tie probability (the
    fitted probability for the pooled probit). Returns ``(reports, holdout)``.
    """
    split = split or HoldoutSpec()
    holdout = make_holdout(net, split)
    train = ObservedNetwork(net.adjacency, observed=net.observed & ~holdout,
                            node_ids=net.node_ids)
    reports = []
    for cfg in configs:
        draws = run_chain(train, cov, cfg)
        surface = predict_surface(draws, cov)
        name = cfg.model_variant.value
        reports.append(_report(name, "in", *_pair_scores(surface, net, train.observed)))
        reports.append(_report(name, "out", *_pair_scores(surface, net, holdout)))
    return reports, holdout


def k_selection_table(net: ObservedNetwork, cov, cfg: FitConfig, k_values) -> list:
    """In-sample (ROC, PR) of the full-data fit for each latent dimension."""
    k_values = sorted(int(k) for k in k_values)
    if not k_values:
        raise ValidationError("k_values must be nonempty")
    rows = []
    for k in k_values:
        try:
            draws = run_chain(net, cov, cfg.replace(k_dim=k))
        except PgbmeError as exc:
            exc.args = (f"K={k}: {exc}",) + exc.args[1:]
            raise
        surface = predict_surface(draws, cov)
        scores, labels = _pair_scores(surface, net, net.observed)
        rows.append({"k": k, "auc_roc": auc_roc(scores, labels),
                     "auc_pr": auc_pr(scores, labels)})
    return rows
