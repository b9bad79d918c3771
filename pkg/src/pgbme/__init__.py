"""Partially observed generalized bilinear mixed-effects network model.

Reconstructs latent directed tie propensities from an undirected network
by Gibbs sampling, with synthetic-data and predictive-evaluation tools.
"""

__version__ = "0.1.0"

from .errors import (DecompositionError, FitError, NumericalError, PgbmeError,  # noqa: E402
                     SamplingError, UndefinedMetricError, ValidationError)
from .evaluation import (HoldoutSpec, PerfReport, PredictionSurface, auc_pr,  # noqa: E402
                         auc_roc, evaluate_variants, k_selection_table,
                         predict_surface)
from .gibbs import FitConfig, ModelState, PosteriorDraws, Variant, run_chain  # noqa: E402
from .model import (CovariateSet, ImputedCovariates, ObservedNetwork,  # noqa: E402
                    joint_tie_probability, linear_predictor, systematic_mean)
from .samplers import rng_stream  # noqa: E402
from .synthdata import (SimSpec, generate_directed, mask_undirected,  # noqa: E402
                        run_recovery_study)
