"""Gaussian process subset scanning for anomalous pattern detection."""
from .errors import (ConfigMismatchError, DegenerateSubsetError, FitError, GPScanError,
                     IngestionError, InputError, NumericalError, SearchRefusedError)
from .gp import (Dataset, FitConfig, Hyperparams, PosteriorGaussian, fit_hyperparameters,
                 kernel_matrix, log_marginal_likelihood, mean_function, posterior,
                 robust_cholesky, sample_prior)
from .statistic import ScoredSubset, beta_mle, llr, llr_max, score_subset
from .search import (SearchMethod, beta_max_priorities, block_beta_max,
                     block_beta_max_priorities, exhaustive_search, grq_direction,
                     grq_search, iterative_beta_max, prefix_scan, search, stepwise_search)
from .scanner import (HoldoutModel, Neighborhood, ScanConfig, ScanResult, Scanner,
                      build_neighborhoods, deduplicate, gpns, gpss, knn_indices,
                      multi_stream_posterior, multi_stream_scan)
from .significance import (NullDistribution, SignificanceReport, randomization_threshold,
                           significance_report)

__version__ = "0.1.0"
