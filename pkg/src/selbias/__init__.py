"""Rating estimation that exploits the popularity/rating selection bias."""
from .deming import BiasLine, TlsPoint, fit_bias_line, fit_weighted_tls, subset_slopes, tls_points
from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    NumericalError,
    SelbiasError,
    VerticalLineError,
)
from .estimator import SBConfig, SBSolution, fit_ls, fit_sb, gradient, hessian, objective, popularity_ranking
from .ratings import ItemStats, RatingEvent, RatingTable, SplitDataset, ingest, split_per_user, sufficient_stats

__version__ = "0.1.0"
