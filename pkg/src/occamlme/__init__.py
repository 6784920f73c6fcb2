"""Per-individual Bayesian variable selection in sparse linear mixed models.

Normal errors are fitted by EM with an Occam's window over each
individual's models; skew-t errors by a variational Bayes extension.
"""
__version__ = "0.1.0"

from .model import (  # noqa: E402
    DatasetError,
    GlobalParams,
    IndividualData,
    ModelError,
    ModelIndicator,
    NumericalError,
    log_prior_gamma,
    validate_dataset,
)
from .normal_em import EMState, FitConfig, em_fit  # noqa: E402
from .skewt import vb_fit  # noqa: E402

__all__ = [
    "DatasetError", "EMState", "FitConfig", "GlobalParams", "IndividualData", "ModelError",
    "ModelIndicator", "NumericalError", "em_fit", "log_prior_gamma", "validate_dataset",
    "vb_fit", "__version__",
]
