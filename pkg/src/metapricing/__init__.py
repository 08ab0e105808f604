"""Meta-learned Thompson-sampling dynamic pricing across a sequence of selling epochs."""

__version__ = "0.1.0"

from .core_model import (
    DemandParams,
    MetaInstance,
    PriceBounds,
    compute_derived_constants,
    make_design_vector,
    optimal_price,
)
from .gaussian import GaussianBelief, posterior_update, sample, validate_pd
from .simulator import SeedPlan, run_meta_paired, run_trials

__all__ = [
    "__version__",
    "DemandParams", "MetaInstance", "PriceBounds", "compute_derived_constants",
    "make_design_vector", "optimal_price",
    "GaussianBelief", "posterior_update", "sample", "validate_pd",
    "SeedPlan", "run_meta_paired", "run_trials",
]
