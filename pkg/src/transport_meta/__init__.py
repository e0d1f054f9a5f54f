"""Transport treatment effects from several randomized trials to a target population."""
from .data import DataError, StudyDataset, build_support_map, from_arrays, load_csv, write_csv
from .nuisance import FittedNuisances, WeightChoice, fit_nuisances
from .ate import EstimateReport, eif_ate, eif_ate_variant, gformula_ate, ipw_ate
from .cmr import RatioEstimate, cmr_estimate, cmr_variant, gformula_cmr, single_source_cmr

__version__ = "0.1.0"

__all__ = [
    "DataError", "StudyDataset", "build_support_map", "from_arrays", "load_csv", "write_csv",
    "FittedNuisances", "WeightChoice", "fit_nuisances",
    "EstimateReport", "eif_ate", "eif_ate_variant", "gformula_ate", "ipw_ate",
    "RatioEstimate", "cmr_estimate", "cmr_variant", "gformula_cmr", "single_source_cmr",
]
