"""GPDM transfer learning for battery state-of-health forecasting."""

__version__ = "0.1.0"

from .kernels import KernelSpec, KernelTerm, eval_kernel, format_kernel, gram, gram_grad, parse_kernel
from .model import CholeskyFactor, GpdmParams, neg_log_posterior, neg_log_posterior_grad
from .train import GPDM, GpdmModel, TrainConfig, fit, load_model, pca_init, save_model
from .forecast import ForecastResult, eol_rul, latent_step, observe, rollout
from .dataio import BatteryDataset, TrainingSet, assemble_transfer, extract_attributes, load_raw, preprocess
from .baselines import GPLVM, GPRegressor, fit_gp, fit_gplvm, gplvm_reconstruct, predict_gp
from .eval import ExperimentConfig, ReportTable, rmse, run_experiment, synth_fleet

__all__ = [
    "__version__", "KernelSpec", "KernelTerm", "eval_kernel", "format_kernel", "gram", "gram_grad",
    "parse_kernel", "CholeskyFactor", "GpdmParams", "neg_log_posterior", "neg_log_posterior_grad",
    "GPDM", "GpdmModel", "TrainConfig", "fit", "load_model", "pca_init", "save_model",
    "ForecastResult", "eol_rul", "latent_step", "observe", "rollout", "BatteryDataset",
    "TrainingSet", "assemble_transfer", "extract_attributes", "load_raw", "preprocess", "GPLVM",
    "GPRegressor", "fit_gp", "fit_gplvm", "gplvm_reconstruct", "predict_gp", "ExperimentConfig",
    "ReportTable", "rmse", "run_experiment", "synth_fleet",
]
