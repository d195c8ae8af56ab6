"""Conditional density estimation for tabular data.

A feature-embedding transformer encoder turns any observed subset of a row
into a condition vector; a denoising diffusion head turns that vector into
samples from the requested feature's conditional density.
"""

from .autodiff import Tensor, backward, forward_op, parameter
from .data import (FeatureId, FeatureRegistry, RawTable, TokenizedRow,
                   build_inference_sequence, fit_standardization, load_csv,
                   sample_training_example, split_rows)
from .diffusion import (NoiseSchedule, beta_at, build_schedule, diffusion_loss,
                        p_sample_chain, predict_noise, q_sample)
from .errors import (ConfigError, DataError, GraphError, NumericError,
                     ShapeError, TabdensError, TrainingDiverged)
from .inference import (CalibrationReport, DensityEstimate, calibration_sweep,
                        estimate_density, export_histogram, quantile_of_truth,
                        sequential_joint_sample, sequential_joint_sample_batch)
from .model import (ModelDims, embed_request, embed_token, encode, encode_batch,
                    init_params)
from .optim import AdamW, CosineRestarts, adamw_step
from .training import (Checkpoint, TrainConfig, load_checkpoint, make_config,
                       parameter_report, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CalibrationReport", "Checkpoint", "ConfigError", "CosineRestarts",
    "DataError", "DensityEstimate", "FeatureId", "FeatureRegistry", "GraphError",
    "ModelDims", "NoiseSchedule", "NumericError", "RawTable", "ShapeError",
    "TabdensError", "Tensor", "TokenizedRow", "TrainConfig", "TrainingDiverged",
    "adamw_step", "backward", "beta_at", "build_inference_sequence", "build_schedule",
    "calibration_sweep", "diffusion_loss", "embed_request", "embed_token",
    "encode", "encode_batch", "estimate_density", "export_histogram",
    "fit_standardization", "forward_op", "init_params", "load_checkpoint",
    "load_csv", "make_config", "p_sample_chain", "parameter", "parameter_report",
    "predict_noise", "q_sample", "quantile_of_truth", "sample_training_example",
    "save_checkpoint", "sequential_joint_sample", "sequential_joint_sample_batch",
    "split_rows", "train",
]
