"""
python-PAT - learned and variational reconstruction for limited-view photoacoustic tomography.

This package provides the spectral acoustic operator and its adjoint, synthetic
vessel phantoms, proximal gradient baselines (NNLS, TV), deep gradient descent
with greedy stage-wise training, a residual U-Net baseline, image quality
metrics and the experiment runner behind the ``python-pat`` command.
"""

__version__ = "0.4.0"
__description__ = "Deep gradient descent and variational reconstruction for photoacoustic tomography"

from .acoustics import AcousticOperator, adjoint, forward, make_geometry, make_subsampling_mask
from .config import ExperimentConfig, parse_config, serialize_config
from .dgd import DgdModel, reconstruct_dgd, run_training_cycle, transfer_update
from .exceptions import PatConfigError, PatDataError, PatError, PatFormatError, PatShapeError, PatTrainingError
from .models import AcousticGeometry, DatasetSample, EvalReport, PhantomSpec, ScalarField, SensorData
from .runner import ExperimentRunner
from .unet import UnetWeights, train_unet, transfer_update_unet

__all__ = [
    "ExperimentRunner",
    "ExperimentConfig",
    "parse_config",
    "serialize_config",
    "AcousticOperator",
    "AcousticGeometry",
    "make_geometry",
    "make_subsampling_mask",
    "forward",
    "adjoint",
    "DgdModel",
    "run_training_cycle",
    "reconstruct_dgd",
    "transfer_update",
    "UnetWeights",
    "train_unet",
    "transfer_update_unet",
    "ScalarField",
    "SensorData",
    "PhantomSpec",
    "DatasetSample",
    "EvalReport",
    "PatError",
    "PatShapeError",
    "PatDataError",
    "PatConfigError",
    "PatFormatError",
    "PatTrainingError",
]
