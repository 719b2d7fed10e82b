"""Complex-valued MRI denoising toolkit: noise synthesis, an imaging
transformer, training, metrics, and a wavelet baseline."""

from .errors import (
    BaselineError,
    CheckpointMismatchError,
    ConfigError,
    DegenerateInputError,
    FormatError,
    ImtError,
    InvalidInputError,
    InvalidStateError,
    NumericalFailureError,
    TruncationError,
)
from .imgstack import (
    ComplexImageStack,
    GFactorMap,
    PowerNormState,
    average_repetitions,
    coil_combine_rss,
    load_gmap,
    load_stack,
    power_denormalize,
    power_normalize,
    save_gmap,
    save_stack,
)
from .network import ModelConfig, ParameterSet, forward, init_params, load_checkpoint, save_checkpoint
from .noisegen import GmapModel, NoiseSpec, make_gmap, make_training_pair, relative_snr_db
from .training import LossConfig, TrainConfig, combined_loss, train

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
