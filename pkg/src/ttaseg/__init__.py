"""Test-time adaptable segmentation: a shallow per-image normalization network
adapted at inference time by a denoising-autoencoder shape prior."""

__version__ = "0.1.0"

from .grids import GridRecord, LabelMap, ProbMap, Volume, read_volume, write_volume
from .synth import AnatomySpec, DomainSpec, StructureSpec
from .augment import AugmentConfig
from .networks import NetworkConfig
from .training import NoiseConfig, TrainConfig
from .tta import TTAConfig

__all__ = [
    "__version__",
    "Volume", "LabelMap", "ProbMap", "GridRecord", "read_volume", "write_volume",
    "AnatomySpec", "DomainSpec", "StructureSpec",
    "AugmentConfig", "NetworkConfig", "TrainConfig", "NoiseConfig", "TTAConfig",
]
