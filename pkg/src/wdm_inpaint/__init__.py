"""Wavelet-domain conditional diffusion inpainting of 3D knee volumes, at desk scale."""

from .diffusion import NoiseSchedule, inpaint, make_linear_schedule
from .volume import BinaryMask, PreprocessConfig, Volume, preprocess
from .wavelet import WaveletCoeffs, dwt3, idwt3

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "NoiseSchedule",
    "PreprocessConfig",
    "Volume",
    "WaveletCoeffs",
    "dwt3",
    "idwt3",
    "inpaint",
    "make_linear_schedule",
    "preprocess",
]
