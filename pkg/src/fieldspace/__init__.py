"""Field-space autoencoding of HEALPix climate fields.

Multi-scale decomposition, a patch-wise attention autoencoder that compresses
residuals into a single-feature code, zero-shot super-resolution by residual
masking, and a diffusion sampler over compressed states.
"""
from .autoencoder import (CompressedState, FieldSpaceAutoencoder, MultiVariableAutoencoder,
                          compression_ratios, desk_params, paper_params)
from .diffusion import (CompressedFieldDiffusion, NoiseSchedule, cosine_schedule,
                        ddim_sample, desk_diffusion_params)
from .metrics import angular_power_spectrum, psnr, rmse_healpix, rmse_latweighted
from .multiscale import MultiScaleDecomposer, MultiScaleState, decompose, reconstruct
from .preprocess import NormStats, PercentileScaler
from .remap import HealpixRemapper

__version__ = "0.1.0"

__all__ = [
    "CompressedFieldDiffusion", "CompressedState", "FieldSpaceAutoencoder", "HealpixRemapper",
    "MultiScaleDecomposer", "MultiScaleState", "MultiVariableAutoencoder", "NoiseSchedule",
    "NormStats", "PercentileScaler", "angular_power_spectrum", "compression_ratios",
    "cosine_schedule", "ddim_sample", "decompose", "desk_diffusion_params", "desk_params",
    "paper_params", "psnr", "reconstruct", "rmse_healpix", "rmse_latweighted",
]
