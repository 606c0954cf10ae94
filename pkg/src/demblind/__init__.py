"""Blind estimation of fine-scale DEM measurement-error variance and correlation width.

The error-free terrain inside small patches is modelled as fractional Brownian
motion, measurement error as a stationary correlated Gaussian field. Error
parameters are estimated by penalized maximum likelihood on groups of
noise-informative patches, then regressed on stacking number and elevation.
"""

from ._backend import BACKEND
from .covmodel import (FbmParams, NoiseParams, Theta, cov_derivative, observed_cov_matrix,
                       patch_coords, sample_patch)
from .errors import (DegenerateModelError, DemBlindError, ModelInestimableError,
                     RasterDimensionError, RasterError, RasterFormatError, RasterReadError,
                     UnboundedCRLBError)
from .likelihood import (GroupEstimate, PatchEstimate, combine_crlb, crlb,
                         estimate_group, estimate_sigma_corr2, estimate_sigma_e2,
                         fisher_information, log_likelihood)
from .pipeline import (NIGroup, PipelineConfig, group_patches, homogeneity_index,
                       hurst_interp_error_sd, interpolate_hurst, run_pipeline)
from .raster import (Patch, PredictorVector, RasterTile, block_downsample, extract_patches,
                     load_raster, patch_is_reliable, save_raster)
from .regression import (ModelFit, ModelType, design_row, fit_robust_wls, generalized_r2,
                         predict, select_model)

__version__ = "0.1.0"
