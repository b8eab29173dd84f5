"""Gaussian-kernel convolution layers for density-map counting."""
from .density import (
    DensityMap,
    PointAnnotations,
    analytic_noise_moments,
    generate_density_map,
    monte_carlo_noise_moments,
    perturb_annotations,
)
from .gconv import GaussConvLayer, backward, complexity_count, forward_fast, forward_lra_oracle, forward_massive_oracle, shift_bilinear
from .kernels import Covariance2, KernelSpec, make_gaussian_kernel, sample_kernel_bank
from .lowrank import LowRankBasis, init_weights, pca_select, softmax_normalize

__version__ = "0.1.0"
