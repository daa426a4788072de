"""Locally smoothed convolution layers.

A locally connected layer's per-position weight matrix is factorized as
smoother times kernel: the kernel is shared across positions like a
convolution, and the smoother weights each position's copy of it.  The
smoother is generated by a 2-d Gaussian whose mean and precision are
either free parameters or regressed from the image by a small parameter
network.  Everything (forward, analytic backward, training, benchmark
data generation, visualization) runs on numpy in double precision.
"""

__version__ = "0.1.0"

from .layers import LsnnWeights, UnrolledInput, extract_patches, lsnn_forward
from .smoother import GaussianParams, PatchGrid, Smoother, smoother_forward
from .tensor import Rng

__all__ = [
    "GaussianParams", "PatchGrid", "Smoother", "smoother_forward",
    "LsnnWeights", "UnrolledInput", "extract_patches", "lsnn_forward",
    "Rng", "__version__",
]
