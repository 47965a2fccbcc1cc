"""Joint motion estimation and reconstruction for gated emission tomography."""

from .grid import DensityImage, Deformation, Grid, identity_deformation

__version__ = "0.1.0"

__all__ = ["Grid", "DensityImage", "Deformation", "identity_deformation", "__version__"]
