"""Local intrinsic dimensionality (LID) estimation and LID-regularized inpainting at desk scale."""

__version__ = "0.1.0"
