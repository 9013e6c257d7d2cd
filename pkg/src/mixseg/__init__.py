"""Mixed-kernel U-Net, R2U-Net and Attention U-Net segmentation on a numpy autograd."""

__version__ = "0.1.0"

__all__ = ["__version__"]
