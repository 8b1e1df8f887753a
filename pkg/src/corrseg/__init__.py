"""Missing-modality robust 3D tumour segmentation with a latent correlation block."""

__version__ = "0.1.0"
