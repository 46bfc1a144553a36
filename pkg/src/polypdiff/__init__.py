"""Multi-task conditional mask diffusion for video polyp segmentation."""

__version__ = "0.1.0"
