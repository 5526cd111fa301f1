"""Global-matrix upsampling for segmentation: layers, losses, metrics, data, CLI."""

__version__ = "0.1.0"
