"""Segmentation-free partial volume correction toolkit.

Subpackages and modules:

- :mod:`pvckit.autodiff`: tape-based reverse-mode autodiff and 3-d convolutions
- :mod:`pvckit.dynconv`: dynamic convolution with densely connected attention
- :mod:`pvckit.network`: the U-net
- :mod:`pvckit.losses`: MAE, SSIM, Sobel and IMBV losses
- :mod:`pvckit.pvc`: Gaussian PSF and iterative Yang correction
- :mod:`pvckit.phantom`: synthetic cardiac phantoms and augmentation
- :mod:`pvckit.metrics`: evaluation metrics and agreement statistics
- :mod:`pvckit.train`, :mod:`pvckit.cli`: training, evaluation and the CLI
"""

from pvckit.volume import Label, TemplateSet, Volume

__version__ = "0.1.0"

__all__ = ["Label", "TemplateSet", "Volume", "__version__"]
