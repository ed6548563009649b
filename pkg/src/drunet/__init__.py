"""DR-Unet104: a deep residual U-Net for 2-D brain lesion segmentation, in numpy.

The package is layered: ``autodiff`` and ``ops`` give a small reverse-mode
tensor library, ``model`` builds the network, ``training`` optimises it,
``data`` moves volumes to slices and back, ``metrics`` scores predictions
and ``cli`` ties them together.
"""

__version__ = "0.1.0"

from .model import DRUNet104, build_drunet104, count_conv_layers, parameter_count
from .training import TrainConfig, train

__all__ = ["DRUNet104", "TrainConfig", "build_drunet104", "count_conv_layers", "parameter_count", "train"]
