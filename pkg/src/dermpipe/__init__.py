"""Skin-lesion classification pipeline around externalized CNN backbones.

Preprocessing of dermoscopy images, meta-data fusion-head training,
test-time-augmentation prediction, ensemble subset search and challenge
metrics. CNN outputs enter as files of per-image feature vectors.
"""

__version__ = "0.1.0"

from .constants import CLASSES, KNOWN_CLASSES, UNK

__all__ = ["CLASSES", "KNOWN_CLASSES", "UNK", "__version__"]
