"""Memoryless multimodal anomaly detection on RGB images and organized point clouds.

An RGB branch scores appearance with a student-teacher pair of small
convolutional networks; a 3D branch scores geometry with a learned signed
distance function over local point patches. The two score maps are aligned
and fused per pixel. Inference keeps no bank of training features.
"""

from .config import RunConfig, desk_config
from .pipeline import ModelBundle, infer, load_bundle, save_bundle, train

__version__ = "0.1.0"

__all__ = ["RunConfig", "desk_config", "ModelBundle", "train", "infer", "save_bundle",
           "load_bundle", "__version__"]
