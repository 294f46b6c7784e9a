"""Feature Separation and Recalibration (FSR) for adversarially robust CNNs.

Submodules: ``fsr`` (the layer and its losses), ``models`` (backbones),
``attacks`` (FGSM / PGD / C&W-PGD), ``training``, ``evaluation``,
``config``, ``data``, ``checkpoint``, ``experiments`` and ``cli``.
"""

from .fsr import FSR, FsrConfig, FsrForwardResult, gumbel_soft_mask, recalibration_loss, separation_loss
from .models import BackboneSpec, ModelOutput, build_model

__version__ = "0.1.0"

__all__ = [
    "FSR",
    "FsrConfig",
    "FsrForwardResult",
    "gumbel_soft_mask",
    "separation_loss",
    "recalibration_loss",
    "BackboneSpec",
    "ModelOutput",
    "build_model",
]
