"""Selective and global attention for semantic segmentation, on a small numpy autodiff engine.

Modules: ``tensor`` (tape autodiff, conv, resize), ``sparsemax``,
``attention`` (selective attention, global attention feature), ``segnet``
(backbone, ASPP head variants, decoders, cost report), ``train``,
``dataset``, ``fileio``, ``config``, ``gradcheck`` and ``cli``.
The projection itself is ``gsanet.sparsemax.sparsemax``; the package does not
re-export it, since that would shadow the submodule.
"""
from .segnet import HEADS, ModelConfig, count_cost, gsanet_forward, init_params
from .train import TrainConfig, train

__all__ = ["HEADS", "ModelConfig", "TrainConfig", "count_cost", "gsanet_forward", "init_params", "train"]
__version__ = "0.1.0"
