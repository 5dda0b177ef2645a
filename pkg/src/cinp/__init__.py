"""Contrastive image-network pretraining at desk scale.

Dual encoders over 3D volumes and functional connectivity networks, trained
with contrastive, masked-reconstruction and matching objectives on a
self-contained float64 autodiff engine, plus the network-prompting
classification protocol, synthetic paired cohorts and an evaluation harness.
"""

from .autodiff import Tensor, backward, grad_check, tensor_op

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad_check", "tensor_op", "__version__"]
