"""Dual-stream self-supervised representation learning at desk scale.

A CNN stream and a transformer stream train jointly on two augmented views
per image; the transformer's attentive outputs additionally supervise the
CNN encoder. Built on a self-contained float32 reverse-mode autodiff engine.
"""

from .tensor import Tensor, backward, set_debug_checks

__all__ = ["Tensor", "backward", "set_debug_checks"]
__version__ = "0.1.0"
