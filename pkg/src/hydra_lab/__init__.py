"""hydra-lab: a desk-scale lab for a router-gated hybrid sequence model.

A linear-time recurrent backbone carries every token; a lightweight
router decides, chunk by chunk, whether to spend extra compute on
sparse global attention, which pair of feed-forward experts to apply,
and how much to blend in from two memories (a slot workspace and a
product-key store). The package ships the numerics to train it from
scratch (a small float64 autodiff engine), a parameter-matched dense
transformer baseline, synthetic task generators with independent
oracles, and training/benchmark harnesses.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad_check, no_grad
from .model import ModelConfig, build_hydra, build_transformer, hydra_forward, transformer_forward

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad",
    "ModelConfig", "build_hydra", "build_transformer",
    "hydra_forward", "transformer_forward",
    "__version__",
]
