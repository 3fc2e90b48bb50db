"""Regional-attention toy diffusion transformer with inpainting fusion and adapter training."""
from ._kernels import BACKEND
from .model import ModelConfig, ToyDiT

__all__ = ["BACKEND", "ModelConfig", "ToyDiT"]
__version__ = "0.1.0"
