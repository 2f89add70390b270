"""Tri-plane state-space adapters on a frozen slice-wise ViT segmenter."""

__version__ = "0.1.0"

from .config import TrainConfig  # noqa: F401
from .model import SegModel  # noqa: F401
from .tensor import Parameter, Tape, Tensor, recording  # noqa: F401
