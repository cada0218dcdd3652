"""Desk-scale end-to-end video captioning.

A trainable pipeline from raw frames to captions: hierarchical multi-scale
feature extraction, fused and region-masked encoding, a transformer decoder
with gated shallow-context attention, masked-language-model training, beam
search, and a from-the-formulas caption metric suite. Everything runs on a
CPU against a synthetic moving-shapes corpus.
"""

__version__ = "0.1.0"

from .config import RunConfig, paper_config, toy_config
from .data import VideoClip, Vocabulary
from .model import CaptionModel
from .tensor import ParamStore, Tensor

__all__ = [
    "CaptionModel",
    "ParamStore",
    "RunConfig",
    "Tensor",
    "VideoClip",
    "Vocabulary",
    "paper_config",
    "toy_config",
    "__version__",
]
