"""Parameter construction and the clip-to-logits forward path."""

from __future__ import annotations

import numpy as np

from . import backbone, decoder, encoder
from .config import RunConfig
from .data import VideoClip, Vocabulary
from .tensor import ParamStore, Tensor


class CaptionModel:
    """Backbone, masked encoder and decoder behind one parameter store.

    Pure function of (inputs, params) apart from ``mask_applications``,
    an instrumentation counter that lets tests assert feature masking
    never runs on the inference path.
    """

    def __init__(self, cfg: RunConfig, vocab: Vocabulary, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.vocab = vocab
        self.params = ParamStore()
        self.catalog = encoder.catalog_for(cfg)
        self.mask_applications = 0
        rng = np.random.default_rng(seed)
        backbone.init_backbone_params(self.params, cfg, rng, dtype)
        encoder.init_fusion_params(self.params, cfg, rng, dtype)
        decoder.init_decoder_params(self.params, cfg, len(vocab), rng, dtype)

    @property
    def dtype(self):
        return self.params["decoder.word_emb"].dtype

    def to_dtype(self, dtype) -> "CaptionModel":
        clone = CaptionModel.__new__(CaptionModel)
        clone.cfg = self.cfg
        clone.vocab = self.vocab
        clone.catalog = self.catalog
        clone.mask_applications = 0
        clone.params = self.params.to_dtype(dtype)
        return clone

    # forward ---------------------------------------------------------------

    def patches_for(self, clip: VideoClip) -> np.ndarray:
        """Constant patch matrix for a clip; cache these during training."""
        return backbone.clip_to_patches(clip.frames, dtype=self.dtype)

    def visual_tokens(
        self,
        patches: np.ndarray,
        mask_plans: list[encoder.MaskPlan] | encoder.MaskPlan | None = None,
    ) -> Tensor:
        """Patches through pyramid, fusion, optional masking, pooling and
        token projection. Accepts [T/2, H/4, W/4, 96] or a batch of them."""
        pyramid = backbone.forward_pyramid(Tensor(patches), self.params, self.cfg)
        fused = encoder.fuse_pyramid(pyramid, self.params, self.cfg)
        if mask_plans is not None:
            fused = encoder.apply_mask(fused, mask_plans, self.catalog)
            self.mask_applications += 1
        pooled = encoder.pool_final(fused)
        return decoder.tokenize_visual(pooled, self.params)

    def caption_logits(
        self,
        token_ids: np.ndarray,
        visual: Tensor,
        pad_flags: np.ndarray | None = None,
        info: decoder.DecodeInfo | None = None,
    ) -> Tensor:
        return decoder.decode_logits(
            token_ids, visual, self.params, self.cfg, pad_flags=pad_flags, info=info
        )
