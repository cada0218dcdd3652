"""End-to-end gradient verification of the full captioning loss.

Builds a 64-bit model on one synthetic clip, fixes a caption corruption
and a feature-mask plan, and compares reverse-mode gradients of the
masked-language loss against central differences for sampled coordinates
of every parameter: backbone, fusion, mask-and-pool path, the gated
attention (including all six gate/mix parameters per layer) and the loss
head.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig, toy_config
from .data import SynthSpec, build_vocab, generate_clip, tokenize
from .encoder import sample_mask_plan
from .model import CaptionModel
from .tensor import GradCheckReport, grad_check
from .training import collate_captions, frame_caption, mlm_loss


def full_model_grad_check(
    cfg: RunConfig | None = None,
    seed: int = 0,
    samples_per_param: int = 4,
    eps: float = 1e-5,
) -> GradCheckReport:
    cfg = cfg or toy_config()
    spec = SynthSpec(frames=cfg.frames, height=cfg.height, width=cfg.width, seed=seed)
    clip, captions = generate_clip(spec, 0)
    vocab = build_vocab(captions)
    model = CaptionModel(cfg, vocab, seed=seed, dtype=np.float64)

    rng = np.random.default_rng(seed + 1)
    patches = model.patches_for(clip)[None, ...]
    batch = collate_captions(
        [frame_caption(tokenize(c), vocab) for c in captions[:2]], cfg.mask_rate, rng
    )
    if len(captions) >= 2:
        patches = np.repeat(patches, len(captions[:2]), axis=0)
    plans = None
    if len(model.catalog) > 0:
        plans = [sample_mask_plan(model.catalog, cfg.frames // 2, rng) for _ in range(patches.shape[0])]

    def loss_fn(store):
        visual = model.visual_tokens(patches, plans)
        logits = model.caption_logits(batch.input_ids, visual, batch.pad_flags)
        return mlm_loss(logits, batch)

    return grad_check(
        loss_fn,
        model.params,
        eps=eps,
        samples_per_param=samples_per_param,
        rng=np.random.default_rng(seed + 2),
    )


def format_report(report: GradCheckReport, tolerance: float) -> str:
    """One line per parameter plus a verdict line."""
    width = max(len(name) for name in report.per_param)
    lines = [f"{'parameter':<{width}}  max rel error"]
    for name, err in report.per_param.items():
        flag = "" if err < tolerance else "  <-- FAIL"
        lines.append(f"{name:<{width}}  {err:12.3e}{flag}")
    verdict = "PASS" if report.passed(tolerance) else "FAIL"
    lines.append(
        f"{verdict}: max relative error {report.max_rel_error:.3e} "
        f"(tolerance {tolerance:.0e}, eps {report.eps:.0e}, "
        f"{report.samples_per_param or 'all'} samples/parameter)"
    )
    return "\n".join(lines)
