"""Autoregressive caption generation by iterative mask filling.

A hypothesis starts as [CLS] [MASK]; each step replaces the trailing
[MASK] with a chosen word and appends a fresh one, until [EOS] or the
length cap. Beam search ranks hypotheses by length-normalised cumulative
log-probability (sum over generated tokens divided by their count), with
ties broken toward the lexicographically smaller id sequence. Feature
masking never runs on this path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import VideoClip, Vocabulary
from .model import CaptionModel
from .tensor import Tensor


class HypothesisError(RuntimeError):
    """Operation on a finished hypothesis."""


@dataclass
class Hypothesis:
    """Partial caption: ids start with [CLS]; score is the running sum of
    chosen-token log-probabilities (non-increasing as tokens append)."""

    ids: tuple[int, ...]
    logp_sum: float = 0.0
    finished: bool = False

    @property
    def generated(self) -> int:
        return len(self.ids) - 1

    def normalized(self) -> float:
        return self.logp_sum / max(1, self.generated)


def _mask_filled_logprobs(model: CaptionModel, visual: Tensor, hyps: list[Hypothesis]) -> np.ndarray:
    """Log-probability rows at the trailing [MASK] for equally long hypotheses."""
    ids = np.array([h.ids + (Vocabulary.MASK,) for h in hyps], dtype=np.int64)
    batch = len(hyps)
    if visual.shape[0] == 1 and batch > 1:
        visual = Tensor(np.repeat(visual.data, batch, axis=0))
    with T.no_grad():
        logits = model.caption_logits(ids, visual)
        logp = T.log_softmax_rows(logits)
    return logp.data[:, -1, :]


def next_token_distribution(model: CaptionModel, visual: Tensor, hyp: Hypothesis) -> np.ndarray:
    """Log-softmax over the vocabulary for the next position of one hypothesis."""
    if hyp.finished:
        raise HypothesisError(f"hypothesis already finished: {hyp.ids}")
    if hyp.generated >= model.cfg.max_generate_len:
        raise HypothesisError(f"hypothesis at the length cap: {hyp.ids}")
    return _mask_filled_logprobs(model, visual, [hyp])[0]


def greedy_rollout(model: CaptionModel, visual: Tensor, max_len: int) -> Hypothesis:
    """Argmax the next-token distribution until [EOS] or the cap (oracle path)."""
    hyp = Hypothesis(ids=(Vocabulary.CLS,))
    for _ in range(max_len):
        logp = next_token_distribution(model, visual, hyp)
        token = int(np.argmax(logp))
        hyp = Hypothesis(
            ids=hyp.ids + (token,),
            logp_sum=hyp.logp_sum + float(logp[token]),
            finished=token == Vocabulary.EOS or hyp.generated + 1 >= max_len,
        )
        if hyp.finished:
            break
    return hyp


def beam_search(model: CaptionModel, visual: Tensor, beam: int, max_len: int) -> Hypothesis:
    """Keep the ``beam`` best hypotheses per step; finished ones retire.

    Returns the best finished hypothesis, falling back to the best
    cap-length one; with beam=1 this reduces exactly to greedy rollout.
    """
    if beam < 1 or max_len < 1:
        raise ValueError(f"beam {beam} and max_len {max_len} must be >= 1")
    active = [Hypothesis(ids=(Vocabulary.CLS,))]
    retired: list[Hypothesis] = []
    for _ in range(max_len):
        if not active:
            break
        logps = _mask_filled_logprobs(model, visual, active)
        candidates: list[Hypothesis] = []
        for hyp, row in zip(active, logps):
            for token in range(row.shape[0]):
                new_ids = hyp.ids + (token,)
                candidates.append(
                    Hypothesis(
                        ids=new_ids,
                        logp_sum=hyp.logp_sum + float(row[token]),
                        finished=token == Vocabulary.EOS or len(new_ids) - 1 >= max_len,
                    )
                )
        candidates.sort(key=lambda h: (-h.normalized(), h.ids))
        kept = candidates[:beam]
        active = [h for h in kept if not h.finished]
        retired.extend(h for h in kept if h.finished)
    pool = retired + active
    pool.sort(key=lambda h: (-h.normalized(), h.ids))
    return pool[0]


def detokenize(ids: tuple[int, ...] | list[int], vocab: Vocabulary) -> str:
    """Join tokens, dropping the special ids."""
    specials = {Vocabulary.PAD, Vocabulary.CLS, Vocabulary.SEP, Vocabulary.MASK, Vocabulary.EOS}
    return " ".join(vocab.id_to_token(i) for i in ids if i not in specials)


def generate_caption(model: CaptionModel, clip: VideoClip, cfg: RunConfig | None = None) -> str:
    """Full pipeline: clip to pyramid to fused map (never masked) to pooled
    tokens to beam search to text."""
    cfg = cfg or model.cfg
    before = model.mask_applications
    patches = model.patches_for(clip)[None, ...]
    with T.no_grad():
        visual = model.visual_tokens(patches, mask_plans=None)
    assert model.mask_applications == before, "feature masking ran during inference"
    best = beam_search(model, visual, beam=cfg.beam_size, max_len=cfg.max_generate_len)
    return detokenize(best.ids, model.vocab)
