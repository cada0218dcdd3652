"""Masked-language-model training: corruption, loss, schedule, optimizer.

Captions are framed as [CLS] w1..wn [EOS] and padded; content positions
(words and the end token, never the start token or padding) are replaced
by [MASK] independently at the configured rate, and the model is trained
to recover the originals. Gradients accumulate over micro-batches with
masked-token weighting so an accumulated step equals one large batch.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Vocabulary
from .encoder import MaskPlan, sample_mask_plan
from .model import CaptionModel
from .tensor import ParamStore, Tensor


class CaptionFormatError(ValueError):
    """A caption cannot be corrupted (empty or missing the start token)."""


class NonFiniteLossError(RuntimeError):
    """Training produced NaN or Inf; a diagnostic checkpoint was written."""


class CheckpointError(ValueError):
    """A checkpoint directory failed validation."""


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------


@dataclass
class MaskedCaption:
    """One caption after [MASK] substitution."""

    input_ids: list[int]
    masked_positions: list[int]
    labels: list[int]  # original ids at the masked positions


def corrupt_caption(ids: list[int], rate: float, rng: np.random.Generator) -> MaskedCaption:
    """Independently mask each content position with probability ``rate``.

    Content positions are everything after [CLS], including [EOS] (the
    model has to learn to emit it) but never padding. If the draw masks
    nothing, one content position is forced so the loss is always defined.
    """
    if not ids or ids[0] != Vocabulary.CLS:
        raise CaptionFormatError(f"caption ids must start with [CLS], got {ids[:1]}")
    content = [n for n, tok in enumerate(ids) if n > 0 and tok != Vocabulary.PAD]
    if not content:
        raise CaptionFormatError("caption has no content positions to mask")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must lie in [0, 1], got {rate}")
    draws = rng.random(len(content))
    masked = [pos for pos, draw in zip(content, draws) if draw < rate]
    if not masked:
        masked = [content[int(rng.integers(len(content)))]]
    out = list(ids)
    labels = []
    for pos in masked:
        labels.append(out[pos])
        out[pos] = Vocabulary.MASK
    return MaskedCaption(input_ids=out, masked_positions=masked, labels=labels)


def frame_caption(words: list[str], vocab: Vocabulary) -> list[int]:
    """[CLS] w1..wn [EOS] as ids."""
    return [Vocabulary.CLS] + vocab.encode(words) + [Vocabulary.EOS]


@dataclass
class MaskedBatch:
    """Padded batch of corrupted captions."""

    input_ids: np.ndarray       # [B, N] int64
    pad_flags: np.ndarray       # [B, N] bool
    masked_rows: np.ndarray     # batch index per masked position
    masked_cols: np.ndarray     # sequence index per masked position
    labels: np.ndarray          # original token ids, aligned with the above

    @property
    def masked_count(self) -> int:
        return len(self.labels)


def collate_captions(
    caption_ids: list[list[int]], rate: float, rng: np.random.Generator
) -> MaskedBatch:
    corrupted = [corrupt_caption(ids, rate, rng) for ids in caption_ids]
    width = max(len(c.input_ids) for c in corrupted)
    batch = np.full((len(corrupted), width), Vocabulary.PAD, dtype=np.int64)
    pads = np.ones((len(corrupted), width), dtype=bool)
    rows, cols, labels = [], [], []
    for b, cap in enumerate(corrupted):
        batch[b, : len(cap.input_ids)] = cap.input_ids
        pads[b, : len(cap.input_ids)] = False
        rows.extend([b] * len(cap.masked_positions))
        cols.extend(cap.masked_positions)
        labels.extend(cap.labels)
    return MaskedBatch(
        input_ids=batch,
        pad_flags=pads,
        masked_rows=np.asarray(rows),
        masked_cols=np.asarray(cols),
        labels=np.asarray(labels),
    )


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def mlm_loss_sum(logits: Tensor, batch: MaskedBatch) -> tuple[Tensor, int]:
    """Summed negative log-likelihood over masked positions, plus the count.

    Keeping the sum separate lets gradient accumulation weight micro-batches
    by their masked-token counts.
    """
    if batch.masked_count == 0:
        raise ValueError("batch has no masked positions")
    b, n, v = logits.shape
    logp = T.log_softmax_rows(logits)
    flat = T.reshape(logp, (b * n, v))
    picked = T.pick(flat, batch.masked_rows * n + batch.masked_cols, batch.labels)
    return T.scale(T.sum_all(picked), -1.0), batch.masked_count


def mlm_loss(logits: Tensor, batch: MaskedBatch) -> Tensor:
    """Mean negative log-likelihood of the original tokens at masked positions."""
    total, count = mlm_loss_sum(logits, batch)
    return T.scale(total, 1.0 / count)


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def lr_schedule(step: int, total_steps: int, cfg: RunConfig) -> float:
    """Linear warmup to the base rate, then linear decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = max(1, round(cfg.warmup_ratio * total_steps))
    if step <= warmup:
        return cfg.learning_rate * step / warmup
    if total_steps == warmup:
        return 0.0
    return cfg.learning_rate * (total_steps - step) / (total_steps - warmup)


class AdamOptimizer:
    """Adam with decoupled weight decay and a reduced backbone rate."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, store: ParamStore, cfg: RunConfig):
        self.store = store
        self.cfg = cfg
        self.step_count = 0
        self.moment1 = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.moment2 = {name: np.zeros_like(t.data) for name, t in store.items()}

    def group_scale(self, name: str) -> float:
        return self.cfg.backbone_lr_scale if name.startswith("backbone.") else 1.0

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.BETA1**t
        bias2 = 1.0 - self.BETA2**t
        for name, param in self.store.items():
            grad = param.grad
            if grad is None:
                continue
            m = self.moment1[name]
            v = self.moment2[name]
            m *= self.BETA1
            m += (1.0 - self.BETA1) * grad
            v *= self.BETA2
            v += (1.0 - self.BETA2) * grad * grad
            group_lr = lr * self.group_scale(name)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.EPS)
            param.data = param.data - group_lr * (update + self.cfg.weight_decay * param.data)


# ---------------------------------------------------------------------------
# the optimizer step over accumulated micro-batches
# ---------------------------------------------------------------------------


@dataclass
class MicroBatch:
    patches: np.ndarray                 # [b, T/2, H/4, W/4, 96]
    text: MaskedBatch
    plans: list[MaskPlan] | None


@dataclass
class StepMetrics:
    step: int
    loss: float
    grad_norm: float
    lr: float


def train_step(
    model: CaptionModel,
    optimizer: AdamOptimizer,
    micro_batches: list[MicroBatch],
    lr: float,
    step: int = 0,
) -> StepMetrics:
    """Accumulate gradients over micro-batches, then one Adam update.

    Per-micro losses are summed (not averaged) and the accumulated
    gradient is rescaled by the total masked-token count, which makes the
    result identical to a single concatenated batch with mean reduction.
    """
    model.params.zero_grad()
    total_nll = 0.0
    total_masked = 0
    for micro in micro_batches:
        visual = model.visual_tokens(micro.patches, micro.plans)
        logits = model.caption_logits(micro.text.input_ids, visual, micro.text.pad_flags)
        loss_sum, count = mlm_loss_sum(logits, micro.text)
        loss_sum.backward()
        total_nll += loss_sum.item()
        total_masked += count
    if not math.isfinite(total_nll):
        raise NonFiniteLossError(f"loss became non-finite at step {step}: {total_nll}")
    inv = 1.0 / total_masked
    sq_norm = 0.0
    for _, param in model.params.items():
        if param.grad is not None:
            param.grad = param.grad * param.grad.dtype.type(inv)
            sq_norm += float((param.grad.astype(np.float64) ** 2).sum())
    optimizer.step(lr)
    return StepMetrics(step=step, loss=total_nll / total_masked, grad_norm=math.sqrt(sq_norm), lr=lr)


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + one raw little-endian float32 file per tensor
# ---------------------------------------------------------------------------


def _tensor_filename(index: int, name: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_")
    return f"{index:04d}_{safe}.bin"


def save_checkpoint(
    directory: str | Path,
    model: CaptionModel,
    optimizer: AdamOptimizer | None,
    step: int,
    rng_state: dict | None = None,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    index = 0

    def emit(name: str, array: np.ndarray, role: str):
        nonlocal index
        filename = _tensor_filename(index, f"{role}_{name}")
        (directory / filename).write_bytes(np.ascontiguousarray(array, dtype="<f4").tobytes())
        tensors.append(
            {"name": name, "role": role, "shape": list(array.shape), "dtype": "float32", "file": filename}
        )
        index += 1

    for name, param in model.params.items():
        emit(name, param.data, "param")
    if optimizer is not None:
        for name in model.params.names():
            emit(name, optimizer.moment1[name], "adam_m")
            emit(name, optimizer.moment2[name], "adam_v")
    manifest = {
        "format": 1,
        "step": step,
        "optimizer_steps": optimizer.step_count if optimizer is not None else 0,
        "config": model.cfg.to_dict(),
        "vocab": model.vocab.tokens(),
        "rng_state": rng_state,
        "tensors": tensors,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_checkpoint(directory: str | Path) -> tuple[CaptionModel, AdamOptimizer, int, dict | None]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    cfg = RunConfig.from_dict(manifest["config"])
    vocab = Vocabulary(manifest["vocab"])
    model = CaptionModel(cfg, vocab, seed=cfg.seed)
    optimizer = AdamOptimizer(model.params, cfg)
    optimizer.step_count = manifest.get("optimizer_steps", 0)
    for entry in manifest["tensors"]:
        raw = (directory / entry["file"]).read_bytes()
        array = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        name, role = entry["name"], entry["role"]
        if name not in model.params:
            raise CheckpointError(f"checkpoint tensor {name!r} not in model")
        if tuple(array.shape) != model.params[name].shape:
            raise CheckpointError(
                f"checkpoint tensor {name!r} has shape {array.shape}, "
                f"model expects {model.params[name].shape}"
            )
        if role == "param":
            model.params[name].data = array
        elif role == "adam_m":
            optimizer.moment1[name] = array
        elif role == "adam_v":
            optimizer.moment2[name] = array
        else:
            raise CheckpointError(f"unknown tensor role {role!r}")
    return model, optimizer, manifest["step"], manifest.get("rng_state")


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainSample:
    video_id: str
    patches: np.ndarray
    caption_ids: list[int]


class Trainer:
    """Epoch loop with shuffling, corruption, feature-mask sampling,
    accumulation, scheduling, logging and periodic checkpoints."""

    def __init__(
        self,
        model: CaptionModel,
        samples: list[TrainSample],
        cfg: RunConfig,
        out_dir: str | Path | None = None,
    ):
        if not samples:
            raise ValueError("no training samples")
        self.model = model
        self.samples = samples
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.optimizer = AdamOptimizer(model.params, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        micro_per_epoch = math.ceil(len(samples) / cfg.batch_size)
        steps_per_epoch = math.ceil(micro_per_epoch / cfg.accumulation_steps)
        # An explicit step budget overrides the epoch-derived plan.
        self.total_steps = cfg.max_steps if cfg.max_steps else cfg.max_epochs * steps_per_epoch
        self.masking_enabled = (
            cfg.feature_masking and cfg.mask_area_threshold > 0 and len(model.catalog) > 0
        )
        self._log_fh = None

    def _make_micro(self, indices: np.ndarray) -> MicroBatch:
        chosen = [self.samples[i] for i in indices]
        patches = np.stack([s.patches for s in chosen])
        text = collate_captions([s.caption_ids for s in chosen], self.cfg.mask_rate, self.rng)
        plans = None
        if self.masking_enabled:
            frames = self.cfg.frames // 2
            plans = [sample_mask_plan(self.model.catalog, frames, self.rng) for _ in chosen]
        return MicroBatch(patches=patches, text=text, plans=plans)

    def _log(self, metrics: StepMetrics) -> None:
        if self._log_fh is not None:
            self._log_fh.write(
                json.dumps(
                    {
                        "step": metrics.step,
                        "loss": metrics.loss,
                        "grad_norm": metrics.grad_norm,
                        "lr": metrics.lr,
                    }
                )
                + "\n"
            )
            self._log_fh.flush()

    def _checkpoint(self, name: str) -> None:
        if self.out_dir is not None:
            save_checkpoint(
                self.out_dir / name,
                self.model,
                self.optimizer,
                self.step,
                rng_state=self.rng.bit_generator.state,
            )

    def run(self) -> list[StepMetrics]:
        history: list[StepMetrics] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "train_log.jsonl", "a", encoding="utf-8")
        try:
            done = self.step >= self.total_steps
            while not done:
                order = self.rng.permutation(len(self.samples))
                micro_slices = [
                    order[i : i + self.cfg.batch_size]
                    for i in range(0, len(order), self.cfg.batch_size)
                ]
                for g in range(0, len(micro_slices), self.cfg.accumulation_steps):
                    group = micro_slices[g : g + self.cfg.accumulation_steps]
                    micros = [self._make_micro(ix) for ix in group]
                    self.step += 1
                    lr = lr_schedule(min(self.step, self.total_steps), self.total_steps, self.cfg)
                    try:
                        metrics = train_step(self.model, self.optimizer, micros, lr, step=self.step)
                    except NonFiniteLossError:
                        self._checkpoint("diagnostic")
                        raise
                    history.append(metrics)
                    self._log(metrics)
                    if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                        self._checkpoint(f"step_{self.step:06d}")
                    if self.step >= self.total_steps:
                        done = True
                        break
                    if self.cfg.stop_loss is not None and metrics.loss < self.cfg.stop_loss:
                        done = True
                        break
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        self._checkpoint("final")
        return history
