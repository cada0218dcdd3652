"""Transformer decoder over joint text and visual token sequences.

Text tokens (word plus learned position embedding, causally masked) sit
in front of visual tokens (projected pooled video cells, no positions,
mutually visible but blind to text). Each layer can blend the running
mean of earlier layer outputs into its queries and keys through learned
sigmoid gates; with the gates disabled the stack degenerates to a plain
pre-norm transformer, for which an independent reference implementation
lives alongside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .tensor import ParamStore, Tensor, init_uniform

NEG_INF = -1e9  # additive masking surrogate; exp() underflows to exactly 0


class SequenceLengthError(ValueError):
    """Token sequence exceeds the configured maximum."""


def init_decoder_params(
    store: ParamStore, cfg: RunConfig, vocab_size: int, rng: np.random.Generator, dtype
) -> None:
    d = cfg.hidden_dim
    store.add("decoder.word_emb", init_uniform(rng, (vocab_size, d), d, dtype))
    store.add("decoder.pos_emb", init_uniform(rng, (cfg.max_caption_len, d), d, dtype))
    store.add("decoder.visual_proj.w", init_uniform(rng, (cfg.fused_channels, d), cfg.fused_channels, dtype))
    store.add("decoder.visual_proj.b", np.zeros(d, dtype=dtype))
    hidden = cfg.ffn_ratio * d
    for z in range(1, cfg.layers + 1):
        p = f"decoder.layer{z}"
        store.add(f"{p}.ln_attn.g", np.ones(d, dtype=dtype))
        store.add(f"{p}.ln_attn.b", np.zeros(d, dtype=dtype))
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{p}.attn.{name}", init_uniform(rng, (d, d), d, dtype))
        store.add(f"{p}.attn.wo_b", np.zeros(d, dtype=dtype))
        store.add(f"{p}.gate.q_w", init_uniform(rng, (d, 1), d, dtype))
        store.add(f"{p}.gate.oq_w", init_uniform(rng, (d, 1), d, dtype))
        store.add(f"{p}.gate.mix_q", init_uniform(rng, (d, d), d, dtype))
        store.add(f"{p}.gate.k_w", init_uniform(rng, (d, 1), d, dtype))
        store.add(f"{p}.gate.ok_w", init_uniform(rng, (d, 1), d, dtype))
        store.add(f"{p}.gate.mix_k", init_uniform(rng, (d, d), d, dtype))
        store.add(f"{p}.ln_ffn.g", np.ones(d, dtype=dtype))
        store.add(f"{p}.ln_ffn.b", np.zeros(d, dtype=dtype))
        store.add(f"{p}.ffn1.w", init_uniform(rng, (d, hidden), d, dtype))
        store.add(f"{p}.ffn1.b", np.zeros(hidden, dtype=dtype))
        store.add(f"{p}.ffn2.w", init_uniform(rng, (hidden, d), hidden, dtype))
        store.add(f"{p}.ffn2.b", np.zeros(d, dtype=dtype))


# ---------------------------------------------------------------------------
# token construction
# ---------------------------------------------------------------------------


def embed_text(token_ids: np.ndarray, params: ParamStore, cfg: RunConfig) -> Tensor:
    """Word embedding plus learned position embedding: [B, N, d]."""
    ids = np.atleast_2d(np.asarray(token_ids))
    n = ids.shape[-1]
    if n > cfg.max_caption_len:
        raise SequenceLengthError(f"sequence length {n} exceeds maximum {cfg.max_caption_len}")
    words = T.embedding(params["decoder.word_emb"], ids)
    positions = T.embedding(params["decoder.pos_emb"], np.arange(n))
    return T.add(words, positions)


def tokenize_visual(pooled: Tensor, params: ParamStore) -> Tensor:
    """Flatten pooled video cells to tokens and project to decoder width."""
    *lead, t, h, w, c = pooled.shape
    flat = T.reshape(pooled, tuple(lead) + (t * h * w, c))
    return T.linear(flat, params["decoder.visual_proj.w"], params["decoder.visual_proj.b"])


def build_attention_mask(
    n_text: int, n_visual: int, pad_flags: np.ndarray | None = None, dtype=np.float32
) -> np.ndarray:
    """Additive attention mask with entries in {0, NEG_INF}.

    Text rows see earlier non-pad text and every visual column; visual
    rows see visual columns only; every row may attend to itself.
    Returns [L, L] without pad flags, else [B, 1, L, L].
    """
    length = n_text + n_visual

    def single(pad: np.ndarray) -> np.ndarray:
        allowed = np.zeros((length, length), dtype=bool)
        causal = np.tril(np.ones((n_text, n_text), dtype=bool))
        allowed[:n_text, :n_text] = causal & ~pad[None, :]
        allowed[:n_text, n_text:] = True
        allowed[n_text:, n_text:] = True
        np.fill_diagonal(allowed, True)
        return np.where(allowed, dtype(0.0), dtype(NEG_INF))

    if pad_flags is None:
        return single(np.zeros(n_text, dtype=bool))
    pad_flags = np.asarray(pad_flags, dtype=bool)
    if pad_flags.ndim == 1:
        return single(pad_flags)
    return np.stack([single(row) for row in pad_flags])[:, None, :, :]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, d = x.shape
    x = T.reshape(x, (b, length, heads, d // heads))
    return T.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, heads, length, dh = x.shape
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, length, heads * dh))


def _masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, cfg: RunConfig) -> Tensor:
    heads = cfg.heads
    dh = cfg.hidden_dim // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    logits = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    logits = T.add(logits, Tensor(mask, dtype=q.dtype))
    weights = T.softmax_rows(logits)
    return _merge_heads(T.matmul(weights, vh))


def _ffn(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    hidden = T.gelu(T.linear(x, params[f"{prefix}.ffn1.w"], params[f"{prefix}.ffn1.b"]))
    return T.linear(hidden, params[f"{prefix}.ffn2.w"], params[f"{prefix}.ffn2.b"])


def vanilla_layer(x: Tensor, params: ParamStore, prefix: str, mask: np.ndarray, cfg: RunConfig) -> Tensor:
    """Plain pre-norm attention + feed-forward block (reference path)."""
    normed = T.layer_norm(x, params[f"{prefix}.ln_attn.g"], params[f"{prefix}.ln_attn.b"])
    q = T.linear(normed, params[f"{prefix}.attn.wq"])
    k = T.linear(normed, params[f"{prefix}.attn.wk"])
    v = T.linear(normed, params[f"{prefix}.attn.wv"])
    attended = _masked_attention(q, k, v, mask, cfg)
    x = T.add(x, T.linear(attended, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.wo_b"]))
    normed = T.layer_norm(x, params[f"{prefix}.ln_ffn.g"], params[f"{prefix}.ln_ffn.b"])
    return T.add(x, _ffn(normed, params, prefix))


class LayerTrace:
    """Ordered outputs of the layers already run, plus their running mean."""

    def __init__(self):
        self.outputs: list[Tensor] = []
        self._running: Tensor | None = None

    def append(self, output: Tensor) -> None:
        self.outputs.append(output)
        self._running = None

    def mean(self) -> Tensor:
        if self._running is None:
            self._running = T.mean_tensors(self.outputs)
        return self._running


def shallow_context(trace: LayerTrace, z: int, stack_input: Tensor) -> Tensor:
    """Context for layer z: the stack input for z=1, else the mean of
    outputs of layers 1..z-1."""
    if z == 1:
        return stack_input
    if len(trace.outputs) < z - 1:
        raise ValueError(f"layer {z} needs {z - 1} prior outputs, trace has {len(trace.outputs)}")
    if len(trace.outputs) == z - 1:
        return trace.mean()
    return T.mean_tensors(trace.outputs[: z - 1])


def enhanced_qk(
    q: Tensor, k: Tensor, context: Tensor, params: ParamStore, prefix: str
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Blend shallow context into queries and keys through sigmoid gates.

    Per-row gates broadcast over the feature axis; the mixed projections
    replace q/k wholesale when the gate saturates at 1.
    """
    gate_q = T.sigmoid(
        T.add(T.linear(q, params[f"{prefix}.gate.q_w"]), T.linear(context, params[f"{prefix}.gate.oq_w"]))
    )
    gate_k = T.sigmoid(
        T.add(T.linear(k, params[f"{prefix}.gate.k_w"]), T.linear(context, params[f"{prefix}.gate.ok_w"]))
    )
    q_hat = T.add(
        T.mul(1.0 - gate_q, q),
        T.mul(gate_q, T.linear(context, params[f"{prefix}.gate.mix_q"])),
    )
    k_hat = T.add(
        T.mul(1.0 - gate_k, k),
        T.mul(gate_k, T.linear(context, params[f"{prefix}.gate.mix_k"])),
    )
    return q_hat, k_hat, gate_q, gate_k


def enhanced_layer(
    x: Tensor,
    context: Tensor,
    params: ParamStore,
    prefix: str,
    mask: np.ndarray,
    cfg: RunConfig,
) -> Tensor:
    """vanilla_layer with gated context-mixed queries and keys.

    With ``cfg.enhanced_attention`` off the gates are skipped entirely and
    the computation matches the vanilla path bit for bit.
    """
    normed = T.layer_norm(x, params[f"{prefix}.ln_attn.g"], params[f"{prefix}.ln_attn.b"])
    q = T.linear(normed, params[f"{prefix}.attn.wq"])
    k = T.linear(normed, params[f"{prefix}.attn.wk"])
    v = T.linear(normed, params[f"{prefix}.attn.wv"])
    if cfg.enhanced_attention:
        q, k, _, _ = enhanced_qk(q, k, context, params, prefix)
    attended = _masked_attention(q, k, v, mask, cfg)
    x = T.add(x, T.linear(attended, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.wo_b"]))
    normed = T.layer_norm(x, params[f"{prefix}.ln_ffn.g"], params[f"{prefix}.ln_ffn.b"])
    return T.add(x, _ffn(normed, params, prefix))


# ---------------------------------------------------------------------------
# full decode
# ---------------------------------------------------------------------------


@dataclass
class DecodeInfo:
    """Diagnostics from a decode pass, for invariant checks."""

    layer_outputs: list[Tensor] = field(default_factory=list)
    contexts: list[Tensor] = field(default_factory=list)


def decode_logits(
    token_ids: np.ndarray,
    visual_tokens: Tensor,
    params: ParamStore,
    cfg: RunConfig,
    pad_flags: np.ndarray | None = None,
    info: DecodeInfo | None = None,
) -> Tensor:
    """Run the joint sequence through all layers; vocabulary logits for
    the text rows via the tied (transposed) word-embedding head."""
    ids = np.atleast_2d(np.asarray(token_ids))
    squeeze = np.asarray(token_ids).ndim == 1
    batch, n_text = ids.shape
    text = embed_text(ids, params, cfg)
    if visual_tokens.ndim == 2:
        visual_tokens = T.reshape(visual_tokens, (1,) + visual_tokens.shape)
    if visual_tokens.shape[0] != batch:
        raise ValueError(
            f"batch mismatch: {batch} text sequences, {visual_tokens.shape[0]} visual sets"
        )
    n_visual = visual_tokens.shape[1]
    joint = T.concat([text, visual_tokens], axis=1)
    mask = build_attention_mask(n_text, n_visual, pad_flags)
    trace = LayerTrace()
    x = joint
    for z in range(1, cfg.layers + 1):
        context = shallow_context(trace, z, joint)
        x = enhanced_layer(x, context, params, f"decoder.layer{z}", mask, cfg)
        trace.append(x)
        if info is not None:
            info.layer_outputs.append(x)
            info.contexts.append(context)
    text_rows = T.narrow(x, 1, 0, n_text)
    logits = T.linear(text_rows, T.transpose(params["decoder.word_emb"], (1, 0)))
    if squeeze:
        logits = T.reshape(logits, logits.shape[1:])
    return logits


def vanilla_stack(
    token_ids: np.ndarray,
    visual_tokens: Tensor,
    params: ParamStore,
    cfg: RunConfig,
    pad_flags: np.ndarray | None = None,
) -> Tensor:
    """Reference decode built purely from vanilla_layer, same weights."""
    ids = np.atleast_2d(np.asarray(token_ids))
    text = embed_text(ids, params, cfg)
    if visual_tokens.ndim == 2:
        visual_tokens = T.reshape(visual_tokens, (1,) + visual_tokens.shape)
    n_text = ids.shape[1]
    n_visual = visual_tokens.shape[1]
    mask = build_attention_mask(n_text, n_visual, pad_flags)
    x = T.concat([text, visual_tokens], axis=1)
    for z in range(1, cfg.layers + 1):
        x = vanilla_layer(x, params, f"decoder.layer{z}", mask, cfg)
    text_rows = T.narrow(x, 1, 0, n_text)
    return T.linear(text_rows, T.transpose(params["decoder.word_emb"], (1, 0)))
