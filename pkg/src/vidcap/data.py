"""Synthetic video-caption corpus and the on-disk clip/manifest formats.

Clips are single colored shapes translating linearly across a black
canvas, each paired with one to three templated captions. Everything is
reproducible from (seed, index) so corpora can be regenerated bit for bit.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLIP_MAGIC = b"EVCF"
_HEADER = struct.Struct("<4I")  # T, H, W, channels, little-endian u32
_MAX_DIM = 1 << 16

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
MOTIONS = {
    "left": (0, -2),
    "right": (0, 2),
    "up": (-2, 0),
    "down": (2, 0),
}
CAPTION_TEMPLATES = (
    "a {color} {shape} moves {direction}",
    "the {color} {shape} moves {direction}",
    "a {color} {shape} is moving {direction}",
)
CAPTION_PATTERN = re.compile(
    r"^(a|the) (red|green|blue|yellow) (square|circle|triangle) "
    r"(moves|is moving) (left|right|up|down)$"
)

SPLITS = ("train", "val", "test")


class GenerationError(ValueError):
    """The canvas cannot hold the requested shape and motion."""


class FormatError(ValueError):
    """A clip container failed validation."""


class ManifestError(ValueError):
    """A dataset manifest failed validation."""


@dataclass
class VideoClip:
    """Raw 8-bit RGB frames, the only model input."""

    frames: np.ndarray  # [T, H, W, 3] uint8
    clip_id: str

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValueError(f"frames must be [T, H, W, 3], got {f.shape}")
        if f.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {f.dtype}")
        t, h, w, _ = f.shape
        if t < 4 or t % 2:
            raise ValueError(f"frame count must be even and >= 4, got {t}")
        if h % 32 or w % 32:
            raise ValueError(f"frame size must be divisible by 32, got {h}x{w}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape


@dataclass
class SynthSpec:
    """Parameters of the synthetic corpus."""

    frames: int = 8
    height: int = 64
    width: int = 64
    shape_size: int = 15  # odd, so centroids land on integer pixels
    seed: int = 0


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean stamp for a shape inside a size x size box.

    The stamp is identical in every frame, so translating its anchor by an
    integer offset translates the pixel centroid by exactly that offset.
    """
    half = size // 2
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (yy - half) ** 2 + (xx - half) ** 2 <= half**2
    if shape == "triangle":
        # Isoceles: row y spans the middle 2*y+1 columns.
        return np.abs(xx - half) <= yy / 2
    raise GenerationError(f"unknown shape {shape!r}")


def generate_clip(spec: SynthSpec, index: int) -> tuple[VideoClip, list[str]]:
    """Render one moving shape and its caption paraphrases.

    Attributes and start position derive from (seed, index); two calls
    with the same arguments produce bitwise-identical output.
    """
    rng = np.random.default_rng([spec.seed, index])
    shape = SHAPES[rng.integers(len(SHAPES))]
    color_name = list(COLORS)[rng.integers(len(COLORS))]
    motion_name = list(MOTIONS)[rng.integers(len(MOTIONS))]
    dy, dx = MOTIONS[motion_name]

    size = spec.shape_size
    half = size // 2
    travel_y = dy * (spec.frames - 1)
    travel_x = dx * (spec.frames - 1)
    lo_y = half + max(0, -travel_y)
    hi_y = spec.height - 1 - half - max(0, travel_y)
    lo_x = half + max(0, -travel_x)
    hi_x = spec.width - 1 - half - max(0, travel_x)
    if lo_y > hi_y or lo_x > hi_x:
        raise GenerationError(
            f"canvas {spec.height}x{spec.width} too small for shape size {size} "
            f"moving {motion_name} over {spec.frames} frames"
        )
    cy = int(rng.integers(lo_y, hi_y + 1))
    cx = int(rng.integers(lo_x, hi_x + 1))

    stamp = _shape_mask(shape, size)
    rgb = np.array(COLORS[color_name], dtype=np.uint8)
    frames = np.zeros((spec.frames, spec.height, spec.width, 3), dtype=np.uint8)
    for t in range(spec.frames):
        y, x = cy + t * dy, cx + t * dx
        frames[t, y - half : y + half + 1, x - half : x + half + 1][stamp] = rgb

    n_captions = int(rng.integers(1, len(CAPTION_TEMPLATES) + 1))
    templates = rng.permutation(len(CAPTION_TEMPLATES))[:n_captions]
    captions = [
        CAPTION_TEMPLATES[k].format(color=color_name, shape=shape, direction=motion_name)
        for k in sorted(templates)
    ]
    return VideoClip(frames, clip_id=f"clip{index:04d}"), captions


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Token/id bijection with fixed reserved ids."""

    PAD, CLS, SEP, MASK, EOS, UNK = 0, 1, 2, 3, 4, 5
    RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[EOS]", "[UNK]")

    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(self.RESERVED)]) != self.RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def token_to_id(self, token: str) -> int:
        return self._ids.get(token, self.UNK)

    def id_to_token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, words: list[str]) -> list[int]:
        return [self.token_to_id(w) for w in words]

    def decode(self, ids: list[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    def tokens(self) -> list[str]:
        return list(self._tokens)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(captions: list[str]) -> Vocabulary:
    """Frequency-descending (ties lexicographic) vocabulary over whitespace tokens."""
    counts: dict[str, int] = {}
    for caption in captions:
        for word in tokenize(caption):
            counts[word] = counts.get(word, 0) + 1
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(list(Vocabulary.RESERVED) + ordered)


# ---------------------------------------------------------------------------
# clip container: magic "EVCF", <u32 T H W 3>, then T*H*W*3 raw bytes
# ---------------------------------------------------------------------------


def write_clip(path: str | Path, clip: VideoClip) -> None:
    t, h, w, c = clip.shape
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(_HEADER.pack(t, h, w, c))
        fh.write(clip.frames.tobytes())


def read_clip(path: str | Path) -> VideoClip:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CLIP_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0, expected {CLIP_MAGIC!r}")
    if len(blob) < 4 + _HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(blob)}")
    t, h, w, c = _HEADER.unpack_from(blob, 4)
    if c != 3 or not all(0 < dim <= _MAX_DIM for dim in (t, h, w)):
        raise FormatError(f"{path}: implausible dimensions {t}x{h}x{w}x{c} at offset 4")
    payload = blob[4 + _HEADER.size :]
    expected = t * h * w * c
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes at offset {4 + _HEADER.size}, "
            f"expected {expected}"
        )
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w, c).copy()
    return VideoClip(frames, clip_id=path.stem)


# ---------------------------------------------------------------------------
# manifest: JSON lines of {video_id, clip_path, captions, split}
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    video_id: str
    clip_path: str
    captions: list[str]
    split: str


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(
                json.dumps(
                    {
                        "video_id": e.video_id,
                        "clip_path": e.clip_path,
                        "captions": e.captions,
                        "split": e.split,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON: {exc}") from None
            missing = {"video_id", "clip_path", "captions", "split"} - set(raw)
            if missing:
                raise ManifestError(
                    f"{path}:{lineno}: missing fields {sorted(missing)}"
                )
            if raw["split"] not in SPLITS:
                raise ManifestError(
                    f"{path}:{lineno}: unknown split {raw['split']!r}, expected one of {SPLITS}"
                )
            if raw["video_id"] in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate video_id {raw['video_id']!r}")
            seen.add(raw["video_id"])
            clip_path = path.parent / raw["clip_path"]
            if not clip_path.exists():
                raise ManifestError(f"{path}:{lineno}: clip file not found: {clip_path}")
            entries.append(
                ManifestEntry(
                    video_id=raw["video_id"],
                    clip_path=raw["clip_path"],
                    captions=list(raw["captions"]),
                    split=raw["split"],
                )
            )
    return entries


def generate_corpus(
    out_dir: str | Path,
    n_clips: int,
    spec: SynthSpec,
    split_fractions: tuple[float, float] = (0.8, 0.1),
) -> list[ManifestEntry]:
    """Write clips plus a manifest under ``out_dir`` and return the entries."""
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)
    n_train = round(split_fractions[0] * n_clips)
    n_val = round(split_fractions[1] * n_clips)
    entries: list[ManifestEntry] = []
    for index in range(n_clips):
        clip, captions = generate_clip(spec, index)
        rel = f"clips/{clip.clip_id}.evcf"
        write_clip(out_dir / rel, clip)
        split = "train" if index < n_train else ("val" if index < n_train + n_val else "test")
        entries.append(
            ManifestEntry(video_id=clip.clip_id, clip_path=rel, captions=captions, split=split)
        )
    write_manifest(out_dir / "manifest.jsonl", entries)
    return entries
