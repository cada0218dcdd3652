"""Corpus-level caption metrics: BLEU-4, METEOR, ROUGE-L, CIDEr.

Implemented from the defining formulas rather than wrapping an external
kit, so the scores are exactly reproducible:

* BLEU-4: corpus-pooled clipped n-gram precisions with uniform quarter
  weights, brevity penalty from pooled candidate length against the
  per-candidate closest reference length, zero if any precision is zero.
* METEOR: exact-match unigram alignment (greedy in candidate order,
  earliest unmatched reference occurrence), harmonic mean with alpha=3,
  chunk penalty 0.5 * (chunks/matches)^3, best single reference per
  sentence, averaged over the corpus. No stemming or synonymy.
* ROUGE-L: longest common subsequence precision/recall combined with
  alpha=1.2, max over references, averaged over the corpus.
* CIDEr: per-n TF-IDF vectors (TF normalised by the sentence's n-gram
  count; IDF log(videos / clamped document frequency), where an n-gram
  absent from every reference set counts as frequency one), mean cosine
  against each reference, uniform quarter weights over n=1..4. No tenfold
  scaling and no length penalty.

All scores live in [0, 1]; corpus averages use exact summation so video
order cannot change any result.
"""

from __future__ import annotations

import json
import math
import string
from collections import Counter
from dataclasses import dataclass
from math import fsum
from pathlib import Path
from typing import Sequence

Tokens = list[str]
CorpusPair = tuple[Tokens, list[Tokens]]  # candidate, references

NGRAM_MAX = 4
UNIFORM_WEIGHTS = (0.25, 0.25, 0.25, 0.25)

METEOR_ALPHA = 3.0
METEOR_GAMMA = 0.5
METEOR_THETA = 3.0
ROUGE_ALPHA = 1.2

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


class EvalInputError(ValueError):
    """Predictions/references failed validation."""


def normalize_tokens(text: str) -> Tokens:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def ngrams(tokens: Tokens, n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


# ---------------------------------------------------------------------------
# BLEU-4
# ---------------------------------------------------------------------------


def bleu4(corpus: Sequence[CorpusPair], weights: Sequence[float] = UNIFORM_WEIGHTS) -> float:
    if not corpus:
        raise ValueError("empty corpus")
    matched = [0] * NGRAM_MAX
    total = [0] * NGRAM_MAX
    cand_len = 0
    ref_len = 0
    for cand, refs in corpus:
        cand_len += len(cand)
        if refs:
            ref_len += min((len(r) for r in refs), key=lambda L: (abs(L - len(cand)), L))
        for n in range(1, NGRAM_MAX + 1):
            counts = Counter(ngrams(cand, n))
            if not counts:
                continue
            ceiling: Counter = Counter()
            for ref in refs:
                for gram, k in Counter(ngrams(ref, n)).items():
                    ceiling[gram] = max(ceiling[gram], k)
            matched[n - 1] += sum(min(k, ceiling[gram]) for gram, k in counts.items())
            total[n - 1] += sum(counts.values())
    precisions = [m / t if t else 0.0 for m, t in zip(matched, total)]
    if any(p == 0.0 for p in precisions):
        return 0.0
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(fsum(w * math.log(p) for w, p in zip(weights, precisions)))


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------


def _align(cand: Tokens, ref: Tokens) -> list[tuple[int, int]]:
    """Greedy exact alignment: walk the candidate left to right, pairing
    each token with the earliest unmatched identical reference token."""
    used = [False] * len(ref)
    pairs = []
    for ci, token in enumerate(cand):
        for ri, ref_token in enumerate(ref):
            if not used[ri] and ref_token == token:
                used[ri] = True
                pairs.append((ci, ri))
                break
    return pairs


def _chunks(pairs: list[tuple[int, int]]) -> int:
    """Maximal runs of matches contiguous in both sentences."""
    count = 0
    prev = None
    for ci, ri in pairs:
        if prev is None or ci != prev[0] + 1 or ri != prev[1] + 1:
            count += 1
        prev = (ci, ri)
    return count


def _meteor_sentence(cand: Tokens, refs: list[Tokens]) -> float:
    best = 0.0
    for ref in refs:
        pairs = _align(cand, ref)
        m = len(pairs)
        if m == 0 or not cand or not ref:
            continue
        precision = m / len(cand)
        recall = m / len(ref)
        a2 = METEOR_ALPHA * METEOR_ALPHA
        f_mean = (a2 + 1.0) * precision * recall / (recall + a2 * precision)
        penalty = METEOR_GAMMA * (_chunks(pairs) / m) ** METEOR_THETA
        best = max(best, (1.0 - penalty) * f_mean)
    return best


def meteor(corpus: Sequence[CorpusPair]) -> float:
    if not corpus:
        raise ValueError("empty corpus")
    return fsum(_meteor_sentence(cand, refs) for cand, refs in corpus) / len(corpus)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def _lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(corpus: Sequence[CorpusPair]) -> float:
    if not corpus:
        raise ValueError("empty corpus")
    scores = []
    a2 = ROUGE_ALPHA * ROUGE_ALPHA
    for cand, refs in corpus:
        best = 0.0
        for ref in refs:
            lcs = _lcs_length(cand, ref)
            if lcs == 0:
                continue
            precision = lcs / len(cand)
            recall = lcs / len(ref)
            best = max(best, (a2 + 1.0) * precision * recall / (recall + a2 * precision))
        scores.append(best)
    return fsum(scores) / len(scores)


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------


def _tfidf_vector(tokens: Tokens, n: int, idf: dict, log_videos: float) -> dict:
    counts = Counter(ngrams(tokens, n))
    total = sum(counts.values())
    if total == 0:
        return {}
    # n-grams absent from every reference set carry the unseen-frequency
    # floor of one document, i.e. idf = log(videos).
    return {gram: (k / total) * idf.get(gram, log_videos) for gram, k in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    if not a or not b:
        return 0.0
    dot = fsum(v * b[g] for g, v in a.items() if g in b)
    na = math.sqrt(fsum(v * v for v in a.values()))
    nb = math.sqrt(fsum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def cider(corpus: Sequence[CorpusPair], weights: Sequence[float] = UNIFORM_WEIGHTS) -> float:
    if not corpus:
        raise ValueError("empty corpus")
    n_videos = len(corpus)
    log_videos = math.log(n_videos)
    per_video = []
    for n in range(1, NGRAM_MAX + 1):
        document_freq: Counter = Counter()
        for _, refs in corpus:
            present = set()
            for ref in refs:
                present.update(ngrams(ref, n))
            document_freq.update(present)
        idf = {gram: math.log(n_videos / df) for gram, df in document_freq.items()}
        scores_n = []
        for cand, refs in corpus:
            cand_vec = _tfidf_vector(cand, n, idf, log_videos)
            if refs:
                sims = fsum(
                    _cosine(cand_vec, _tfidf_vector(ref, n, idf, log_videos)) for ref in refs
                )
                scores_n.append(sims / len(refs))
            else:
                scores_n.append(0.0)
        per_video.append(scores_n)
    return fsum(
        fsum(weights[n] * per_video[n][i] for n in range(NGRAM_MAX)) for i in range(n_videos)
    ) / n_videos


# ---------------------------------------------------------------------------
# corpus assembly and reporting
# ---------------------------------------------------------------------------


@dataclass
class EvalCorpus:
    """Aligned candidate/reference token lists, one per video."""

    video_ids: list[str]
    pairs: list[CorpusPair]

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class MetricReport:
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float
    num_videos: int
    num_references: int

    def scores(self) -> dict[str, float]:
        return {
            "bleu4": self.bleu4,
            "meteor": self.meteor,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
        }

    def to_dict(self) -> dict:
        return {
            **self.scores(),
            "scaled": {name: round(100.0 * value, 4) for name, value in self.scores().items()},
            "num_videos": self.num_videos,
            "num_references": self.num_references,
        }

    def table(self) -> str:
        """Human table with the conventional x100 presentation."""
        header = f"{'metric':<10} {'score':>8}"
        rows = [header, "-" * len(header)]
        labels = {"bleu4": "BLEU-4", "meteor": "METEOR", "rouge_l": "ROUGE-L", "cider": "CIDEr"}
        for name, value in self.scores().items():
            rows.append(f"{labels[name]:<10} {format_score(value):>8}")
        return "\n".join(rows)


def format_score(score: float) -> str:
    """Conventional percentage presentation: 0.451 renders as 45.1."""
    return f"{100.0 * score:.1f}"


def score_corpus(corpus: EvalCorpus) -> MetricReport:
    return MetricReport(
        bleu4=bleu4(corpus.pairs),
        meteor=meteor(corpus.pairs),
        rouge_l=rouge_l(corpus.pairs),
        cider=cider(corpus.pairs),
        num_videos=len(corpus.pairs),
        num_references=sum(len(refs) for _, refs in corpus.pairs),
    )


def _read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise EvalInputError(f"{path}:{lineno}: malformed JSON: {exc}") from None
    return records


def load_eval_corpus(predictions_path: str | Path, references_path: str | Path) -> EvalCorpus:
    """Join prediction lines {video_id, caption} against reference lines
    {video_id, captions: [...]}; every prediction id must have references."""
    predictions = _read_jsonl(predictions_path)
    if not predictions:
        raise EvalInputError(f"{predictions_path}: no predictions")
    references: dict[str, list[str]] = {}
    for record in _read_jsonl(references_path):
        if "video_id" not in record or "captions" not in record:
            raise EvalInputError(f"{references_path}: lines need video_id and captions")
        references[record["video_id"]] = list(record["captions"])
    video_ids: list[str] = []
    pairs: list[CorpusPair] = []
    seen: set[str] = set()
    for record in predictions:
        if "video_id" not in record or "caption" not in record:
            raise EvalInputError(f"{predictions_path}: lines need video_id and caption")
        vid = record["video_id"]
        if vid in seen:
            raise EvalInputError(f"duplicate prediction for video_id {vid!r}")
        seen.add(vid)
        if vid not in references:
            raise EvalInputError(f"no references for video_id {vid!r}")
        refs = [normalize_tokens(c) for c in references[vid]]
        if not refs:
            raise EvalInputError(f"empty reference list for video_id {vid!r}")
        video_ids.append(vid)
        pairs.append((normalize_tokens(record["caption"]), refs))
    return EvalCorpus(video_ids=video_ids, pairs=pairs)


def evaluate(predictions_path: str | Path, references_path: str | Path) -> MetricReport:
    """Tokenise both files and run all four metrics."""
    return score_corpus(load_eval_corpus(predictions_path, references_path))
