"""Simulated ASR + text-QA cascade and WER-bucket analysis.

The "ASR" is a noise channel over a force-aligned transcript whose error rate
can be dialed directly. The "QA" stage is an oracle that knows the answer
words and looks for the transcript window closest to them in word edit
distance, so every cascade failure is caused by recognition errors alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from dualqa.unitizer import TimeSpan

DEFAULT_EDGES = tuple(round(0.1 * i, 1) for i in range(8))


@dataclass(frozen=True)
class TimedWord:
    text: str
    start: float
    end: float


@dataclass(frozen=True)
class TimedTranscript:
    words: tuple[TimedWord, ...]

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        prev_end = 0.0
        for w in self.words:
            if not w.start < w.end:
                raise ValueError(f"word {w.text!r} has start >= end")
            if w.start < prev_end - 1e-9:
                raise ValueError(f"word {w.text!r} overlaps its predecessor")
            prev_end = w.end

    @property
    def texts(self) -> list[str]:
        return [w.text for w in self.words]

    def to_records(self) -> list[dict]:
        return [{"text": w.text, "start": w.start, "end": w.end} for w in self.words]

    @classmethod
    def from_records(cls, recs: Iterable[dict]) -> TimedTranscript:
        return cls(tuple(TimedWord(r["text"], float(r["start"]), float(r["end"])) for r in recs))


@dataclass
class NoiseSpec:
    target_wer: float
    vocab: Sequence[str]
    p_sub: float = 0.6
    p_del: float = 0.2
    p_ins: float = 0.2
    seed: int = 0

    def __post_init__(self):
        probs = (self.target_wer, self.p_sub, self.p_del, self.p_ins)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(self.p_sub + self.p_del + self.p_ins - 1.0) > 1e-9:
            raise ValueError("p_sub + p_del + p_ins must sum to 1")
        if (self.p_sub > 0 or self.p_ins > 0) and len(self.vocab) < 2:
            raise ValueError("substitutions and insertions need a vocabulary of at least 2 words")


def corrupt(t: TimedTranscript, spec: NoiseSpec) -> TimedTranscript:
    """Apply at most one error event per word with probability ``target_wer``.

    Each event costs one edit, so the expected WER equals the target. A
    substitute keeps the original timing; an inserted word takes the second
    half of the preceding word's interval.
    """
    rng = np.random.default_rng(spec.seed)
    vocab = list(spec.vocab)
    mix = np.array([spec.p_sub, spec.p_del, spec.p_ins])
    out: list[TimedWord] = []
    for w in t.words:
        if rng.random() >= spec.target_wer:
            out.append(w)
            continue
        kind = rng.choice(3, p=mix)
        if kind == 0:
            out.append(TimedWord(_draw(rng, vocab, exclude=w.text), w.start, w.end))
        elif kind == 2:
            mid = 0.5 * (w.start + w.end)
            out.append(TimedWord(w.text, w.start, mid))
            out.append(TimedWord(_draw(rng, vocab, exclude=w.text), mid, w.end))
    return TimedTranscript(tuple(out))


def _draw(rng, vocab, exclude):
    while True:
        word = vocab[int(rng.integers(len(vocab)))]
        if word != exclude:
            return word


def oracle_qa(passage: TimedTranscript, answer_phrase: Sequence[str]) -> TimeSpan:
    """Word window closest to ``answer_phrase`` in edit distance.

    Ties go to the earliest window, then the shortest.
    """
    words = passage.texts
    if not words:
        raise ValueError("empty passage transcript")
    phrase = list(answer_phrase)
    m = len(phrase)
    best = None
    for i in range(len(words)):
        # row[k] = edit distance between words[i:j] and phrase[:k], grown one word at a time
        row = list(range(m + 1))
        for j in range(i + 1, len(words) + 1):
            w = words[j - 1]
            new = [row[0] + 1]
            for k in range(1, m + 1):
                new.append(min(row[k] + 1, new[k - 1] + 1, row[k - 1] + (w != phrase[k - 1])))
            row = new
            key = (row[m], i, j - i)
            if best is None or key < best:
                best = key
    _, i, n = best
    return TimeSpan(passage.words[i].start, passage.words[i + n - 1].end)


@dataclass
class Bucket:
    lo: float
    hi: float
    n: int
    ff1_cascade: float
    ff1_dual: float
    ids: list = field(default_factory=list, repr=False)

    def to_record(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "n": self.n,
                "ff1_cascade": self.ff1_cascade, "ff1_dual": self.ff1_dual}


def bucket_analysis(examples: Sequence[dict], bucket_edges: Sequence[float] = DEFAULT_EDGES) -> list[Bucket]:
    """Mean cascade and DUAL FF1 per half-open WER bucket; empty buckets are omitted."""
    edges = np.asarray(bucket_edges, dtype=np.float64)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError(f"bucket edges must be strictly increasing, got {list(bucket_edges)}")
    groups: dict[int, list[dict]] = {}
    for ex in examples:
        w = ex["realized_wer"]
        if not edges[0] <= w < edges[-1]:
            raise ValueError(f"WER {w} outside bucket range [{edges[0]}, {edges[-1]})")
        b = int(np.searchsorted(edges, w, side="right")) - 1
        groups.setdefault(b, []).append(ex)
    out = []
    for b in sorted(groups):
        g = groups[b]
        out.append(Bucket(
            float(edges[b]), float(edges[b + 1]), len(g),
            float(np.mean([e["ff1_cascade"] for e in g])),
            float(np.mean([e["ff1_dual"] for e in g])),
            [e.get("id") for e in g],
        ))
    return out
