"""Dataset manifests, model-input preparation and the synthetic SQA task.

A manifest is JSON Lines, one example per line::

    {"id": "ex00001",
     "question_feat": "feats/ex00001_q.feat",
     "passage_feat": "feats/ex00001_p.feat",
     "answer": {"start_sec": 1.24, "end_sec": 1.62},
     "transcript": [{"text": "w07", "start": 0.0, "end": 0.18}, ...],   # optional
     "answer_text": ["w07"]}                                             # optional

Feature paths are resolved relative to the manifest's directory.
"""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from dualqa.cascade_sim import TimedTranscript
from dualqa.featio import FeatureMatrix, read_features, synth_features, write_features
from dualqa.model import ModelConfig, ModelInput
from dualqa.quantizer import Codebook, encode
from dualqa.unitizer import TimeSpan, UnitSequence, merge_repeats, time_to_index

log = logging.getLogger(__name__)

RECORD_SCHEMA = {
    "type": "object",
    "required": ["id", "question_feat", "passage_feat", "answer"],
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "question_feat": {"type": "string"},
        "passage_feat": {"type": "string"},
        "answer": {
            "type": "object",
            "required": ["start_sec", "end_sec"],
            "properties": {
                "start_sec": {"type": "number", "minimum": 0},
                "end_sec": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "transcript": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["text", "start", "end"],
                "properties": {
                    "text": {"type": "string"},
                    "start": {"type": "number"},
                    "end": {"type": "number"},
                },
            },
        },
        "answer_text": {"type": "array", "items": {"type": "string"}},
    },
}


class ManifestError(ValueError):
    pass


@dataclass(eq=False)
class SqaExample:
    id: str
    question: UnitSequence
    passage: UnitSequence
    answer: TimeSpan
    transcript: TimedTranscript | None = None
    answer_text: list[str] | None = None

    def __post_init__(self):
        if self.answer.end > self.passage.duration + 1e-6:
            raise ValueError(f"{self.id}: answer ends after the passage ({self.passage.duration:.3f}s)")


def read_manifest(path) -> list[dict]:
    """Schema-checked manifest records with feature paths made absolute."""
    path = Path(path)
    root = path.parent
    records, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
        try:
            jsonschema.validate(rec, RECORD_SCHEMA)
        except jsonschema.ValidationError as e:
            where = ".".join(str(p) for p in e.absolute_path) or "<record>"
            raise ManifestError(f"{path}:{lineno}: field {where}: {e.message}") from None
        if rec["id"] in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
        seen.add(rec["id"])
        for key in ("question_feat", "passage_feat"):
            p = root / rec[key]
            if not p.is_file():
                raise FileNotFoundError(f"{path}:{lineno}: {key} {p} does not exist")
            rec[key] = str(p)
        records.append(rec)
    return records


def _units(cb: Codebook, m: FeatureMatrix) -> UnitSequence:
    return merge_repeats(encode(cb, m), m.frame_period)


def load_manifest(path, codebook: Codebook) -> list[SqaExample]:
    examples = []
    for rec in read_manifest(path):
        q = read_features(rec["question_feat"])
        p = read_features(rec["passage_feat"])
        transcript = TimedTranscript.from_records(rec["transcript"]) if "transcript" in rec else None
        examples.append(SqaExample(
            rec["id"],
            _units(codebook, q),
            _units(codebook, p),
            TimeSpan(rec["answer"]["start_sec"], rec["answer"]["end_sec"]),
            transcript,
            rec.get("answer_text"),
        ))
    return examples


def prepare(e: SqaExample, cfg: ModelConfig, training: bool = True) -> ModelInput:
    """Build ``[BOS] z_q [SEP] z_p [EOS]`` with the passage tail truncated to fit.

    In training mode an example whose answer starts past the cut is marked
    dropped; an answer that merely ends past it is clipped to the last kept
    unit.
    """
    q = e.question.units
    budget = cfg.max_len - 3 - q.size
    if budget < 1:
        raise ValueError(f"{e.id}: question of {q.size} units leaves no room in max_len={cfg.max_len}")
    kept = min(len(e.passage), budget)
    offset = 2 + q.size
    tokens = np.concatenate([[cfg.bos], q, [cfg.sep], e.passage.units[:kept], [cfg.eos]])
    n = tokens.size
    glob = np.zeros(n, dtype=bool)
    glob[: 1 + q.size] = True
    passage = np.zeros(n, dtype=bool)
    passage[offset:offset + kept] = True
    target, dropped = None, False
    if training and len(e.passage):
        idx = time_to_index(e.answer, e.passage)
        if idx.start_idx >= kept:
            dropped = True
        else:
            target = (offset + idx.start_idx, offset + min(idx.end_idx, kept - 1))
    return ModelInput(tokens, passage, glob, target, offset, e.id, dropped, kept < len(e.passage))


def prepare_all(examples: Sequence[SqaExample], cfg: ModelConfig, training: bool = True) -> list[ModelInput]:
    inputs = [prepare(e, cfg, training) for e in examples]
    if training:
        n_drop = sum(x.dropped for x in inputs)
        if n_drop:
            log.info("dropped %d/%d training examples whose answer was truncated away", n_drop, len(inputs))
        inputs = [x for x in inputs if not x.dropped]
    return inputs


# -- synthetic task ---------------------------------------------------------


@dataclass
class SynthConfig:
    vocab_words: int = 50
    units_per_word: int = 3
    K: int = 64
    n_examples: int = 200
    passage_words: int = 16
    question_words: int = 1
    repeat_range: tuple[int, int] = (1, 4)
    noise_sigma: float = 0.1
    dim: int = 16
    zipf_s: float = 1.0
    seed: int = 0
    frame_period_us: int = 20_000

    def __post_init__(self):
        self.repeat_range = tuple(self.repeat_range)
        lo, hi = self.repeat_range
        if not 1 <= lo <= hi:
            raise ValueError("repeat_range must satisfy 1 <= lo <= hi")
        if self.K < 4 or self.units_per_word < 2:
            raise ValueError("need K >= 4 and units_per_word >= 2")
        if 2 * self.vocab_words < self.K:
            raise ValueError("vocab_words must be at least K/2 so every unit occurs in the lexicon")
        if self.question_words < 1 or self.passage_words < self.question_words + 1:
            raise ValueError("passage must be longer than the question")
        if self.dim < 1 or self.noise_sigma < 0:
            raise ValueError("dim must be >= 1 and noise_sigma >= 0")


@dataclass
class SymbolicExample:
    """Ground truth for one synthetic example before features are drawn."""

    id: str
    passage_words: list[int]
    question_words: list[int]
    answer_pos: int
    passage_frames: np.ndarray
    question_frames: np.ndarray
    word_bounds: np.ndarray  # (n_words, 2) frame [start, end)


class SyntheticLexicon:
    """Words as fixed unit strings over K units, with Zipfian word frequencies.

    Units are split into a "first" half and a "last" half; every word starts
    in the first half and ends in the second, so adjacent words never share a
    boundary unit and merging repeats never fuses two words.
    """

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 1])
        half = cfg.K // 2
        first_pool, last_pool = np.arange(half), np.arange(half, cfg.K)
        words: list[tuple[int, ...]] = []
        seen = set()
        firsts = _covering_draw(rng, first_pool, cfg.vocab_words)
        lasts = _covering_draw(rng, last_pool, cfg.vocab_words)
        for i in range(cfg.vocab_words):
            first, last = int(firsts[i]), int(lasts[i])
            while True:
                mid, prev = [], first
                for _ in range(cfg.units_per_word - 2):
                    prev = _draw_except(rng, cfg.K, {prev})
                    mid.append(prev)
                if mid and mid[-1] == last:
                    continue
                w = (first, *mid, last)
                if w not in seen:
                    break
                if not mid:
                    last = int(rng.choice(last_pool))
            seen.add(w)
            words.append(w)
        self.words = words
        self.names = [f"w{i:03d}" for i in range(cfg.vocab_words)]
        rank = rng.permutation(cfg.vocab_words)
        p = 1.0 / (np.arange(1, cfg.vocab_words + 1) ** cfg.zipf_s)
        self.probs = np.empty(cfg.vocab_words)
        self.probs[rank] = p / p.sum()
        self.anchors = _separated_anchors(rng, cfg.K, cfg.dim)

    def sample(self, rng: np.random.Generator, ex_id: str) -> SymbolicExample:
        cfg = self.cfg
        qn = cfg.question_words
        while True:
            pw = list(rng.choice(cfg.vocab_words, size=cfg.passage_words, p=self.probs))
            phrases = [tuple(pw[i:i + qn]) for i in range(len(pw) - qn + 1)]
            unique = [i for i, ph in enumerate(phrases) if phrases.count(ph) == 1]
            if unique:
                break
        pos = int(unique[rng.integers(len(unique))])
        qw = pw[pos:pos + qn]
        p_frames, bounds = self._frames(rng, pw)
        q_frames, _ = self._frames(rng, qw)
        return SymbolicExample(ex_id, [int(w) for w in pw], [int(w) for w in qw], pos, p_frames, q_frames, bounds)

    def _frames(self, rng, word_ids):
        lo, hi = self.cfg.repeat_range
        frames, bounds, t = [], [], 0
        for w in word_ids:
            start = t
            for u in self.words[w]:
                r = int(rng.integers(lo, hi + 1))
                frames.extend([u] * r)
                t += r
            bounds.append((start, t))
        return np.asarray(frames, dtype=np.int64), np.asarray(bounds, dtype=np.int64)

    def unit_string(self, word_ids) -> list[int]:
        return [u for w in word_ids for u in self.words[w]]


def _covering_draw(rng, pool, n):
    """n draws from pool in which every pool element appears at least once (n >= len(pool))."""
    reps = -(-n // len(pool))
    out = np.concatenate([rng.permutation(pool) for _ in range(reps)])[:n]
    return rng.permutation(out)


def _draw_except(rng, K, exclude):
    while True:
        u = int(rng.integers(K))
        if u not in exclude:
            return u


def _separated_anchors(rng, K, dim, min_dist=1.0):
    while True:
        anchors = rng.normal(size=(K, dim))
        d = np.linalg.norm(anchors[:, None] - anchors[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() >= min_dist:
            return anchors


@dataclass
class SyntheticTask:
    root: Path
    manifest: Path
    lexicon: SyntheticLexicon
    truth: list[SymbolicExample] = field(repr=False)


def gen_synthetic_task(cfg: SynthConfig, out_dir, split: str = "train") -> SyntheticTask:
    """Write FEAT files, ``manifest.jsonl``, ``truth.jsonl`` and ``meta.json`` under ``out_dir``.

    The lexicon depends only on ``cfg.seed``; ``split`` reseeds the example
    stream, so train and dev sets share words but not examples.
    """
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    lex = SyntheticLexicon(cfg)
    rng = np.random.default_rng([cfg.seed, 2, zlib.crc32(split.encode())])
    period = cfg.frame_period_us / 1e6
    truth, lines, truth_lines = [], [], []
    for i in range(cfg.n_examples):
        ex_id = f"{split}{i:05d}"
        ex = lex.sample(rng, ex_id)
        noise_seeds = rng.integers(2**31, size=2)
        qf = f"feats/{ex_id}_q.feat"
        pf = f"feats/{ex_id}_p.feat"
        write_features(synth_features(ex.question_frames, lex.anchors, cfg.noise_sigma, int(noise_seeds[0]), cfg.frame_period_us), out / qf)
        write_features(synth_features(ex.passage_frames, lex.anchors, cfg.noise_sigma, int(noise_seeds[1]), cfg.frame_period_us), out / pf)
        a0, a1 = ex.word_bounds[ex.answer_pos][0], ex.word_bounds[ex.answer_pos + cfg.question_words - 1][1]
        transcript = [
            {"text": lex.names[w], "start": round(int(b[0]) * period, 6), "end": round(int(b[1]) * period, 6)}
            for w, b in zip(ex.passage_words, ex.word_bounds)
        ]
        lines.append(json.dumps({
            "id": ex_id,
            "question_feat": qf,
            "passage_feat": pf,
            "answer": {"start_sec": round(int(a0) * period, 6), "end_sec": round(int(a1) * period, 6)},
            "transcript": transcript,
            "answer_text": [lex.names[w] for w in ex.question_words],
        }, sort_keys=True))
        truth_lines.append(json.dumps({
            "id": ex_id,
            "passage_words": ex.passage_words,
            "question_words": ex.question_words,
            "answer_pos": ex.answer_pos,
            "passage_frames": ex.passage_frames.tolist(),
            "question_frames": ex.question_frames.tolist(),
        }))
        truth.append(ex)
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    (out / "truth.jsonl").write_text("\n".join(truth_lines) + ("\n" if truth_lines else ""))
    meta = {"generator": "dualqa.synthetic", "split": split, "config": asdict(cfg), "lexicon": [list(w) for w in lex.words]}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return SyntheticTask(out, manifest, lex, truth)


def symbolic_corpus(cfg: SynthConfig, n: int, seed: int | None = None) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Dense (question, passage) unit strings straight from the lexicon, no features.

    Returns the pairs and a frequency ranking of unit ids (most frequent first),
    which is what a donor model is pretrained on.
    """
    lex = SyntheticLexicon(cfg)
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 3])
    pairs = []
    counts = np.zeros(cfg.K, dtype=np.int64)
    for i in range(n):
        ex = lex.sample(rng, f"c{i}")
        q = np.asarray(lex.unit_string(ex.question_words), dtype=np.int64)
        p = np.asarray(lex.unit_string(ex.passage_words), dtype=np.int64)
        counts += np.bincount(p, minlength=cfg.K)
        pairs.append((q, p))
    ranking = np.argsort(-counts, kind="stable")
    return pairs, ranking


def copy_corpus(
    K: int,
    n: int,
    passage_len: tuple[int, int] = (36, 60),
    question_len: tuple[int, int] = (2, 8),
    zipf_s: float = 1.0,
    seed: int = 0,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Lexicon-free pretraining pairs: the question is an exact slice of a random passage.

    Units follow a Zipfian distribution with no immediate repeats (as after
    merging). A masked question unit can only be recovered by locating the
    slice in the passage, so masked-unit pretraining on these pairs teaches
    question/passage alignment rather than a particular vocabulary.
    """
    if K < 2:
        raise ValueError("need K >= 2")
    rng = np.random.default_rng([seed, 4])
    probs = 1.0 / np.arange(1, K + 1) ** zipf_s
    probs = probs[rng.permutation(K)]
    probs /= probs.sum()
    pairs, counts = [], np.zeros(K, dtype=np.int64)
    for _ in range(n):
        m = int(rng.integers(passage_len[0], passage_len[1] + 1))
        draw = rng.choice(K, size=2 * m, p=probs)
        keep = np.r_[True, draw[1:] != draw[:-1]]
        p = draw[keep][:m]
        L = int(rng.integers(question_len[0], min(question_len[1], p.size - 1) + 1))
        a = int(rng.integers(p.size - L + 1))
        pairs.append((p[a:a + L].copy(), p))
        counts += np.bincount(p, minlength=K)
    return pairs, np.argsort(-counts, kind="stable")
