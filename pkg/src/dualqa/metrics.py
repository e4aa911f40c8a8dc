"""Span metrics: frame-level F1 (FF1), audio overlapping score (AOS) and WER.

FF1 rasterizes both spans to frames with the same rounding as
:func:`dualqa.unitizer.span_frames` and takes the F1 of the two frame sets.
AOS is the continuous intersection-over-union of the two intervals.
"""
from __future__ import annotations

import logging
import re
import string
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from dualqa.unitizer import TimeSpan, span_frames

log = logging.getLogger(__name__)

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def ff1(pred: TimeSpan, gold: TimeSpan, frame_period: float) -> float:
    ps, pe = span_frames(pred, frame_period)
    gs, ge = span_frames(gold, frame_period)
    n_pred, n_gold = pe - ps + 1, ge - gs + 1
    if n_pred <= 0 or n_gold <= 0:
        log.warning("zero-length rasterization: pred=%s gold=%s", pred, gold)
        return 0.0
    overlap = min(pe, ge) - max(ps, gs) + 1
    if overlap <= 0:
        return 0.0
    precision = overlap / n_pred
    recall = overlap / n_gold
    return 2 * precision * recall / (precision + recall)


def aos(pred: TimeSpan, gold: TimeSpan) -> float:
    inter = min(pred.end, gold.end) - max(pred.start, gold.start)
    if inter <= 0:
        return 0.0
    union = max(pred.end, gold.end) - min(pred.start, gold.start)
    return inter / union


def normalize_words(text: str | Sequence[str]) -> list[str]:
    """Lowercase, strip punctuation and split on whitespace."""
    if not isinstance(text, str):
        text = " ".join(text)
    return _PUNCT.sub("", text.lower()).split()


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def wer(ref: str | Sequence[str], hyp: str | Sequence[str]) -> float:
    """(substitutions + deletions + insertions) / len(ref)."""
    r, h = normalize_words(ref), normalize_words(hyp)
    if not r:
        raise ValueError("reference must contain at least one word")
    return edit_distance(r, h) / len(r)


@dataclass
class EvalResult:
    per_example: list[dict]
    ff1: float
    aos: float
    micro_ff1: float
    missing: list[str] = field(default_factory=list)

    def to_records(self) -> list[dict]:
        summary = {
            "summary": True,
            "n": len(self.per_example),
            "ff1": self.ff1,
            "aos": self.aos,
            "micro_ff1": self.micro_ff1,
            "missing": self.missing,
        }
        return [*self.per_example, summary]


def evaluate(
    predictions: Mapping[str, TimeSpan],
    golds: Mapping[str, TimeSpan],
    frame_period: float,
) -> EvalResult:
    """Per-example FF1/AOS plus macro means; ids without a prediction score 0."""
    unknown = sorted(set(predictions) - set(golds))
    if unknown:
        raise KeyError(f"predictions without a gold span: {unknown}")
    rows, missing = [], []
    inter_tot = pred_tot = gold_tot = 0
    for ex_id in golds:
        gold = golds[ex_id]
        pred = predictions.get(ex_id)
        gs, ge = span_frames(gold, frame_period)
        gold_tot += ge - gs + 1
        if pred is None:
            missing.append(ex_id)
            rows.append({"id": ex_id, "ff1": 0.0, "aos": 0.0, "missing": True})
            continue
        ps, pe = span_frames(pred, frame_period)
        pred_tot += pe - ps + 1
        inter_tot += max(0, min(pe, ge) - max(ps, gs) + 1)
        rows.append({
            "id": ex_id,
            "ff1": ff1(pred, gold, frame_period),
            "aos": aos(pred, gold),
            "pred": [pred.start, pred.end],
            "gold": [gold.start, gold.end],
        })
    if missing:
        log.warning("%d examples without predictions scored 0: %s", len(missing), missing[:10])
    if rows:
        macro_ff1 = float(np.mean([r["ff1"] for r in rows]))
        macro_aos = float(np.mean([r["aos"] for r in rows]))
    else:
        macro_ff1 = macro_aos = 0.0
    micro = 2 * inter_tot / (pred_tot + gold_tot) if pred_tot + gold_tot else 0.0
    return EvalResult(rows, macro_ff1, macro_aos, micro, missing)
