import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualqa.cascade_sim import (
    NoiseSpec,
    TimedTranscript,
    TimedWord,
    bucket_analysis,
    corrupt,
    oracle_qa,
)
from dualqa.metrics import wer
from dualqa.unitizer import TimeSpan

VOCAB = [f"w{i:02d}" for i in range(40)]


def transcript(words, dur=0.3):
    return TimedTranscript(tuple(TimedWord(w, i * dur, (i + 1) * dur) for i, w in enumerate(words)))


def random_transcript(rng, n):
    return transcript([VOCAB[i] for i in rng.integers(len(VOCAB), size=n)])


def test_zero_noise_is_identity():
    t = random_transcript(np.random.default_rng(0), 30)
    assert corrupt(t, NoiseSpec(0.0, VOCAB, seed=4)) == t


def test_full_substitution():
    t = random_transcript(np.random.default_rng(1), 50)
    out = corrupt(t, NoiseSpec(1.0, VOCAB, p_sub=1.0, p_del=0.0, p_ins=0.0))
    assert len(out.words) == 50
    assert all(a.text != b.text for a, b in zip(t.words, out.words))
    assert [(w.start, w.end) for w in out.words] == [(w.start, w.end) for w in t.words]


def test_realized_wer_tracks_target():
    t = random_transcript(np.random.default_rng(2), 2000)
    out = corrupt(t, NoiseSpec(0.3, VOCAB, seed=7))
    assert abs(wer(t.texts, out.texts) - 0.3) <= 0.05


def test_corrupt_is_seeded():
    t = random_transcript(np.random.default_rng(3), 100)
    spec = NoiseSpec(0.4, VOCAB, seed=11)
    assert corrupt(t, spec) == corrupt(t, spec)
    assert corrupt(t, spec) != corrupt(t, NoiseSpec(0.4, VOCAB, seed=12))


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 10_000), st.integers(1, 40))
def test_corrupted_transcripts_stay_ordered(rate, seed, n):
    t = random_transcript(np.random.default_rng(seed), n)
    out = corrupt(t, NoiseSpec(rate, VOCAB, seed=seed))
    for a, b in zip(out.words, out.words[1:]):
        assert a.end <= b.start + 1e-12
    # every event costs at most one edit
    assert wer(t.texts, out.texts) <= sum(1 for _ in t.words) / len(t.words)


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(1.5, VOCAB)
    with pytest.raises(ValueError):
        NoiseSpec(0.2, VOCAB, p_sub=0.5, p_del=0.1, p_ins=0.1)
    with pytest.raises(ValueError):
        NoiseSpec(0.2, ["only"])
    NoiseSpec(0.2, ["only"], p_sub=0.0, p_del=1.0, p_ins=0.0)


def test_transcript_validation_and_records():
    with pytest.raises(ValueError):
        TimedTranscript((TimedWord("a", 1.0, 1.0),))
    with pytest.raises(ValueError):
        TimedTranscript((TimedWord("a", 0.0, 1.0), TimedWord("b", 0.5, 1.5)))
    t = random_transcript(np.random.default_rng(4), 5)
    assert TimedTranscript.from_records(t.to_records()) == t


def test_oracle_exact_match():
    t = transcript(["a", "b", "c", "d", "e"])
    assert oracle_qa(t, ["c", "d"]) == TimeSpan(0.6, 1.2)


def test_oracle_tie_breaks_earliest_then_shortest():
    t = transcript(["x", "a", "x", "a"])
    assert oracle_qa(t, ["a"]) == TimeSpan(0.3, 0.6)
    t = transcript(["q", "r", "s"])
    # nothing matches; the best window has one substitution, earliest and single-word
    assert oracle_qa(t, ["z"]) == TimeSpan(0.0, 0.3)


def test_oracle_recovers_from_one_substitution():
    t = transcript(["a", "b", "c", "d", "e", "f"])
    assert oracle_qa(t, ["c", "X", "e"]) == TimeSpan(0.6, 1.5)


def test_oracle_matches_brute_force():
    from dualqa.metrics import edit_distance

    rng = np.random.default_rng(5)
    small = VOCAB[:4]
    for _ in range(200):
        words = [small[i] for i in rng.integers(4, size=int(rng.integers(1, 9)))]
        phrase = [small[i] for i in rng.integers(4, size=int(rng.integers(1, 4)))]
        t = transcript(words)
        cands = [
            (edit_distance(words[i:j], phrase), i, j - i)
            for i in range(len(words)) for j in range(i + 1, len(words) + 1)
        ]
        _, i, n = min(cands)
        assert oracle_qa(t, phrase) == TimeSpan(t.words[i].start, t.words[i + n - 1].end)


def test_buckets_hand_example():
    ex = [
        {"id": "a", "realized_wer": 0.0, "ff1_cascade": 1.0, "ff1_dual": 0.5},
        {"id": "b", "realized_wer": 0.05, "ff1_cascade": 0.8, "ff1_dual": 0.7},
        {"id": "c", "realized_wer": 0.35, "ff1_cascade": 0.2, "ff1_dual": 0.6},
    ]
    b = bucket_analysis(ex)
    assert [(x.lo, x.hi, x.n) for x in b] == [(0.0, 0.1, 2), (0.3, 0.4, 1)]
    assert b[0].ff1_cascade == pytest.approx(0.9)
    assert b[0].ff1_dual == pytest.approx(0.6)
    assert b[0].ids == ["a", "b"]
    assert b[1].to_record() == {"lo": 0.3, "hi": 0.4, "n": 1, "ff1_cascade": 0.2, "ff1_dual": 0.6}


def test_bucket_errors():
    with pytest.raises(ValueError):
        bucket_analysis([], [0.0, 0.5, 0.3])
    with pytest.raises(ValueError):
        bucket_analysis([{"realized_wer": 0.9, "ff1_cascade": 0, "ff1_dual": 0}])
