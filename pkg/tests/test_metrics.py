import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langid.manifest import UtteranceRecord, write_manifest
from langid.metrics import (TrialScores, bac, eer, eer_from_scores, micro_acc, read_labels, read_scores,
                            summarize, write_scores)


def brute_force_eer(pos, neg):
    """EER by sweeping every midpoint threshold (plus both extremes) with scalar loops."""
    scores = sorted(set(pos) | set(neg))
    thresholds = [scores[0] - 1.0]
    thresholds += [(a + b) / 2 for a, b in zip(scores, scores[1:])]
    thresholds.append(scores[-1] + 1.0)
    pts = []
    for t in thresholds:
        far = sum(1 for s in neg if s > t) / len(neg)
        frr = sum(1 for s in pos if s < t) / len(pos)
        pts.append((far, frr))
    for (f0, r0), (f1, r1) in zip(pts, pts[1:]):
        if f0 - r0 > 0 and f1 - r1 <= 0:
            if f1 == r1:
                return f1
            lam = (f0 - r0) / ((f0 - r0) - (f1 - r1))
            return f0 + lam * (f1 - f0)
    return pts[0][0] if pts[0][0] == pts[0][1] else None


def trials_from(pos, neg):
    s = np.concatenate([pos, neg])
    probs = np.stack([s, 1 - s], axis=1)
    labels = np.array([0] * len(pos) + [1] * len(neg))
    return TrialScores([f"u{i}" for i in range(len(s))], probs, labels)


def test_eer_examples():
    assert eer_from_scores([0.9, 0.8], [0.1, 0.2]) == 0.0
    assert eer_from_scores([0.9, 0.8, 0.3], [0.7, 0.2, 0.1]) == pytest.approx(1 / 3, abs=1e-12)
    assert brute_force_eer([0.9, 0.8, 0.3], [0.7, 0.2, 0.1]) == pytest.approx(1 / 3, abs=1e-12)


def test_eer_fast_path_vs_brute_force():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        n_pos = int(rng.integers(1, n))
        # quantized scores exercise ties
        q = int(rng.choice([5, 20, 1000]))
        pos = np.round(rng.beta(2, 1.3, n_pos) * q) / q
        neg = np.round(rng.beta(1.3, 2, n - n_pos) * q) / q
        worst = max(worst, abs(eer_from_scores(pos, neg) - brute_force_eer(list(pos), list(neg))))
    assert worst < 1e-9


def test_eer_label_swap_symmetry(rng):
    pos, neg = rng.uniform(size=30), rng.uniform(size=25)
    t = trials_from(pos, neg)
    swapped = TrialScores(t.utt_ids, t.probs, 1 - t.labels)
    assert eer(t, "en") == pytest.approx(eer(swapped, "zh"), abs=1e-12)
    assert eer_from_scores(pos, neg) == pytest.approx(eer_from_scores(1 - neg, 1 - pos), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_eer_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    pos, neg = rng.uniform(size=15), rng.uniform(size=12)
    e = eer_from_scores(pos, neg)
    assert 0.0 <= e <= 1.0
    assert eer_from_scores(np.exp(3 * pos), np.exp(3 * neg)) == pytest.approx(e, abs=1e-12)


def test_eer_requires_both_classes():
    with pytest.raises(ValueError):
        eer_from_scores([], [0.2])
    with pytest.raises(ValueError):
        eer(trials_from(np.array([0.5, 0.7]), np.array([])))


def make_trials(labels, preds):
    probs = np.array([[0.9, 0.1] if p == 0 else [0.1, 0.9] for p in preds])
    return TrialScores([f"u{i}" for i in range(len(labels))], probs, np.array(labels))


def test_bac_and_micro_examples():
    assert bac(make_trials([0, 1, 1], [0, 1, 1])) == 1.0 == micro_acc(make_trials([0, 1], [0, 1]))
    t = make_trials([0] * 5 + [1] * 5, [0, 0, 0, 0, 1] + [1, 1, 1, 0, 0])
    assert bac(t) == pytest.approx(0.7)
    assert bac(make_trials([0, 0, 0, 1], [0, 0, 0, 0])) == 0.5
    assert micro_acc(make_trials([0, 1, 0, 1], [0, 1, 1, 0])) == 0.5


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), half=st.integers(1, 30))
def test_micro_equals_bac_when_balanced(seed, half):
    rng = np.random.default_rng(seed)
    labels = rng.permutation([0] * half + [1] * half)
    t = make_trials(labels, rng.integers(0, 2, 2 * half))
    assert micro_acc(t) == pytest.approx(bac(t), abs=1e-12)


def test_argmax_ties_go_to_first_class():
    t = TrialScores(["a"], np.array([[0.5, 0.5]]), np.array([1]))
    assert t.predictions[0] == 0


def test_trial_validation():
    with pytest.raises(ValueError):
        TrialScores(["a"], np.array([[0.7, 0.7]]), np.array([0]))
    with pytest.raises(ValueError):
        TrialScores(["a", "b"], np.array([[0.5, 0.5]]), np.array([0]))
    with pytest.raises(ValueError, match="unknown label"):
        TrialScores.from_labels(["a"], np.array([[0.5, 0.5]]), ["fr"])


def test_score_file_roundtrip(tmp_path, rng):
    t = trials_from(rng.uniform(size=6), rng.uniform(size=4))
    write_scores(t, tmp_path / "s.jsonl")
    back = read_scores(tmp_path / "s.jsonl")
    assert back.utt_ids == t.utt_ids and np.array_equal(back.labels, t.labels)
    np.testing.assert_array_equal(back.probs, t.probs)
    assert summarize(back) == summarize(t)


def test_labels_from_manifest_or_label_file(tmp_path):
    recs = [UtteranceRecord("/a.wav", 0.0, 1.0, "en"), UtteranceRecord("/b.wav", 0.5, 1.0, "zh")]
    write_manifest(recs, tmp_path / "m.json")
    assert read_labels(tmp_path / "m.json") == {"/a.wav": "en", "/b.wav@0.500": "zh"}
    (tmp_path / "l.jsonl").write_text('{"utt_id": "x", "label": "zh"}\n')
    assert read_labels(tmp_path / "l.jsonl") == {"x": "zh"}
    (tmp_path / "s.jsonl").write_text('{"utt_id": "x", "p_en": 0.25, "p_zh": 0.75}\n')
    t = read_scores(tmp_path / "s.jsonl", labels={"x": "zh"})
    assert t.labels.tolist() == [1]
    with pytest.raises(ValueError, match="missing"):
        read_scores(tmp_path / "s.jsonl")
