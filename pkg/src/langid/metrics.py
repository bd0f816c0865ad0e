"""EER, balanced accuracy and micro accuracy over per-utterance class scores."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CLASSES = ("en", "zh")


@dataclass(eq=False)
class TrialScores:
    utt_ids: list[str]
    probs: np.ndarray  # (N, K)
    labels: np.ndarray  # (N,) class indices
    classes: tuple[str, ...] = CLASSES

    def __post_init__(self):
        self.utt_ids = list(self.utt_ids)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.classes = tuple(self.classes)
        n = len(self.utt_ids)
        if self.probs.shape != (n, len(self.classes)) or self.labels.shape != (n,):
            raise ValueError("utterance ids, probabilities and labels are misaligned")
        if n and (self.probs.min() < 0 or self.probs.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if n and np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("probability rows must sum to 1")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise ValueError("label index outside the class set")

    def __len__(self) -> int:
        return len(self.utt_ids)

    @classmethod
    def from_labels(cls, utt_ids, probs, labels: Sequence[str], classes=CLASSES) -> "TrialScores":
        index = {c: i for i, c in enumerate(classes)}
        try:
            idx = [index[lab] for lab in labels]
        except KeyError as e:
            raise ValueError(f"unknown label {e.args[0]!r}") from None
        return cls(utt_ids, probs, np.array(idx, dtype=np.int64), classes)

    @property
    def predictions(self) -> np.ndarray:
        # np.argmax keeps the first maximum: ties go to classes[0]
        return np.argmax(self.probs, axis=1)

    def subset(self, idx) -> "TrialScores":
        idx = np.asarray(idx)
        return TrialScores([self.utt_ids[i] for i in idx], self.probs[idx], self.labels[idx], self.classes)


def roc_points(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    """(FAR, FRR) at every distinct score threshold plus one above the maximum.

    A trial is accepted when its score >= threshold.
    """
    pos = np.sort(np.asarray(pos, dtype=np.float64))
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    thr = np.unique(np.concatenate([pos, neg]))
    frr = np.append(np.searchsorted(pos, thr, side="left") / len(pos), 1.0)
    far = np.append((len(neg) - np.searchsorted(neg, thr, side="left")) / len(neg), 0.0)
    return far, frr


def eer_from_scores(pos, neg) -> float:
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("EER needs at least one positive and one negative trial")
    far, frr = roc_points(pos, neg)
    d = far - frr
    i = int(np.argmax(d <= 0))
    if d[i] == 0:
        return float(far[i])
    lam = d[i - 1] / (d[i - 1] - d[i])
    return float(far[i - 1] + lam * (far[i] - far[i - 1]))


def eer(trials: TrialScores, positive_class: str = "en") -> float:
    """EER of p(positive_class) as a detection score, ROC-interpolated."""
    k = trials.classes.index(positive_class)
    score = trials.probs[:, k]
    is_pos = trials.labels == k
    if is_pos.all() or not is_pos.any():
        raise ValueError("EER needs trials from both the positive and negative classes")
    return eer_from_scores(score[is_pos], score[~is_pos])


def per_class_recall(trials: TrialScores) -> np.ndarray:
    pred = trials.predictions
    out = []
    for k, name in enumerate(trials.classes):
        sel = trials.labels == k
        if not sel.any():
            raise ValueError(f"class absent from trials: {name}")
        out.append(np.mean(pred[sel] == k))
    return np.array(out)


def bac(trials: TrialScores) -> float:
    return float(per_class_recall(trials).mean())


def micro_acc(trials: TrialScores) -> float:
    if len(trials) == 0:
        raise ValueError("no trials")
    return float(np.mean(trials.predictions == trials.labels))


def summarize(trials: TrialScores, positive_class: str = "en") -> dict[str, float]:
    return {"eer": eer(trials, positive_class), "bac": bac(trials), "micro_acc": micro_acc(trials)}


# --- score files -------------------------------------------------------------
# one JSON object per line: {"utt_id": ..., "p_en": ..., "p_zh": ..., "label": ...}


def score_rows(utt_ids, probs, classes=CLASSES, labels: Sequence[str] | None = None) -> list[dict]:
    """Score-file rows; ``label`` is included when known."""
    rows = []
    for i, (uid, p) in enumerate(zip(utt_ids, probs)):
        row = {"utt_id": uid}
        row.update({f"p_{c}": float(v) for c, v in zip(classes, p)})
        if labels is not None:
            row["label"] = labels[i]
        rows.append(row)
    return rows


def trial_rows(trials: TrialScores) -> list[dict]:
    return score_rows(trials.utt_ids, trials.probs, trials.classes, [trials.classes[y] for y in trials.labels])


def write_jsonl(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def write_scores(trials: TrialScores, path) -> None:
    write_jsonl(trial_rows(trials), path)


def read_labels(path) -> dict[str, str]:
    """utt_id -> label from a labels file, score file or manifest."""
    from .manifest import read_manifest

    out = {}
    with open(path, encoding="utf-8") as f:
        rows = [json.loads(line) for line in f if line.strip()]
    if rows and "utt_id" not in rows[0]:
        return {r.utt_id: r.label for r in read_manifest(path)}
    for row in rows:
        out[row["utt_id"]] = row["label"]
    return out


def read_scores(path, classes=CLASSES, labels: dict[str, str] | None = None) -> TrialScores:
    ids, probs, labs = [], [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                uid = row["utt_id"]
                ids.append(uid)
                probs.append([float(row[f"p_{c}"]) for c in classes])
                labs.append(labels[uid] if labels is not None else row["label"])
            except KeyError as e:
                raise ValueError(f"{path}:{lineno}: missing field or label for {e.args[0]!r}") from None
    return TrialScores.from_labels(ids, np.array(probs).reshape(len(ids), len(classes)), labs, classes)
