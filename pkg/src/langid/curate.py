"""Dataset curation: energy VAD, hard-example mining, split search, filters."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .audio import AudioBuffer
from .manifest import UtteranceRecord, label_counts

log = logging.getLogger(__name__)


def duration_filter(records: Sequence[UtteranceRecord], min_s: float, max_s: float) -> list[UtteranceRecord]:
    return [r for r in records if min_s <= r.duration <= max_s]


# --- energy VAD ----------------------------------------------------------------


@dataclass(frozen=True)
class VadConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    percentile: float = 30.0
    min_rms: float = 1e-4  # absolute floor (-80 dBFS)
    min_speech: float = 0.2
    min_gap: float = 0.3
    max_segment: float = 8.0

    def __post_init__(self):
        if self.max_segment <= 0 or self.hop_ms <= 0 or self.frame_ms < self.hop_ms:
            raise ValueError(f"bad VAD config {self}")


def frame_rms(buf: AudioBuffer, cfg: VadConfig) -> np.ndarray:
    win = int(round(cfg.frame_ms * buf.sample_rate / 1000))
    hop = int(round(cfg.hop_ms * buf.sample_rate / 1000))
    if len(buf) < win:
        return np.zeros(0)
    frames = np.lib.stride_tricks.sliding_window_view(buf.samples, win)[::hop]
    return np.sqrt(np.mean(frames**2, axis=1))


def _runs(active: np.ndarray) -> list[list[int]]:
    """[start, end) index runs of True."""
    edges = np.diff(np.concatenate([[0], active.astype(np.int8), [0]]))
    return [[int(s), int(e)] for s, e in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1))]


def _split_long(run, rms, max_frames: int, min_frames: int) -> list[list[int]]:
    s, e = run
    if e - s <= max_frames:
        return [run]
    lo, hi = s + max(min_frames, 1), e - max(min_frames, 1)
    if hi <= lo:
        lo, hi = s + 1, e - 1
    cut = lo + int(np.argmin(rms[lo:hi]))
    return _split_long([s, cut], rms, max_frames, min_frames) + _split_long([cut, e], rms, max_frames, min_frames)


def energy_vad(buf: AudioBuffer, cfg: VadConfig = VadConfig()) -> list[tuple[float, float]]:
    """Speech segments as (offset, duration) in seconds, each <= cfg.max_segment.

    Frames whose RMS exceeds max(percentile threshold, absolute floor) are
    active; gaps shorter than ``min_gap`` are bridged, islands shorter than
    ``min_speech`` dropped, and over-long segments split recursively at their
    quietest interior frame. Frame i spans the hop-wide cell around its window
    center, so segments built from adjacent frames tile without gaps.
    """
    rms = frame_rms(buf, cfg)
    if rms.size == 0:
        return []
    thr = max(float(np.percentile(rms, cfg.percentile)), cfg.min_rms)
    runs = _runs(rms > thr)
    hop_s = cfg.hop_ms / 1000.0
    gap = int(round(cfg.min_gap / hop_s))
    merged: list[list[int]] = []
    for r in runs:
        if merged and r[0] - merged[-1][1] < gap:
            merged[-1][1] = r[1]
        else:
            merged.append(r)
    min_frames = int(round(cfg.min_speech / hop_s))
    merged = [r for r in merged if r[1] - r[0] >= min_frames]
    max_frames = int(np.floor(cfg.max_segment / hop_s + 1e-9))
    pieces = [p for r in merged for p in _split_long(r, rms, max_frames, min_frames)]
    # cell boundary of frame i: window center minus half a hop
    origin = (cfg.frame_ms - cfg.hop_ms) / 2000.0
    return [(origin + s * hop_s, (e - s) * hop_s) for s, e in pieces]


def vad_records(buf: AudioBuffer, path: str, label: str, cfg: VadConfig = VadConfig()) -> list[UtteranceRecord]:
    return [UtteranceRecord(path, round(off, 6), round(dur, 6), label, recording_id=path)
            for off, dur in energy_vad(buf, cfg)]


# --- hard-example mining ---------------------------------------------------------


def mine_errors(predictor, records: Sequence[UtteranceRecord]) -> list[UtteranceRecord]:
    """Records whose argmax prediction differs from their label.

    ``predictor`` needs ``score_records`` (see :class:`langid.infer.Predictor`);
    unreadable audio is skipped and counted in a warning.
    """
    trials, skipped = predictor.score_records(records, skip_unreadable=True)
    if skipped:
        log.warning("mine_errors skipped %d unreadable records", len(skipped))
    wrong = set(np.flatnonzero(trials.predictions != trials.labels))
    readable = [r for r in records if not any(r is s for s in skipped)]
    return [r for i, r in enumerate(readable) if i in wrong]


# --- representative splits ------------------------------------------------------


@dataclass
class SplitCandidate:
    seed: int
    train: list[UtteranceRecord]
    val: list[UtteranceRecord]
    eer_gap: float | None


def _recording_labels(records: Sequence[UtteranceRecord]) -> dict[str, str]:
    """Majority label of each recording (first seen wins ties)."""
    votes: dict[str, dict[str, int]] = {}
    for r in records:
        votes.setdefault(r.recording, {}).setdefault(r.label, 0)
        votes[r.recording][r.label] += 1
    return {rec: max(v, key=v.get) for rec, v in votes.items()}


def stratified_split(records: Sequence[UtteranceRecord], val_fraction: float,
                     seed: int) -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    """Recording-disjoint split taking ~val_fraction of each label's recordings."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    rec_label = _recording_labels(records)
    by_label: dict[str, list[str]] = {}
    for rec, lab in rec_label.items():
        by_label.setdefault(lab, []).append(rec)
    rng = np.random.default_rng(seed)
    val_recs = set()
    for lab in sorted(by_label):
        recs = sorted(by_label[lab])
        if len(recs) < 2:
            raise ValueError(f"label {lab!r} has {len(recs)} recording(s); need 2 to stratify")
        k = min(max(1, int(round(val_fraction * len(recs)))), len(recs) - 1)
        val_recs.update(recs[i] for i in rng.permutation(len(recs))[:k])
    train = [r for r in records if r.recording not in val_recs]
    val = [r for r in records if r.recording in val_recs]
    return train, val


def split_candidates(records: Sequence[UtteranceRecord], val_fraction: float, seed: int,
                     n_candidates: int = 1,
                     eer_of: Callable[[Sequence[int]], float] | None = None) -> Iterator[SplitCandidate]:
    """Yield stratified splits for seeds seed, seed+1, ...

    ``eer_of`` maps record indices to the reference model's EER on them; when
    given each candidate carries |EER(all) - EER(val)|.
    """
    full = eer_of(range(len(records))) if eer_of is not None else None
    pos = {id(r): i for i, r in enumerate(records)}
    for s in range(seed, seed + n_candidates):
        train, val = stratified_split(records, val_fraction, s)
        gap = None
        if eer_of is not None:
            gap = abs(full - eer_of([pos[id(r)] for r in val]))
        yield SplitCandidate(s, train, val, gap)


def make_split(records: Sequence[UtteranceRecord], val_fraction: float, seed: int = 0,
               n_candidates: int = 1, eer_of=None) -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    """Best candidate split: minimum EER gap (earliest seed on ties), else the first."""
    best = None
    for cand in split_candidates(records, val_fraction, seed, n_candidates if eer_of else 1, eer_of):
        if best is None or (cand.eer_gap is not None and cand.eer_gap < best.eer_gap):
            best = cand
    log.info("split seed %d: train %s, val %s, eer gap %s", best.seed, label_counts(best.train),
             label_counts(best.val), best.eer_gap)
    return best.train, best.val


def split_report(train: Sequence[UtteranceRecord], val: Sequence[UtteranceRecord]) -> dict:
    out = {}
    for name, part in (("train", train), ("val", val)):
        counts = label_counts(part)
        n = max(len(part), 1)
        out[name] = {lab: {"count": c, "fraction": c / n} for lab, c in sorted(counts.items())}
    return out


def trials_eer_fn(trials, positive_class: str = "en") -> Callable[[Sequence[int]], float]:
    """Adapter: EER of a subset of precomputed reference trials."""
    from .metrics import eer

    def fn(idx):
        return eer(trials.subset(list(idx)), positive_class)

    return fn
