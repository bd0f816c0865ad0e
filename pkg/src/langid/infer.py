"""Batch inference over feature matrices, buffers and manifests."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .audio import AudioBuffer, load_record
from .frontend import FeatureMatrix, extract
from .manifest import UtteranceRecord
from .metrics import TrialScores
from .nn import Batch, Model, ModelConfig, ParameterSet, load_checkpoint, softmax

log = logging.getLogger(__name__)


class Predictor:
    """Eval-mode classifier over an immutable parameter set."""

    def __init__(self, cfg: ModelConfig, params: ParameterSet, batch_size: int = 32,
                 norm_mode: str = "per_bin"):
        self.cfg = cfg
        self.params = params
        self.model = Model(cfg)
        self.batch_size = batch_size
        self.norm_mode = norm_mode

    @classmethod
    def from_checkpoint(cls, path, **kw) -> "Predictor":
        cfg, params = load_checkpoint(path)
        return cls(cfg, params, **kw)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.cfg.labels

    def logits(self, feats: Sequence[FeatureMatrix]) -> np.ndarray:
        out = []
        for i in range(0, len(feats), self.batch_size):
            chunk = [f.values for f in feats[i : i + self.batch_size]]
            lg, _ = self.model.forward(self.params, Batch.from_features(chunk))
            out.append(lg)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.n_classes))

    def predict_features(self, feats: Sequence[FeatureMatrix]) -> np.ndarray:
        return softmax(self.logits(feats), axis=1)

    def predict_buffer(self, buf: AudioBuffer) -> np.ndarray:
        return self.predict_features([extract(buf, self.norm_mode)])[0]

    def score_records(self, records: Sequence[UtteranceRecord],
                      skip_unreadable: bool = False) -> tuple[TrialScores, list[UtteranceRecord]]:
        """Score records; returns (trials over readable records, skipped records)."""
        feats, kept, skipped = [], [], []
        for r in records:
            try:
                feats.append(extract(load_record(r), self.norm_mode))
            except (OSError, ValueError) as e:
                if not skip_unreadable:
                    raise
                log.warning("skipping %s: %s", r.audio_filepath, e)
                skipped.append(r)
                continue
            kept.append(r)
        probs = self.predict_features(feats)
        trials = TrialScores.from_labels([r.utt_id for r in kept], probs.reshape(len(kept), -1),
                                         [r.label for r in kept], self.labels)
        return trials, skipped
