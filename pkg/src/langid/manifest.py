"""Line-delimited JSON manifests of labeled audio segments."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable


@dataclass(frozen=True)
class UtteranceRecord:
    audio_filepath: str
    offset: float
    duration: float
    label: str
    recording_id: str | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"non-positive duration {self.duration} for {self.audio_filepath}")
        if self.offset < 0:
            raise ValueError(f"negative offset {self.offset} for {self.audio_filepath}")

    @property
    def utt_id(self) -> str:
        if self.offset == 0:
            return self.audio_filepath
        return f"{self.audio_filepath}@{self.offset:.3f}"

    @property
    def recording(self) -> str:
        return self.recording_id if self.recording_id is not None else self.audio_filepath

    def to_json(self) -> str:
        d = {
            "audio_filepath": self.audio_filepath,
            "offset": self.offset,
            "duration": self.duration,
            "label": self.label,
        }
        if self.recording_id is not None:
            d["recording_id"] = self.recording_id
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "UtteranceRecord":
        return cls(
            audio_filepath=str(d["audio_filepath"]),
            offset=float(d.get("offset", 0.0)),
            duration=float(d["duration"]),
            label=str(d["label"]),
            recording_id=d.get("recording_id"),
        )


Manifest = list[UtteranceRecord]


def read_manifest(path) -> Manifest:
    """Read a manifest; relative audio paths resolve against its directory."""
    base = Path(path).parent.absolute()
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                if "audio_filepath" in d and not Path(d["audio_filepath"]).is_absolute():
                    d["audio_filepath"] = str(base / d["audio_filepath"])
                records.append(UtteranceRecord.from_dict(d))
            except (KeyError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: bad manifest record ({e})") from e
    return records


def write_manifest(records: Iterable[UtteranceRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def label_counts(records: Iterable[UtteranceRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in records:
        counts[r.label] = counts.get(r.label, 0) + 1
    return counts
