"""Audio ingestion, resampling, slicing and synthetic two-class corpora."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .manifest import Manifest, UtteranceRecord, write_manifest

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000


@dataclass(eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono samples only")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite audio samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path, target_rate: int | None = None) -> AudioBuffer:
    """Read a PCM16 or float32 WAV file as a mono buffer.

    Multi-channel audio is downmixed by averaging channels. When
    ``target_rate`` is given the buffer is resampled to it.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV encoding {data.dtype} (PCM16 or float32 only)")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise ValueError(f"{path}: zero-length audio payload")
    buf = AudioBuffer(np.clip(x, -1.0, 1.0), rate)
    if target_rate is not None and target_rate != rate:
        buf = resample(buf, target_rate)
    return buf


def write_wav(buf: AudioBuffer, path, encoding: str = "pcm16") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.clip(buf.samples, -1.0, 1.0)
    if encoding == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    wavfile.write(path, buf.sample_rate, data)


def interp_to_length(samples: np.ndarray, n_out: int, step: float) -> np.ndarray:
    """Linear interpolation at source positions ``i * step``, clamped at the end."""
    pos = np.arange(n_out, dtype=np.float64) * step
    return np.interp(pos, np.arange(len(samples), dtype=np.float64), samples)


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == buf.sample_rate:
        return AudioBuffer(buf.samples.copy(), buf.sample_rate)
    n_out = int(round(len(buf) * target_rate / buf.sample_rate))
    out = interp_to_length(buf.samples, n_out, buf.sample_rate / target_rate)
    return AudioBuffer(out, target_rate)


def slice_segment(buf: AudioBuffer, offset: float, duration: float) -> AudioBuffer:
    rate = buf.sample_rate
    if offset < 0 or duration <= 0:
        raise ValueError(f"invalid slice offset={offset} duration={duration}")
    if offset + duration > buf.duration + 1.0 / rate:
        raise ValueError(
            f"slice [{offset}, {offset + duration}] s exceeds buffer of {buf.duration:.4f} s"
        )
    start = int(round(offset * rate))
    n = int(round(duration * rate))
    # only reachable inside the one-sample tolerance band
    start = min(start, len(buf) - n)
    return AudioBuffer(buf.samples[start : start + n].copy(), rate)


def load_record(rec: UtteranceRecord, target_rate: int = SAMPLE_RATE) -> AudioBuffer:
    buf = read_wav(rec.audio_filepath, target_rate=target_rate)
    if rec.offset == 0 and abs(rec.duration - buf.duration) <= 1.0 / buf.sample_rate:
        return buf
    return slice_segment(buf, rec.offset, rec.duration)


# --- synthetic corpora -------------------------------------------------------


@dataclass(frozen=True)
class ClassProfile:
    resonances: tuple[float, ...]
    mod_rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.resonances) != len(self.mod_rates) or not self.resonances:
            raise ValueError("each resonance needs exactly one modulation rate")


DEFAULT_PROFILES = {
    "en": ClassProfile(resonances=(500.0, 1500.0, 2500.0), mod_rates=(3.0, 5.0, 4.0)),
    "zh": ClassProfile(resonances=(800.0, 2000.0, 3300.0), mod_rates=(6.0, 9.0, 7.5)),
}


@dataclass(frozen=True)
class SynthCorpusSpec:
    n_per_class: int = 100
    duration_range: tuple[float, float] = (1.0, 2.0)
    seed: int = 0
    profiles: dict[str, ClassProfile] = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    sample_rate: int = SAMPLE_RATE
    jitter: float = 0.05
    mod_depth: float = 0.9
    floor_db: float = -40.0

    def __post_init__(self):
        lo, hi = self.duration_range
        if not (0.3 <= lo <= hi <= 16.0):
            raise ValueError(f"duration range {self.duration_range} outside [0.3, 16.0] s")
        if self.n_per_class < 1:
            raise ValueError("need at least one utterance per class")
        if len(self.profiles) < 2:
            raise ValueError("need at least two class profiles")
        seen = set()
        for p in self.profiles.values():
            key = (tuple(sorted(p.resonances)), tuple(p.mod_rates))
            if key in seen:
                raise ValueError("class profiles must differ")
            seen.add(key)

    @property
    def resonance_gap(self) -> float:
        """Smallest rank-matched resonance difference over all class pairs (Hz)."""
        labels = list(self.profiles)
        gap = np.inf
        for i, a in enumerate(labels):
            for b in labels[i + 1 :]:
                ra = np.sort(self.profiles[a].resonances)
                rb = np.sort(self.profiles[b].resonances)
                m = min(len(ra), len(rb))
                gap = min(gap, float(np.min(np.abs(ra[:m] - rb[:m]))))
        return gap


def speaker_profiles(n_speakers: int, seed: int = 0) -> dict[str, ClassProfile]:
    """Random resonance/modulation profiles for a many-class pretraining task."""
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n_speakers):
        res = np.sort(rng.uniform(300.0, 4000.0, size=3))
        rates = rng.uniform(2.0, 10.0, size=3)
        out[f"spk{i:02d}"] = ClassProfile(tuple(float(r) for r in res), tuple(float(r) for r in rates))
    return out


def synth_utterance(profile: ClassProfile, duration: float, rng: np.random.Generator,
                    spec: SynthCorpusSpec) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    x = np.zeros(n)
    for fc, rate in zip(profile.resonances, profile.mod_rates):
        fc = fc * (1.0 + rng.uniform(-spec.jitter, spec.jitter))
        bw = 0.2 * fc
        sos = signal.butter(2, [fc - bw / 2, min(fc + bw / 2, 0.99 * sr / 2)],
                            btype="band", fs=sr, output="sos")
        band = signal.sosfilt(sos, rng.standard_normal(n))
        band /= np.sqrt(np.mean(band**2)) + 1e-12
        r = rate * (1.0 + rng.uniform(-2 * spec.jitter, 2 * spec.jitter))
        env = 1.0 + spec.mod_depth * np.sin(2 * np.pi * r * t + rng.uniform(0, 2 * np.pi))
        x += band * env
    x += 10 ** (spec.floor_db / 20) * rng.standard_normal(n)
    gain = rng.uniform(0.3, 0.9)
    return x * (gain / (np.max(np.abs(x)) + 1e-12))


def synth_corpus(spec: SynthCorpusSpec, out_dir) -> Manifest:
    """Write a deterministic synthetic corpus and its manifest under ``out_dir``.

    Audio paths in ``manifest.json`` are relative to ``out_dir``; the returned
    records carry resolved paths.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    rel_records, records = [], []
    lo, hi = spec.duration_range
    for label, profile in spec.profiles.items():
        for i in range(spec.n_per_class):
            # whole-sample durations so manifests match file lengths exactly
            n = int(round(rng.uniform(lo, hi) * spec.sample_rate))
            duration = n / spec.sample_rate
            x = synth_utterance(profile, duration, rng, spec)
            rel = f"audio/{label}_{i:04d}.wav"
            write_wav(AudioBuffer(x, spec.sample_rate), out_dir / rel)
            rec_id = f"{label}_{i:04d}"
            rel_records.append(UtteranceRecord(rel, 0.0, duration, label, rec_id))
            records.append(UtteranceRecord(str(out_dir / rel), 0.0, duration, label, rec_id))
    write_manifest(rel_records, out_dir / "manifest.json")
    log.info("wrote %d synthetic utterances to %s", len(records), out_dir)
    return records
