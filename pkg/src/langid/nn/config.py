"""Model architecture configuration and presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class BlockConfig:
    repeats: int
    kernel: int
    channels: int
    dropout: float = 0.1

    def __post_init__(self):
        if self.repeats < 1 or self.channels < 1:
            raise ValueError(f"bad block {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd for same padding, got {self.kernel}")


@dataclass(frozen=True)
class ModelConfig:
    prologue_channels: int
    blocks: tuple[BlockConfig, ...]
    epilogue_channels: int
    attention_dim: int
    prologue_kernel: int = 3
    epilogue_kernel: int = 1
    n_mels: int = 80
    dropout: float = 0.1
    se_reduction: int = 8
    # None is whole-utterance context; an int is a trailing window in frames
    se_context: int | None = None
    embedding_dim: int = 192
    emb_bn_relu: bool = True
    labels: tuple[str, ...] = ("en", "zh")
    head: str = "linear"
    cosine_scale: float = 30.0
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks))
        object.__setattr__(self, "labels", tuple(self.labels))
        for k in (self.prologue_kernel, self.epilogue_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel must be odd, got {k}")
        if self.head not in ("linear", "cosine"):
            raise ValueError(f"head must be 'linear' or 'cosine', got {self.head!r}")
        if self.se_context is not None and self.se_context < 1:
            raise ValueError("se_context window must be >= 1 frame")
        if len(set(self.labels)) != len(self.labels) or len(self.labels) < 2:
            raise ValueError(f"labels must be >= 2 distinct names, got {self.labels}")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @property
    def pooled_dim(self) -> int:
        return 2 * self.epilogue_channels

    @property
    def lookahead(self) -> int:
        """Future frames the encoder output at t depends on."""
        return (self.prologue_kernel // 2 + self.epilogue_kernel // 2
                + sum(b.repeats * (b.kernel // 2) for b in self.blocks))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["blocks"] = [dataclasses.asdict(b) for b in self.blocks]
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("se_context") == "global":
            d["se_context"] = None
        d["blocks"] = tuple(BlockConfig(**b) for b in d["blocks"])
        return cls(**d)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def load_config(path) -> ModelConfig:
    with open(path, "rb") as f:
        d = tomllib.load(f)
    d.setdefault("name", Path(path).stem)
    return ModelConfig.from_dict(d)


def preset(name: str) -> ModelConfig:
    """Load a bundled preset ('tiny' or 'large') or a TOML path."""
    if Path(name).suffix == ".toml":
        return load_config(name)
    ref = resources.files("langid.presets").joinpath(f"{name}.toml")
    if not ref.is_file():
        raise ValueError(f"unknown preset {name!r}")
    with resources.as_file(ref) as p:
        return load_config(p)
