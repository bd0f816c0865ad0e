"""Named parameter store, initialization, counting and checkpoint files."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .config import ModelConfig

BUFFER_SUFFIXES = (".running_mean", ".running_var")

CKPT_MAGIC = b"LIDCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParameterSet:
    """Ordered name -> array store with a parallel gradient store.

    BatchNorm running statistics live here too but are not trainable.
    """

    def __init__(self, values: "OrderedDict[str, np.ndarray] | dict[str, np.ndarray]"):
        self.values = OrderedDict(values)
        self.grads: dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.values[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    @staticmethod
    def is_buffer(name: str) -> bool:
        return name.endswith(BUFFER_SUFFIXES)

    def trainable(self) -> list[str]:
        return [n for n in self.values if not self.is_buffer(n)]

    def n_trainable(self) -> int:
        return sum(self.values[n].size for n in self.trainable())

    def copy(self) -> "ParameterSet":
        return ParameterSet(OrderedDict((k, v.copy()) for k, v in self.values.items()))

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(OrderedDict((k, v.astype(dtype)) for k, v in self.values.items()))

    def zero_grad(self) -> None:
        self.grads = {n: np.zeros_like(self.values[n], dtype=np.float64) for n in self.trainable()}


def _bn(c: int, name: str):
    return [(f"{name}.gamma", (c,), "ones"), (f"{name}.beta", (c,), "zeros"),
            (f"{name}.running_mean", (c,), "zeros"), (f"{name}.running_var", (c,), "ones")]


def _dwsep(cin: int, cout: int, k: int, name: str):
    return [(f"{name}.dw", (cin, k), "conv_dw"), (f"{name}.pw", (cout, cin), "fan_in")]


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every tensor, in forward order."""
    out = []
    out += _dwsep(cfg.n_mels, cfg.prologue_channels, cfg.prologue_kernel, "prologue")
    out += _bn(cfg.prologue_channels, "prologue.bn")
    cin = cfg.prologue_channels
    for i, b in enumerate(cfg.blocks):
        pre = f"blocks.{i}"
        for j in range(b.repeats):
            out += _dwsep(cin if j == 0 else b.channels, b.channels, b.kernel, f"{pre}.sub.{j}")
            out += _bn(b.channels, f"{pre}.sub.{j}.bn")
        hidden = max(1, b.channels // cfg.se_reduction)
        out += [(f"{pre}.se.fc1.weight", (hidden, b.channels), "fan_in"),
                (f"{pre}.se.fc1.bias", (hidden,), "zeros"),
                (f"{pre}.se.fc2.weight", (b.channels, hidden), "fan_in"),
                (f"{pre}.se.fc2.bias", (b.channels,), "zeros")]
        out += [(f"{pre}.res.pw", (b.channels, cin), "fan_in")]
        out += _bn(b.channels, f"{pre}.res.bn")
        cin = b.channels
    out += _dwsep(cin, cfg.epilogue_channels, cfg.epilogue_kernel, "epilogue")
    out += _bn(cfg.epilogue_channels, "epilogue.bn")
    A, Ce, E = cfg.attention_dim, cfg.epilogue_channels, cfg.embedding_dim
    out += [("pool.weight", (A, Ce), "xavier"), ("pool.bias", (A,), "zeros"),
            ("pool.v", (A,), "xavier_vec")]
    out += [("decoder.emb.weight", (E, 2 * Ce), "xavier"), ("decoder.emb.bias", (E,), "zeros")]
    if cfg.emb_bn_relu:
        out += _bn(E, "decoder.emb_bn")
    out += [("decoder.head.weight", (cfg.n_classes, E), "xavier")]
    if cfg.head == "linear":
        out += [("decoder.head.bias", (cfg.n_classes,), "zeros")]
    return out


HEAD_PREFIX = "decoder.head."


def init_tensor(shape, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "conv_dw":
        return rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape)
    if kind == "fan_in":
        return rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape)
    if kind == "xavier":
        lim = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-lim, lim, size=shape)
    if kind == "xavier_vec":
        lim = np.sqrt(3.0 / shape[0])
        return rng.uniform(-lim, lim, size=shape)
    raise ValueError(kind)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterSet:
    rng = np.random.default_rng(seed)
    values = OrderedDict()
    for name, shape, kind in param_layout(cfg):
        values[name] = init_tensor(shape, kind, rng).astype(dtype)
    return ParameterSet(values)


def count_params(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count (BN running stats excluded)."""

    def dwsep(cin, cout, k):
        return cin * k + cin * cout

    n = dwsep(cfg.n_mels, cfg.prologue_channels, cfg.prologue_kernel) + 2 * cfg.prologue_channels
    cin = cfg.prologue_channels
    for b in cfg.blocks:
        C = b.channels
        n += dwsep(cin, C, b.kernel) + (b.repeats - 1) * dwsep(C, C, b.kernel) + 2 * C * b.repeats
        h = max(1, C // cfg.se_reduction)
        n += 2 * h * C + h + C
        n += C * cin + 2 * C
        cin = C
    Ce, A, E = cfg.epilogue_channels, cfg.attention_dim, cfg.embedding_dim
    n += dwsep(cin, Ce, cfg.epilogue_kernel) + 2 * Ce
    n += A * Ce + 2 * A
    n += 2 * Ce * E + E + (2 * E if cfg.emb_bn_relu else 0)
    n += cfg.n_classes * E + (cfg.n_classes if cfg.head == "linear" else 0)
    return n


# --- checkpoint file ---------------------------------------------------------
#   magic(8) | version u32 | sha256 digest(32) | config json (u32 len + utf-8)
#   | n tensors u32 | per tensor: name (u32 len + utf-8), rank u32, dims u32*rank,
#   float32 little-endian payload


def save_checkpoint(path, params: ParameterSet, cfg: ModelConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg_blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), bytes.fromhex(cfg.digest()),
             struct.pack("<I", len(cfg_blob)), cfg_blob, struct.pack("<I", len(params))]
    for name, arr in params.values.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[ModelConfig, str, ParameterSet]:
    """Return (stored config, stored digest, parameters)."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = data[pos : pos + 32].hex()
    pos += 32
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    cfg = ModelConfig.from_dict(json.loads(data[pos : pos + n]))
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    values = OrderedDict()
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + ln].decode()
        pos += ln
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        values[name] = arr.astype(np.float32)
    return cfg, digest, ParameterSet(values)


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[ModelConfig, ParameterSet]:
    """Load a checkpoint, rejecting it if its digest does not match ``cfg``."""
    stored_cfg, digest, params = read_checkpoint(path)
    if cfg is None:
        cfg = stored_cfg
    elif digest != cfg.digest():
        raise CheckpointError(f"{path}: config digest mismatch (checkpoint {digest[:12]}, "
                              f"expected {cfg.digest()[:12]})")
    expected = {name: shape for name, shape, _ in param_layout(cfg)}
    if set(expected) != set(params.values):
        raise CheckpointError(f"{path}: tensor names do not match the config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
    return cfg, params
