"""Chunked streaming inference with per-layer context caches.

Each same-padded convolution keeps the trailing ``2 * (k // 2)`` input frames
and emits a frame once its right context has arrived, so the encoder lags the
input by ``ModelConfig.lookahead`` frames until ``finalize`` flushes it with
the zero padding the offline pass uses. Attentive pooling is accumulated with
max-shifted exponentials, which is an exact rewrite of softmax pooling.

With a finite SE window the final logits match the offline forward. With
whole-utterance SE the stream substitutes a causal running mean, which is an
approximation.
"""

from __future__ import annotations

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer
from .frontend import HOP_LENGTH, STD_FLOOR, WIN_LENGTH, logmel_frames, n_frames_for
from .nn import Model, ModelConfig, ParameterSet, softmax
from .nn import layers as L


class _Conv:
    def __init__(self, dw: np.ndarray, pw: np.ndarray):
        self.dw, self.pw = dw, pw
        self.p = dw.shape[1] // 2
        self.buf = np.zeros((dw.shape[0], self.p))

    def step(self, x: np.ndarray, final: bool) -> np.ndarray:
        p = self.p
        buf = np.concatenate([self.buf, x], axis=1)
        if final:
            buf = np.concatenate([buf, np.zeros((buf.shape[0], p))], axis=1)
        n = buf.shape[1] - 2 * p
        if n <= 0:
            self.buf = buf
            return np.zeros((self.pw.shape[0], 0))
        y = self.dw[:, 0, None] * buf[:, 0:n]
        for j in range(1, 2 * p + 1):
            y += self.dw[:, j, None] * buf[:, j : j + n]
        self.buf = buf[:, n:]
        return self.pw @ y


def _bn(P, name, x):
    y, _ = L.bn_forward(x[None], P[f"{name}.gamma"], P[f"{name}.beta"], P[f"{name}.running_mean"],
                        P[f"{name}.running_var"], mask=np.ones((1, 1, x.shape[1])))
    return y[0]


class _Sub:
    def __init__(self, P, name, act: bool):
        self.P, self.name, self.act = P, name, act
        self.conv = _Conv(P[f"{name}.dw"], P[f"{name}.pw"])

    def step(self, x, final):
        y = _bn(self.P, f"{self.name}.bn", self.conv.step(x, final))
        return L.relu_forward(y) if self.act else y


class _SE:
    def __init__(self, P, name, window: int | None):
        self.w1, self.b1 = P[f"{name}.fc1.weight"], P[f"{name}.fc1.bias"]
        self.w2, self.b2 = P[f"{name}.fc2.weight"], P[f"{name}.fc2.bias"]
        self.window = window
        C = self.w2.shape[0]
        self.seen = 0
        self.total = np.zeros(C)  # running sum for the causal (global) mode
        self.hist = np.zeros((C, 0))  # last window-1 frames for the windowed mode

    def step(self, x):
        n = x.shape[1]
        if n == 0:
            return x
        if self.window is None:
            cnt = self.seen + np.arange(1, n + 1)
            s = (self.total[:, None] + np.cumsum(x, axis=1)) / cnt
            self.total = self.total + x.sum(axis=1)
        else:
            W, h = self.window, self.hist.shape[1]
            buf = np.concatenate([self.hist, x], axis=1)
            cs = np.concatenate([np.zeros((buf.shape[0], 1)), np.cumsum(buf, axis=1)], axis=1)
            ends = h + np.arange(1, n + 1)
            starts = np.maximum(ends - W, 0)
            cnt = np.minimum(self.seen + np.arange(1, n + 1), W)
            s = (cs[:, ends] - cs[:, starts]) / cnt
            self.hist = buf[:, max(buf.shape[1] - (W - 1), 0):] if W > 1 else buf[:, :0]
        self.seen += n
        _, g = L.se_gate(s[None], self.w1, self.b1, self.w2, self.b2)
        return x * g[0]


class _Block:
    def __init__(self, P, name, repeats: int, window):
        self.P, self.name = P, name
        self.subs = [_Sub(P, f"{name}.sub.{j}", j < repeats - 1) for j in range(repeats)]
        self.se = _SE(P, f"{name}.se", window)
        self.res_queue = np.zeros((P[f"{name}.res.pw"].shape[0], 0))

    def step(self, x, final):
        r = _bn(self.P, f"{self.name}.res.bn", self.P[f"{self.name}.res.pw"] @ x)
        self.res_queue = np.concatenate([self.res_queue, r], axis=1)
        h = x
        for sub in self.subs:
            h = sub.step(h, final)
        h = self.se.step(h)
        n = h.shape[1]
        out = L.relu_forward(h + self.res_queue[:, :n])
        self.res_queue = self.res_queue[:, n:]
        return out


class PoolAccumulator:
    """Running max-shifted sums for attention-weighted mean and std."""

    def __init__(self, channels: int):
        self.m = -np.inf
        self.s0 = 0.0
        self.s1 = np.zeros(channels)
        self.s2 = np.zeros(channels)
        self.frames = 0

    def update(self, h: np.ndarray, e: np.ndarray) -> None:
        if e.size == 0:
            return
        m_new = max(self.m, float(e.max()))
        scale = np.exp(self.m - m_new) if np.isfinite(self.m) else 0.0
        w = np.exp(e - m_new)
        self.s0 = self.s0 * scale + w.sum()
        self.s1 = self.s1 * scale + h @ w
        self.s2 = self.s2 * scale + (h * h) @ w
        self.m = m_new
        self.frames += e.size

    def pooled(self, eps: float = L.POOL_EPS) -> np.ndarray:
        if self.frames == 0:
            raise ValueError("no frames")
        mu = self.s1 / self.s0
        var = self.s2 / self.s0 - mu**2
        return np.concatenate([mu, np.sqrt(np.maximum(var, 0.0) + eps)])


class _Frontend:
    def __init__(self, n_mels: int, stats):
        self.pending = np.zeros(0)
        self.stats = stats
        self.count = 0
        self.sum = np.zeros(n_mels)
        self.sumsq = np.zeros(n_mels)

    def step(self, samples: np.ndarray) -> np.ndarray:
        buf = np.concatenate([self.pending, samples])
        n = n_frames_for(len(buf))
        if n == 0:
            self.pending = buf
            return np.zeros((len(self.sum), 0))
        frames = np.lib.stride_tricks.sliding_window_view(buf, WIN_LENGTH)[::HOP_LENGTH][:n]
        self.pending = buf[n * HOP_LENGTH :]
        x = logmel_frames(frames)
        if self.stats is not None:
            mean, std = self.stats
            return (x - mean[:, None]) / np.maximum(std, STD_FLOOR)[:, None]
        # running per-bin statistics over all frames so far
        cnt = self.count + np.arange(1, n + 1)
        s1 = self.sum[:, None] + np.cumsum(x, axis=1)
        s2 = self.sumsq[:, None] + np.cumsum(x * x, axis=1)
        mean = s1 / cnt
        std = np.maximum(np.sqrt(np.maximum(s2 / cnt - mean**2, 0.0)), STD_FLOOR)
        self.count += n
        self.sum, self.sumsq = s1[:, -1], s2[:, -1]
        return (x - mean) / std


class StreamState:
    """One streaming session over a shared, read-only parameter set."""

    def __init__(self, cfg: ModelConfig, params: ParameterSet, norm_stats=None):
        P = {k: np.asarray(v, dtype=np.float64) for k, v in params.values.items()}
        self.cfg, self.P = cfg, P
        self.model = Model(cfg)
        self.frontend = _Frontend(cfg.n_mels, norm_stats)
        self.layers = [_Sub(P, "prologue", True)]
        self.layers += [_Block(P, f"blocks.{i}", b.repeats, cfg.se_context) for i, b in enumerate(cfg.blocks)]
        self.layers.append(_Sub(P, "epilogue", True))
        self.pool = PoolAccumulator(cfg.epilogue_channels)
        self.frames_in = 0
        self.finished = False

    def _encode(self, feats, final):
        h = feats
        for layer in self.layers:
            h = layer.step(h, final)
        if h.shape[1]:
            _, e = L.attention_scores(h[None], self.P["pool.weight"], self.P["pool.bias"], self.P["pool.v"])
            self.pool.update(h, e[0])

    def logits(self) -> np.ndarray:
        return self.model.decode_eval(self.P, self.pool.pooled()[None])[0]

    def push(self, chunk) -> np.ndarray | None:
        """Feed audio; return interim probabilities once any frame is pooled."""
        if self.finished:
            raise RuntimeError("stream already finalized")
        if isinstance(chunk, AudioBuffer):
            if chunk.sample_rate != SAMPLE_RATE:
                raise ValueError(f"stream expects {SAMPLE_RATE} Hz audio, got {chunk.sample_rate}")
            chunk = chunk.samples
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.size == 0:
            return self.interim()
        feats = self.frontend.step(chunk)
        self.frames_in += feats.shape[1]
        self._encode(feats, final=False)
        return self.interim()

    def interim(self) -> np.ndarray | None:
        if self.pool.frames == 0:
            return None
        return softmax(self.logits())

    def finalize_logits(self) -> np.ndarray:
        if self.finished:
            raise RuntimeError("stream already finalized")
        if self.frames_in == 0:
            raise ValueError("no frames")
        self._encode(np.zeros((self.cfg.n_mels, 0)), final=True)
        self.finished = True
        return self.logits()

    def finalize(self) -> np.ndarray:
        return softmax(self.finalize_logits())


def stream_init(cfg: ModelConfig, params: ParameterSet, norm_stats=None) -> StreamState:
    """New session. ``norm_stats`` = per-bin (mean, std); None uses running statistics."""
    return StreamState(cfg, params, norm_stats)


def stream_push(state: StreamState, chunk) -> np.ndarray | None:
    return state.push(chunk)


def stream_finalize(state: StreamState) -> np.ndarray:
    return state.finalize()
