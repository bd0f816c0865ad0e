"""Encoder-decoder language classifier: forward and exact reverse pass.

Topology::

    prologue   dwsep conv -> BN -> ReLU -> dropout
    block i    R x (dwsep conv -> BN [-> ReLU -> dropout, except last])
               -> SE, plus residual (1x1 conv -> BN), -> ReLU -> dropout
    epilogue   dwsep conv -> BN -> ReLU
    decoder    attentive pooling (2*C_e) -> linear 192 [-> BN -> ReLU]
               -> linear or scaled-cosine head
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .config import ModelConfig
from .params import ParameterSet


@dataclass
class Batch:
    feats: np.ndarray  # (B, n_mels, T), zero beyond each length
    lengths: np.ndarray  # (B,)

    @classmethod
    def from_features(cls, feats: list[np.ndarray]) -> "Batch":
        lengths = np.array([f.shape[1] for f in feats])
        x = np.zeros((len(feats), feats[0].shape[0], int(lengths.max())))
        for i, f in enumerate(feats):
            x[i, :, : f.shape[1]] = f
        return cls(x, lengths)


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    # -- helpers -------------------------------------------------------------

    @staticmethod
    def _as64(params) -> dict[str, np.ndarray]:
        values = params.values if isinstance(params, ParameterSet) else params
        return {k: np.asarray(v, dtype=np.float64) for k, v in values.items()}

    def _bn(self, x, P, store, name, mask, ctx):
        y, c = L.bn_forward(x, P[f"{name}.gamma"], P[f"{name}.beta"], P[f"{name}.running_mean"],
                            P[f"{name}.running_var"], mask=mask, train=ctx["train"])
        if ctx["train"] and ctx["momentum"] > 0 and store is not None:
            _, _, m, n, _, _, mean, var = c
            mom = ctx["momentum"]
            unbiased = var * n / max(n - 1.0, 1.0)
            for key, stat in (("running_mean", mean), ("running_var", unbiased)):
                full = f"{name}.{key}"
                old = store[full]
                store[full] = ((1 - mom) * old.astype(np.float64) + mom * stat).astype(old.dtype)
        return y, c

    def _drop(self, x, p, ctx):
        if not ctx["train"]:
            return x, None
        dm = L.dropout_mask(x.shape, p, ctx["rng"])
        return (x, None) if dm is None else (x * dm, dm)

    def _sub_fwd(self, x, P, store, name, mask, ctx, act, p):
        y, c_conv = L.dwsep_forward(x, P[f"{name}.dw"], P[f"{name}.pw"])
        y, c_bn = self._bn(y, P, store, f"{name}.bn", mask, ctx)
        pre = y
        dm = None
        if act:
            y = L.relu_forward(y)
            y, dm = self._drop(y, p, ctx)
        return y, (c_conv, c_bn, pre, act, dm)

    def _sub_bwd(self, dy, cache, P, name, G):
        c_conv, c_bn, pre, act, dm = cache
        if act:
            if dm is not None:
                dy = dy * dm
            dy = L.relu_backward(dy, pre)
        dy, G[f"{name}.bn.gamma"], G[f"{name}.bn.beta"] = L.bn_backward(dy, c_bn, P[f"{name}.bn.gamma"])
        dx, G[f"{name}.dw"], G[f"{name}.pw"] = L.dwsep_backward(dy, c_conv, P[f"{name}.dw"], P[f"{name}.pw"])
        return dx

    # -- forward -------------------------------------------------------------

    def encode(self, params, batch: Batch, train=False, rng=None, momentum=0.1, _store=None):
        """Encoder output (B, C_e, T) and its cache."""
        cfg = self.cfg
        P = self._as64(params)
        ctx = {"train": train, "rng": rng, "momentum": momentum}
        if train and rng is None:
            ctx["rng"] = np.random.default_rng(0)
        mask = L.length_mask(batch.lengths, batch.feats.shape[2])
        x = batch.feats * mask
        caches = {"mask": mask}
        x, caches["prologue"] = self._sub_fwd(x, P, _store, "prologue", mask, ctx, True, cfg.dropout)
        for i, b in enumerate(cfg.blocks):
            pre = f"blocks.{i}"
            r = L.pwconv_forward(x, P[f"{pre}.res.pw"])
            r, c_rbn = self._bn(r, P, _store, f"{pre}.res.bn", mask, ctx)
            h = x
            subs = []
            for j in range(b.repeats):
                h, c = self._sub_fwd(h, P, _store, f"{pre}.sub.{j}", mask, ctx, j < b.repeats - 1, b.dropout)
                subs.append(c)
            h, c_se = L.se_forward(h, mask, P[f"{pre}.se.fc1.weight"], P[f"{pre}.se.fc1.bias"],
                                   P[f"{pre}.se.fc2.weight"], P[f"{pre}.se.fc2.bias"], cfg.se_context)
            s = h + r
            y = L.relu_forward(s)
            y, dm = self._drop(y, b.dropout, ctx)
            caches[pre] = (x, c_rbn, subs, c_se, s, dm)
            x = y
        x, caches["epilogue"] = self._sub_fwd(x, P, _store, "epilogue", mask, ctx, True, 0.0)
        return x, (P, caches)

    def forward(self, params, batch: Batch, train=False, rng=None, momentum=0.1):
        """Return (logits (B, n_classes), cache).

        In train mode BatchNorm uses masked batch statistics and, when
        ``params`` is a ParameterSet and ``momentum > 0``, updates its
        running statistics in place.
        """
        store = params.values if (train and isinstance(params, ParameterSet)) else None
        enc, (P, caches) = self.encode(params, batch, train, rng, momentum, _store=store)
        mask = caches["mask"]
        pooled, caches["pool"] = L.attn_pool_forward(enc, mask, P["pool.weight"], P["pool.bias"], P["pool.v"])
        emb = L.linear_forward(pooled, P["decoder.emb.weight"], P["decoder.emb.bias"])
        caches["pooled"] = pooled
        ctx = {"train": train, "rng": rng, "momentum": momentum}
        if self.cfg.emb_bn_relu:
            emb_pre, caches["emb_bn"] = self._bn(emb, P, store, "decoder.emb_bn", None, ctx)
            caches["emb_pre"] = emb_pre
            emb = L.relu_forward(emb_pre)
        caches["emb"] = emb
        if self.cfg.head == "linear":
            logits = L.linear_forward(emb, P["decoder.head.weight"], P["decoder.head.bias"])
        else:
            logits, caches["cos"] = L.cosine_forward(emb, P["decoder.head.weight"], self.cfg.cosine_scale)
        return logits, (P, caches)

    def decode_eval(self, P: dict, pooled: np.ndarray) -> np.ndarray:
        """Eval-mode decoder from pooled statistics (B, 2*C_e) to logits."""
        emb = L.linear_forward(pooled, P["decoder.emb.weight"], P["decoder.emb.bias"])
        if self.cfg.emb_bn_relu:
            emb, _ = L.bn_forward(emb, P["decoder.emb_bn.gamma"], P["decoder.emb_bn.beta"],
                                  P["decoder.emb_bn.running_mean"], P["decoder.emb_bn.running_var"])
            emb = L.relu_forward(emb)
        if self.cfg.head == "linear":
            return L.linear_forward(emb, P["decoder.head.weight"], P["decoder.head.bias"])
        return L.cosine_forward(emb, P["decoder.head.weight"], self.cfg.cosine_scale)[0]

    # -- reverse -------------------------------------------------------------

    def backward(self, cache, dlogits=None, demb=None, dhead=None) -> dict[str, np.ndarray]:
        """Gradients of every trainable tensor given upstream gradients.

        ``dlogits`` flows through the head; ``demb`` and ``dhead`` are extra
        gradients on the embedding and head weights (used by margin losses
        that consume the embedding directly).
        """
        if cache is None:
            raise ValueError("backward needs the cache from a forward pass")
        cfg = self.cfg
        P, caches = cache
        G: dict[str, np.ndarray] = {}
        emb = caches["emb"]
        d_emb = np.zeros_like(emb) if demb is None else np.array(demb, dtype=np.float64)
        G["decoder.head.weight"] = np.zeros_like(P["decoder.head.weight"])
        if cfg.head == "linear":
            G["decoder.head.bias"] = np.zeros_like(P["decoder.head.bias"])
        if dlogits is not None:
            if cfg.head == "linear":
                de, dW, db = L.linear_backward(dlogits, emb, P["decoder.head.weight"])
                G["decoder.head.bias"] += db
            else:
                de, dW = L.cosine_backward(dlogits, caches["cos"])
            d_emb += de
            G["decoder.head.weight"] += dW
        if dhead is not None:
            G["decoder.head.weight"] += dhead
        if cfg.emb_bn_relu:
            d_emb = L.relu_backward(d_emb, caches["emb_pre"])
            d_emb, G["decoder.emb_bn.gamma"], G["decoder.emb_bn.beta"] = L.bn_backward(
                d_emb, caches["emb_bn"], P["decoder.emb_bn.gamma"])
        dpooled, G["decoder.emb.weight"], G["decoder.emb.bias"] = L.linear_backward(
            d_emb, caches["pooled"], P["decoder.emb.weight"])
        dx, G["pool.weight"], G["pool.bias"], G["pool.v"] = L.attn_pool_backward(
            dpooled, caches["pool"], P["pool.weight"], P["pool.v"])
        dx = self._sub_bwd(dx, caches["epilogue"], P, "epilogue", G)
        for i in reversed(range(len(cfg.blocks))):
            pre = f"blocks.{i}"
            x_in, c_rbn, subs, c_se, s, dm = caches[pre]
            if dm is not None:
                dx = dx * dm
            ds = L.relu_backward(dx, s)
            dh, G[f"{pre}.se.fc1.weight"], G[f"{pre}.se.fc1.bias"], G[f"{pre}.se.fc2.weight"], \
                G[f"{pre}.se.fc2.bias"] = L.se_backward(ds, c_se, P[f"{pre}.se.fc1.weight"],
                                                        P[f"{pre}.se.fc2.weight"])
            for j in reversed(range(len(subs))):
                dh = self._sub_bwd(dh, subs[j], P, f"{pre}.sub.{j}", G)
            dr, G[f"{pre}.res.bn.gamma"], G[f"{pre}.res.bn.beta"] = L.bn_backward(
                ds, c_rbn, P[f"{pre}.res.bn.gamma"])
            dxr, G[f"{pre}.res.pw"] = L.pwconv_backward(dr, x_in, P[f"{pre}.res.pw"])
            dx = dh + dxr
        self._sub_bwd(dx, caches["prologue"], P, "prologue", G)
        return G


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
