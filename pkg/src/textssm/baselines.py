"""Reference sequence models used for the memory comparison.

Both consume the same ``(V, L, C_in)`` motion plus query vector as
:class:`textssm.model.TmMamba` and emit per-frame scores, so a single
forward/backward harness can measure them side by side.

* :class:`AttentionBaseline`: node-pooled temporal self-attention encoder
  with cross-attention to the query token. Keeps ``L x L`` attention maps for
  backward, so retained memory grows quadratically in ``L``.
* :class:`RecurrentBaseline`: LSTM over node-pooled features; retains a few
  hidden-size vectors per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import FrameScores, Module


def _init(rng, fan_in: int, shape) -> Tensor:
    return ad.parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape))


def sinusoidal_positions(L: int, D: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, D, 2) / D))
    out = np.zeros((L, D))
    out[:, 0::2] = np.sin(pos * rate)
    out[:, 1::2] = np.cos(pos * rate[: D // 2])
    return out


@dataclass
class AttentionConfig:
    D: int = 64
    heads: int = 8
    layers: int = 2
    C_in: int = 3
    query_dim: int | None = None  # defaults to D

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"D={self.D} is not divisible by heads={self.heads}")


class _AttnLayer(Module):
    def __init__(self, D: int, heads: int, rng):
        self.heads = heads
        self.norm1 = ad.parameter(np.ones(D))
        self.W_qkv = _init(rng, D, (D, 3 * D))
        self.W_o = _init(rng, D, (D, D))
        self.norm2 = ad.parameter(np.ones(D))
        self.W_cq = _init(rng, D, (D, D))
        self.W_ckv = _init(rng, D, (D, 2 * D))
        self.W_co = _init(rng, D, (D, D))

    def _split(self, x: Tensor) -> Tensor:
        # (L, D) -> (H, L, dh)
        L, D = x.shape
        return ad.swapaxes(ad.reshape(x, (L, self.heads, D // self.heads)), 0, 1)

    def _merge(self, x: Tensor) -> Tensor:
        H, L, dh = x.shape
        return ad.reshape(ad.swapaxes(x, 0, 1), (L, H * dh))

    def _attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        dh = q.shape[-1]
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        return ad.matmul(ad.softmax(scores, axis=-1), v)

    def __call__(self, x: Tensor, text: Tensor) -> Tensor:
        D = x.shape[-1]
        h = ad.rms_norm(x, self.norm1)
        qkv = ad.linear(h, self.W_qkv)
        q, k, v = (self._split(qkv[:, i * D : (i + 1) * D]) for i in range(3))
        x = ad.add(x, ad.linear(self._merge(self._attend(q, k, v)), self.W_o))
        # cross-attention: frames query the text token(s)
        h = ad.rms_norm(x, self.norm2)
        cq = self._split(ad.linear(h, self.W_cq))
        kv = ad.linear(text, self.W_ckv)
        ck, cv = self._split(kv[:, :D]), self._split(kv[:, D:])
        return ad.add(x, ad.linear(self._merge(self._attend(cq, ck, cv)), self.W_co))


class AttentionBaseline(Module):
    """Temporal transformer encoder on node-averaged features."""

    def __init__(self, config: AttentionConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        D = config.D
        qd = config.query_dim or D
        self.W_embed = _init(rng, config.C_in, (config.C_in, D))
        self.W_text = _init(rng, qd, (qd, D))
        self.layers = [_AttnLayer(D, config.heads, rng) for _ in range(config.layers)]
        self.norm_out = ad.parameter(np.ones(D))
        self.w_head = _init(rng, D, (D, 1))
        self.b_head = ad.parameter(np.zeros(1))

    def __call__(self, motion, q) -> FrameScores:
        motion = np.asarray(motion, dtype=np.float64)
        if motion.ndim != 3:
            raise ValueError(f"expected motion (V, L, C_in), got {motion.shape}")
        V, L, _ = motion.shape
        x = ad.linear(ad.as_tensor(motion.mean(axis=0)), self.W_embed)
        x = ad.add(x, sinusoidal_positions(L, self.config.D))
        text = ad.linear(ad.as_tensor(np.asarray(q, dtype=np.float64).reshape(1, -1)), self.W_text)
        for layer in self.layers:
            x = layer(x, text)
        logits = ad.reshape(ad.linear(ad.rms_norm(x, self.norm_out), self.w_head, self.b_head), (L,))
        return FrameScores(ad.sigmoid(logits), logits)


@dataclass
class RecurrentConfig:
    hidden: int = 32
    C_in: int = 3
    query_dim: int = 64


class RecurrentBaseline(Module):
    """Single-layer LSTM; the query is appended to every input frame."""

    def __init__(self, config: RecurrentConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        H = config.hidden
        n_in = config.C_in + config.query_dim
        self.W_x = _init(rng, n_in, (n_in, 4 * H))
        self.W_h = _init(rng, H, (H, 4 * H))
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0  # forget-gate bias
        self.b = ad.parameter(b)
        self.w_head = _init(rng, H, (H, 1))
        self.b_head = ad.parameter(np.zeros(1))

    def __call__(self, motion, q) -> FrameScores:
        motion = np.asarray(motion, dtype=np.float64)
        V, L, _ = motion.shape
        H = self.config.hidden
        q = np.asarray(q, dtype=np.float64).reshape(1, -1)
        inp = np.concatenate([motion.mean(axis=0), np.repeat(q, L, axis=0)], axis=1)
        gx = ad.linear(ad.as_tensor(inp), self.W_x, self.b)  # (L, 4H), all steps at once
        h = ad.as_tensor(np.zeros((1, H)))
        c = ad.as_tensor(np.zeros((1, H)))
        outs = []
        for t in range(L):
            z = ad.add(gx[t : t + 1], ad.matmul(h, self.W_h))
            i = ad.sigmoid(z[:, :H])
            f = ad.sigmoid(z[:, H : 2 * H])
            g = ad.tanh(z[:, 2 * H : 3 * H])
            o = ad.sigmoid(z[:, 3 * H :])
            c = ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
            outs.append(h)
        hs = ad.concat(outs, axis=0)
        logits = ad.reshape(ad.linear(hs, self.w_head, self.b_head), (L,))
        return FrameScores(ad.sigmoid(logits), logits)
