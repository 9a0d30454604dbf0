"""Transformer building blocks on top of the autodiff core.

Pre-norm blocks, GELU MLPs, multi-head self-attention with an optional
causal mask. Sequences are unbatched (T, d) — training runs one tree at a
time throughout.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def sinusoidal_positions(n, d):
    """Fixed sin/cos position encoding, shape (n, d)."""
    pos = np.arange(n)[:, None]
    dim = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * dim / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class Linear:
    def __init__(self, rng, d_in, d_out, name, w_std=0.02):
        self.w = ad.param(rng.normal(0.0, w_std, size=(d_in, d_out)))
        self.b = ad.param(np.zeros(d_out))
        self.name = name

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


class LayerNorm:
    def __init__(self, d, name):
        self.gain = ad.param(np.ones(d))
        self.bias = ad.param(np.zeros(d))
        self.name = name

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)

    def params(self):
        return {f"{self.name}.gain": self.gain, f"{self.name}.bias": self.bias}


class SelfAttention:
    def __init__(self, rng, d_model, heads, name, causal=False):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.causal = causal
        self.qkv = Linear(rng, d_model, 3 * d_model, f"{name}.qkv")
        self.proj = Linear(rng, d_model, d_model, f"{name}.proj")

    def __call__(self, x):
        T = x.data.shape[0]
        d, h, dh = self.d_model, self.heads, self.d_head
        qkv = self.qkv(x)
        parts = []
        for i in range(3):
            p = ad.slice_last(qkv, i * d, (i + 1) * d)
            p = ad.transpose(ad.reshape(p, (T, h, dh)), (1, 0, 2))  # (h, T, dh)
            parts.append(p)
        q, k, v = parts
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        if self.causal:
            mask = np.triu(np.full((T, T), -1e30), k=1)
            scores = ad.add(scores, ad.constant(mask))
        att = ad.softmax(scores, axis=-1)
        out = ad.matmul(att, v)  # (h, T, dh)
        out = ad.reshape(ad.transpose(out, (1, 0, 2)), (T, d))
        return self.proj(out)

    def params(self):
        return {**self.qkv.params(), **self.proj.params()}


class Block:
    """Pre-norm transformer block: attention then GELU MLP, both residual."""

    def __init__(self, rng, d_model, heads, name, causal=False, mlp_ratio=4):
        self.ln1 = LayerNorm(d_model, f"{name}.ln1")
        self.attn = SelfAttention(rng, d_model, heads, f"{name}.attn", causal=causal)
        self.ln2 = LayerNorm(d_model, f"{name}.ln2")
        self.fc1 = Linear(rng, d_model, mlp_ratio * d_model, f"{name}.fc1")
        self.fc2 = Linear(rng, mlp_ratio * d_model, d_model, f"{name}.fc2")

    def __call__(self, x):
        x = ad.add(x, self.attn(self.ln1(x)))
        x = ad.add(x, self.fc2(ad.gelu(self.fc1(self.ln2(x)))))
        return x

    def params(self):
        out = {}
        for part in (self.ln1, self.attn, self.ln2, self.fc1, self.fc2):
            out.update(part.params())
        return out


def collect_params(parts):
    out = {}
    for part in parts:
        out.update(part.params())
    return out


def load_params(params, arrays):
    """Copy checkpoint arrays into an existing named parameter dict."""
    for name, tensor in params.items():
        if name not in arrays:
            raise KeyError(f"checkpoint missing tensor '{name}'")
        if arrays[name].shape != tensor.data.shape:
            raise ValueError(
                f"shape mismatch for '{name}': checkpoint {arrays[name].shape} "
                f"vs model {tensor.data.shape}")
        tensor.data = np.array(arrays[name], dtype=np.float64)
