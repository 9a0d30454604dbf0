"""Decoder-only transformer over codebook indices.

Vocabulary is the VQ-VAE codebook plus START/END/PAD specials. Training is
teacher-forced next-token cross-entropy, batch 1. Sampling is stochastic
beam search with a KV-cached pure-numpy forward path: each beam samples one
continuation (temperature / top-k), beams are ranked by cumulative
log-probability, and a beam that emits END freezes. temperature 0 with a
single beam degenerates to greedy argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import layers
from . import tree as vtree


@dataclass(frozen=True)
class SamplerConfig:
    beams: int = 1
    temperature: float = 1.0
    top_k: int = 0          # 0 disables the cutoff
    max_tokens: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.beams < 1:
            raise ValueError("beams must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class GenerationResult:
    tokens: np.ndarray      # includes START and, unless truncated, END
    logprob: float
    truncated: bool


class _GptNet:
    def __init__(self, codebook_size=256, context=4096, n_layers=4, heads=4,
                 d_model=256, dropout=0.0, seed=0):
        self.codebook_size = codebook_size
        self.vocab = codebook_size + 3
        self.start_token = codebook_size
        self.end_token = codebook_size + 1
        self.pad_token = codebook_size + 2
        self.context = context
        self.n_layers = n_layers
        self.heads = heads
        self.d_model = d_model
        self.dropout = dropout
        rng = np.random.default_rng(seed)
        self.wte = ad.param(rng.normal(0, 0.02, size=(self.vocab, d_model)))
        self.wpe = ad.param(rng.normal(0, 0.02, size=(context, d_model)))
        self.blocks = [layers.Block(rng, d_model, heads, f"block{i}", causal=True)
                       for i in range(n_layers)]
        self.ln_f = layers.LayerNorm(d_model, "ln_f")
        self.head = layers.Linear(rng, d_model, self.vocab, "head")

    def params(self):
        out = {"wte": self.wte, "wpe": self.wpe}
        out.update(layers.collect_params(self.blocks))
        out.update(self.ln_f.params())
        out.update(self.head.params())
        return out

    def config(self):
        return {"codebook_size": self.codebook_size, "context": self.context,
                "n_layers": self.n_layers, "heads": self.heads,
                "d_model": self.d_model, "dropout": self.dropout}

    @classmethod
    def from_checkpoint(cls, path):
        arrays, meta = ad.load_checkpoint(path)
        net = cls(**meta["config"], seed=0)
        layers.load_params(net.params(), arrays)
        return net

    def save(self, path, extra_meta=None):
        meta = {"kind": "gpt", "config": self.config()}
        meta.update(extra_meta or {})
        ad.save_checkpoint(path, {k: p.data for k, p in self.params().items()},
                           meta=meta)

    def forward(self, tokens, dropout_rng=None):
        """Logits (T, vocab) for an int token sequence."""
        tokens = np.asarray(tokens, dtype=np.intp)
        T = tokens.size
        if T >= self.context + 1:
            raise ValueError(f"sequence length {T} exceeds context {self.context}")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise ValueError(f"token id out of vocabulary (size {self.vocab})")
        x = ad.add(ad.gather_rows(self.wte, tokens),
                   ad.gather_rows(self.wpe, np.arange(T)))
        for block in self.blocks:
            x = block(x)
            if self.dropout > 0 and dropout_rng is not None:
                keep = (dropout_rng.random(x.data.shape) >= self.dropout)
                x = ad.mul(x, ad.constant(keep / (1.0 - self.dropout)))
        x = self.ln_f(x)
        return self.head(x)


def next_token_logits(net, prefix):
    """Score vector over the vocabulary for the next position."""
    prefix = np.asarray(prefix, dtype=np.intp)
    if prefix.size >= net.context:
        raise ValueError(f"prefix length {prefix.size} exceeds context {net.context}")
    logits = net.forward(prefix)
    return logits.data[-1]


def sequence_logprob(net, tokens):
    """Sum of per-step log p(token | prefix) for positions 1..T-1."""
    logits = net.forward(tokens[:-1])
    logp = ad.log_softmax(logits, axis=-1).data
    targets = np.asarray(tokens[1:], dtype=np.intp)
    return float(logp[np.arange(targets.size), targets].sum())


def with_specials(indices, net):
    return np.concatenate([[net.start_token], np.asarray(indices, dtype=np.intp),
                           [net.end_token]])


def strip_specials(tokens, net):
    tokens = np.asarray(tokens, dtype=np.intp)
    specials = {net.start_token, net.end_token, net.pad_token}
    return np.array([t for t in tokens if t not in specials], dtype=np.intp)


def train_gpt(corpus, net, epochs, lr=1e-4, beta1=0.9, beta2=0.999, seed=0,
              log_every=0, log_fn=print, optimizer=None):
    """Teacher-forced training over START/END-wrapped token sequences."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    for i, seq in enumerate(corpus):
        seq = np.asarray(seq)
        if seq.max() >= net.vocab or seq.min() < 0:
            raise ValueError(f"sequence {i} contains token outside vocab "
                             f"(size {net.vocab})")
        if seq.size > net.context:
            raise ValueError(f"sequence {i} of length {seq.size} exceeds "
                             f"context {net.context}")
    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng(seed + 1) if net.dropout > 0 else None
    opt = optimizer or ad.Adam(net.params(), lr=lr, beta1=beta1, beta2=beta2)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        losses = []
        for step, i in enumerate(order):
            seq = np.asarray(corpus[i], dtype=np.intp)
            opt.zero_grad()
            with ad.Tape() as tape:
                logits = net.forward(seq[:-1], dropout_rng=drop_rng)
                loss = ad.cross_entropy(logits, seq[1:])
                if not np.isfinite(loss.data):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, step {step}")
                tape.backward(loss)
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "loss": mean_loss,
                        "perplexity": float(np.exp(mean_loss))})
        if log_every and epoch % log_every == 0:
            log_fn(f"epoch {epoch}: loss {mean_loss:.5f} "
                   f"perplexity {np.exp(mean_loss):.3f}")
    return history


def perplexity(net, corpus):
    """Teacher-forced perplexity of a corpus under the model."""
    total, count = 0.0, 0
    for seq in corpus:
        seq = np.asarray(seq, dtype=np.intp)
        total += -sequence_logprob(net, seq)
        count += seq.size - 1
    return float(np.exp(total / count))


# ----------------------------------------------------------- cached inference

def _gelu(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _ln(x, gain, bias, eps=1e-5):
    mu = x.mean()
    var = x.var()
    return (x - mu) / np.sqrt(var + eps) * gain + bias


class _KvCache:
    """Per-beam incremental decoder state over raw weight arrays."""

    def __init__(self, net):
        self.net = net
        self.w = {k: p.data for k, p in net.params().items()}
        h, dh = net.heads, net.d_model // net.heads
        self.k = np.zeros((net.n_layers, net.context, h, dh))
        self.v = np.zeros((net.n_layers, net.context, h, dh))
        self.t = 0

    def clone(self):
        other = _KvCache.__new__(_KvCache)
        other.net = self.net
        other.w = self.w
        other.k = self.k.copy()
        other.v = self.v.copy()
        other.t = self.t
        return other

    def advance(self, token):
        """Feed one token; returns next-token logits."""
        net, w = self.net, self.w
        h, d = net.heads, net.d_model
        dh = d // h
        pos = self.t
        if pos >= net.context:
            raise ValueError("context exhausted")
        x = w["wte"][token] + w["wpe"][pos]
        for li in range(net.n_layers):
            p = f"block{li}"
            y = _ln(x, w[f"{p}.ln1.gain"], w[f"{p}.ln1.bias"])
            qkv = y @ w[f"{p}.attn.qkv.w"] + w[f"{p}.attn.qkv.b"]
            q = qkv[:d].reshape(h, dh)
            self.k[li, pos] = qkv[d:2 * d].reshape(h, dh)
            self.v[li, pos] = qkv[2 * d:].reshape(h, dh)
            K = self.k[li, :pos + 1]   # (t, h, dh)
            V = self.v[li, :pos + 1]
            scores = np.einsum("hd,thd->ht", q, K) / np.sqrt(dh)
            scores -= scores.max(axis=1, keepdims=True)
            att = np.exp(scores)
            att /= att.sum(axis=1, keepdims=True)
            out = np.einsum("ht,thd->hd", att, V).reshape(d)
            x = x + out @ w[f"{p}.attn.proj.w"] + w[f"{p}.attn.proj.b"]
            y = _ln(x, w[f"{p}.ln2.gain"], w[f"{p}.ln2.bias"])
            y = _gelu(y @ w[f"{p}.fc1.w"] + w[f"{p}.fc1.b"])
            x = x + y @ w[f"{p}.fc2.w"] + w[f"{p}.fc2.b"]
        x = _ln(x, w["ln_f.gain"], w["ln_f.bias"])
        self.t = pos + 1
        return x @ w["head.w"] + w["head.b"]


class _Beam:
    __slots__ = ("tokens", "logprob", "finished", "cache", "logits")

    def __init__(self, tokens, logprob, finished, cache, logits):
        self.tokens = tokens
        self.logprob = logprob
        self.finished = finished
        self.cache = cache
        self.logits = logits


def _sample_step(logits, temperature, top_k, rng):
    """Pick a token and its log-probability under the full distribution."""
    m = logits.max()
    logp = logits - m - np.log(np.exp(logits - m).sum())
    if temperature == 0:
        tok = int(logits.argmax())
        return tok, float(logp[tok])
    scaled = logits / temperature
    if top_k and top_k < logits.size:
        cutoff = np.sort(scaled)[-top_k]
        scaled = np.where(scaled >= cutoff, scaled, -np.inf)
    sm = scaled - scaled.max()
    p = np.exp(sm)
    p /= p.sum()
    tok = int(rng.choice(logits.size, p=p))
    return tok, float(logp[tok])


def generate(net, sampler):
    """Stochastic beam search from the START token; deterministic per seed."""
    if sampler.max_tokens > net.context:
        raise ValueError("max_tokens exceeds the model context")
    rng = np.random.default_rng(sampler.seed)
    root = _KvCache(net)
    logits = root.advance(net.start_token)
    beams = []
    for _ in range(sampler.beams):
        cache = root.clone()
        beams.append(_Beam([net.start_token], 0.0, False, cache, logits))
    for _ in range(sampler.max_tokens - 1):
        if all(b.finished for b in beams):
            break
        candidates = []
        for b in beams:
            if b.finished:
                candidates.append(b)
                continue
            tok, lp = _sample_step(b.logits, sampler.temperature,
                                   sampler.top_k, rng)
            new_tokens = b.tokens + [tok]
            finished = tok == net.end_token
            new_logits = None if finished else b.cache.advance(tok)
            candidates.append(_Beam(new_tokens, b.logprob + lp, finished,
                                    b.cache, new_logits))
        candidates.sort(key=lambda b: -b.logprob)
        beams = candidates[:sampler.beams]
    finished = [b for b in beams if b.finished]
    if finished:
        best = max(finished, key=lambda b: b.logprob)
        return GenerationResult(np.array(best.tokens, dtype=np.intp),
                                best.logprob, truncated=False)
    best = max(beams, key=lambda b: b.logprob)
    return GenerationResult(np.array(best.tokens, dtype=np.intp),
                            best.logprob, truncated=True)


def tokens_to_tree(tokens, gpt_net, vq_net, null_threshold=vtree.NULL_THRESHOLD,
                   pad_policy="reject"):
    """Decode a generated token sequence into a vessel tree.

    Strips specials, requires length divisible by tokens_per_node (or pads
    with the codebook entry nearest to zero when pad_policy='pad'), then
    runs codebook lookup -> decoder -> thresholded deserialization.
    """
    stripped = strip_specials(tokens, gpt_net)
    if stripped.size == 0:
        raise ValueError("no codebook tokens in sequence")
    if stripped.size and stripped.max() >= vq_net.codebook_size:
        raise ValueError(f"token {int(stripped.max())} outside codebook "
                         f"of size {vq_net.codebook_size}")
    tpn = vq_net.tokens_per_node
    rem = stripped.size % tpn
    if rem:
        if pad_policy == "reject":
            raise ValueError(
                f"sequence length {stripped.size} not divisible by {tpn}")
        null_idx = int(np.linalg.norm(vq_net.codebook.data, axis=1).argmin())
        stripped = np.concatenate([stripped, np.full(tpn - rem, null_idx)])
    attrs = vq_net.decode_indices(stripped).data
    return vtree.deserialize(attrs, null_threshold=null_threshold)


class VesselSequenceModel(BaseEstimator):
    """Estimator facade over the token-sequence transformer.

    fit() takes raw codebook-index arrays (no specials; they are added
    here); sample() draws new index arrays via beam sampling.
    """

    def __init__(self, codebook_size=256, context=4096, n_layers=4, heads=4,
                 d_model=256, dropout=0.0, lr=1e-4, beta1=0.9, beta2=0.999,
                 epochs=100, seed=0):
        self.codebook_size = codebook_size
        self.context = context
        self.n_layers = n_layers
        self.heads = heads
        self.d_model = d_model
        self.dropout = dropout
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y=None):
        self.net_ = _GptNet(self.codebook_size, self.context, self.n_layers,
                            self.heads, self.d_model, self.dropout,
                            seed=self.seed)
        corpus = [with_specials(seq, self.net_) for seq in X]
        self.history_ = train_gpt(corpus, self.net_, epochs=self.epochs,
                                  lr=self.lr, beta1=self.beta1,
                                  beta2=self.beta2, seed=self.seed)
        return self

    def sample(self, n_samples=1, beams=1, temperature=1.0, top_k=0,
               max_tokens=2048, seed=0):
        if not hasattr(self, "net_"):
            raise RuntimeError("VesselSequenceModel is not fitted")
        out = []
        for i in range(n_samples):
            cfg = SamplerConfig(beams=beams, temperature=temperature,
                                top_k=top_k, max_tokens=max_tokens,
                                seed=seed + i)
            out.append(generate(self.net_, cfg))
        return out
