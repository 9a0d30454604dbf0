"""Discrete vocabulary learning for serialized vessel trees.

A transformer encoder maps each 19-attribute node to 16 latent vectors of
dimension 64, an element-wise nearest-neighbor quantizer snaps them onto a
learned codebook, and a symmetric transformer decoder reconstructs the
node attributes. Training objective: L1 reconstruction + codebook pull +
commitment, with a straight-through estimator across the quantizer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from . import layers
from .tree import ATTR_DIM


class _VqVaeNet:
    """Parameter container plus forward passes; one tree at a time."""

    def __init__(self, d_model=256, n_layers=2, heads=4, tokens_per_node=16,
                 code_dim=64, codebook_size=256, seed=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.heads = heads
        self.tokens_per_node = tokens_per_node
        self.code_dim = code_dim
        self.codebook_size = codebook_size
        rng = np.random.default_rng(seed)
        self.embed = layers.Linear(rng, ATTR_DIM, d_model, "enc.embed")
        self.enc_blocks = [layers.Block(rng, d_model, heads, f"enc.block{i}")
                           for i in range(n_layers)]
        self.enc_head = layers.Linear(rng, d_model, tokens_per_node * code_dim,
                                      "enc.head")
        self.codebook = ad.param(
            rng.uniform(-1.0 / codebook_size, 1.0 / codebook_size,
                        size=(codebook_size, code_dim)))
        self.dec_in = layers.Linear(rng, tokens_per_node * code_dim, d_model,
                                    "dec.embed")
        self.dec_blocks = [layers.Block(rng, d_model, heads, f"dec.block{i}")
                           for i in range(n_layers)]
        self.dec_head = layers.Linear(rng, d_model, ATTR_DIM, "dec.head")

    def params(self):
        parts = [self.embed, *self.enc_blocks, self.enc_head,
                 self.dec_in, *self.dec_blocks, self.dec_head]
        out = layers.collect_params(parts)
        out["codebook"] = self.codebook
        return out

    def config(self):
        return {"d_model": self.d_model, "n_layers": self.n_layers,
                "heads": self.heads, "tokens_per_node": self.tokens_per_node,
                "code_dim": self.code_dim, "codebook_size": self.codebook_size}

    @classmethod
    def from_checkpoint(cls, path):
        arrays, meta = ad.load_checkpoint(path)
        net = cls(**meta["config"], seed=0)
        layers.load_params(net.params(), arrays)
        return net

    def save(self, path, extra_meta=None):
        meta = {"kind": "vqvae", "config": self.config()}
        meta.update(extra_meta or {})
        ad.save_checkpoint(path, {k: p.data for k, p in self.params().items()},
                           meta=meta)

    # ------------------------------------------------------------- forwards

    def encode(self, seq, check_range=True):
        """Continuous latents for a (T, 19) sequence: a (T*16, 64) tensor."""
        x = np.asarray(seq, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != ATTR_DIM:
            raise ValueError(f"expected (T, {ATTR_DIM}) input, got {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("empty sequence")
        if check_range and np.abs(x).max() > 1.0 + 1e-6:
            raise ValueError(
                f"attributes must lie in [-1, 1]; max abs = {np.abs(x).max():.4g}")
        T = x.shape[0]
        h = self.embed(ad.constant(x))
        h = ad.add(h, ad.constant(layers.sinusoidal_positions(T, self.d_model)))
        for block in self.enc_blocks:
            h = block(h)
        z = self.enc_head(h)  # (T, 16*64)
        return ad.reshape(z, (T * self.tokens_per_node, self.code_dim))

    def decode(self, z_q):
        """Reconstruct (T, 19) attributes from (T*16, 64) quantized latents."""
        rows = z_q.data.shape[0] if isinstance(z_q, ad.Tensor) else len(z_q)
        if rows % self.tokens_per_node:
            raise ValueError(
                f"latent row count {rows} not divisible by {self.tokens_per_node}")
        if not isinstance(z_q, ad.Tensor):
            z_q = ad.constant(np.asarray(z_q, dtype=np.float64))
        T = rows // self.tokens_per_node
        h = ad.reshape(z_q, (T, self.tokens_per_node * self.code_dim))
        h = self.dec_in(h)
        h = ad.add(h, ad.constant(layers.sinusoidal_positions(T, self.d_model)))
        for block in self.dec_blocks:
            h = block(h)
        return self.dec_head(h)

    def decode_indices(self, indices):
        """Codebook lookup + decode for a flat index array."""
        indices = np.asarray(indices, dtype=np.intp)
        if indices.size and (indices.min() < 0 or indices.max() >= self.codebook_size):
            raise ValueError(
                f"index out of range for codebook of size {self.codebook_size}")
        return self.decode(ad.constant(self.codebook.data[indices]))


def quantize(z_hat, codebook):
    """Nearest codebook entry per row (Euclidean); ties go to the lowest index.

    Accepts raw arrays; returns (z_q array, index array).
    """
    z = z_hat.data if isinstance(z_hat, ad.Tensor) else np.asarray(z_hat, float)
    cb = codebook.data if isinstance(codebook, ad.Tensor) else np.asarray(codebook, float)
    d2 = ((z[:, None, :] - cb[None, :, :]) ** 2).sum(axis=-1)
    indices = d2.argmin(axis=1)  # argmin returns the first (lowest) minimizer
    return cb[indices], indices


def vq_loss(v, v_hat, z_hat, z_q, commitment):
    """Reconstruction L1 + codebook pull + weighted commitment."""
    recon = ad.l1_loss(v_hat, v if isinstance(v, ad.Tensor) else ad.constant(v))
    codebook_term = ad.mse_loss(ad.stop_gradient(z_hat), z_q)
    commit_term = ad.mse_loss(z_hat, ad.stop_gradient(z_q))
    return ad.add(ad.add(recon, codebook_term), ad.scale(commit_term, commitment))


def forward_loss(net, seq, commitment, frozen_indices=None):
    """One training forward pass; returns (loss, indices, recon_l1).

    `frozen_indices` bypasses the nearest-neighbor search (gradient checks
    perturb parameters, which must not flip assignments).
    """
    z_hat = net.encode(seq)
    if frozen_indices is None:
        _, indices = quantize(z_hat, net.codebook)
    else:
        indices = np.asarray(frozen_indices, dtype=np.intp)
    z_q = ad.gather_rows(net.codebook, indices)
    v_hat = net.decode(ad.straight_through(z_hat, z_q))
    loss = vq_loss(ad.constant(seq), v_hat, z_hat, z_q, commitment)
    recon = float(np.abs(v_hat.data - seq).mean())
    return loss, indices, recon


def codebook_stats(counts):
    """Usage histogram -> (perplexity, dead entry mask)."""
    total = counts.sum()
    if total == 0:
        return 0.0, np.ones(len(counts), dtype=bool)
    p = counts / total
    nz = p > 0
    perplexity = float(np.exp(-(p[nz] * np.log(p[nz])).sum()))
    return perplexity, counts == 0


def train_vqvae(dataset, net, epochs, lr=1e-4, beta1=0.9, beta2=0.999,
                commitment=0.25, seed=0, reseed_dead=True, lr_decay=1.0,
                log_every=0, log_fn=print):
    """Batch-1 training over serialized trees; returns per-epoch history.

    Dead codebook entries (unused across an epoch) are re-seeded to random
    encoder outputs from that epoch, which keeps the vocabulary alive.
    `lr_decay` multiplies the learning rate once per epoch; the L1 term has
    sign-valued gradients, so overfit runs plateau at the lr scale unless
    it decays.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    opt = ad.Adam(net.params(), lr=lr, beta1=beta1, beta2=beta2)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        counts = np.zeros(net.codebook_size)
        epoch_l1 = []
        sample_latents = None
        for step, i in enumerate(order):
            seq = dataset[i]
            opt.zero_grad()
            with ad.Tape() as tape:
                loss, indices, recon = forward_loss(net, seq, commitment)
                if not np.isfinite(loss.data):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, step {step}, tree {i}")
                tape.backward(loss)
            opt.step()
            np.add.at(counts, indices, 1)
            epoch_l1.append(recon)
            if sample_latents is None:
                z = net.encode(seq, check_range=False)
                sample_latents = z.data
        perplexity, dead = codebook_stats(counts)
        if reseed_dead and dead.any() and sample_latents is not None:
            picks = rng.integers(0, sample_latents.shape[0], size=int(dead.sum()))
            net.codebook.data[dead] = sample_latents[picks]
        history.append({"epoch": epoch, "mean_l1": float(np.mean(epoch_l1)),
                        "perplexity": perplexity, "dead": int(dead.sum())})
        opt.lr *= lr_decay
        if log_every and epoch % log_every == 0:
            h = history[-1]
            log_fn(f"epoch {epoch}: L1 {h['mean_l1']:.5f} "
                   f"perplexity {h['perplexity']:.1f} dead {h['dead']}")
    return history


class VesselTokenizer(BaseEstimator, TransformerMixin):
    """Estimator facade: fit a VQ-VAE, transform trees to token indices.

    X is a list of serialized trees, each a (T, 19) float array with
    attributes in [-1, 1]. transform() yields flat int arrays of length
    16*T; inverse_transform() maps them back to attribute sequences.
    """

    def __init__(self, d_model=256, n_layers=2, heads=4, tokens_per_node=16,
                 code_dim=64, codebook_size=256, commitment=0.25, lr=1e-4,
                 beta1=0.9, beta2=0.999, epochs=100, lr_decay=1.0, seed=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.heads = heads
        self.tokens_per_node = tokens_per_node
        self.code_dim = code_dim
        self.codebook_size = codebook_size
        self.commitment = commitment
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epochs = epochs
        self.lr_decay = lr_decay
        self.seed = seed

    def fit(self, X, y=None):
        self.net_ = _VqVaeNet(self.d_model, self.n_layers, self.heads,
                              self.tokens_per_node, self.code_dim,
                              self.codebook_size, seed=self.seed)
        self.history_ = train_vqvae(
            list(X), self.net_, epochs=self.epochs, lr=self.lr,
            beta1=self.beta1, beta2=self.beta2, commitment=self.commitment,
            lr_decay=self.lr_decay, seed=self.seed)
        return self

    def transform(self, X):
        self._check_fitted()
        out = []
        for seq in X:
            z_hat = self.net_.encode(seq)
            _, indices = quantize(z_hat, self.net_.codebook)
            out.append(indices)
        return out

    def inverse_transform(self, X):
        self._check_fitted()
        return [self.net_.decode_indices(idx).data for idx in X]

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise RuntimeError("VesselTokenizer is not fitted")
