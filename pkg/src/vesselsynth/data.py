"""Corpus management and synthetic vessel-tree generation.

Ingests directories of vessel-tree JSON, grows desk-scale synthetic trees
(smooth random-walk branches, Murray-style radius decay at bifurcations),
and produces seeded train/val splits that keep augmented variants next to
their source tree.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from . import tree as vtree
from .tree import RADII_COUNT, VesselNode, VesselTree


class EmptyCorpusError(ValueError):
    """No valid trees were found or produced."""


@dataclass
class Corpus:
    """Trees with ids, provenance tags, and enforced height cap."""

    trees: list
    ids: list
    tags: list                  # real | synthetic | augmented
    height_cap: int = 20

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("corpus ids must be unique")
        for tid, t in zip(self.ids, self.trees):
            if t.height() > self.height_cap:
                raise ValueError(f"tree {tid} exceeds height cap "
                                 f"{self.height_cap}")

    def __len__(self):
        return len(self.trees)


def load_corpus(path, height_cap=20, tag="real", normalize=True):
    """Load every tree JSON under a directory into a validated corpus.

    Malformed files are skipped with a warning and counted in the summary;
    trees taller than the cap are trimmed by dropping deep subtrees.
    """
    from pathlib import Path

    files = sorted(Path(path).glob("*.json"))
    trees, ids, tags, skipped = [], [], [], []
    for f in files:
        try:
            t = vtree.load_json(f)
            if t.root is None:
                raise ValueError("empty tree")
            t = vtree.trim_height(t, height_cap)
            if normalize:
                t = vtree.normalize(t)
            # every corpus tree must survive the serialization roundtrip
            vtree.deserialize(vtree.serialize(t))
        except (ValueError, KeyError, TypeError) as exc:
            skipped.append((f.name, str(exc)))
            continue
        trees.append(t)
        ids.append(f.stem)
        tags.append(tag)
    if skipped:
        summary = "; ".join(f"{name}: {why}" for name, why in skipped)
        warnings.warn(f"skipped {len(skipped)} malformed file(s): {summary}")
    if not trees:
        raise EmptyCorpusError(f"no valid trees under {path}")
    return Corpus(trees, ids, tags, height_cap=height_cap)


# ------------------------------------------------------------------ synthesis

@dataclass(frozen=True)
class SynthConfig:
    max_depth: int = 3
    nodes_per_branch: tuple = (3, 6)    # inclusive range
    bifurcation_prob: float = 0.7
    radius_decay: float = 2.0 ** (-1.0 / 3.0)   # Murray-style ratio
    tortuosity_amp: float = 0.15
    root_radius: float = 1.0
    step: float = 1.0
    ellipticity: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.bifurcation_prob <= 1.0:
            raise ValueError("bifurcation_prob must be in [0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


def _section_radii(rng, radius, ellipticity):
    theta = 2.0 * np.pi * np.arange(RADII_COUNT) / RADII_COUNT
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ecc = rng.uniform(0.0, ellipticity)
    return radius * (1.0 + ecc * np.cos(2.0 * theta + phase))


def _grow_branch(rng, cfg, start, direction, radius):
    """A chain of nodes along a low-pass filtered random walk."""
    n = int(rng.integers(cfg.nodes_per_branch[0], cfg.nodes_per_branch[1] + 1))
    nodes = []
    pos = start.copy()
    d = direction / np.linalg.norm(direction)
    for _ in range(n):
        nodes.append(VesselNode(pos.copy(),
                                _section_radii(rng, radius, cfg.ellipticity)))
        noise = rng.normal(0.0, cfg.tortuosity_amp, size=3)
        d = d + noise - (noise @ d) * d * 0.5
        d /= np.linalg.norm(d)
        pos = pos + cfg.step * d
    for a, b in zip(nodes, nodes[1:]):
        a.left = b
    return nodes, pos, d


def _split_directions(rng, direction):
    # two child directions spread symmetrically around the parent heading
    perp = rng.normal(size=3)
    perp -= (perp @ direction) * direction
    perp /= np.linalg.norm(perp)
    ang = rng.uniform(np.pi / 8, np.pi / 4)
    a = np.cos(ang) * direction + np.sin(ang) * perp
    b = np.cos(ang) * direction - np.sin(ang) * perp
    return a, b


def synth_tree(cfg, seed=None):
    """Grow one synthetic vessel tree; same (cfg, seed) -> identical tree."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)

    def grow(start, direction, radius, depth):
        nodes, end, d = _grow_branch(rng, cfg, start, direction, radius)
        if depth < cfg.max_depth and rng.random() < cfg.bifurcation_prob:
            da, db = _split_directions(rng, d)
            r = radius * cfg.radius_decay
            nodes[-1].left = grow(end + cfg.step * da, da, r, depth + 1)
            nodes[-1].right = grow(end + cfg.step * db, db, r, depth + 1)
        return nodes[0]

    direction = np.array([0.0, 0.0, 1.0])
    root = grow(np.zeros(3), direction, cfg.root_radius, 1)
    return VesselTree(root)


def synth_corpus(cfg, n, height_cap=20):
    """n seeded synthetic trees with per-tree derived seeds."""
    if n < 1:
        raise ValueError("need n >= 1")
    trees = [vtree.trim_height(synth_tree(cfg, seed=cfg.seed + i), height_cap)
             for i in range(n)]
    ids = [f"synth{i:04d}" for i in range(n)]
    return Corpus(trees, ids, ["synthetic"] * n, height_cap=height_cap)


# ------------------------------------------------------- augmentation, splits

def augment_corpus(corpus, seed=0):
    """Corpus extended with resampled/rotated variants of every tree.

    Variant ids are `source/augK` so splits can keep them co-located.
    """
    trees = list(corpus.trees)
    ids = list(corpus.ids)
    tags = list(corpus.tags)
    for tid, t in zip(corpus.ids, corpus.trees):
        tseed = int(np.random.default_rng([seed, zlib.crc32(tid.encode())])
                    .integers(2**31))
        for k, var in enumerate(vtree.augment(t, tseed)):
            trees.append(var)
            ids.append(f"{tid}/aug{k}")
            tags.append("augmented")
    return Corpus(trees, ids, tags, height_cap=corpus.height_cap)


def source_id(tree_id):
    return tree_id.split("/")[0]


def make_splits(corpus, fractions=(0.8, 0.2), seed=0):
    """Seeded split over source groups; augments follow their source."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    groups = {}
    for i, tid in enumerate(corpus.ids):
        groups.setdefault(source_id(tid), []).append(i)
    names = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(names))
    cuts = np.floor(np.cumsum(fractions)[:-1] * len(names)).astype(int)
    parts = np.split(order, cuts)
    if any(p.size == 0 for p in parts):
        raise ValueError(
            f"{len(names)} source trees cannot fill {len(fractions)} splits "
            f"with fractions {fractions}")
    splits = []
    for p in parts:
        idx = [i for g in p for i in groups[names[g]]]
        splits.append([corpus.trees[i] for i in idx])
    return splits
