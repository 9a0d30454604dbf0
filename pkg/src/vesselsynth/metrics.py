"""Evaluation suite: point-cloud generative metrics plus vascular measures.

Point-based metrics follow the PointFlow protocol: squared-distance Chamfer
kernel, MMD (fidelity), COV (diversity), and 1-NNA (two-sample plausibility,
0.5 ideal). Vascular measures are branch tortuosity, total centerline
length, and histogram cosine similarity between real and generated sets.
"""

from __future__ import annotations

import csv
import json

import numpy as np

DEFAULT_POINTS = 1000
DEFAULT_BINS = 32


def sample_points(mesh, n=DEFAULT_POINTS, seed=0):
    """Uniform-by-area point sample of a triangle mesh, seeded."""
    verts, tris = mesh.vertices, mesh.triangles
    if len(tris) == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    a = verts[tris[:, 0]]
    b = verts[tris[:, 1]]
    c = verts[tris[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    choice = rng.choice(len(tris), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    return (a[choice] * (1 - u - v)[:, None]
            + b[choice] * u[:, None]
            + c[choice] * v[:, None])


def chamfer(a, b):
    """Symmetric squared-distance Chamfer: mean min-sqdist both ways."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer needs non-empty clouds")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def _cd_matrix(gen, ref):
    return np.array([[chamfer(g, r) for r in ref] for g in gen])


def mmd_cov_1nna(generated, reference):
    """MMD / COV / 1-NNA over two sets of point clouds under Chamfer.

    1-NNA is leave-one-out 1-NN accuracy on the union; zero-distance ties
    break toward the opposite set so identical sets score near 0.
    """
    if len(generated) == 0 or len(reference) == 0:
        raise ValueError("both cloud sets must be non-empty")
    if len(generated) + len(reference) < 2:
        raise ValueError("1-NNA undefined on a singleton union")
    d_gr = _cd_matrix(generated, reference)  # (G, R)
    mmd = float(d_gr.min(axis=0).mean())
    cov = float(len(set(d_gr.argmin(axis=1))) / len(reference))

    clouds = list(generated) + list(reference)
    labels = np.array([0] * len(generated) + [1] * len(reference))
    n = len(clouds)
    dm = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dm[i, j] = dm[j, i] = chamfer(clouds[i], clouds[j])
    correct = 0
    for i in range(n):
        d = dm[i].copy()
        d[i] = np.inf
        # opposite-set tie break at the minimum distance
        mn = d.min()
        tied = np.nonzero(d == mn)[0]
        opposite = tied[labels[tied] != labels[i]]
        nn = opposite[0] if opposite.size else tied[0]
        correct += labels[nn] == labels[i]
    return mmd, cov, float(correct / n)


def tortuosity(points):
    """Branch path length over endpoint chord (distance metric); >= 1."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 2:
        raise ValueError("tortuosity needs at least 2 points")
    chord = np.linalg.norm(points[-1] - points[0])
    if chord == 0:
        raise ValueError("coincident endpoints: tortuosity undefined (infinite)")
    path = np.linalg.norm(np.diff(points, axis=0), axis=1).sum()
    return float(path / chord)


def branch_tortuosities(tree):
    """Per-branch tortuosity; branches with coincident endpoints are skipped."""
    out = []
    for chain in tree.branches():
        pts = np.array([n.position for n in chain])
        if pts.shape[0] < 2:
            continue
        try:
            out.append(tortuosity(pts))
        except ValueError:
            continue
    return out


def total_length(tree):
    """Sum of parent-to-child Euclidean edge lengths (polyline convention)."""
    total = 0.0

    def walk(node):
        nonlocal total
        for child in (node.left, node.right):
            if child is not None:
                total += np.linalg.norm(child.position - node.position)
                walk(child)

    walk(tree.root)
    return float(total)


def histogram_cosine(real_values, gen_values, bins=DEFAULT_BINS):
    """Cosine similarity of the two value histograms over the pooled range."""
    real_values = np.asarray(real_values, dtype=np.float64)
    gen_values = np.asarray(gen_values, dtype=np.float64)
    if real_values.size == 0 or gen_values.size == 0:
        raise ValueError("histogram_cosine needs non-empty value lists")
    pooled = np.concatenate([real_values, gen_values])
    lo, hi = pooled.min(), pooled.max()
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    hr, _ = np.histogram(real_values, bins=edges)
    hg, _ = np.histogram(gen_values, bins=edges)
    dot = int(hr @ hg)
    nr2, ng2 = int(hr @ hr), int(hg @ hg)
    if nr2 == 0 or ng2 == 0:
        raise ValueError("all-zero histogram")
    # counts are integers, so dot and squared norms are exact; one sqrt of
    # their product keeps identical histograms at exactly 1.0
    return float(dot / np.sqrt(nr2 * ng2))


def histograms_csv(real_values, gen_values, path, bins=DEFAULT_BINS):
    pooled = np.concatenate([np.asarray(real_values, float),
                             np.asarray(gen_values, float)])
    lo, hi = pooled.min(), pooled.max()
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    hr, _ = np.histogram(real_values, bins=edges)
    hg, _ = np.histogram(gen_values, bins=edges)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "real_count", "generated_count"])
        for i in range(bins):
            w.writerow([edges[i], edges[i + 1], int(hr[i]), int(hg[i])])


class MetricReport:
    """Point-based plus vascular metric blocks, serializable as JSON/table."""

    def __init__(self, mmd, cov, nna_1, tortuosity_cosine, length_cosine,
                 extras=None):
        self.mmd = mmd
        self.cov = cov
        self.nna_1 = nna_1
        self.tortuosity_cosine = tortuosity_cosine
        self.length_cosine = length_cosine
        self.extras = extras or {}

    def to_dict(self):
        return {
            "point_based": {"mmd": self.mmd, "cov": self.cov, "1nna": self.nna_1},
            "vascular": {"tortuosity_cosine": self.tortuosity_cosine,
                         "length_cosine": self.length_cosine},
            "extras": self.extras,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_table(self):
        rows = [
            ("MMD", self.mmd),
            ("COV", self.cov),
            ("1-NNA", self.nna_1),
            ("tortuosity cosine", self.tortuosity_cosine),
            ("length cosine", self.length_cosine),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value:.6f}" for name, value in rows)
