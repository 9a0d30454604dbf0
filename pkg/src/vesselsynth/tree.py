"""Binary vessel-tree data model and its flat sequence form.

A node carries a 3D centerline position plus 16 periodic-spline control
radii describing the local cross-section (19 attributes total). Trees
serialize to a preorder sequence of attribute rows where an absent child
contributes one all-zeros row, so structure survives the trip through
the autoencoder.
"""

from __future__ import annotations

import json
import warnings

import numpy as np

from . import splines

RADII_COUNT = 16
ATTR_DIM = 3 + RADII_COUNT
NULL_THRESHOLD = 1e-2
RESAMPLE_RATES = (0.5, 0.75, 1.0)


class TruncationError(ValueError):
    """Serialized sequence ended before the tree was complete."""

    def __init__(self, consumed, total):
        self.consumed = consumed
        self.total = total
        super().__init__(
            f"sequence exhausted after consuming {consumed} of {total} entries")


class CycleError(ValueError):
    """Input graph contains a loop and cannot become a tree."""


class VesselNode:
    __slots__ = ("position", "radii", "left", "right")

    def __init__(self, position, radii, left=None, right=None):
        self.position = np.asarray(position, dtype=np.float64).reshape(3)
        self.radii = np.asarray(radii, dtype=np.float64).reshape(RADII_COUNT)
        self.left = left
        self.right = right

    def attributes(self):
        return np.concatenate([self.position, self.radii])

    def copy(self, deep=True):
        return VesselNode(
            self.position.copy(), self.radii.copy(),
            self.left.copy(deep) if deep and self.left else self.left,
            self.right.copy(deep) if deep and self.right else self.right)

    def cross_section(self):
        return splines.PeriodicSpline(self.radii)


class VesselTree:
    """Binary tree of VesselNode plus the normalization record."""

    def __init__(self, root, center=None, scale=None):
        self.root = root
        self.center = None if center is None else np.asarray(center, dtype=np.float64)
        self.scale = None if scale is None else float(scale)

    def nodes(self):
        out, stack = [], [self.root]
        while stack:
            n = stack.pop()
            out.append(n)
            if n.right:
                stack.append(n.right)
            if n.left:
                stack.append(n.left)
        return out

    def num_nodes(self):
        return len(self.nodes())

    def height(self):
        def depth(n):
            if n is None:
                return -1
            return 1 + max(depth(n.left), depth(n.right))
        return depth(self.root)

    def copy(self):
        return VesselTree(self.root.copy(), self.center, self.scale)

    def attribute_matrix(self):
        return np.array([n.attributes() for n in self.nodes()])

    def branches(self):
        """Node chains between bifurcations/leaves, junction nodes shared.

        Each branch starts at the root or at a bifurcation node and runs
        through single-child nodes until the next bifurcation or a leaf.
        """
        out = []

        def n_children(n):
            return (n.left is not None) + (n.right is not None)

        def walk(start):
            chain = [start]
            node = start
            while n_children(node) == 1:
                node = node.left if node.left is not None else node.right
                chain.append(node)
            out.append(chain)
            if n_children(node) == 2:
                for child in (node.left, node.right):
                    walk_from_junction(node, child)

        def walk_from_junction(junction, child):
            chain = [junction, child]
            node = child
            while n_children(node) == 1:
                node = node.left if node.left is not None else node.right
                chain.append(node)
            out.append(chain)
            if n_children(node) == 2:
                for grandchild in (node.left, node.right):
                    walk_from_junction(node, grandchild)

        walk(self.root)
        return out


# -------------------------------------------------------------- serialization

def serialize(tree):
    """Preorder attribute rows with one zero row per absent child.

    A tree with n nodes yields 2n + 1 rows.
    """
    rows = []

    def visit(node):
        if node is None:
            rows.append(np.zeros(ATTR_DIM))
            return
        rows.append(node.attributes())
        visit(node.left)
        visit(node.right)

    visit(tree.root)
    return np.array(rows)


def deserialize(seq, null_threshold=NULL_THRESHOLD):
    """Rebuild a tree from a (possibly noisy) preorder sequence.

    Rows whose max absolute component falls below `null_threshold` count as
    absent-child markers. Raises TruncationError when the sequence runs out
    mid-subtree (generated sequences may be short; the caller decides).
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != ATTR_DIM:
        raise ValueError(f"expected (T, {ATTR_DIM}) sequence, got {seq.shape}")
    pos = 0

    def consume():
        nonlocal pos
        if pos >= seq.shape[0]:
            raise TruncationError(pos, seq.shape[0])
        row = seq[pos]
        pos += 1
        if np.abs(row).max() < null_threshold:
            return None
        node = VesselNode(row[:3], row[3:])
        node.left = consume()
        node.right = consume()
        return node

    root = consume()
    if root is None:
        raise ValueError("sequence begins with a null marker; no root node")
    return VesselTree(root)


# -------------------------------------------------------------- normalization

def normalize(tree):
    """Center the root at the origin and scale all attributes into [-1, 1].

    One scalar scale per tree keeps positions and radii geometrically
    consistent. Returns a new tree carrying the (center, scale) record.
    """
    nodes = tree.nodes()
    center = nodes[0].position.copy()  # root is first in preorder
    centered = np.array([n.position - center for n in nodes])
    radii = np.array([n.radii for n in nodes])
    scale = max(np.abs(centered).max(), np.abs(radii).max())
    if scale <= 0:
        raise ValueError("degenerate tree: zero spatial extent and zero radii")

    def rebuild(node):
        if node is None:
            return None
        return VesselNode((node.position - center) / scale, node.radii / scale,
                          rebuild(node.left), rebuild(node.right))

    return VesselTree(rebuild(tree.root), center=center, scale=scale)


def denormalize(tree):
    """Invert normalize() using the tree's stored record."""
    if tree.center is None or tree.scale is None:
        raise ValueError("tree carries no normalization record")
    center, scale = tree.center, tree.scale

    def rebuild(node):
        if node is None:
            return None
        return VesselNode(node.position * scale + center, node.radii * scale,
                          rebuild(node.left), rebuild(node.right))

    return VesselTree(rebuild(tree.root))


# ----------------------------------------------------------------- augmenting

def random_rotation_matrix(rng):
    """Uniform random rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotate(tree, R):
    """Rigid rotation of all node positions about the root."""
    pivot = tree.root.position.copy()

    def rebuild(node):
        if node is None:
            return None
        pos = R @ (node.position - pivot) + pivot
        return VesselNode(pos, node.radii, rebuild(node.left), rebuild(node.right))

    return VesselTree(rebuild(tree.root), tree.center, tree.scale)


def _resample_chain(chain, rate):
    """Resample a branch node chain at the given rate, endpoints pinned."""
    n = len(chain)
    new_n = max(2, int(round(n * rate)))
    if new_n == n:
        return [node.copy(deep=False) for node in chain]
    pts = np.array([node.position for node in chain])
    radii = np.array([node.radii for node in chain])
    ts_old = splines.chord_length_params(pts)
    ts_new = np.linspace(0.0, 1.0, new_n)
    if n >= 5:
        curve, _ = splines.fit_open(pts, Q=min(n, max(4, n // 2 + 2)))
        new_pts = curve(ts_new)
    else:
        new_pts = np.array([np.interp(ts_new, ts_old, pts[:, k]) for k in range(3)]).T
    new_radii = np.array([np.interp(ts_new, ts_old, radii[:, k])
                          for k in range(RADII_COUNT)]).T
    return [VesselNode(p, r) for p, r in zip(new_pts, new_radii)]


def _collect_chain(start):
    """Follow single-child nodes from `start` to the next junction or leaf."""
    chain = [start]
    node = start
    while (node.left is None) != (node.right is None):
        node = node.left if node.left is not None else node.right
        chain.append(node)
    return chain, node


def resample(tree, rate):
    """Re-sample every branch of the tree at `rate` via fitted splines.

    Junction and leaf nodes are pinned; interior chain nodes move onto the
    fitted branch curve. Branches that would drop below 2 nodes are kept
    at 2 with a warning.
    """
    if rate == 1.0:
        return tree.copy()

    def link(new_nodes, terminal):
        head = new_nodes[0]
        cur = head
        for nn in new_nodes[1:]:
            cur.left, cur.right = nn, None
            cur = nn
        cur.left = cur.right = None
        if terminal.left is not None and terminal.right is not None:
            cur.left = rebuild_child(terminal, terminal.left)
            cur.right = rebuild_child(terminal, terminal.right)
        return head

    def rebuild_child(junction, child):
        chain, terminal = _collect_chain(child)
        chain = [junction] + chain
        if int(round(len(chain) * rate)) < 2:
            warnings.warn("branch too short to resample; kept at 2 nodes")
        new_nodes = _resample_chain(chain, rate)[1:]  # junction already placed
        if not new_nodes:
            new_nodes = [terminal.copy(deep=False)]
        return link(new_nodes, terminal)

    chain, terminal = _collect_chain(tree.root)
    if len(chain) == 1:
        new_nodes = [tree.root.copy(deep=False)]
    else:
        new_nodes = _resample_chain(chain, rate)
    return VesselTree(link(new_nodes, terminal), tree.center, tree.scale)


def augment(tree, seed):
    """Deterministic augmentation variants: resampled rates plus rotations."""
    rng = np.random.default_rng(seed)
    variants = []
    for rate in RESAMPLE_RATES:
        variants.append(resample(tree, rate))
    for rate in RESAMPLE_RATES:
        R = random_rotation_matrix(rng)
        variants.append(rotate(resample(tree, rate), R))
    return variants


# ---------------------------------------------------------------- binarization

def binarize(nary):
    """Convert an n-ary tree into binary form.

    Input: nested dicts {"position", "radii", "children": [...]}. Nodes with
    more than two children chain the extras under duplicates of the parent
    (same attributes), which keeps geometry unchanged. Cyclic inputs raise
    CycleError.
    """
    seen = set()

    def convert(d):
        key = id(d)
        if key in seen:
            raise CycleError(f"cycle detected at node object {key}")
        seen.add(key)
        children = d.get("children", [])
        node = VesselNode(d["position"], d["radii"])
        if len(children) == 0:
            pass
        elif len(children) == 1:
            node.left = convert(children[0])
        elif len(children) == 2:
            node.left = convert(children[0])
            node.right = convert(children[1])
        else:
            node.left = convert(children[0])
            rest = {"position": d["position"], "radii": d["radii"],
                    "children": children[1:]}
            node.right = convert(rest)
        seen.discard(id(d))  # only reject ancestors reappearing (true cycles)
        return node

    return VesselTree(convert(nary))


def trim_height(tree, cap):
    """Drop every subtree rooted deeper than `cap` edges from the root."""

    def rebuild(node, depth):
        if node is None or depth > cap:
            return None
        return VesselNode(node.position, node.radii,
                          rebuild(node.left, depth + 1),
                          rebuild(node.right, depth + 1))

    return VesselTree(rebuild(tree.root, 0), tree.center, tree.scale)


# ----------------------------------------------------------------------- JSON

def to_json_dict(tree):
    nodes = tree.nodes()
    index = {id(n): i for i, n in enumerate(nodes)}
    records = []
    for i, n in enumerate(nodes):
        records.append({
            "id": i,
            "position": [float(v) for v in n.position],
            "radii": [float(v) for v in n.radii],
            "left": index[id(n.left)] if n.left else None,
            "right": index[id(n.right)] if n.right else None,
        })
    doc = {"nodes": records, "root": index[id(tree.root)]}
    if tree.center is not None and tree.scale is not None:
        doc["normalization"] = {"center": [float(v) for v in tree.center],
                                "scale": tree.scale}
    return doc


def from_json_dict(doc):
    by_id = {}
    for rec in doc["nodes"]:
        by_id[rec["id"]] = VesselNode(rec["position"], rec["radii"])
    for rec in doc["nodes"]:
        node = by_id[rec["id"]]
        node.left = by_id[rec["left"]] if rec.get("left") is not None else None
        node.right = by_id[rec["right"]] if rec.get("right") is not None else None
    norm = doc.get("normalization")
    return VesselTree(by_id[doc["root"]],
                      center=norm["center"] if norm else None,
                      scale=norm["scale"] if norm else None)


def save_json(tree, path):
    with open(path, "w") as fh:
        json.dump(to_json_dict(tree), fh)


def load_json(path):
    with open(path) as fh:
        return from_json_dict(json.load(fh))


def trees_equal(a, b, atol=0.0):
    sa, sb = serialize(a), serialize(b)
    if sa.shape != sb.shape:
        return False
    return np.allclose(sa, sb, atol=atol, rtol=0.0) if atol else np.array_equal(sa, sb)
