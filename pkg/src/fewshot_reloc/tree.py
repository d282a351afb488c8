"""One-to-many coordinate regression tree.

A binary tree routes a descriptor to a leaf holding up to ``leaf_cap``
candidate world coordinates.  Internal nodes carry two parameters: the
descriptor channel to test and a threshold (route left when
``descriptor[channel] < threshold``).  Built on-the-spot from few-shot
training samples: each node splits on the channel with maximal variance at
the median of that channel, recursing while a node holds more than
``leaf_cap`` samples.

Duplicate-descriptor groups larger than the cap cannot be separated by
channel thresholds; such nodes fall back to a seeded random balanced
partition into minimal leaves chained under always-right internal nodes,
which guarantees termination (coordinates stay reachable by enumeration,
though a query returns a single leaf).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TrainingSample",
    "RegressionTree",
    "EmptySamplesError",
    "DimensionMismatchError",
    "build_tree",
    "save_tree",
    "load_tree",
]


class EmptySamplesError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingSample:
    descriptor: np.ndarray   # (D,)
    coordinate: np.ndarray   # (3,)
    source: tuple = ()       # (frame id, (u, v)) provenance

    def __post_init__(self):
        d = np.asarray(self.descriptor, dtype=np.float64).reshape(-1)
        c = np.asarray(self.coordinate, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(c))):
            raise ValueError("descriptor and coordinate must be finite")
        object.__setattr__(self, "descriptor", d)
        object.__setattr__(self, "coordinate", c)


@dataclass
class _Internal:
    channel: int
    threshold: float   # stored as float32 value
    left: object
    right: object


@dataclass
class _Leaf:
    coordinates: np.ndarray  # (K, 3)


@dataclass
class RegressionTree:
    root: object
    leaf_cap: int
    dim: int
    sample_count: int = 0
    depth: int = 0
    seed: int = 0
    _flat: dict = field(default=None, repr=False, compare=False)

    def query(self, descriptor) -> np.ndarray:
        """Route a descriptor to its leaf; returns that leaf's coordinates."""
        d = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        if d.shape[0] != self.dim:
            raise DimensionMismatchError(
                f"descriptor has dimension {d.shape[0]}, tree expects {self.dim}")
        node = self.root
        while isinstance(node, _Internal):
            node = node.left if d[node.channel] < node.threshold else node.right
        return node.coordinates.copy()

    # --- batched routing (same semantics as query, vectorized) ---

    def _flatten(self):
        if self._flat is None:
            channels, thresholds, lefts, rights, leaf_of = [], [], [], [], []
            leaves = []

            def visit(node):
                my_id = len(channels)
                if isinstance(node, _Leaf):
                    channels.append(-1)
                    thresholds.append(0.0)
                    lefts.append(-1)
                    rights.append(-1)
                    leaf_of.append(len(leaves))
                    leaves.append(node.coordinates)
                    return my_id
                channels.append(node.channel)
                thresholds.append(node.threshold)
                lefts.append(-1)
                rights.append(-1)
                leaf_of.append(-1)
                lefts[my_id] = visit(node.left)
                rights[my_id] = visit(node.right)
                return my_id

            import sys
            old_limit = sys.getrecursionlimit()
            sys.setrecursionlimit(max(old_limit, self.depth + 1000))
            try:
                visit(self.root)
            finally:
                sys.setrecursionlimit(old_limit)
            self._flat = {
                "channel": np.array(channels, dtype=np.int32),
                "threshold": np.array(thresholds, dtype=np.float64),
                "left": np.array(lefts, dtype=np.int64),
                "right": np.array(rights, dtype=np.int64),
                "leaf_of": np.array(leaf_of, dtype=np.int64),
                "leaves": leaves,
            }
        return self._flat

    def query_batch(self, descriptors: np.ndarray) -> tuple[np.ndarray, list]:
        """(leaf index per row, list of leaf coordinate arrays)."""
        d = np.asarray(descriptors, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"descriptors must be (N,{self.dim}), got {d.shape}")
        flat = self._flatten()
        cur = np.zeros(len(d), dtype=np.int64)
        for _ in range(self.depth + 1):
            ch = flat["channel"][cur]
            internal = ch >= 0
            if not np.any(internal):
                break
            rows = np.nonzero(internal)[0]
            vals = d[rows, ch[rows]]
            go_left = vals < flat["threshold"][cur[rows]]
            cur[rows] = np.where(go_left, flat["left"][cur[rows]], flat["right"][cur[rows]])
        return flat["leaf_of"][cur], flat["leaves"]


def _build_fallback(coords: np.ndarray, leaf_cap: int, rng: np.random.Generator):
    """Random balanced partition into ceil(n/leaf_cap) chained leaves."""
    n = len(coords)
    n_leaves = -(-n // leaf_cap)
    parts = np.array_split(rng.permutation(n), n_leaves)
    leaves = [_Leaf(coords[p]) for p in parts]
    node = leaves[-1]
    # chain under always-right internal nodes (threshold -inf never routes left)
    for leaf in reversed(leaves[:-1]):
        node = _Internal(0, float(np.float32(-np.inf)), leaf, node)
    return node, n_leaves


def build_tree(samples, leaf_cap: int = 10, seed: int = 0) -> RegressionTree:
    """Build the regression tree from training samples.

    Accepts a sequence of :class:`TrainingSample` or a pair of arrays
    ``(descriptors (N,D), coordinates (N,3))``.
    """
    if isinstance(samples, tuple):
        descriptors, coords = (np.asarray(a, dtype=np.float64) for a in samples)
    else:
        if len(samples) == 0:
            raise EmptySamplesError("no training samples")
        descriptors = np.stack([s.descriptor for s in samples])
        coords = np.stack([s.coordinate for s in samples])
    if descriptors.shape[0] == 0:
        raise EmptySamplesError("no training samples")
    if leaf_cap < 1:
        raise ValueError("leaf_cap must be >= 1")
    n, dim = descriptors.shape

    rng = np.random.Generator(np.random.PCG64(seed))
    max_depth = 0
    root = _Internal(0, 0.0, None, None)  # placeholder parent for the real root
    # explicit stack keeps adversarial trees off the Python call stack
    stack = [(np.arange(n), 0, root, "left")]
    while stack:
        idx, depth, parent, side = stack.pop()
        max_depth = max(max_depth, depth)
        if len(idx) <= leaf_cap:
            setattr(parent, side, _Leaf(coords[idx]))
            continue

        node_desc = descriptors[idx]
        variances = np.var(node_desc, axis=0)
        channel = int(np.argmax(variances))  # ties -> lowest index
        values = node_desc[:, channel]

        left_mask = None
        if variances[channel] > 0.0:
            threshold = float(np.float32(np.median(values)))
            mask = values < threshold
            if 0 < np.sum(mask) < len(idx):
                left_mask = mask
            else:
                # median hit the channel minimum: step up to the next
                # distinct value so the minimum group splits off
                v_min = values.min()
                above = values[values > v_min]
                if above.size:
                    threshold = float(np.float32(above.min()))
                    mask = values < threshold
                    if 0 < np.sum(mask) < len(idx):
                        left_mask = mask

        if left_mask is None:
            # indistinguishable descriptors: seeded balanced partition
            subtree, n_leaves = _build_fallback(coords[idx], leaf_cap, rng)
            setattr(parent, side, subtree)
            max_depth = max(max_depth, depth + n_leaves - 1)
            continue

        node = _Internal(channel, threshold, None, None)
        setattr(parent, side, node)
        stack.append((idx[~left_mask], depth + 1, node, "right"))
        stack.append((idx[left_mask], depth + 1, node, "left"))

    return RegressionTree(root=root.left, leaf_cap=leaf_cap, dim=dim,
                          sample_count=n, depth=max_depth, seed=seed)


# ---------------------------------------------------------------------------
# Serialization ("CRTR" container)

TREE_MAGIC = b"CRTR"
TREE_VERSION = 1


class TreeFormatError(ValueError):
    pass


def save_tree(tree: RegressionTree, path) -> None:
    """Pre-order node stream: type byte, then channel u16 + threshold f32
    for internal nodes or count u32 + float32 coordinate triples for leaves."""
    chunks = [TREE_MAGIC,
              struct.pack("<IIIIII", TREE_VERSION, tree.leaf_cap, tree.dim,
                          tree.sample_count, tree.depth, tree.seed & 0xFFFFFFFF)]
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if isinstance(node, _Leaf):
            chunks.append(struct.pack("<BI", 1, len(node.coordinates)))
            chunks.append(np.ascontiguousarray(node.coordinates, dtype="<f4").tobytes())
        else:
            chunks.append(struct.pack("<BHf", 0, node.channel, node.threshold))
            stack.append(node.right)
            stack.append(node.left)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tree(path) -> RegressionTree:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TREE_MAGIC:
        raise TreeFormatError(f"{path}: bad magic")
    version, leaf_cap, dim, sample_count, depth, seed = struct.unpack_from("<IIIIII", blob, 4)
    if version != TREE_VERSION:
        raise TreeFormatError(f"{path}: unsupported version {version}")
    pos = 4 + 24

    def read_node():
        nonlocal pos
        (kind,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        if kind == 1:
            (count,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            coords = np.frombuffer(blob, dtype="<f4", count=count * 3, offset=pos)
            pos += count * 12
            return _Leaf(coords.reshape(count, 3).astype(np.float64))
        if kind != 0:
            raise TreeFormatError(f"{path}: bad node tag {kind}")
        channel, threshold = struct.unpack_from("<Hf", blob, pos)
        pos += 6
        # iterative reconstruction keeps deep trees off the Python stack
        node = _Internal(channel, float(threshold), None, None)
        return node

    root = read_node()
    if isinstance(root, _Internal):
        stack = [(root, "right"), (root, "left")]
        while stack:
            parent, side = stack.pop()
            node = read_node()
            setattr(parent, side, node)
            if isinstance(node, _Internal):
                stack.append((node, "right"))
                stack.append((node, "left"))
    if pos != len(blob):
        raise TreeFormatError(f"{path}: trailing bytes")
    return RegressionTree(root=root, leaf_cap=leaf_cap, dim=dim,
                          sample_count=sample_count, depth=depth, seed=seed)
