"""Immutable sparse graphs, dataset I/O, node-removal views, and data splits.

A :class:`Graph` stores an undirected simple graph in compressed-row form
(both directions of every edge, neighbor lists sorted, no self-edges) plus a
dense float64 feature matrix and optional integer labels.  A
:class:`RemovalView` presents the same graph with one node and all its
incident edges hidden, without copying the adjacency.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DatasetError, ValidationError

log = logging.getLogger("nie")

NODE_SPLIT_RATIO = (0.5, 0.3, 0.2)   # train : valid : test over nodes
EDGE_SPLIT_RATIO = (0.8, 0.1, 0.1)   # train : valid : test over undirected edges
NUM_CYCLES = 5


def _symmetrize(num_nodes: int, pairs: np.ndarray) -> tuple[np.ndarray, int]:
    """Dedup + symmetrize an edge list; returns (canonical i<j pairs, dropped self-edges)."""
    if pairs.size == 0:
        return pairs.reshape(0, 2).astype(np.int64), 0
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    self_edges = int(np.count_nonzero(lo == hi))
    keep = lo != hi
    keys = np.unique(lo[keep].astype(np.int64) * num_nodes + hi[keep].astype(np.int64))
    out = np.stack([keys // num_nodes, keys % num_nodes], axis=1)
    return out, self_edges


@dataclass(frozen=True)
class Graph:
    """Undirected graph with CSR adjacency, features, and optional labels."""

    num_nodes: int
    indptr: np.ndarray        # int64, length N+1
    indices: np.ndarray       # int64, neighbor ids sorted per row
    features: np.ndarray      # float64, N x d
    labels: np.ndarray | None = None
    num_classes: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: np.ndarray,
        features: np.ndarray,
        labels: np.ndarray | None = None,
        num_classes: int | None = None,
    ) -> "Graph":
        """Build from an (E,2) edge array; symmetrizes, dedups, drops self-edges."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise DatasetError(f"edge endpoint out of range [0, {num_nodes})")
        pairs, dropped = _symmetrize(num_nodes, edges)
        if dropped:
            log.warning("dropped %d self-edge(s); self-loops are a layer concern", dropped)
        both = np.concatenate([pairs, pairs[:, ::-1]], axis=0) if pairs.size else pairs
        order = np.lexsort((both[:, 1], both[:, 0])) if both.size else np.array([], dtype=np.int64)
        both = both[order]
        counts = np.bincount(both[:, 0], minlength=num_nodes) if both.size else np.zeros(num_nodes, dtype=np.int64)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        indices = both[:, 1].astype(np.int64) if both.size else np.array([], dtype=np.int64)
        features = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
        if features.shape[0] != num_nodes:
            raise DatasetError(
                f"feature matrix has {features.shape[0]} rows, expected {num_nodes}"
            )
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (num_nodes,):
                raise DatasetError("label vector length must equal num_nodes")
            if num_classes is None:
                num_classes = int(labels.max()) + 1 if labels.size else 0
        g = cls(num_nodes, indptr, indices, features, labels, num_classes)
        g.validate()
        return g

    # --- basic queries -------------------------------------------------

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return self.indices.shape[0] // 2

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def degrees(self) -> np.ndarray:
        """Neighbor counts, self-loops excluded."""
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def has_edge(self, i: int, j: int) -> bool:
        row = self.neighbors(i)
        k = np.searchsorted(row, j)
        return k < row.shape[0] and row[k] == j

    def edge_pairs(self) -> np.ndarray:
        """Canonical (M,2) array of undirected edges with i < j."""
        dst = np.repeat(np.arange(self.num_nodes), self.degrees)
        mask = dst < self.indices
        return np.stack([dst[mask], self.indices[mask]], axis=1)

    def validate(self) -> None:
        if self.indptr.shape != (self.num_nodes + 1,):
            raise DatasetError("indptr length mismatch")
        dst = np.repeat(np.arange(self.num_nodes), self.degrees)
        if np.any(dst == self.indices):
            raise DatasetError("self-edge stored in adjacency")
        # symmetry: the transposed slot multiset must match
        fwd = dst * self.num_nodes + self.indices
        bwd = self.indices * self.num_nodes + dst
        if not np.array_equal(np.sort(fwd), np.sort(bwd)):
            raise DatasetError("adjacency is not symmetric")
        if np.any(np.diff(fwd) == 0):
            raise DatasetError("duplicate edge stored in adjacency")
        if not np.isfinite(self.features).all():
            raise DatasetError("non-finite feature value")

    # --- cached derived structures ------------------------------------

    def csr_with_self_loops(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(indptr, src, dst) of the adjacency plus one self-slot per node.

        Slots are grouped by destination row and sorted by source inside each
        row; this is the canonical aggregation order used by the GNN layers.
        """
        if "self_loop_csr" not in self._cache:
            n = self.num_nodes
            deg = self.degrees
            insert_at = np.empty(n, dtype=np.int64)
            for i in range(n):
                row = self.indices[self.indptr[i]:self.indptr[i + 1]]
                insert_at[i] = self.indptr[i] + np.searchsorted(row, i)
            src = np.insert(self.indices, insert_at, np.arange(n))
            indptr = np.concatenate([[0], np.cumsum(deg + 1)]).astype(np.int64)
            dst = np.repeat(np.arange(n), deg + 1)
            self._cache["self_loop_csr"] = (indptr, src.astype(np.int64), dst)
        return self._cache["self_loop_csr"]

    def features_csr(self) -> sp.csr_matrix | None:
        """CSR alias of the feature matrix when it is sparse enough to pay off."""
        if "features_csr" not in self._cache:
            density = np.count_nonzero(self.features) / max(1, self.features.size)
            self._cache["features_csr"] = (
                sp.csr_matrix(self.features) if density < 0.25 else None
            )
        return self._cache["features_csr"]

    def adjacency(self) -> sp.csr_matrix:
        """0/1 adjacency as a scipy CSR matrix (no self-loops)."""
        if "adjacency" not in self._cache:
            self._cache["adjacency"] = sp.csr_matrix(
                (np.ones(self.indices.shape[0]), self.indices, self.indptr),
                shape=(self.num_nodes, self.num_nodes),
            )
        return self._cache["adjacency"]


@dataclass(frozen=True)
class RemovalView:
    """The base graph with one node (and its incident edges) hidden.

    Construction is O(1); per-node queries filter the base adjacency lazily.
    The base graph is never mutated.
    """

    base: Graph
    removed: int

    def __post_init__(self):
        if not (0 <= self.removed < self.base.num_nodes):
            raise ValidationError(
                f"removed node {self.removed} out of range [0, {self.base.num_nodes})"
            )

    @property
    def num_nodes(self) -> int:
        return self.base.num_nodes

    @property
    def num_features(self) -> int:
        return self.base.num_features

    @property
    def features(self) -> np.ndarray:
        return self.base.features

    def features_csr(self):
        return self.base.features_csr()

    @property
    def degrees(self) -> np.ndarray:
        deg = self.base.degrees.copy()
        deg[self.base.neighbors(self.removed)] -= 1
        deg[self.removed] = 0
        return deg

    def neighbors(self, i: int) -> np.ndarray:
        if i == self.removed:
            return np.array([], dtype=np.int64)
        row = self.base.neighbors(i)
        return row[row != self.removed]


def remove_node(g: Graph, v_r: int) -> RemovalView:
    """Counterfactual view of ``g`` without node ``v_r`` or its edges."""
    return RemovalView(g, v_r)


# --- data splits -------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Train/valid/test assignment for one cycle of the 20% rotation."""

    task: str                     # "node" | "link"
    cycle_index: int
    seed: int
    order: np.ndarray             # permutation of nodes (node task) or edges (link task)
    # node task
    train_mask: np.ndarray | None = None
    valid_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None
    # link task
    train_edges: np.ndarray | None = None
    valid_edges: np.ndarray | None = None
    test_edges: np.ndarray | None = None
    negative_train: np.ndarray | None = None
    negative_valid: np.ndarray | None = None
    negative_test: np.ndarray | None = None

    def eval_edges(self, scope: str = "full") -> tuple[np.ndarray, np.ndarray]:
        """(pairs, targets) for the link influence evaluation set.

        "full" is the whole prediction set (every edge plus one sampled
        non-edge per edge); "heldout" restricts to the valid+test windows.
        Influence summed over the small held-out set alone is dominated by
        sampling noise, so "full" is the default.
        """
        if scope == "full":
            pos = [self.train_edges, self.valid_edges, self.test_edges]
            neg = [self.negative_train, self.negative_valid, self.negative_test]
        elif scope == "heldout":
            pos = [self.valid_edges, self.test_edges]
            neg = [self.negative_valid, self.negative_test]
        else:
            raise ValidationError(f"unknown eval-edge scope {scope!r}")
        pairs = np.concatenate(pos + neg)
        n_pos = sum(len(p) for p in pos)
        targets = np.zeros(len(pairs))
        targets[:n_pos] = 1.0
        return pairs, targets


def _role_bounds(n: int, ratio: tuple[float, float, float]) -> tuple[int, int]:
    n_train = int(np.floor(ratio[0] * n))
    n_valid = int(np.floor(ratio[1] * n))
    return n_train, n_train + n_valid


def _rotate_roles(order: np.ndarray, k: int, ratio) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(order)
    shift = (k * n) // NUM_CYCLES
    rotated = np.roll(order, -shift)
    b1, b2 = _role_bounds(n, ratio)
    return rotated[:b1], rotated[b1:b2], rotated[b2:]


def sample_negative_edges(
    graph: Graph, count: int, rng: np.random.Generator, forbidden: set[int] | None = None
) -> np.ndarray:
    """``count`` distinct non-edges (i<j), absent from E and from ``forbidden`` keys."""
    n = graph.num_nodes
    max_pairs = n * (n - 1) // 2
    existing = set((graph.edge_pairs()[:, 0] * n + graph.edge_pairs()[:, 1]).tolist())
    if forbidden:
        existing |= forbidden
    if count > max_pairs - len(existing):
        raise ValidationError("not enough non-edges to sample negatives from")
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < count:
        batch = max(64, 2 * (count - len(chosen)))
        a = rng.integers(0, n, size=batch)
        b = rng.integers(0, n, size=batch)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        for key in (lo * n + hi)[lo != hi]:
            key = int(key)
            if key not in existing and key not in seen:
                seen.add(key)
                chosen.append(key)
                if len(chosen) == count:
                    break
    keys = np.array(chosen, dtype=np.int64)
    return np.stack([keys // n, keys % n], axis=1)


def make_split(graph: Graph, task: str, seed: int, cycle: int = 0) -> SplitSpec:
    """Seeded split for one cycle (5:3:2 over nodes, 8:1:1 over edges)."""
    if task not in ("node", "link"):
        raise ValidationError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    if task == "node":
        order = rng.permutation(graph.num_nodes)
        spec = SplitSpec(task, 0, seed, order)
    else:
        pairs = graph.edge_pairs()
        order = rng.permutation(len(pairs))
        spec = SplitSpec(task, 0, seed, order)
    return cycle_split(spec, cycle, graph)


def cycle_split(spec: SplitSpec, k: int, graph: Graph) -> SplitSpec:
    """Rotate the stored ordering by k*20% and reassign roles.

    Over k = 0..4 every node appears in each role at least once and the
    valid+test edge windows tile the whole edge set.
    """
    if not (0 <= k < NUM_CYCLES):
        raise ValidationError(f"cycle index {k} out of range 0..{NUM_CYCLES - 1}")
    if spec.task == "node":
        tr, va, te = _rotate_roles(spec.order, k, NODE_SPLIT_RATIO)
        n = graph.num_nodes
        masks = []
        for ids in (tr, va, te):
            m = np.zeros(n, dtype=bool)
            m[ids] = True
            masks.append(m)
        return replace(
            spec, cycle_index=k, train_mask=masks[0], valid_mask=masks[1], test_mask=masks[2]
        )
    pairs = graph.edge_pairs()
    tr, va, te = _rotate_roles(spec.order, k, EDGE_SPLIT_RATIO)
    rng = np.random.default_rng((spec.seed, k, 0xE))
    neg = sample_negative_edges(graph, len(tr) + len(va) + len(te), rng)
    return replace(
        spec,
        cycle_index=k,
        train_edges=pairs[tr],
        valid_edges=pairs[va],
        test_edges=pairs[te],
        negative_train=neg[: len(tr)],
        negative_valid=neg[len(tr): len(tr) + len(va)],
        negative_test=neg[len(tr) + len(va):],
    )


def message_graph(graph: Graph, split: SplitSpec) -> Graph:
    """Graph restricted to training edges (link task message passing)."""
    if split.task != "link":
        raise ValidationError("message_graph only applies to link splits")
    return Graph.from_edges(
        graph.num_nodes, split.train_edges, graph.features, graph.labels, graph.num_classes
    )


# --- dataset directory I/O ---------------------------------------------

MANIFEST_KEYS = ("num_nodes", "num_features", "num_classes", "task")


def _read_edge_csv(path: Path, num_nodes: int) -> np.ndarray:
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected two columns, got {len(parts)}")
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-integer node id") from None
            if a < 0 or b < 0 or a >= num_nodes or b >= num_nodes:
                raise DatasetError(
                    f"{path}:{lineno}: node id out of range [0, {num_nodes})"
                )
            rows.append((a, b))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def _read_float_csv(path: Path, expected_rows: int) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise DatasetError(f"{path}: non-numeric cell ({e})") from None
    if data.shape[0] != expected_rows:
        raise DatasetError(f"{path}: {data.shape[0]} rows, expected {expected_rows}")
    return data


def load_dataset(dir_path: str | Path) -> tuple[Graph, dict]:
    """Read a dataset directory (manifest.json, edges.csv, features.csv, labels.csv).

    Returns the graph and the parsed manifest.  Directed or duplicated input
    edges are symmetrized and deduplicated; self-edges are dropped with a
    warning.
    """
    d = Path(dir_path)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing file: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    for key in MANIFEST_KEYS:
        if key not in manifest:
            raise DatasetError(f"{manifest_path}: missing key {key!r}")
    n = int(manifest["num_nodes"])
    for fname in ("edges.csv", "features.csv"):
        if not (d / fname).exists():
            raise DatasetError(f"missing file: {d / fname}")
    edges = _read_edge_csv(d / "edges.csv", n)
    features = _read_float_csv(d / "features.csv", n)
    if features.shape[1] != int(manifest["num_features"]):
        raise DatasetError(
            f"{d / 'features.csv'}: {features.shape[1]} columns, "
            f"manifest says {manifest['num_features']}"
        )
    labels = None
    if (d / "labels.csv").exists():
        labels = _read_float_csv(d / "labels.csv", n).reshape(n, -1)[:, 0]
        if not np.all(labels == np.floor(labels)):
            raise DatasetError(f"{d / 'labels.csv'}: non-integer label")
        labels = labels.astype(np.int64)
    graph = Graph.from_edges(n, edges, features, labels, int(manifest["num_classes"]))
    return graph, manifest


def save_dataset(dir_path: str | Path, graph: Graph, task: str = "node") -> None:
    """Write a graph in the dataset directory format."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "num_nodes": graph.num_nodes,
        "num_features": graph.num_features,
        "num_classes": graph.num_classes or 0,
        "task": task,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with (d / "edges.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerows(graph.edge_pairs().tolist())
    np.savetxt(d / "features.csv", graph.features, delimiter=",", fmt="%.17g")
    if graph.labels is not None:
        np.savetxt(d / "labels.csv", graph.labels, fmt="%d")
