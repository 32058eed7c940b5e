"""Graph container, dataset I/O, normalized Laplacian, splits and edge removal."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc

from .errors import GraphFormatError
from .rng import SplitMix64


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted attributed graph.

    ``edges`` is an ``(m, 2)`` int array with ``u < v`` per row, rows sorted
    lexicographically; construction validates and canonicalises it.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "graph"

    def __post_init__(self) -> None:
        edges = canonical_edges(self.edges, self.n)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if feats.shape[0] != self.n:
            raise GraphFormatError(
                f"dimension mismatch: features have {feats.shape[0]} rows, n={self.n}"
            )
        if labels.shape[0] != self.n:
            raise GraphFormatError(
                f"dimension mismatch: {labels.shape[0]} labels, n={self.n}"
            )
        if not np.all(np.isfinite(feats)):
            raise GraphFormatError("NaN feature: features contain NaN or Inf")
        if self.num_classes < 1:
            raise GraphFormatError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise GraphFormatError(
                f"label out of range: labels must lie in [0, {self.num_classes})"
            )
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges}

    def with_edges(self, edges) -> "Graph":
        return Graph(self.n, edges, self.features, self.labels, self.num_classes, self.name)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        if self.num_edges:
            u, v = self.edges[:, 0], self.edges[:, 1]
            a[u, v] = 1.0
            a[v, u] = 1.0
        return a


def canonical_edges(edges, n: int) -> np.ndarray:
    """Validate an edge list and return it as sorted ``u < v`` rows.

    Self-loops, duplicates (in either orientation) and out-of-range endpoints
    raise :class:`GraphFormatError`.
    """
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    arr = arr.reshape(-1, 2)
    if arr.min() < 0 or arr.max() >= n:
        raise GraphFormatError(f"edge endpoint out of range for n={n}")
    if np.any(arr[:, 0] == arr[:, 1]):
        bad = arr[arr[:, 0] == arr[:, 1]][0]
        raise GraphFormatError(f"self-loop at node {int(bad[0])}")
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    order = np.lexsort((hi, lo))
    out = np.stack([lo[order], hi[order]], axis=1)
    dup = np.all(out[1:] == out[:-1], axis=1)
    if np.any(dup):
        u, v = out[1:][dup][0]
        raise GraphFormatError(f"duplicate edge ({int(u)}, {int(v)})")
    return out


# ---------------------------------------------------------------------------
# file formats


def _resolve_manifest(path: str | os.PathLike) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        raise GraphFormatError(f"missing file: {p}")
    return p


def load_graph(manifest_path: str | os.PathLike) -> Graph:
    """Load a dataset from ``manifest.json`` (or the directory holding it)."""
    mpath = _resolve_manifest(manifest_path)
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"bad manifest JSON: {exc}") from exc
    for key in ("n", "d", "num_classes", "edges", "features", "labels"):
        if key not in manifest:
            raise GraphFormatError(f"manifest missing key '{key}'")
    n, d, c = int(manifest["n"]), int(manifest["d"]), int(manifest["num_classes"])
    root = mpath.parent

    def need(key: str) -> Path:
        p = root / manifest[key]
        if not p.is_file():
            raise GraphFormatError(f"missing file: {p}")
        return p

    edges = []
    for lineno, line in enumerate(need("edges").read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise GraphFormatError(f"edges line {lineno}: expected 'u<TAB>v'")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise GraphFormatError(f"edges line {lineno}: {exc}") from exc

    rows = [ln for ln in need("features").read_text().splitlines() if ln.strip()]
    if len(rows) != n:
        raise GraphFormatError(f"dimension mismatch: {len(rows)} feature rows, n={n}")
    feats = np.empty((n, d))
    for i, ln in enumerate(rows):
        vals = ln.split(",")
        if len(vals) != d:
            raise GraphFormatError(
                f"dimension mismatch: feature row {i} has {len(vals)} values, d={d}"
            )
        try:
            feats[i] = [float(x) for x in vals]
        except ValueError as exc:
            raise GraphFormatError(f"feature row {i}: {exc}") from exc

    lab_rows = [ln for ln in need("labels").read_text().splitlines() if ln.strip()]
    if len(lab_rows) != n:
        raise GraphFormatError(f"dimension mismatch: {len(lab_rows)} labels, n={n}")
    try:
        labels = np.array([int(x) for x in lab_rows], dtype=np.int64)
    except ValueError as exc:
        raise GraphFormatError(f"labels: {exc}") from exc

    return Graph(n, edges, feats, labels, c, str(manifest.get("name", mpath.parent.name)))


def save_graph(g: Graph, directory: str | os.PathLike) -> Path:
    """Write ``g`` in the ingestion format; returns the manifest path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": g.name,
        "n": g.n,
        "d": g.d,
        "num_classes": g.num_classes,
        "edges": "edges.tsv",
        "features": "features.csv",
        "labels": "labels.csv",
    }
    (root / "edges.tsv").write_text("".join(f"{u}\t{v}\n" for u, v in g.edges))
    # repr round-trips doubles exactly
    (root / "features.csv").write_text(
        "".join(",".join(repr(float(x)) for x in row) + "\n" for row in g.features)
    )
    (root / "labels.csv").write_text("".join(f"{int(y)}\n" for y in g.labels))
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# Laplacian


def normalized_laplacian_from_edges(n: int, edges: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; isolated nodes keep the unit row ``e_i``."""
    lap = np.eye(n)
    if len(edges) == 0:
        return lap
    u, v = edges[:, 0], edges[:, 1]
    deg = np.bincount(u, minlength=n) + np.bincount(v, minlength=n)
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    w = inv_sqrt[u] * inv_sqrt[v]
    # same product written to both triangles, so L is exactly symmetric
    lap[u, v] = -w
    lap[v, u] = -w
    return lap


def build_normalized_laplacian(g: Graph) -> np.ndarray:
    return normalized_laplacian_from_edges(g.n, g.edges)


def connected_components(n: int, edges: np.ndarray) -> tuple[int, np.ndarray]:
    """Component count and a label per node (scipy's BFS labelling)."""
    if len(edges) == 0:
        return n, np.arange(n)
    m = len(edges)
    adj = coo_matrix((np.ones(m), (edges[:, 0], edges[:, 1])), shape=(n, n))
    count, labels = _cc(adj, directed=False)
    return int(count), labels


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Split:
    seed: int
    train_idx: list[int]
    val_idx: list[int]
    test_idx: list[int]

    def to_json(self) -> dict:
        return {"seed": self.seed, "train": self.train_idx, "val": self.val_idx,
                "test": self.test_idx}

    @classmethod
    def from_json(cls, obj: dict) -> "Split":
        return cls(int(obj["seed"]), list(obj["train"]), list(obj["val"]), list(obj["test"]))


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = (6 * n) // 10
    n_val = (2 * n) // 10
    return n_train, n_val, n - n_train - n_val


def make_splits(n: int, seed: int) -> Split:
    """60/20/20 split of a SplitMix64 Fisher-Yates permutation (not stratified)."""
    if n < 5:
        raise ValueError(f"need at least 5 nodes for a 60/20/20 split, got {n}")
    perm = SplitMix64(seed).permutation(n)
    n_train, n_val, _ = split_sizes(n)
    return Split(
        seed,
        perm[:n_train],
        perm[n_train:n_train + n_val],
        perm[n_train + n_val:],
    )


# ---------------------------------------------------------------------------
# perturbations


def remove_edges_random(g: Graph, m: int, seed: int) -> Graph:
    """Copy of ``g`` with ``m`` edges drawn uniformly (SplitMix64) deleted."""
    if m < 0 or m > g.num_edges:
        raise ValueError(f"cannot remove {m} edges from a graph with {g.num_edges}")
    if m == 0:
        return g.with_edges(g.edges.copy())
    drop = SplitMix64(seed).sample(g.num_edges, m)
    keep = np.ones(g.num_edges, dtype=bool)
    keep[drop] = False
    return g.with_edges(g.edges[keep])


@dataclass
class _Bisector:
    n: int
    edges: np.ndarray
    solver: str = "jacobi"
    neighbors: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.neighbors = [[] for _ in range(self.n)]
        for u, v in self.edges:
            self.neighbors[u].append(v)
            self.neighbors[v].append(u)

    def induced_edges(self, nodes: np.ndarray) -> np.ndarray:
        local = {int(v): i for i, v in enumerate(nodes)}
        out = []
        for v in nodes:
            for w in self.neighbors[v]:
                if v < w and w in local:
                    out.append((local[int(v)], local[int(w)]))
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def split(self, nodes: np.ndarray, k: int, parts: list) -> None:
        if k <= 1 or len(nodes) < 2:
            parts.append(nodes)
            return
        k_left = k // 2
        k_right = k - k_left
        target = int(round(len(nodes) * k_left / k))
        target = min(max(target, k_left), len(nodes) - k_right)
        left_mask = self._bisect(nodes, target, k_left, k_right)
        self.split(nodes[left_mask], k_left, parts)
        self.split(nodes[~left_mask], k_right, parts)

    def _bisect(self, nodes, target, k_left, k_right) -> np.ndarray:
        sub = self.induced_edges(nodes)
        count, comp = connected_components(len(nodes), sub)
        if count > 1:
            mask = _pack_components(comp, count, target)
            if k_left <= mask.sum() <= len(nodes) - k_right:
                return mask
        from .spectral import eig_sym

        lap = normalized_laplacian_from_edges(len(nodes), sub)
        fiedler = eig_sym(lap, method=self.solver).eigenvectors[:, 1]
        order = np.lexsort((np.arange(len(nodes)), fiedler))
        mask = np.zeros(len(nodes), dtype=bool)
        mask[order[:target]] = True
        return mask


def _pack_components(comp: np.ndarray, count: int, target: int) -> np.ndarray:
    """Greedy fill of the left side with whole components, largest first."""
    sizes = np.bincount(comp, minlength=count)
    first = np.full(count, len(comp))
    for i in range(len(comp) - 1, -1, -1):
        first[comp[i]] = i
    chosen = np.zeros(count, dtype=bool)
    total = 0
    for c in sorted(range(count), key=lambda c: (-sizes[c], first[c])):
        if total + sizes[c] <= target:
            chosen[c] = True
            total += sizes[c]
    return chosen[comp]


def partition_nodes(g: Graph, k: int, solver: str = "jacobi") -> list[np.ndarray]:
    """Recursive spectral bisection into ``k`` parts.

    Each level splits a subgraph on its normalized-Laplacian Fiedler vector
    (ties by node id), sending ``round(size * floor(k/2) / k)`` nodes left, so
    even ``k`` cuts at the median.  A disconnected subgraph is split along
    whole components when the size targets allow it.
    """
    if k < 1 or k > g.n:
        raise ValueError(f"part count must be in [1, {g.n}], got {k}")
    parts: list[np.ndarray] = []
    _Bisector(g.n, g.edges, solver).split(np.arange(g.n), k, parts)
    return parts


def partition_cut_removal(g: Graph, k: int, solver: str = "jacobi") -> tuple[Graph, int]:
    """Delete every edge crossing the ``k``-way spectral partition."""
    if k < 2:
        raise ValueError(f"part count must be >= 2, got {k}")
    part_of = np.empty(g.n, dtype=np.int64)
    for i, nodes in enumerate(partition_nodes(g, k, solver)):
        part_of[nodes] = i
    if g.num_edges == 0:
        return g.with_edges(g.edges.copy()), 0
    same = part_of[g.edges[:, 0]] == part_of[g.edges[:, 1]]
    return g.with_edges(g.edges[same]), int((~same).sum())


def edge_homophily(g: Graph) -> float:
    if g.num_edges == 0:
        return math.nan
    return float(np.mean(g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]))
