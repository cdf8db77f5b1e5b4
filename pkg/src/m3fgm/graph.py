"""Client graph construction, spectral coarsening and the derived graphs.

Three graphs feed the server model:

* the client graph, a thresholded Gaussian kernel over sensor distances;
* the cluster graph, whose nodes are spectral clusters of the client graph
  and whose edges are inherited from client edges that cross clusters;
* the cross-level graph, a bipartite graph with one directed edge from each
  client node to its own cluster.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError


@dataclass
class ClientGraph:
    adj: np.ndarray
    node_ids: list[str]

    def __post_init__(self):
        a = np.asarray(self.adj, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ValueError(f"client graph adjacency must be square and nonempty, got {a.shape}")
        if not np.allclose(a, a.T, atol=0.0, rtol=0.0):
            raise ValueError("client graph adjacency must be symmetric")
        if np.any(np.diag(a) != 0) or a.min() < 0 or a.max() > 1:
            raise ValueError("client graph needs zero diagonal and weights in [0, 1]")
        if len(self.node_ids) != a.shape[0]:
            raise ValueError("node_ids length does not match adjacency")
        self.adj = a

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed (src, dst) arrays, both directions of every undirected edge."""
        src, dst = np.nonzero(self.adj > 0)
        return src, dst


@dataclass
class ClusterAssignment:
    m: int
    label: np.ndarray

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=np.intp)
        if self.m < 1:
            raise ValueError("cluster count must be at least 1")
        if self.label.size and (self.label.min() < 0 or self.label.max() >= self.m):
            raise ValueError(f"cluster label out of range [0, {self.m})")
        counts = np.bincount(self.label, minlength=self.m)
        if np.any(counts == 0):
            raise ValueError(f"empty clusters: {np.flatnonzero(counts == 0).tolist()}")

    @property
    def n(self) -> int:
        return self.label.size

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.label == c)


@dataclass
class ClusterGraph:
    adj: np.ndarray

    @property
    def m(self) -> int:
        return self.adj.shape[0]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        src, dst = np.nonzero(self.adj > 0)
        return src, dst


@dataclass
class CrossLevelGraph:
    src: np.ndarray  # client node index
    dst: np.ndarray  # cluster index

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))


@dataclass
class MultiGraph:
    client: ClientGraph
    assignment: ClusterAssignment
    cluster: ClusterGraph
    cross: CrossLevelGraph
    kappa: float = 0.1
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.client.n

    @property
    def m(self) -> int:
        return self.assignment.m

    def client_edges(self):
        if "client" not in self._cache:
            self._cache["client"] = self.client.edges()
        return self._cache["client"]

    def cluster_edges(self):
        if "cluster" not in self._cache:
            self._cache["cluster"] = self.cluster.edges()
        return self._cache["cluster"]

    def to_json(self) -> dict:
        return {
            "node_ids": list(self.client.node_ids),
            "adjacency": self.client.adj.tolist(),
            "labels": self.assignment.label.tolist(),
            "M": self.m,
            "kappa": self.kappa,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MultiGraph":
        g = ClientGraph(np.array(obj["adjacency"], dtype=np.float64), [str(i) for i in obj["node_ids"]])
        a = ClusterAssignment(int(obj["M"]), np.array(obj["labels"]))
        return assemble(g, a, kappa=float(obj["kappa"]), seed=int(obj["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "MultiGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


def read_distances(path) -> list[tuple[str, str, float]]:
    """Read a ``from,to,distance`` CSV."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["from", "to", "distance"]:
            raise ConfigError(f"{path}: expected header 'from,to,distance', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                d = float(row[2])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric distance {row[2]!r}") from None
            rows.append((row[0].strip(), row[1].strip(), d))
    return rows


def write_distances(path, rows: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "distance"])
        for a, b, d in rows:
            w.writerow([a, b, repr(float(d))])


def build_client_graph(
    distances: Sequence[tuple[str, str, float]],
    kappa: float = 0.1,
    node_ids: Sequence[str] | None = None,
) -> ClientGraph:
    """Gaussian-kernel weights ``exp(-d^2 / sigma^2)`` with sub-``kappa`` entries cut.

    ``sigma`` is the standard deviation of all finite listed distances. Unlisted
    pairs get weight 0 and the result is symmetrized by taking the max.
    """
    if not distances:
        raise ConfigError("distance table is empty")
    if not 0.0 <= kappa < 1.0:
        raise ConfigError(f"kappa must lie in [0, 1), got {kappa}")
    if node_ids is None:
        seen: dict[str, None] = {}
        for a, b, _ in distances:
            seen.setdefault(str(a), None)
            seen.setdefault(str(b), None)
        node_ids = list(seen)
    ids = [str(i) for i in node_ids]
    index = {s: k for k, s in enumerate(ids)}
    d_all = np.array([d for _, _, d in distances], dtype=np.float64)
    if np.any(d_all < 0):
        raise ConfigError("negative distance in table")
    finite = d_all[np.isfinite(d_all)]
    sigma = float(finite.std()) if finite.size else 1.0
    if sigma == 0.0:
        sigma = 1.0
    n = len(ids)
    w = np.zeros((n, n))
    for a, b, d in distances:
        a, b = str(a), str(b)
        if a not in index or b not in index:
            raise ConfigError(f"distance pair ({a}, {b}) references an unknown sensor")
        if not math.isfinite(d):
            continue
        i, j = index[a], index[b]
        w[i, j] = max(w[i, j], math.exp(-(d * d) / (sigma * sigma)))
    w = np.maximum(w, w.T)
    w[w < kappa] = 0.0
    np.fill_diagonal(w, 0.0)
    return ClientGraph(w, ids)


def eigensym(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"eigensym needs a square matrix, got {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10:
        raise ValueError("eigensym needs a symmetric matrix")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    iu = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        if n < 2 or np.max(np.abs(a[iu])) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def laplacian(adj: np.ndarray) -> np.ndarray:
    """Combinatorial Laplacian ``D - A``."""
    return np.diag(adj.sum(axis=1)) - adj


def normalized_laplacian(adj: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; isolated nodes are given degree 1."""
    deg = adj.sum(axis=1)
    deg = np.where(deg > 0, deg, 1.0)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return np.eye(adj.shape[0]) - inv_sqrt[:, None] * adj * inv_sqrt[None, :]


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 100) -> np.ndarray:
    """Lloyd iterations from a seeded k-means++ start.

    Ties go to the lowest centroid index. An empty cluster takes the point that
    sits farthest from its own centroid.
    """
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0.0:
            nxt = next(i for i in range(n) if i not in chosen)
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    centers = x[chosen].copy()

    labels = np.full(n, -1)
    for _ in range(max_iter):
        dist = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(dist, axis=1)
        for j in range(k):
            if np.any(new == j):
                continue
            own = dist[np.arange(n), new]
            counts = np.bincount(new, minlength=k)
            own = np.where(counts[new] > 1, own, -1.0)
            far = int(np.argmax(own))
            new[far] = j
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            centers[j] = x[labels == j].mean(axis=0)
    return labels


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber clusters in order of their smallest member index."""
    labels = np.asarray(labels)
    order: dict[int, int] = {}
    for lab in labels.tolist():
        if lab not in order:
            order[lab] = len(order)
    return np.array([order[lab] for lab in labels.tolist()], dtype=np.intp)


def spectral_cluster(g: ClientGraph, m: int, seed: int = 0) -> ClusterAssignment:
    """Spectral clustering on the normalized Laplacian of ``g``."""
    if not 1 <= m <= g.n:
        raise ValueError(f"cluster count must lie in [1, {g.n}], got {m}")
    _, vecs = eigensym(normalized_laplacian(g.adj))
    emb = vecs[:, :m]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.where(norms > 0, emb / np.where(norms > 0, norms, 1.0), 0.0)
    return ClusterAssignment(m, canonical_labels(kmeans(emb, m, seed)))


def build_cluster_graph(g: ClientGraph, a: ClusterAssignment) -> ClusterGraph:
    """Clusters are adjacent iff some client edge joins their members."""
    if a.n != g.n:
        raise ValueError(f"assignment covers {a.n} nodes, graph has {g.n}")
    adj = np.zeros((a.m, a.m))
    src, dst = g.edges()
    ls, ld = a.label[src], a.label[dst]
    cross = ls != ld
    adj[ls[cross], ld[cross]] = 1.0
    adj[ld[cross], ls[cross]] = 1.0
    return ClusterGraph(adj)


def build_cross_level(a: ClusterAssignment) -> CrossLevelGraph:
    return CrossLevelGraph(np.arange(a.n, dtype=np.intp), a.label.copy())


def default_cluster_count(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


def assemble(g: ClientGraph, a: ClusterAssignment, kappa: float = 0.1, seed: int = 0) -> MultiGraph:
    return MultiGraph(g, a, build_cluster_graph(g, a), build_cross_level(a), kappa=kappa, seed=seed)


def build_multigraph(g: ClientGraph, m: int | None = None, seed: int = 0, kappa: float = 0.1) -> MultiGraph:
    """Cluster ``g`` into ``m`` groups (default ceil(sqrt(N))) and derive all graphs."""
    m = default_cluster_count(g.n) if m is None else m
    return assemble(g, spectral_cluster(g, m, seed), kappa=kappa, seed=seed)
