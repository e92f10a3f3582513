"""Proximity graphs, smooth adjacency weights, and combinatorial robustness checks.

Edges exist between robots whose distance is at most the communication
radius.  On top of the resulting snapshot this module provides the smooth
(sigmoid-shaped) adjacency weight used by the degree barrier, per-role
degree statistics, the sufficient degree threshold ``F' = F + floor(n/2)``
for resilient consensus, and exhaustive ``(r, s)``-robustness checking for
small networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "AdjacencyParams",
    "GraphSnapshot",
    "RoleAssignment",
    "DegreeStats",
    "RobustnessCheck",
    "GraphSizeError",
    "adjacency_weight",
    "adjacency_weight_gradient",
    "weight_matrix",
    "build_graph",
    "connectivity_level",
    "connectivity_levels",
    "degree_stats",
    "required_degree_threshold",
    "is_rs_reachable",
    "is_rs_robust",
    "degree_robustness_bound",
    "read_edge_list",
    "write_edge_list",
]


class GraphSizeError(RuntimeError):
    """Exhaustive subset enumeration would exceed the configured node cap."""


@dataclass(frozen=True)
class AdjacencyParams:
    """Parameters of the smooth proximity weight.

    ``q1`` must equal ``2 + eps`` with ``0 < eps < 1/(n-1)``.  The weights
    then satisfy ``0 <= a_ij < 1 + 1/(n-1)``, which is what lets a weighted
    degree of at least ``F'`` certify at least ``F'`` actual neighbors.

    Attributes:
        q1: weight scale, in the open interval ``(2, 2 + 1/(n-1))``.
        q2: sigmoid sharpness, positive.
        radius: communication radius in meters, positive.
        n: number of robots in the network, at least 2.
    """

    q1: float
    q2: float
    radius: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError(f"n must be at least 2, got {self.n}")
        if not self.q2 > 0:
            raise ValueError(f"q2 must be positive, got {self.q2}")
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        eps = self.q1 - 2.0
        if not 0.0 < eps < 1.0 / (self.n - 1):
            raise ValueError(
                f"q1 must lie in (2, 2 + 1/(n-1)) = (2, {2 + 1 / (self.n - 1)}); got {self.q1}"
            )

    @classmethod
    def for_swarm(cls, n: int, radius: float, q2: float = 1.0) -> "AdjacencyParams":
        """Default parameters with ``q1 = 2 + 0.5/(n-1)``, centered in the admissible interval."""
        return cls(q1=2.0 + 0.5 / (n - 1), q2=q2, radius=radius, n=n)


def _check_positions(*positions: np.ndarray) -> list[np.ndarray]:
    out = []
    for p in positions:
        arr = np.asarray(p, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("positions must be finite")
        out.append(arr)
    return out


def adjacency_weight(xi, xj, params: AdjacencyParams) -> float:
    """Smooth adjacency weight between two positions.

    Returns ``q1 / (1 + exp(-q2 (R^2 - d^2)^2)) - q1/2`` when the pair is
    within the radius and exactly 0 otherwise.  The value lives in
    ``[0, q1/2)``: it vanishes at the radius and saturates near ``q1/2``
    for close pairs.
    """
    xi, xj = _check_positions(xi, xj)
    diff = xi - xj
    d2 = float(diff @ diff)
    r2 = params.radius * params.radius
    if d2 > r2:
        return 0.0
    z = r2 - d2
    return params.q1 / (1.0 + math.exp(-params.q2 * z * z)) - 0.5 * params.q1


def adjacency_weight_gradient(xi, xj, params: AdjacencyParams) -> np.ndarray:
    """Gradient of ``adjacency_weight(xi, xj, params)`` with respect to ``xi``.

    Zero at and beyond the radius; the weight is continuously
    differentiable there because the chain-rule factor ``(R^2 - d^2)``
    vanishes on the boundary.
    """
    xi, xj = _check_positions(xi, xj)
    diff = xi - xj
    d2 = float(diff @ diff)
    r2 = params.radius * params.radius
    if d2 >= r2:
        return np.zeros_like(diff)
    z = r2 - d2
    sig = 1.0 / (1.0 + math.exp(-params.q2 * z * z))
    return -4.0 * params.q1 * params.q2 * z * sig * (1.0 - sig) * diff


def weight_matrix(positions, params: AdjacencyParams) -> np.ndarray:
    """All pairwise adjacency weights as an ``(n, n)`` symmetric matrix with zero diagonal."""
    pos = np.asarray(positions, dtype=float)
    diff = pos[:, None, :] - pos[None, :, :]
    d2 = np.einsum("ijm,ijm->ij", diff, diff)
    r2 = params.radius * params.radius
    edge = (d2 <= r2) & ~np.eye(len(pos), dtype=bool)
    z = np.where(edge, r2 - d2, 0.0)
    w = params.q1 / (1.0 + np.exp(-params.q2 * z * z)) - 0.5 * params.q1
    return np.where(edge, w, 0.0)


@dataclass(frozen=True)
class GraphSnapshot:
    """Simple undirected graph at one instant.

    ``neighbors[i]`` is the sorted tuple of nodes adjacent to ``i`` and
    ``edges`` holds each unordered pair once as ``(i, j)`` with ``i < j``.
    """

    n: int
    neighbors: tuple[tuple[int, ...], ...]
    edges: frozenset[tuple[int, int]]

    def __post_init__(self) -> None:
        if self.n < 1 or len(self.neighbors) != self.n:
            raise ValueError("neighbor lists inconsistent with node count")
        for i, nbrs in enumerate(self.neighbors):
            if i in nbrs:
                raise ValueError(f"self-loop at node {i}")
            if len(set(nbrs)) != len(nbrs):
                raise ValueError(f"duplicate neighbor at node {i}")
        for i, j in self.edges:
            if not (0 <= i < j < self.n):
                raise ValueError(f"bad edge ({i}, {j})")
            if j not in self.neighbors[i] or i not in self.neighbors[j]:
                raise ValueError(f"edge ({i}, {j}) missing from neighbor lists")
        if sum(len(nbrs) for nbrs in self.neighbors) != 2 * len(self.edges):
            raise ValueError("neighbor lists and edge set disagree")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "GraphSnapshot":
        canon = set()
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={n}")
            canon.add((min(i, j), max(i, j)))
        nbrs: list[list[int]] = [[] for _ in range(n)]
        for i, j in canon:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return cls(n=n, neighbors=tuple(tuple(sorted(b)) for b in nbrs), edges=frozenset(canon))

    @classmethod
    def complete(cls, n: int) -> "GraphSnapshot":
        return cls.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def degrees(self) -> tuple[int, ...]:
        return tuple(len(nbrs) for nbrs in self.neighbors)

    def adjacency_matrix(self) -> np.ndarray:
        adj = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = True
        return adj


def build_graph(positions, radius: float) -> GraphSnapshot:
    """Proximity graph: an edge joins every pair within ``radius`` (inclusive)."""
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 2 or len(pos) < 2:
        raise ValueError("need at least 2 positions of equal dimension")
    if not np.all(np.isfinite(pos)):
        raise ValueError("positions must be finite")
    diff = pos[:, None, :] - pos[None, :, :]
    d2 = np.einsum("ijm,ijm->ij", diff, diff)
    r2 = float(radius) * float(radius)
    edges = [(i, j) for i in range(len(pos)) for j in range(i + 1, len(pos)) if d2[i, j] <= r2]
    return GraphSnapshot.from_edges(len(pos), edges)


@dataclass(frozen=True)
class RoleAssignment:
    """Partition of the nodes into normal and malicious sets under an F-total attack.

    At most ``f`` nodes are malicious, and ``f`` may not exceed
    ``floor((n-1)/2)``.
    """

    normal: frozenset[int]
    malicious: frozenset[int]
    f: int

    def __post_init__(self) -> None:
        n = self.n
        if self.normal & self.malicious:
            raise ValueError("normal and malicious sets overlap")
        if self.normal | self.malicious != frozenset(range(n)):
            raise ValueError("roles must partition the node set 0..n-1")
        if not self.normal:
            raise ValueError("normal set must be nonempty")
        if self.f < 0 or self.f > (n - 1) // 2:
            raise ValueError(f"f must lie in [0, floor((n-1)/2)] = [0, {(n - 1) // 2}], got {self.f}")
        if len(self.malicious) > self.f:
            raise ValueError(f"{len(self.malicious)} malicious nodes exceeds f={self.f}")

    @property
    def n(self) -> int:
        return len(self.normal) + len(self.malicious)

    @classmethod
    def assign(cls, n: int, f: int, malicious: Iterable[int] = ()) -> "RoleAssignment":
        bad = frozenset(malicious)
        return cls(normal=frozenset(range(n)) - bad, malicious=bad, f=f)

    @classmethod
    def sample(cls, n: int, f: int, rng: np.random.Generator) -> "RoleAssignment":
        """Draw exactly ``f`` malicious nodes uniformly without replacement."""
        bad = sorted(int(i) for i in rng.choice(n, size=f, replace=False)) if f else []
        return cls.assign(n, f, bad)


@dataclass(frozen=True)
class DegreeStats:
    min_degree: int
    min_normal_degree: int
    degrees: tuple[int, ...]


def degree_stats(snapshot: GraphSnapshot, roles: RoleAssignment) -> DegreeStats:
    """Minimum degree over all nodes and over the normal set only."""
    if roles.n != snapshot.n:
        raise ValueError("role assignment size does not match graph")
    if not roles.normal:
        raise ValueError("normal set must be nonempty")
    degs = snapshot.degrees()
    return DegreeStats(
        min_degree=min(degs),
        min_normal_degree=min(degs[i] for i in roles.normal),
        degrees=degs,
    )


def required_degree_threshold(n: int, f: int) -> int:
    """Sufficient per-normal-node degree for resilient consensus: ``F' = F + floor(n/2)``."""
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    if f < 0 or f > (n - 1) // 2:
        raise ValueError(f"f must lie in [0, floor((n-1)/2)] = [0, {(n - 1) // 2}], got {f}")
    return f + n // 2


def is_rs_reachable(snapshot: GraphSnapshot, subset: Iterable[int], r: int, s: int) -> bool:
    """``True`` iff at least ``s`` nodes of ``subset`` have ``r`` or more neighbors outside it."""
    sub = frozenset(subset)
    if not sub or sub == frozenset(range(snapshot.n)):
        raise ValueError("subset must be a nonempty proper subset of the nodes")
    if not sub <= frozenset(range(snapshot.n)):
        raise ValueError("subset contains out-of-range nodes")
    if r < 0 or s < 0:
        raise ValueError("r and s must be nonnegative")
    count = sum(1 for i in sub if len(frozenset(snapshot.neighbors[i]) - sub) >= r)
    return count >= s


@lru_cache(maxsize=4)
def _subset_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """All unordered pairs of nonempty disjoint subsets of ``range(n)`` as boolean masks.

    Nodes get one of three labels (first set, second set, neither); pairs
    with an empty side are dropped and each unordered pair is kept once by
    requiring the lowest-indexed labeled node to sit in the first set.
    """
    codes = np.arange(3**n, dtype=np.int64)
    digits = (codes[:, None] // 3 ** np.arange(n, dtype=np.int64)) % 3
    s1 = digits == 1
    s2 = digits == 2
    keep = s1.any(axis=1) & s2.any(axis=1)
    s1, s2 = s1[keep], s2[keep]
    first = np.argmax(s1 | s2, axis=1)
    canonical = s1[np.arange(len(s1)), first]
    return s1[canonical], s2[canonical]


@dataclass(frozen=True)
class RobustnessCheck:
    """Outcome of an exhaustive robustness check; truthy iff the graph is robust."""

    robust: bool
    witness: tuple[frozenset[int], frozenset[int]] | None = None

    def __bool__(self) -> bool:
        return self.robust


def is_rs_robust(snapshot: GraphSnapshot, r: int, s: int, cap: int = 12) -> RobustnessCheck:
    """Exhaustively decide ``(r, s)``-robustness.

    Every unordered pair of nonempty disjoint node subsets is tested: the
    pair passes if either side is entirely ``r``-reachable outside itself,
    or the two reachable-node counts sum to at least ``s``.  On failure the
    first violating pair is returned as a witness.  Graphs larger than
    ``cap`` nodes raise :class:`GraphSizeError` rather than truncating.
    """
    if r < 0 or s < 0:
        raise ValueError("r and s must be nonnegative")
    if snapshot.n > cap:
        raise GraphSizeError(
            f"exhaustive robustness check limited to {cap} nodes, got {snapshot.n}"
        )
    s1, s2 = _subset_pairs(snapshot.n)
    adj = snapshot.adjacency_matrix().astype(np.int16)
    # outside[p, i] = number of neighbors of node i outside subset p
    outside1 = (~s1).astype(np.int16) @ adj
    outside2 = (~s2).astype(np.int16) @ adj
    x1 = ((outside1 >= r) & s1).sum(axis=1)
    x2 = ((outside2 >= r) & s2).sum(axis=1)
    full1 = x1 == s1.sum(axis=1)
    full2 = x2 == s2.sum(axis=1)
    ok = full1 | full2 | (x1 + x2 >= s)
    if ok.all():
        return RobustnessCheck(robust=True)
    bad = int(np.argmin(ok))
    witness = (
        frozenset(np.flatnonzero(s1[bad]).tolist()),
        frozenset(np.flatnonzero(s2[bad]).tolist()),
    )
    return RobustnessCheck(robust=False, witness=witness)


def degree_robustness_bound(snapshot: GraphSnapshot) -> int | None:
    """Robustness level certified by the minimum degree alone.

    When the minimum degree is at least ``floor(n/2) - 1`` the graph is
    ``(r, s)``-robust for every ``1 <= s <= n`` with
    ``r = min_degree - floor(n/2) + 1``; returns ``None`` when the degree
    condition fails and the bound says nothing.
    """
    half = snapshot.n // 2
    dmin = min(snapshot.degrees())
    if dmin < half - 1:
        return None
    return dmin - half + 1


def write_edge_list(snapshot: GraphSnapshot, path) -> None:
    """Write one ``i j`` pair per line, 0-based, suitable for external tools."""
    lines = [f"{i} {j}" for i, j in sorted(snapshot.edges)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_edge_list(path, n: int | None = None) -> GraphSnapshot:
    """Parse an edge-list file of ``i j`` lines (0-based, ``#`` comments allowed).

    The node count defaults to one more than the largest index seen.
    """
    edges = []
    max_node = -1
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'i j', got {raw!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-integer node id in {raw!r}") from exc
        if i < 0 or j < 0:
            raise ValueError(f"{path}:{lineno}: node ids must be nonnegative")
        edges.append((i, j))
        max_node = max(max_node, i, j)
    count = n if n is not None else max_node + 1
    if count < 1:
        raise ValueError(f"{path}: empty graph and no node count given")
    return GraphSnapshot.from_edges(count, edges)


def connectivity_level(i: int, snapshot: GraphSnapshot, positions, params: AdjacencyParams) -> float:
    """Sum of adjacency weights from node ``i`` to its snapshot neighbors; 0 when isolated."""
    if not 0 <= i < snapshot.n:
        raise ValueError(f"node {i} out of range")
    pos = np.asarray(positions, dtype=float)
    return math.fsum(adjacency_weight(pos[i], pos[j], params) for j in snapshot.neighbors[i])


def connectivity_levels(positions, params: AdjacencyParams) -> np.ndarray:
    """Connectivity level of every node of the proximity graph induced by ``positions``."""
    return weight_matrix(positions, params).sum(axis=1)
