"""Road network topology: intersections, approach lanes, and relabelings.

Every intersection has exactly four incoming lanes indexed by the compass
direction traffic arrives from: 0 = from north, 1 = from south, 2 = from east,
3 = from west.  A lane whose direction slot has no upstream neighbor is a
boundary entry lane (fed by external demand); a turn aimed at an empty slot
leaves the network.  Arbitrary networks loaded from files reuse the same four
slots, with neighbors assigned to slots in sorted-id order, so intersection
degree is capped at four.

Each lane carries a stable ``stream id`` used to key its random streams
(arrivals, turn choices).  Relabeling a network moves lanes, and therefore
their streams, together with their intersections, which is what makes
simulation results covariant under relabeling.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LANES = 4
FROM_NORTH, FROM_SOUTH, FROM_EAST, FROM_WEST = 0, 1, 2, 3

# Exit direction slot for a vehicle entering from slot s.
STRAIGHT_OF = (1, 0, 3, 2)
LEFT_OF = (2, 3, 1, 0)
RIGHT_OF = (3, 2, 0, 1)
# Arriving via a move toward direction d means entering from its opposite.
ARRIVAL_SLOT = STRAIGHT_OF


@dataclass(frozen=True)
class AgentPermutation:
    """Bijection over intersection indices; ``mapping[old] = new``."""

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        object.__setattr__(self, "mapping", m)
        if sorted(m.tolist()) != list(range(m.size)):
            raise ValueError(f"not a permutation of 0..{m.size - 1}: {m.tolist()}")

    @property
    def size(self) -> int:
        return self.mapping.size

    @property
    def inverse(self) -> np.ndarray:
        return np.argsort(self.mapping)

    @classmethod
    def identity(cls, n: int) -> "AgentPermutation":
        return cls(np.arange(n))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "AgentPermutation":
        return cls(rng.permutation(n))


@dataclass(frozen=True)
class RoadNetwork:
    """Immutable intersection graph with per-lane geometry.

    adjacency includes self-loops (used directly as the attention mask).
    ``neighbor_dir[i, s]`` is the intersection feeding lane ``s`` of ``i``
    (-1 for boundary).  ``free_flow_time`` holds per-edge traversal seconds.
    """

    num_intersections: int
    adjacency: np.ndarray
    neighbor_dir: np.ndarray
    free_flow_time: np.ndarray
    stream_ids: np.ndarray
    node_labels: tuple = field(default=())

    def __post_init__(self):
        n = self.num_intersections
        adj = np.asarray(self.adjacency, dtype=bool)
        nd = np.asarray(self.neighbor_dir, dtype=np.int64)
        fft = np.asarray(self.free_flow_time, dtype=np.float64)
        sid = np.asarray(self.stream_ids, dtype=np.int64)
        labels = tuple(self.node_labels) if self.node_labels else tuple(str(i) for i in range(n))
        if adj.shape != (n, n):
            raise ValueError(f"adjacency must be ({n}, {n}), got {adj.shape}")
        if not (adj == adj.T).all():
            raise ValueError("adjacency must be symmetric")
        if not adj.diagonal().all():
            raise ValueError("adjacency must include self-loops")
        if nd.shape != (n, LANES):
            raise ValueError(f"neighbor_dir must be ({n}, {LANES}), got {nd.shape}")
        if fft.shape != (n, n):
            raise ValueError(f"free_flow_time must be ({n}, {n}), got {fft.shape}")
        if sid.shape != (n, LANES, 2):
            raise ValueError(f"stream_ids must be ({n}, {LANES}, 2), got {sid.shape}")
        if len(labels) != n:
            raise ValueError(f"need {n} node labels, got {len(labels)}")
        off_diag = adj & ~np.eye(n, dtype=bool)
        if n > 1 and not off_diag.any(axis=1).all():
            raise ValueError("every intersection needs at least one neighbor")
        for i in range(n):
            ups = nd[i][nd[i] >= 0]
            if len(set(ups.tolist())) != ups.size:
                raise ValueError(f"intersection {i} has duplicate upstream neighbors")
            for u in ups:
                if not off_diag[u, i]:
                    raise ValueError(f"neighbor_dir names non-edge {u}->{i}")
            if set(ups.tolist()) != set(np.nonzero(off_diag[i])[0].tolist()):
                raise ValueError(f"neighbor_dir at {i} does not cover its neighbors")
        if not (fft == fft.T).all():
            raise ValueError("free_flow_time must be symmetric")
        if (fft[off_diag] <= 0).any():
            raise ValueError("free_flow_time must be positive on edges")
        for arr in (adj, nd, fft, sid):
            arr.flags.writeable = False
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "neighbor_dir", nd)
        object.__setattr__(self, "free_flow_time", fft)
        object.__setattr__(self, "stream_ids", sid)
        object.__setattr__(self, "node_labels", labels)

    @property
    def lane_map(self) -> dict:
        """Directed edge (u, v) -> incoming lane slot at v carrying u's traffic."""
        out = {}
        for v in range(self.num_intersections):
            for s in range(LANES):
                u = self.neighbor_dir[v, s]
                if u >= 0:
                    out[(int(u), v)] = s
        return out

    @property
    def boundary_lanes(self) -> list:
        """(intersection, slot) pairs fed by external demand."""
        out = []
        for i in range(self.num_intersections):
            for s in range(LANES):
                if self.neighbor_dir[i, s] < 0:
                    out.append((i, s))
        return out

    def turn_target(self, i: int, slot: int, turn: int) -> tuple:
        """Resolve a discharge from lane (i, slot) for turn 0/1/2 = s/l/r.

        Returns (j, slot at j) or (-1, exit_direction) when the move leaves
        the network.
        """
        d = (STRAIGHT_OF, LEFT_OF, RIGHT_OF)[turn][slot]
        j = int(self.neighbor_dir[i, d])
        if j < 0:
            return -1, d
        return j, ARRIVAL_SLOT[d]


def grid_network(rows: int, cols: int, segment_length: float = 400.0,
                 speed_mps: float = 13.9) -> RoadNetwork:
    """Rectangular arterial grid with uniform segment length and speed."""
    if rows < 1 or cols < 1:
        raise ValueError(f"grid needs rows, cols >= 1, got {rows}x{cols}")
    if segment_length <= 0 or speed_mps <= 0:
        raise ValueError("segment_length and speed_mps must be positive")
    n = rows * cols
    adj = np.eye(n, dtype=bool)
    nd = np.full((n, LANES), -1, dtype=np.int64)
    fft = np.zeros((n, n))
    tt = segment_length / speed_mps
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            steps = ((FROM_NORTH, r - 1, c), (FROM_SOUTH, r + 1, c),
                     (FROM_EAST, r, c + 1), (FROM_WEST, r, c - 1))
            for slot, rr, cc in steps:
                if 0 <= rr < rows and 0 <= cc < cols:
                    j = rr * cols + cc
                    adj[i, j] = adj[j, i] = True
                    nd[i, slot] = j
                    fft[i, j] = fft[j, i] = tt
    sid = np.stack(np.meshgrid(np.arange(n), np.arange(LANES), indexing="ij"), axis=-1)
    labels = tuple(f"r{r}c{c}" for r in range(rows) for c in range(cols))
    return RoadNetwork(n, adj, nd, fft, sid, labels)


def load_network(path) -> RoadNetwork:
    """Build a network from a JSON file of nodes and undirected edges.

    Schema: {"nodes": [...], "edges": [[u, v, length_m, speed_mps], ...]}.
    Neighbors occupy direction slots in sorted-index order, so degree is
    capped at four.
    """
    with open(path) as fh:
        doc = json.load(fh)
    try:
        nodes = list(doc["nodes"])
        edges = list(doc["edges"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"network file {path} needs 'nodes' and 'edges'") from exc
    if len(set(map(str, nodes))) != len(nodes):
        raise ValueError("duplicate node ids")
    index = {str(u): k for k, u in enumerate(nodes)}
    n = len(nodes)
    adj = np.eye(n, dtype=bool)
    fft = np.zeros((n, n))
    seen = set()
    for e in edges:
        if len(e) != 4:
            raise ValueError(f"edge must be [u, v, length_m, speed_mps], got {e}")
        u, v, length, speed = str(e[0]), str(e[1]), float(e[2]), float(e[3])
        if u not in index or v not in index:
            raise ValueError(f"edge references unknown node: {e}")
        if u == v:
            raise ValueError(f"self-edge not allowed: {e}")
        a, b = index[u], index[v]
        if (min(a, b), max(a, b)) in seen:
            raise ValueError(f"duplicate edge {u}-{v}")
        seen.add((min(a, b), max(a, b)))
        if length <= 0 or speed <= 0:
            raise ValueError(f"edge {u}-{v} needs positive length and speed")
        adj[a, b] = adj[b, a] = True
        fft[a, b] = fft[b, a] = length / speed
    nd = np.full((n, LANES), -1, dtype=np.int64)
    for i in range(n):
        neighbors = sorted(j for j in range(n) if adj[i, j] and j != i)
        if len(neighbors) > LANES:
            raise ValueError(f"node {nodes[i]} has degree {len(neighbors)} > {LANES}")
        for s, j in enumerate(neighbors):
            nd[i, s] = j
    sid = np.stack(np.meshgrid(np.arange(n), np.arange(LANES), indexing="ij"), axis=-1)
    return RoadNetwork(n, adj, nd, fft, sid, tuple(str(u) for u in nodes))


def permute(network: RoadNetwork, sigma: AgentPermutation) -> RoadNetwork:
    """Relabel intersections; lane slots and their streams move with nodes."""
    if sigma.size != network.num_intersections:
        raise ValueError(f"permutation size {sigma.size} != {network.num_intersections} intersections")
    inv = sigma.inverse
    p = sigma.mapping
    adj = network.adjacency[np.ix_(inv, inv)]
    fft = network.free_flow_time[np.ix_(inv, inv)]
    nd = network.neighbor_dir[inv].copy()
    mask = nd >= 0
    nd[mask] = p[nd[mask]]
    sid = network.stream_ids[inv]
    labels = tuple(network.node_labels[j] for j in inv)
    return RoadNetwork(network.num_intersections, adj, nd, fft, sid, labels)


def hop_distances(network: RoadNetwork) -> np.ndarray:
    """BFS hop counts between intersections; -1 where unreachable."""
    n = network.num_intersections
    off_diag = network.adjacency & ~np.eye(n, dtype=bool)
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        frontier = [src]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for u in frontier:
                for v in np.nonzero(off_diag[u])[0]:
                    if dist[src, v] < 0:
                        dist[src, v] = d
                        nxt.append(int(v))
            frontier = nxt
    return dist


def topology_hash(network: RoadNetwork) -> str:
    """Stable digest of everything the simulator depends on."""
    blob = json.dumps({
        "n": network.num_intersections,
        "adjacency": network.adjacency.astype(int).tolist(),
        "neighbor_dir": network.neighbor_dir.tolist(),
        "free_flow_time": network.free_flow_time.tolist(),
        "stream_ids": network.stream_ids.tolist(),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
