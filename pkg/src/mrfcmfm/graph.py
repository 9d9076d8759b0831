"""Spatial adjacency and graph-distance neighbourhoods for the MRF constraint."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError

Edge = Tuple[str, str]


@dataclass(frozen=True)
class NeighborhoodGraph:
    node_ids: Tuple[str, ...]
    edges: FrozenSet[FrozenSet[str]]
    neighbor_limit: int
    neighborhoods: Dict[str, FrozenSet[str]]

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def index_lists(self, order: Optional[Sequence[str]] = None) -> List[np.ndarray]:
        """Neighbourhoods as integer index arrays over ``order`` (default: node_ids)."""
        order = list(self.node_ids if order is None else order)
        pos = {sid: k for k, sid in enumerate(order)}
        return [np.array(sorted(pos[j] for j in self.neighborhoods[sid]), dtype=np.int64)
                for sid in order]

    def csr(self, order: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, np.ndarray]:
        lists = self.index_lists(order)
        indptr = np.zeros(len(lists) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(x) for x in lists])
        indices = np.concatenate(lists) if indptr[-1] else np.zeros(0, dtype=np.int64)
        return indptr, indices.astype(np.int64)


def _read_rows(path: Path):
    manifest = None
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                body = text[1:].strip()
                if body.lower().startswith("nodes:"):
                    manifest = [s.strip() for s in body[6:].split(",") if s.strip()]
                continue
            rows.append((lineno, next(csv.reader([text]))))
    return manifest, rows


def load_adjacency(path, node_ids: Optional[Sequence[str]] = None):
    """Parse an undirected ``id_a,id_b[,weight]`` edge file.

    The node universe is, in order of preference, the ``node_ids`` argument,
    a ``# nodes: A,B,...`` manifest line, or the ids appearing on edges.
    Weights are accepted and ignored.  Returns ``(edges, node_ids)``.
    """
    path = Path(path)
    if not path.exists():
        raise InputError("adjacency file not found", path=path)
    manifest, rows = _read_rows(path)
    if rows and [c.strip() for c in rows[0][1][:2]] == ["id_a", "id_b"]:
        rows = rows[1:]
    universe = list(node_ids) if node_ids is not None else manifest
    known = set(universe) if universe is not None else None
    edges: List[Edge] = []
    seen = set()
    for lineno, row in rows:
        if len(row) not in (2, 3):
            raise InputError(f"expected 2 or 3 fields, got {len(row)}", line=lineno, path=path)
        a, b = row[0].strip(), row[1].strip()
        if len(row) == 3:
            try:
                float(row[2])
            except ValueError:
                raise InputError(f"weight {row[2]!r} is not a number", line=lineno, path=path) from None
        if a == b:
            raise InputError(f"self-loop on {a!r}", line=lineno, path=path)
        if known is not None:
            for x in (a, b):
                if x not in known:
                    raise InputError(f"unknown node id {x!r}", line=lineno, path=path)
        key = frozenset((a, b))
        if key in seen:
            raise InputError(f"duplicate edge {a}-{b}", line=lineno, path=path)
        seen.add(key)
        edges.append((a, b))
    if universe is None:
        universe = []
        for a, b in edges:
            for x in (a, b):
                if x not in universe:
                    universe.append(x)
    return edges, list(universe)


def neighborhoods(edges: Sequence[Edge], node_ids: Sequence[str], d: int) -> NeighborhoodGraph:
    """Nodes within graph distance ``d`` of each node (BFS truncated at depth d)."""
    if d < 1:
        raise InputError("neighbor limit must be >= 1")
    node_ids = tuple(node_ids)
    adj: Dict[str, set] = {v: set() for v in node_ids}
    for a, b in edges:
        if a not in adj or b not in adj:
            raise InputError(f"edge {a}-{b} references an unknown node")
        adj[a].add(b)
        adj[b].add(a)
    hoods = {}
    for src in node_ids:
        dist = {src: 0}
        queue = deque([src])
        while queue:
            v = queue.popleft()
            if dist[v] == d:
                continue
            for w in adj[v]:
                if w not in dist:
                    dist[w] = dist[v] + 1
                    queue.append(w)
        hoods[src] = frozenset(dist) - {src}
    return NeighborhoodGraph(node_ids, frozenset(frozenset(e) for e in edges), d, hoods)


def empty_graph(node_ids: Sequence[str]) -> NeighborhoodGraph:
    """Graph with no edges; every MRF factor is 1."""
    return neighborhoods([], node_ids, 1)


def us_states_adjacency():
    """Shipped contiguity of the 50 US states plus DC (AK and HI isolated)."""
    ref = resources.files("mrfcmfm") / "data" / "us_states_adjacency.csv"
    with resources.as_file(ref) as path:
        return load_adjacency(path)
