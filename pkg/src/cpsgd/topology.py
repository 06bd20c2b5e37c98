"""Undirected communication graphs, Laplacians, and spectral quantities.

Agents are numbered 1..n. A topology is immutable once built and validated:
no self-loops, no duplicate edges, positive weights, and connectivity are
all enforced at construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

__all__ = [
    "TopologyError",
    "SelfLoopError",
    "DuplicateEdgeError",
    "NonPositiveWeightError",
    "DisconnectedGraphError",
    "EigenFailureError",
    "Topology",
    "SpectralData",
    "build_topology",
    "single_agent_topology",
    "ring_with_chords",
    "spectral",
    "consensus_error",
    "topology_from_json",
    "topology_to_json",
]


class TopologyError(ValueError):
    """Invalid graph specification."""


class SelfLoopError(TopologyError):
    pass


class DuplicateEdgeError(TopologyError):
    pass


class NonPositiveWeightError(TopologyError):
    pass


class DisconnectedGraphError(TopologyError):
    pass


class EigenFailureError(RuntimeError):
    """Symmetric eigendecomposition did not converge."""


@dataclass(frozen=True)
class Topology:
    """Validated weighted undirected graph on agents 1..n."""

    n: int
    edges: tuple[tuple[int, int], ...]  # unordered pairs stored as (i<j)
    weights: tuple[float, ...]

    @cached_property
    def weight_matrix(self) -> np.ndarray:
        w = np.zeros((self.n, self.n))
        for (i, j), wij in zip(self.edges, self.weights):
            w[i - 1, j - 1] = wij
            w[j - 1, i - 1] = wij
        return w

    @cached_property
    def degrees(self) -> np.ndarray:
        return self.weight_matrix.sum(axis=1)

    @cached_property
    def laplacian(self) -> np.ndarray:
        w = self.weight_matrix
        return np.diag(w.sum(axis=1)) - w

    def neighbors(self, i: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)


@dataclass(frozen=True)
class SpectralData:
    """Laplacian spectrum and the projector satisfying P L = I - 11^T/n."""

    laplacian: np.ndarray
    lambda_max: float
    lambda_min_pos: float
    projector_p: np.ndarray
    centering_k: np.ndarray = field(repr=False, default=None)  # I - 11^T/n


def _check_connected(n: int, edges: Sequence[tuple[int, int]]) -> bool:
    parent = list(range(n + 1))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    root = find(1)
    return all(find(i) == root for i in range(2, n + 1))


def build_topology(
    n: int,
    edges: Sequence[Sequence[int]],
    weights: Sequence[float] | None = None,
) -> Topology:
    """Build and validate a connected undirected graph.

    `weights=None` assigns unit weight to every edge; otherwise one positive
    weight per edge is required.
    """
    if n < 2:
        raise TopologyError(f"need at least 2 agents, got n={n}")
    norm_edges: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    for e in edges:
        i, j = int(e[0]), int(e[1])
        if not (1 <= i <= n and 1 <= j <= n):
            raise TopologyError(f"edge ({i},{j}) has endpoint outside [1..{n}]")
        if i == j:
            raise SelfLoopError(f"self-loop at agent {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise DuplicateEdgeError(f"duplicate edge {key}")
        seen.add(key)
        norm_edges.append(key)
    if weights is None:
        wlist = [1.0] * len(norm_edges)
    else:
        if len(weights) != len(norm_edges):
            raise TopologyError(
                f"got {len(weights)} weights for {len(norm_edges)} edges"
            )
        wlist = [float(w) for w in weights]
        for w in wlist:
            if not (w > 0):
                raise NonPositiveWeightError(f"edge weight {w} is not positive")
    if not _check_connected(n, norm_edges):
        raise DisconnectedGraphError(f"graph on {n} agents is not connected")
    return Topology(n=n, edges=tuple(norm_edges), weights=tuple(wlist))


def single_agent_topology() -> Topology:
    """Degenerate one-agent graph (no edges, zero Laplacian).

    Bypasses the n >= 2 requirement so single-agent runs reduce to
    centralized SGD. Spectral data is undefined for this graph.
    """
    return Topology(n=1, edges=(), weights=())


def ring_with_chords(n: int) -> Topology:
    """Connected ring plus antipodal chords, used by the agent-count sweep."""
    if n < 2:
        return single_agent_topology() if n == 1 else build_topology(n, [])
    edges = [(i, i + 1) for i in range(1, n)] + ([(n, 1)] if n > 2 else [])
    if n >= 4:
        half = n // 2
        for i in range(1, half + 1):
            j = i + half
            if j <= n and (i, j) not in edges and (i, j) != (1, n):
                edges.append((i, j))
    return build_topology(n, edges)


def spectral(topology: Topology) -> SpectralData:
    """Eigendecompose the Laplacian and assemble the consensus projector.

    P = sum over positive eigenvalues of (1/lambda_i) u_i u_i^T plus
    (1/lambda_max) (1/n) 1 1^T, which satisfies P L = L P = I - 11^T/n and
    (1/lambda_max) I <= P <= (1/lambda_min_pos) I.
    """
    if topology.n < 2:
        raise TopologyError("spectral data is undefined for a single agent")
    lap = topology.laplacian
    try:
        vals, vecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        raise EigenFailureError(str(exc)) from exc
    lam_max = float(vals[-1])
    pos = vals > 1e-9 * lam_max
    if not pos.any():
        raise EigenFailureError("no positive Laplacian eigenvalue (graph empty?)")
    lam_min_pos = float(vals[pos].min())
    n = topology.n
    upos = vecs[:, pos]
    proj = (upos / vals[pos]) @ upos.T + (1.0 / lam_max) * np.full((n, n), 1.0 / n)
    k_n = np.eye(n) - np.full((n, n), 1.0 / n)
    return SpectralData(
        laplacian=lap,
        lambda_max=lam_max,
        lambda_min_pos=lam_min_pos,
        projector_p=proj,
        centering_k=k_n,
    )


def consensus_error(x_stack: np.ndarray) -> float:
    """(1/n) sum_i ||x_i - mean_j x_j||^2 for an (n, d) stack."""
    x = np.atleast_2d(np.asarray(x_stack, dtype=float))
    dev = x - x.mean(axis=0, keepdims=True)
    return float((dev * dev).sum() / x.shape[0])


def topology_from_json(source: str | dict) -> Topology:
    """Parse {"n": int, "edges": [[i,j],...], "weights": [...]} (weights optional)."""
    obj = json.loads(source) if isinstance(source, str) else source
    if not isinstance(obj, dict):
        raise TopologyError("graph spec must be a JSON object")
    unknown = set(obj) - {"n", "edges", "weights"}
    if unknown:
        raise TopologyError(f"unknown graph spec keys: {sorted(unknown)}")
    if "n" not in obj or "edges" not in obj:
        raise TopologyError("graph spec requires 'n' and 'edges'")
    return build_topology(int(obj["n"]), obj["edges"], obj.get("weights"))


def topology_to_json(topology: Topology) -> str:
    obj = {
        "n": topology.n,
        "edges": [list(e) for e in topology.edges],
        "weights": list(topology.weights),
    }
    return json.dumps(obj)
