"""Area adjacency graphs and intrinsic CAR (ICAR) precision structures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

__all__ = ["AdjacencyGraph", "IcarStructure", "parse_adjacency", "build_icar", "grid_graph"]


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected simple graph over areas 0..n_areas-1.

    edges holds canonical (i, j) pairs with i < j, deduplicated and sorted.
    """

    n_areas: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.n_areas < 1:
            raise ValueError("n_areas must be >= 1")
        canon = []
        for e in self.edges:
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise ValueError(f"self-loop on area {i}")
            if not (0 <= i < self.n_areas and 0 <= j < self.n_areas):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n_areas}")
            canon.append((min(i, j), max(i, j)))
        canon = tuple(sorted(set(canon)))
        object.__setattr__(self, "edges", canon)

    @property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_areas, dtype=float)
        for i, j in self.edges:
            deg[i] += 1.0
            deg[j] += 1.0
        return deg

    def neighbor_matrix(self) -> np.ndarray:
        W = np.zeros((self.n_areas, self.n_areas))
        for i, j in self.edges:
            W[i, j] = W[j, i] = 1.0
        return W

    def induced_subgraph(self, keep) -> "AdjacencyGraph":
        """Subgraph on the kept areas, reindexed to 0..len(keep)-1.

        keep is a boolean mask of length n_areas or a sorted index array.
        """
        keep = np.asarray(keep)
        idx = np.flatnonzero(keep) if keep.dtype == bool else keep.astype(int)
        if idx.size == 0:
            raise ValueError("cannot induce an empty subgraph")
        remap = -np.ones(self.n_areas, dtype=int)
        remap[idx] = np.arange(idx.size)
        edges = tuple(
            (remap[i], remap[j]) for i, j in self.edges if remap[i] >= 0 and remap[j] >= 0
        )
        return AdjacencyGraph(n_areas=idx.size, edges=edges)


@dataclass(frozen=True)
class IcarStructure:
    """ICAR precision Q = D - W with a jitter-regularized factorization.

    inv_root R satisfies R R' = (Q + jitter I)^{-1}; root_t is its inverse
    (the upper Cholesky factor L' of Q + jitter I), used for prior rows and
    whitening quadratic forms.
    """

    graph: AdjacencyGraph
    precision: np.ndarray
    degree: np.ndarray
    jitter: float
    inv_root: np.ndarray
    root_t: np.ndarray
    n_components: int

    @property
    def n_areas(self) -> int:
        return self.graph.n_areas

    def quad_form(self, x: np.ndarray) -> float:
        """x' (Q + jitter I) x via the whitened vector."""
        w = self.root_t @ x
        return float(w @ w)


def parse_adjacency(text: str) -> AdjacencyGraph:
    """Parse the edge-list format: 'n=<count>' header then 'i j' lines.

    '#' starts a comment (full-line or trailing); blank lines are ignored.
    Errors carry 1-based line numbers.
    """
    n_areas = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if n_areas is None:
            if not line.startswith("n="):
                raise ValueError(f"line {lineno}: expected 'n=<count>' header, got {raw!r}")
            try:
                n_areas = int(line[2:])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: invalid area count in {raw!r}") from exc
            if n_areas < 1:
                raise ValueError(f"line {lineno}: area count must be >= 1")
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'i j', got {raw!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: non-integer area index in {raw!r}") from exc
        if i == j:
            raise ValueError(f"line {lineno}: self-loop on area {i}")
        if not (0 <= i < n_areas and 0 <= j < n_areas):
            raise ValueError(f"line {lineno}: edge ({i}, {j}) out of range for n={n_areas}")
        edges.append((i, j))
    if n_areas is None:
        raise ValueError("missing 'n=<count>' header")
    return AdjacencyGraph(n_areas=n_areas, edges=tuple(edges))


def build_icar(graph: AdjacencyGraph, jitter: float | None = None) -> IcarStructure:
    """Assemble Q = D - W and factor Q + jitter I.

    Default jitter is 1e-6 times the mean degree.  The ICAR precision is
    rank n - (number of connected components); the jitter makes the
    factorization well-posed without materially changing the prior.
    """
    if not graph.edges:
        raise ValueError("ICAR structure undefined for a graph with no edges")
    deg = graph.degrees
    W = graph.neighbor_matrix()
    Q = np.diag(deg) - W
    if jitter is None:
        jitter = 1e-6 * float(deg.mean())
    if not (jitter > 0 and np.isfinite(jitter)):
        raise ValueError("jitter must be a positive finite real")
    n = graph.n_areas
    A = Q + jitter * np.eye(n)
    L = np.linalg.cholesky(A)
    # R = L^{-T}: R R' = (L L')^{-1} = A^{-1}
    inv_root = sla.solve_triangular(L, np.eye(n), lower=True).T
    n_comp = int(
        connected_components(csr_matrix(W), directed=False, return_labels=False)
    )
    return IcarStructure(
        graph=graph,
        precision=Q,
        degree=deg,
        jitter=float(jitter),
        inv_root=inv_root,
        root_t=np.ascontiguousarray(L.T),
        n_components=n_comp,
    )


def grid_graph(rows: int, cols: int, n_areas: int | None = None) -> AdjacencyGraph:
    """Rook-adjacency grid over rows*cols areas (row-major indexing).

    n_areas truncates to the first n_areas cells in row-major order,
    keeping only edges between retained cells.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    n = rows * cols if n_areas is None else int(n_areas)
    if not (1 <= n <= rows * cols):
        raise ValueError("n_areas must lie in [1, rows*cols]")
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols and k + 1 < n and k < n:
                edges.append((k, k + 1))
            if r + 1 < rows and k + cols < n and k < n:
                edges.append((k, k + cols))
    return AdjacencyGraph(n_areas=n, edges=tuple(edges))
