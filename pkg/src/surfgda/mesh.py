"""Surface graphs: data model, OFF I/O, synthetic labeled spheres and sub-graph sampling."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree


class MeshParseError(ValueError):
    """Raised when an OFF file or one of its sidecars cannot be parsed."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass(eq=False)
class SurfaceGraph:
    """Undirected graph embedded in 3D with a per-node scalar and optional labels.

    Parameters
    ----------
    node_positions : (N, 3) float array
    node_scalar : (N,) float array
        Sulcal-depth analog.
    edges : (E, 2) int array
        Unordered pairs, stored with ``i < j``, unique, no self pairs.
    labels : (N,) int array or None
        Parcel ids in ``[0, num_parcels)``.
    num_parcels : int
    faces : (F, 3) int array or None
        Triangles, kept only so meshes can be written back out.
    node_ids : (N,) int array or None
        Index of each node in the graph this one was cut from.
    """

    node_positions: np.ndarray
    node_scalar: np.ndarray
    edges: np.ndarray
    labels: np.ndarray | None = None
    num_parcels: int = 1
    faces: np.ndarray | None = field(default=None, repr=False)
    node_ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.node_positions = np.ascontiguousarray(self.node_positions, dtype=np.float64).reshape(-1, 3)
        n = self.node_positions.shape[0]
        self.node_scalar = np.ascontiguousarray(self.node_scalar, dtype=np.float64).reshape(-1)
        if self.node_scalar.shape[0] != n:
            raise ValueError("node_scalar length does not match node count")
        self.edges = canonical_edges(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError("edge index out of range")
        if self.num_parcels < 1:
            raise ValueError("num_parcels must be positive")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != n:
                raise ValueError("labels length does not match node count")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_parcels):
                raise ValueError("label outside [0, num_parcels)")
        if self.faces is not None:
            self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def num_nodes(self) -> int:
        return self.node_positions.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def adjacency(self) -> sparse.csr_matrix:
        """Unweighted symmetric adjacency (CSR)."""
        n = self.num_nodes
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        return sparse.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(n, n))

    def without_labels(self) -> SurfaceGraph:
        return SurfaceGraph(self.node_positions, self.node_scalar, self.edges, None,
                            self.num_parcels, self.faces, self.node_ids)

    def subgraph(self, nodes) -> SurfaceGraph:
        """Induced sub-graph on ``nodes`` (kept in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.num_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        e = remap[self.edges]
        e = e[(e >= 0).all(axis=1)]
        faces = None
        if self.faces is not None:
            f = remap[self.faces]
            faces = f[(f >= 0).all(axis=1)]
        labels = None if self.labels is None else self.labels[nodes]
        ids = nodes if self.node_ids is None else self.node_ids[nodes]
        return SurfaceGraph(self.node_positions[nodes], self.node_scalar[nodes], e, labels,
                            self.num_parcels, faces, ids)

    def permuted(self, perm) -> SurfaceGraph:
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        return self.subgraph(perm)

    def is_connected(self) -> bool:
        if self.num_nodes == 0:
            return False
        ncomp, _ = csgraph.connected_components(self.adjacency(), directed=False)
        return ncomp == 1


def canonical_edges(edges: np.ndarray) -> np.ndarray:
    """Sort each pair, drop self pairs and duplicates."""
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.sort(edges, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def face_edges(faces: np.ndarray) -> np.ndarray:
    f = np.asarray(faces, dtype=np.int64)
    return canonical_edges(np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]))


# ----------------------------------------------------------------------------
# OFF I/O


def _content_lines(text: str):
    """Yield (line_number, tokens) for non-empty, non-comment lines."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        s = raw.split("#", 1)[0].strip()
        if s:
            yield lineno, s.split()


def read_off(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an ASCII OFF file into ``(vertices, faces)``."""
    path = Path(path)
    lines = _content_lines(path.read_text())
    try:
        lineno, tok = next(lines)
    except StopIteration:
        raise MeshParseError(path, 1, "empty file") from None
    if tok[0] != "OFF":
        raise MeshParseError(path, lineno, f"expected 'OFF' header, got {tok[0]!r}")
    tok = tok[1:]
    if not tok:
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshParseError(path, lineno, "missing counts line") from None
    try:
        nv, nf = int(tok[0]), int(tok[1])
    except (IndexError, ValueError):
        raise MeshParseError(path, lineno, "malformed counts line") from None
    if nv < 0 or nf < 0:
        raise MeshParseError(path, lineno, "negative counts")

    verts = np.empty((nv, 3))
    for k in range(nv):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshParseError(path, lineno, f"expected {nv} vertices, found {k}") from None
        try:
            verts[k] = [float(t) for t in tok[:3]]
            if len(tok) < 3:
                raise ValueError
        except ValueError:
            raise MeshParseError(path, lineno, "malformed vertex line") from None

    faces = np.empty((nf, 3), dtype=np.int64)
    for k in range(nf):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshParseError(path, lineno, f"expected {nf} faces, found {k}") from None
        try:
            idx = [int(t) for t in tok]
        except ValueError:
            raise MeshParseError(path, lineno, "malformed face line") from None
        if not idx or idx[0] != 3 or len(idx) < 4:
            raise MeshParseError(path, lineno, "non-triangular face")
        tri = idx[1:4]
        if min(tri) < 0 or max(tri) >= nv:
            raise MeshParseError(path, lineno, f"vertex index out of range in face {tri}")
        faces[k] = tri
    return verts, faces


def _read_sidecar(path: Path, n: int, kind):
    values = []
    last = 0
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        s = raw.strip()
        if not s:
            continue
        last = lineno
        try:
            values.append(kind(s))
        except ValueError:
            raise MeshParseError(path, lineno, f"cannot parse {s!r}") from None
    if len(values) != n:
        raise MeshParseError(path, last + 1, f"expected {n} values, found {len(values)}")
    return np.asarray(values)


def load_mesh(path, num_parcels: int | None = None) -> SurfaceGraph:
    """Load an OFF mesh plus optional ``<stem>.labels`` / ``<stem>.scalar`` sidecars.

    ``num_parcels`` defaults to ``max(label) + 1`` when labels exist.
    """
    path = Path(path)
    verts, faces = read_off(path)
    n = len(verts)
    scalar_path = path.with_suffix(".scalar")
    labels_path = path.with_suffix(".labels")
    scalar = _read_sidecar(scalar_path, n, float) if scalar_path.exists() else np.zeros(n)
    labels = _read_sidecar(labels_path, n, int) if labels_path.exists() else None
    if num_parcels is None:
        num_parcels = int(labels.max()) + 1 if labels is not None and n else 1
    return SurfaceGraph(verts, scalar, face_edges(faces), labels, num_parcels, faces)


def save_mesh(g: SurfaceGraph, path) -> None:
    """Write ``g`` as OFF (17 significant digits) plus sidecars, LF line endings."""
    if g.faces is None:
        raise ValueError("graph has no faces; cannot write OFF")
    path = Path(path)
    out = [f"OFF\n{g.num_nodes} {len(g.faces)} 0\n"]
    out.extend(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in g.node_positions)
    out.extend(f"3 {a} {b} {c}\n" for a, b, c in g.faces)
    path.write_text("".join(out), newline="\n")
    path.with_suffix(".scalar").write_text("".join(f"{v:.17g}\n" for v in g.node_scalar), newline="\n")
    if g.labels is not None:
        path.with_suffix(".labels").write_text("".join(f"{v}\n" for v in g.labels), newline="\n")


# ----------------------------------------------------------------------------
# Synthetic meshes


def icosphere(subdiv: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with ``10 * 4**subdiv + 2`` vertices."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdiv):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def _random_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _spread_directions(rng: np.random.Generator, n: int, tries: int = 200) -> np.ndarray:
    """Random unit vectors, rejecting candidates closer than half the mean spacing."""
    min_angle = 0.5 * np.sqrt(4 * np.pi / n)
    out = []
    while len(out) < n:
        for _ in range(tries):
            d = _random_directions(rng, 1)[0]
            if all(np.arccos(np.clip(d @ o, -1, 1)) >= min_angle for o in out):
                break
        out.append(d)
    return np.array(out)


def _cosine_bumps(dirs, centers, widths, amps):
    """Sum of raised-cosine caps: amp * cos^2 of the angle scaled to the cap width."""
    ang = np.arccos(np.clip(dirs @ centers.T, -1.0, 1.0))
    x = np.clip(ang / widths, 0.0, 1.0)
    return (np.cos(0.5 * np.pi * x) ** 2 * amps).sum(axis=1)


def _perturb(directions, rng, scale):
    if scale <= 0:
        return directions
    d = directions + scale * rng.standard_normal(directions.shape)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def synth_sphere(subdiv: int, num_parcels: int, bump_amp: float, seed: int, *,
                 template_seed: int | None = None, variability: float = 0.0,
                 num_bumps: int = 6, num_depth_bumps: int = 5,
                 parcel_depth: float = 0.0) -> SurfaceGraph:
    """Labeled, radially deformed icosphere.

    Parcel centers, bump placement and the pseudo-depth field come from a
    *template*; by default the template is ``seed`` itself. Passing a shared
    ``template_seed`` with a per-subject ``seed`` produces a population of
    subjects that share anatomy up to perturbations of size ``variability``
    (radians, roughly) on every template direction and amplitude.

    ``parcel_depth`` adds a per-parcel offset to the depth field, with the
    template assigning each parcel a distinct level in ``[-1, 1]``. It makes
    the scalar feature informative about the label independently of position.
    """
    if num_parcels < 2:
        raise ValueError("num_parcels must be at least 2")
    if bump_amp < 0:
        raise ValueError("bump_amp must be nonnegative")
    dirs, faces = icosphere(subdiv)
    n = len(dirs)
    if num_parcels > n:
        raise ValueError(f"num_parcels={num_parcels} exceeds node count {n}")

    trng = np.random.default_rng(seed if template_seed is None else template_seed)
    centers = _spread_directions(trng, num_parcels)
    bump_c = _random_directions(trng, num_bumps)
    bump_w = trng.uniform(0.5, 1.2, num_bumps)
    bump_a = trng.uniform(-1.0, 1.0, num_bumps)
    depth_c = _random_directions(trng, num_depth_bumps)
    depth_w = trng.uniform(0.6, 1.5, num_depth_bumps)
    depth_a = trng.uniform(0.5, 1.5, num_depth_bumps)
    levels = np.linspace(-1.0, 1.0, num_parcels)[trng.permutation(num_parcels)]

    if template_seed is not None:
        srng = np.random.default_rng(seed)
        centers = _perturb(centers, srng, variability)
        bump_c = _perturb(bump_c, srng, variability)
        depth_c = _perturb(depth_c, srng, variability)
        bump_a = bump_a * (1.0 + variability * srng.standard_normal(num_bumps))
        depth_a = depth_a * (1.0 + variability * srng.standard_normal(num_depth_bumps))

    radius = 1.0 + bump_amp * _cosine_bumps(dirs, bump_c, bump_w, bump_a)
    if bump_amp == 0:
        radius = np.ones(n)
    positions = dirs * radius[:, None]
    labels = np.argmax(dirs @ centers.T, axis=1)
    # An empty cell (centers closer than the mesh spacing) takes its nearest node.
    for c in np.setdiff1d(np.arange(num_parcels), labels):
        labels[np.argmax(dirs @ centers[c])] = c
    depth = _cosine_bumps(dirs, depth_c, depth_w, depth_a)
    if parcel_depth:
        depth = depth + parcel_depth * levels[labels]
    return SurfaceGraph(positions, depth, face_edges(faces), labels, num_parcels, faces)


# ----------------------------------------------------------------------------
# Graph surgery


def largest_component(g: SurfaceGraph) -> SurfaceGraph:
    """Restrict ``g`` to its largest connected component (ties: lowest node index)."""
    if g.num_nodes == 0:
        raise ValueError("empty graph")
    _, comp = csgraph.connected_components(g.adjacency(), directed=False)
    counts = np.bincount(comp)
    best = int(np.argmax(counts))
    if counts[best] == g.num_nodes:
        return g
    return g.subgraph(np.flatnonzero(comp == best))


def mutual_knn_edges(points: np.ndarray, k: int) -> np.ndarray:
    """Edges (i, j) where each endpoint is among the other's ``k`` nearest neighbors."""
    n = len(points)
    kk = min(k, n - 1)
    if kk < 1:
        return np.zeros((0, 2), dtype=np.int64)
    _, nbr = cKDTree(points).query(points, k=kk + 1)
    nbr = nbr[:, 1:]
    rows = np.repeat(np.arange(n), kk)
    a = sparse.csr_matrix((np.ones(n * kk), (rows, nbr.ravel())), shape=(n, n))
    mutual = a.multiply(a.T).tocoo()
    e = np.stack([mutual.row, mutual.col], axis=1)
    return canonical_edges(e)


def subsample(g: SurfaceGraph, num_nodes: int, num_subgraphs: int, knn: int = 6,
              seed: int = 0) -> list[SurfaceGraph]:
    """Independent uniform node samples reconnected by mutual k-NN in 3D."""
    if num_nodes > g.num_nodes:
        raise ValueError(f"num_nodes={num_nodes} exceeds graph size {g.num_nodes}")
    if knn < 3:
        raise ValueError("knn must be at least 3")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(num_subgraphs):
        nodes = np.sort(rng.choice(g.num_nodes, size=num_nodes, replace=False))
        pos = g.node_positions[nodes]
        labels = None if g.labels is None else g.labels[nodes]
        sub = SurfaceGraph(pos, g.node_scalar[nodes], mutual_knn_edges(pos, knn), labels,
                           g.num_parcels, node_ids=nodes)
        out.append(largest_component(sub))
    return out


def bfs_connected(num_nodes: int, edges: np.ndarray) -> bool:
    """Plain breadth-first connectivity check (independent of scipy)."""
    if num_nodes == 0:
        return False
    nbrs = [[] for _ in range(num_nodes)]
    for a, b in edges:
        nbrs[a].append(b)
        nbrs[b].append(a)
    seen = {0}
    q = deque([0])
    while q:
        v = q.popleft()
        for w in nbrs[v]:
            if w not in seen:
                seen.add(w)
                q.append(w)
    return len(seen) == num_nodes
