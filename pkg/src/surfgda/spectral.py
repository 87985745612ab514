"""Spectral embedding of surface graphs and orthogonal eigenbasis alignment."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import eigsh
from scipy.spatial import cKDTree

from .mesh import SurfaceGraph

DENSE_LIMIT = 3000


class DegenerateSpectrumError(ValueError):
    """The graph has more than one (numerically) zero Laplacian eigenvalue."""


@dataclass
class WeightedGraphMatrices:
    adjacency: sparse.csr_matrix
    degree: np.ndarray
    laplacian: sparse.csr_matrix
    epsilon: float


@dataclass
class SpectralEmbedding:
    coords: np.ndarray
    eigenvalues: np.ndarray
    exponent: float = -0.5

    @property
    def k(self) -> int:
        return self.coords.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[0]


@dataclass
class AlignmentTransform:
    rotation: np.ndarray
    residual: float = 0.0
    history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.rotation.shape[0]


def build_matrices(g: SurfaceGraph, epsilon: float = 1e-6) -> WeightedGraphMatrices:
    """Inverse-distance adjacency and the symmetric normalized Laplacian."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = g.num_nodes
    if n == 0:
        raise ValueError("empty graph")
    i, j = g.edges[:, 0], g.edges[:, 1]
    d = np.linalg.norm(g.node_positions[i] - g.node_positions[j], axis=1)
    w = 1.0 / (d + epsilon)
    a = sparse.csr_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n))
    ncomp, _ = csgraph.connected_components(a, directed=False)
    if ncomp != 1:
        raise ValueError(f"graph is disconnected ({ncomp} components)")
    deg = np.asarray(a.sum(axis=1)).ravel()
    dinv = sparse.diags(1.0 / np.sqrt(deg))
    lap = (sparse.identity(n, format="csr") - dinv @ a @ dinv).tocsr()
    lap = ((lap + lap.T) * 0.5).tocsr()
    return WeightedGraphMatrices(a, deg, lap, epsilon)


def _smallest_eigenpairs(lap: sparse.csr_matrix, count: int):
    n = lap.shape[0]
    if n <= DENSE_LIMIT:
        vals, vecs = np.linalg.eigh(lap.toarray())
        return vals[:count], vecs[:, :count]
    vals, vecs = eigsh(lap, k=count, sigma=-1e-3, which="LM", tol=1e-12,
                       v0=np.ones(n) / np.sqrt(n))
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip each column so that its first entry with ``|x| > tol`` is positive."""
    out = vectors.copy()
    for c in range(out.shape[1]):
        nz = np.flatnonzero(np.abs(out[:, c]) > tol)
        if nz.size and out[nz[0], c] < 0:
            out[:, c] = -out[:, c]
    return out


def embed(m: WeightedGraphMatrices, k: int = 3, exponent: float = -0.5) -> SpectralEmbedding:
    """First ``k`` nontrivial normalized spectral coordinates, ``u_j * lambda_j**exponent``."""
    n = m.laplacian.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < N, got k={k}, N={n}")
    vals, vecs = _smallest_eigenpairs(m.laplacian, k + 1)
    if vals[1] < 1e-9:
        raise DegenerateSpectrumError(f"second-smallest eigenvalue {vals[1]:.3e} below 1e-9")
    vals, vecs = vals[1:], fix_signs(vecs[:, 1:])
    return SpectralEmbedding(vecs * vals ** exponent, vals, exponent)


def embed_graph(g: SurfaceGraph, k: int = 3, epsilon: float = 1e-6,
                exponent: float = -0.5) -> SpectralEmbedding:
    return embed(build_matrices(g, epsilon), k, exponent)


def eigen_residuals(m: WeightedGraphMatrices, e: SpectralEmbedding) -> np.ndarray:
    """``||L u - lambda u|| / ||u||`` for every retained eigenpair."""
    u = e.coords * e.eigenvalues ** (-e.exponent)
    r = m.laplacian @ u - u * e.eigenvalues
    return np.linalg.norm(r, axis=0) / np.linalg.norm(u, axis=0)


# ----------------------------------------------------------------------------
# Alignment


def procrustes(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Orthogonal R (reflections allowed) minimizing ``||source @ R - target||_F``."""
    u, _, vt = np.linalg.svd(source.T @ target)
    return u @ vt


def _principal_axes(x: np.ndarray) -> np.ndarray:
    c = x - x.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    return vecs[:, ::-1]


def icp_align(source: SpectralEmbedding, reference: SpectralEmbedding, max_iters: int = 100,
              tol: float = 1e-12, pca_init: bool = True) -> AlignmentTransform:
    """Align ``source`` rows onto ``reference`` rows with an orthogonal transform.

    The start is the best of all axis sign-flip combinations, applied both in
    the raw coordinate frame and after matching principal axes. Each iteration
    pairs every transformed source row with its nearest reference row and
    re-solves orthogonal Procrustes; an iteration is kept only if it lowers
    the mean nearest-neighbor distance.
    """
    x = np.asarray(source.coords if isinstance(source, SpectralEmbedding) else source)
    y = np.asarray(reference.coords if isinstance(reference, SpectralEmbedding) else reference)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    k = x.shape[1]
    tree = cKDTree(y)

    def residual(r):
        d, idx = tree.query(x @ r)
        return float(d.mean()), idx

    flips = [np.diag(s) for s in itertools.product((1.0, -1.0), repeat=k)]
    starts = list(flips)
    if pca_init and x.shape[0] > k and y.shape[0] > k:
        px, py = _principal_axes(x), _principal_axes(y)
        starts += [px @ f @ py.T for f in flips]
    best_r, best_res, best_idx = None, np.inf, None
    for r in starts:
        res, idx = residual(r)
        if res < best_res - 1e-15:
            best_r, best_res, best_idx = r, res, idx

    r, res, idx = best_r, best_res, best_idx
    history = [res]
    for _ in range(max_iters):
        r_new = procrustes(x, y[idx])
        res_new, idx_new = residual(r_new)
        if res_new >= res:
            break
        improvement = res - res_new
        r, res, idx = r_new, res_new, idx_new
        history.append(res)
        if improvement < tol:
            break
    return AlignmentTransform(r, res, history)


def apply_transform(e: SpectralEmbedding, t: AlignmentTransform) -> SpectralEmbedding:
    if e.k != t.k:
        raise ValueError(f"dimension mismatch: embedding k={e.k}, transform k={t.k}")
    return SpectralEmbedding(e.coords @ t.rotation, e.eigenvalues.copy(), e.exponent)


def random_orthogonal(k: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign correction)."""
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


def random_domain_transform(k: int, seed: int, allow_rotation: bool = False,
                            avoid_identity: bool = True) -> AlignmentTransform:
    """Random orthogonal (``allow_rotation``) or signed-permutation transform."""
    if k < 1:
        raise ValueError("k must be positive")
    rng = np.random.default_rng(seed)
    while True:
        signs = np.diag(rng.choice([-1.0, 1.0], size=k))
        if allow_rotation:
            r = random_orthogonal(k, rng) @ signs
        else:
            r = np.eye(k)[rng.permutation(k)] @ signs
        if not avoid_identity or k == 1 or not np.allclose(r, np.eye(k)):
            return AlignmentTransform(r, 0.0)


def sign_flip_transform(k: int, seed: int) -> AlignmentTransform:
    """Random non-identity diagonal sign flip."""
    rng = np.random.default_rng(seed)
    while True:
        s = rng.choice([-1.0, 1.0], size=k)
        if k == 1 or np.any(s < 0):
            return AlignmentTransform(np.diag(s), 0.0)


def mean_nn_distance(a: np.ndarray, b: np.ndarray) -> float:
    d, _ = cKDTree(b).query(a)
    return float(d.mean())


# ----------------------------------------------------------------------------
# CSV export


def save_embedding_csv(e: SpectralEmbedding, path) -> None:
    k = e.k
    lines = ["node," + ",".join(f"u{j + 1}" for j in range(k))]
    lines += [f"{i}," + ",".join(f"{v:.17g}" for v in row) for i, row in enumerate(e.coords)]
    lines.append("# eigenvalues," + ",".join(f"{v:.17g}" for v in e.eigenvalues))
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def load_embedding_csv(path) -> SpectralEmbedding:
    rows, vals = [], None
    for line in Path(path).read_text().splitlines()[1:]:
        if line.startswith("# eigenvalues,"):
            vals = np.array([float(v) for v in line.split(",")[1:]])
        elif line:
            rows.append([float(v) for v in line.split(",")[1:]])
    coords = np.array(rows)
    if vals is None:
        vals = np.ones(coords.shape[1])
    return SpectralEmbedding(coords, vals)


def save_transform_csv(t: AlignmentTransform, path) -> None:
    lines = [",".join(f"{v:.17g}" for v in row) for row in t.rotation]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def load_transform_csv(path) -> AlignmentTransform:
    rows = [[float(v) for v in line.split(",")] for line in Path(path).read_text().splitlines() if line]
    return AlignmentTransform(np.array(rows))
