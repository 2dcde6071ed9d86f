"""Expression augmentation and the PCA morphable model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .geom import TriMesh


class MorphError(ValueError):
    pass


@dataclass
class ExpressionSet:
    """Expressions sharing one mesh topology; ``vertices`` is (count, N, 3)."""

    template: TriMesh
    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 3 or self.vertices.shape[1:] != self.template.vertices.shape:
            raise MorphError("expressions must share the template's vertex count")

    def __len__(self):
        return len(self.vertices)

    def mesh(self, i):
        return self.template.with_vertices(self.vertices[i])


def augment_expressions(expr, target_count, seed=0, n_neighbors=5):
    """Grow ``expr`` to ``target_count`` meshes by blending nearby triples.

    Each new mesh picks an anchor uniformly, two distinct partners among its
    mutual ``n_neighbors``-nearest expressions (vertex-space L2; plain
    neighbours when fewer than two are mutual), and blends the three with
    weights drawn uniformly on the simplex. Originals come first.
    """
    base = expr.vertices
    n = len(base)
    if n < 4:
        raise MorphError("need at least 4 base expressions")
    if target_count < n:
        raise MorphError("target_count must be at least the base count")
    flat = base.reshape(n, -1)
    sq = (flat ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T
    np.fill_diagonal(d2, np.inf)
    k = min(n_neighbors, n - 1)
    neighbours = np.argsort(d2, axis=1, kind="stable")[:, :k]
    is_nb = np.zeros((n, n), dtype=bool)
    is_nb[np.repeat(np.arange(n), k), neighbours.ravel()] = True
    partners = []
    for i in range(n):
        mutual = [j for j in neighbours[i] if is_nb[j, i]]
        partners.append(np.array(mutual if len(mutual) >= 2 else neighbours[i]))
    rng = np.random.default_rng(seed)
    extra = target_count - n
    out = np.empty((target_count,) + base.shape[1:])
    out[:n] = base
    parents = np.empty((extra, 3), dtype=np.int64)
    for t in range(extra):
        i = rng.integers(n)
        j, l = rng.choice(partners[i], size=2, replace=False)
        w = rng.dirichlet(np.ones(3))
        out[n + t] = w[0] * base[i] + w[1] * base[j] + w[2] * base[l]
        parents[t] = (i, j, l)
    result = ExpressionSet(expr.template, out)
    result.parents = parents
    return result


@dataclass
class PcaModel:
    mean: np.ndarray     # (3N,)
    basis: np.ndarray    # (3N, n_t), orthonormal columns
    sigmas: np.ndarray   # (n_t,), non-increasing

    @property
    def n_components(self):
        return self.basis.shape[1]

    @property
    def n_vertices(self):
        return self.mean.shape[0] // 3

    @property
    def mean_vertices(self):
        return self.mean.reshape(-1, 3)

    def synthesize(self, p):
        """Vertices ``mean + U p``; a (B, n_t) batch gives (B, N, 3)."""
        p = np.asarray(p, dtype=np.float64)
        if p.shape[-1] != self.n_components:
            raise MorphError(f"expected {self.n_components} parameters, got {p.shape[-1]}")
        flat = self.mean + p @ self.basis.T
        return flat.reshape(p.shape[:-1] + (-1, 3))

    def project(self, vertices):
        v = np.asarray(vertices, dtype=np.float64)
        lead = v.shape[:-2]
        flat = v.reshape(lead + (-1,))
        if flat.shape[-1] != self.mean.shape[0]:
            raise MorphError("vertex count does not match the model")
        return (flat - self.mean) @ self.basis

    def reconstruct(self, vertices):
        return self.synthesize(self.project(vertices))

    def save(self, path):
        save_checkpoint(path, {"pca.mean": self.mean, "pca.basis": self.basis, "pca.sigma": self.sigmas})

    @classmethod
    def load(cls, path):
        t = load_checkpoint(path)
        return cls(t["pca.mean"], t["pca.basis"], t["pca.sigma"])


def fit_pca(expr, n_components):
    """Mean-centred thin SVD, components ordered by singular value."""
    X = np.asarray(getattr(expr, "vertices", expr), dtype=np.float64)
    m = len(X)
    X = X.reshape(m, -1)
    if n_components < 1 or n_components > min(X.shape[1], m - 1):
        raise MorphError(f"n_components must be in [1, {min(X.shape[1], m - 1)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    basis = vt[:n_components].T.copy()
    # deterministic signs: largest-magnitude entry of each column positive
    pivot = np.abs(basis).argmax(axis=0)
    basis *= np.sign(basis[pivot, np.arange(n_components)])
    sigmas = s[:n_components] / np.sqrt(m - 1)
    return PcaModel(mean, basis, sigmas)


def transfer_blendshape(identity_vertices, model, p):
    """Add the expression offset ``synthesize(p) - mean`` onto another identity."""
    ident = np.asarray(identity_vertices, dtype=np.float64)
    if ident.shape != model.mean_vertices.shape:
        raise MorphError("identity mesh does not share the model topology")
    return ident + (model.synthesize(p) - model.mean_vertices)
