"""Geometric losses and evaluation metrics.

Differentiable losses accept :class:`Tensor` (or plain arrays) for the
predicted geometry and return scalar tensors; the ``*_value`` helpers return
floats. Nearest-neighbour correspondences are computed once per evaluation
and held fixed, so gradients flow through coordinates, not through the
argmin switch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor, as_tensor, relu, sqnorm, sqrt
from .geom import PointCloud, SpatialIndex


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    chamfer: float = 1.2
    normal: float = 1.6e-4
    laplacian: float = 0.4
    edge: float = 0.2
    collision: float = 0.8
    feature: float = 1.5

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise LossError("loss weights must be non-negative")

    def as_dict(self):
        return asdict(self)

    @classmethod
    def one_hot(cls, name):
        return cls(**{k: (1.0 if k == name else 0.0) for k in asdict(cls())})


COMPONENTS = tuple(LossWeights().as_dict())


def _pts(x):
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


# ------------------------------------------------------------------ chamfer

def chamfer_loss(pred, target, pred_mask=None, target_mask=None):
    """Two-sided mean squared nearest-neighbour distance, differentiable in ``pred``.

    Masks restrict which points of each side take part.
    """
    p = pred if isinstance(pred, Tensor) else as_tensor(_pts(pred))
    t = _pts(target)
    p_idx = np.arange(p.shape[0]) if pred_mask is None else np.flatnonzero(pred_mask)
    t_idx = np.arange(len(t)) if target_mask is None else np.flatnonzero(target_mask)
    if len(p_idx) == 0 or len(t_idx) == 0:
        raise LossError("chamfer distance of an empty (masked) set")
    p_sel = p[p_idx] if pred_mask is not None else p
    t_sel = t[t_idx]
    # pred -> target
    nn_t, _ = SpatialIndex(t_sel).query(p_sel.data)
    fwd = sqnorm(p_sel - Tensor(t_sel[nn_t]), axis=1).mean()
    # target -> pred
    nn_p, _ = SpatialIndex(p_sel.data).query(t_sel)
    bwd = sqnorm(p_sel[nn_p] - Tensor(t_sel), axis=1).mean()
    return fwd + bwd


def chamfer_distance(a, b, mask_a=None, mask_b=None):
    """Metric Chamfer distance (float) between two point sets."""
    a, b = _pts(a), _pts(b)
    if mask_a is not None:
        a = a[np.asarray(mask_a, dtype=bool)]
    if mask_b is not None:
        b = b[np.asarray(mask_b, dtype=bool)]
    if len(a) == 0 or len(b) == 0:
        raise LossError("chamfer distance of an empty (masked) set")
    _, d_ab = SpatialIndex(b).query(a)
    _, d_ba = SpatialIndex(a).query(b)
    return float(d_ab.mean() + d_ba.mean())


def region_mask(pred_vertices, gt_points, rho=1.0):
    """Predicted vertices lying within ``rho`` of some ground-truth point."""
    _, d2 = SpatialIndex(_pts(gt_points)).query(_pts(pred_vertices))
    mask = d2 <= rho * rho
    if not mask.any():
        raise LossError("region mask selects no vertices")
    return mask


# ------------------------------------------------------------ mesh losses

def normal_loss(pred_vertices, edges, gt, edge_mask=None):
    """Mean over edges (p, k) of <p - k, n_q>^2, q the ground-truth point nearest p."""
    if not isinstance(gt, PointCloud) or gt.normals is None:
        raise LossError("normal loss needs ground-truth normals")
    v = as_tensor(pred_vertices)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edge_mask is not None:
        edges = edges[np.asarray(edge_mask, dtype=bool)]
    if len(edges) == 0:
        raise LossError("normal loss over an empty edge set")
    q, _ = SpatialIndex(gt.points).query(v.data[edges[:, 0]])
    n = Tensor(gt.normals[q])
    e = v[edges[:, 0]] - v[edges[:, 1]]
    dots = (e * n).sum(axis=1)
    return (dots * dots).mean()


def laplacian_loss(pred_vertices, mean_vertices, laplacian):
    """(1/N) ||L v_pred - L v_mean||^2 with a fixed sparse Laplacian ``L``."""
    from .autodiff import spmm

    v = as_tensor(pred_vertices)
    m = np.asarray(mean_vertices, dtype=np.float64)
    if v.shape != m.shape:
        raise LossError(f"shape mismatch {v.shape} vs {m.shape}")
    diff = spmm(laplacian, v) - Tensor(laplacian @ m)
    return (diff * diff).sum() / v.shape[0]


def edge_loss(pred_vertices, mean_vertices, edges):
    """Mean over edges of (|e_pred| - |e_mean|)^2."""
    v = as_tensor(pred_vertices)
    m = np.asarray(mean_vertices, dtype=np.float64)
    if v.shape != m.shape:
        raise LossError(f"shape mismatch {v.shape} vs {m.shape}")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    ref = np.linalg.norm(m[edges[:, 0]] - m[edges[:, 1]], axis=1)
    if (ref == 0).any():
        raise LossError("zero-length edge in the mean shape")
    e = v[edges[:, 0]] - v[edges[:, 1]]
    length = sqrt(sqnorm(e, axis=1) + 1e-24)
    d = length - Tensor(ref)
    return (d * d).mean()


def collision_loss(points, landmarks, r=1.5):
    """(1/N) sum_k sum_i max(0, r^2 - |q_i - c_k|^2) over landmark spheres."""
    q = as_tensor(points)
    c = np.asarray(landmarks, dtype=np.float64).reshape(-1, 3)
    if q.shape[0] == 0:
        raise LossError("collision loss over zero points")
    if r <= 0:
        raise LossError("radius must be positive")
    total = None
    for ck in c:
        term = relu(r * r - sqnorm(q - Tensor(ck), axis=1)).sum()
        total = term if total is None else total + term
    return total / q.shape[0]


def feature_loss(pred, target):
    """Squared L2 distance between label vectors; rows are averaged for batches."""
    p = as_tensor(pred)
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if p.shape != t.shape:
        raise LossError(f"dimension mismatch {p.shape} vs {t.shape}")
    d = p - Tensor(t)
    if d.ndim == 1:
        return (d * d).sum()
    return sqnorm(d, axis=1).mean()


def total_loss(components, weights=LossWeights()):
    """Weighted sum of the six components; missing components count as zero."""
    w = weights.as_dict()
    unknown = set(components) - set(w)
    if unknown:
        raise LossError(f"unknown loss components {sorted(unknown)}")
    total = None
    for name, value in components.items():
        if not np.isfinite(getattr(value, "data", value)).all():
            raise LossError(f"non-finite loss component {name!r}")
        val = as_tensor(value) if not isinstance(value, (int, float)) else Tensor(float(value))
        term = val * w[name]
        total = term if total is None else total + term
    return Tensor(0.0) if total is None else total


# ---------------------------------------------------------------------- EMD

def emd_exact(a, b, max_points=1024, seed=0):
    """Mean matched Euclidean distance under the optimal bijection.

    Clouds larger than ``max_points`` are uniformly subsampled (seeded) first.
    """
    a, b = _pts(a), _pts(b)
    rng = np.random.default_rng(seed)
    if len(a) > max_points:
        a = a[np.sort(rng.choice(len(a), max_points, replace=False))]
    if len(b) > max_points:
        b = b[np.sort(rng.choice(len(b), max_points, replace=False))]
    if len(a) != len(b):
        raise LossError(f"EMD needs equal-size sets, got {len(a)} and {len(b)}")
    if len(a) == 0:
        raise LossError("EMD of empty sets")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    col = kernels.linear_assignment(cost)
    return float(cost[np.arange(len(a)), col].mean())
