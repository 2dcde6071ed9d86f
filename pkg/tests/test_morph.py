import numpy as np
import pytest
from hypothesis import given, strategies as st

from surfrecon.geom import TriMesh
from surfrecon.morph import (
    ExpressionSet, MorphError, PcaModel, augment_expressions, fit_pca, transfer_blendshape,
)

TEMPLATE = TriMesh(np.random.default_rng(0).normal(size=(30, 3)), [[0, 1, 2], [2, 3, 4]])


def rank_family(count, rank, rng):
    mean = TEMPLATE.vertices.ravel()
    dirs = rng.normal(size=(rank, mean.size))
    coef = rng.normal(size=(count, rank))
    return ExpressionSet(TEMPLATE, (mean + coef @ dirs).reshape(count, -1, 3))


def test_expression_set_validates():
    with pytest.raises(MorphError):
        ExpressionSet(TEMPLATE, np.zeros((3, 29, 3)))


# ------------------------------------------------------------ augmentation

def test_augment_identity_and_errors(rng):
    base = rank_family(10, 4, rng)
    same = augment_expressions(base, 10)
    assert np.array_equal(same.vertices, base.vertices)
    with pytest.raises(MorphError):
        augment_expressions(rank_family(3, 2, rng), 5)
    with pytest.raises(MorphError):
        augment_expressions(base, 9)


def test_augment_75_to_720_within_parent_hull(rng):
    base = rank_family(75, 6, rng)
    out = augment_expressions(base, 720, seed=4)
    assert len(out) == 720
    assert np.array_equal(out.vertices[:75], base.vertices)
    for t, (i, j, l) in enumerate(out.parents):
        tri = base.vertices[[i, j, l]]
        v = out.vertices[75 + t]
        assert (v >= tri.min(axis=0) - 1e-12).all() and (v <= tri.max(axis=0) + 1e-12).all()
        assert len({i, j, l}) == 3


def test_augment_partners_are_near_neighbours(rng):
    base = rank_family(30, 5, rng)
    out = augment_expressions(base, 200, seed=1)
    flat = base.vertices.reshape(30, -1)
    d = np.linalg.norm(flat[:, None] - flat[None], axis=2)
    np.fill_diagonal(d, np.inf)
    rank = np.argsort(np.argsort(d, axis=1), axis=1)
    for i, j, l in out.parents:
        assert rank[i, j] < 5 and rank[i, l] < 5


def test_augment_deterministic(rng):
    base = rank_family(12, 3, rng)
    a, b = augment_expressions(base, 40, seed=9), augment_expressions(base, 40, seed=9)
    assert np.array_equal(a.vertices, b.vertices)
    assert not np.array_equal(a.vertices, augment_expressions(base, 40, seed=10).vertices)


# ------------------------------------------------------------ PCA

def test_pca_identical_meshes():
    expr = ExpressionSet(TEMPLATE, np.stack([TEMPLATE.vertices] * 5))
    m = fit_pca(expr, 3)
    assert np.allclose(m.mean_vertices, TEMPLATE.vertices, rtol=0, atol=1e-14)
    assert np.abs(m.sigmas).max() < 1e-12


def test_pca_rank2_exact(rng):
    expr = rank_family(20, 2, rng)
    m = fit_pca(expr, 2)
    rec = m.reconstruct(expr.vertices)
    assert np.abs(rec - expr.vertices).max() < 1e-8
    assert np.abs(m.basis.T @ m.basis - np.eye(2)).max() < 1e-6


def test_pca_bounds_and_errors(rng):
    expr = rank_family(8, 3, rng)
    with pytest.raises(MorphError):
        fit_pca(expr, 8)
    with pytest.raises(MorphError):
        fit_pca(expr, 0)
    m = fit_pca(expr, 7)
    assert (np.diff(m.sigmas) <= 1e-12).all()
    with pytest.raises(MorphError):
        m.synthesize(np.zeros(6))
    with pytest.raises(MorphError):
        m.project(np.zeros((29, 3)))


def test_synthesize_project_roundtrip(rng):
    m = fit_pca(rank_family(40, 12, rng), 10)
    assert np.array_equal(m.synthesize(np.zeros(10)), m.mean_vertices)
    p = rng.normal(size=(100, 10))
    assert np.abs(m.project(m.synthesize(p)) - p).max() < 1e-8


def test_reconstruction_error_nonincreasing(rng):
    expr = rank_family(60, 30, rng)
    errs = [np.abs(fit_pca(expr, k).reconstruct(expr.vertices) - expr.vertices).sum() for k in (2, 10, 20, 30)]
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-8


def test_pca_checkpoint_roundtrip(tmp_path, rng):
    m = fit_pca(rank_family(10, 4, rng), 4)
    m.save(tmp_path / "pca.sfck")
    back = PcaModel.load(tmp_path / "pca.sfck")
    for a, b in ((m.mean, back.mean), (m.basis, back.basis), (m.sigmas, back.sigmas)):
        assert np.array_equal(a, b)


# ------------------------------------------------------------ transfer

def test_transfer_blendshape(rng):
    m = fit_pca(rank_family(30, 8, rng), 6)
    ident = m.mean_vertices + rng.normal(0, 0.5, m.mean_vertices.shape)
    assert np.array_equal(transfer_blendshape(ident, m, np.zeros(6)), ident)
    p = rng.normal(size=6)
    assert np.allclose(transfer_blendshape(m.mean_vertices, m, p), m.synthesize(p), atol=1e-12)
    with pytest.raises(MorphError):
        transfer_blendshape(ident[:-1], m, p)


@given(st.integers(0, 10**6))
def test_property_transfer_linear(seed):
    r = np.random.default_rng(seed)
    m = fit_pca(rank_family(12, 5, np.random.default_rng(1)), 5)
    ident = r.normal(size=m.mean_vertices.shape)
    p1, p2 = r.normal(size=5), r.normal(size=5)
    lhs = transfer_blendshape(ident, m, p1 + p2) - ident
    rhs = (transfer_blendshape(ident, m, p1) - ident) + (transfer_blendshape(ident, m, p2) - ident)
    assert np.allclose(lhs, rhs, atol=1e-10)
