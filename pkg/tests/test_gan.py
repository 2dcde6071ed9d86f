import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import fd_grad, rel_err
from surfrecon.autodiff import MlpSpec, Tensor, grad, init_params
from surfrecon.losses import chamfer_distance
from surfrecon.pointgan import (
    AnnealSchedule, GanError, GanModel, GanTrainConfig, GanTrainer, SphereFamily, build_gan,
    critic, gan_train_step, generate_cloud, gradient_penalty, sigma_at_step, soften_real,
    toy_dataset, train_gan,
)


def small_gan(variant="full", width=8, seed=0, y_dim=4):
    return build_gan(variant, width, width, seed=seed, z_dim=4, y_dim=y_dim)


# ------------------------------------------------------------ architecture

def test_layer_counts_and_dims():
    m = build_gan("full", 16, 16)
    assert m.g_spec.n_layers == 9 and m.d_spec.n_layers == 8
    assert m.g_spec.in_dim == 128 and m.g_spec.cond_dim == 256 and m.g_spec.widths[-1] == 3
    assert m.d_spec.in_dim == 3 and m.d_spec.widths[-1] == 1
    assert build_gan("v2", 16, 16).cond_mode == "concatenation"
    with pytest.raises(ValueError):
        build_gan("v3")


def test_generate_cloud_basics(rng):
    m = build_gan("full", 16, 16)
    y = rng.normal(size=256)
    assert generate_cloud(m, y, 1).shape == (1, 3)
    assert np.array_equal(generate_cloud(m, y, 50, seed=3), generate_cloud(m, y, 50, seed=3))
    with pytest.raises(ValueError):
        generate_cloud(m, y[:128], 4)
    with pytest.raises(ValueError):
        generate_cloud(m, y, 0)


def test_generate_cloud_chunking_invariant(rng):
    m = small_gan()
    y = rng.normal(size=4)
    assert np.allclose(generate_cloud(m, y, 100, seed=1, chunk=7), generate_cloud(m, y, 100, seed=1), atol=1e-14)


def test_save_load_roundtrip(tmp_path, rng):
    m = build_gan("v2", 8, 12, seed=4)
    m.centre, m.scale = np.array([1.0, 2.0, 3.0]), 2.5
    m.save(tmp_path / "g.sfck")
    back = GanModel.load(tmp_path / "g.sfck")
    assert back.variant == "v2" and back.scale == 2.5 and np.array_equal(back.centre, m.centre)
    y = rng.normal(size=256)
    assert np.array_equal(generate_cloud(m, y, 20, seed=1), generate_cloud(back, y, 20, seed=1))


# ------------------------------------------------------------ schedule

def test_schedule_examples():
    s = AnnealSchedule()
    assert sigma_at_step(s, 0) == 5e-3
    assert sigma_at_step(s, 250_000) == pytest.approx(2.5e-3, abs=1e-18)
    assert sigma_at_step(s, 500_000) == 0.0 and sigma_at_step(s, 10**7) == 0.0
    with pytest.raises(ValueError):
        sigma_at_step(s, -1)
    with pytest.raises(ValueError):
        AnnealSchedule(sigma0=-1.0)


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_property_schedule_monotone_piecewise(a, b):
    s = AnnealSchedule()
    lo, hi = min(a, b), max(a, b)
    assert sigma_at_step(s, hi) <= sigma_at_step(s, lo)
    if lo // 50_000 == hi // 50_000:
        assert sigma_at_step(s, hi) == sigma_at_step(s, lo)


# ------------------------------------------------------------ softening

def test_soften_real(rng):
    x = rng.normal(size=(5, 3))
    assert soften_real(x, 0.0, rng) is not None and np.array_equal(soften_real(x, 0.0, rng), x)
    with pytest.raises(ValueError):
        soften_real(x, -1e-3, rng)
    xt, sigma, n = np.array([0.3, -1.0, 2.0]), 5e-3, 100_000
    draws = soften_real(np.tile(xt, (n, 1)), sigma, np.random.default_rng(0))
    assert (np.abs(draws.mean(axis=0) - xt) < 3 * math.sqrt(sigma / n)).all()
    assert (np.abs(draws.var(axis=0) / sigma - 1) < 0.05).all()


# ------------------------------------------------------------ gradient penalty

def linear_critic_model(w):
    spec = MlpSpec(3, (1, 1), ("identity", "identity"), 2, "injection")
    p = init_params(spec, 0)
    p["l0.W"].data = np.asarray(w, dtype=np.float64).reshape(3, 1)
    p["l0.U"].data[:] = 0.0
    p["l1.W"].data[:] = 1.0
    return GanModel(spec, spec, {}, p)


def test_gp_linear_closed_form(rng):
    w = rng.normal(size=3)
    m = linear_critic_model(w)
    pen = gradient_penalty(m, rng.normal(size=(10, 3)), rng.normal(size=(10, 3)), rng.normal(size=2))
    assert float(pen.data) == pytest.approx((np.linalg.norm(w) - 1) ** 2, abs=1e-10)


def test_gp_constant_critic(rng):
    m = linear_critic_model(np.zeros(3))
    pen = gradient_penalty(m, rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=2))
    assert float(pen.data) == pytest.approx(1.0, abs=1e-5)


@pytest.mark.parametrize("variant", ["full", "v2"])
def test_gp_parameter_gradient_fd(rng, variant):
    m = small_gan(variant, width=5, seed=2, y_dim=3)
    xr, xf, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=3)
    u = rng.random((4, 1))
    names = list(m.d_params)
    pen = lambda: gradient_penalty(m, xr, xf, y, u=u)
    gs = grad(pen(), [m.d_params[k] for k in names])
    for k, g in zip(names, gs):
        assert rel_err(g.data, fd_grad(lambda: float(pen().data), m.d_params[k].data)) < 1e-3


@pytest.mark.parametrize("objective", ["wasserstein", "log"])
def test_generator_objective_gradient_fd(rng, objective):
    m = small_gan(width=5, seed=3)
    z, y = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(2, 4)))
    idx = np.array([0, 0, 0, 1, 1, 1])
    from surfrecon.autodiff import softplus
    from surfrecon.pointgan import generator

    def loss():
        s = critic(m, generator(m, z, y, idx), y, idx)
        return -s.mean() if objective == "wasserstein" else softplus(-s).mean()

    names = list(m.g_params)
    gs = grad(loss(), [m.g_params[k] for k in names])
    for k, g in zip(names, gs):
        assert rel_err(g.data, fd_grad(lambda: float(loss().data), m.g_params[k].data)) < 1e-4


# ------------------------------------------------------------ training

def toy(n_labels=3, seed=0, y_dim=4):
    rng = np.random.default_rng(seed)
    pts = [rng.normal(size=(64, 3)) for _ in range(n_labels)]
    return pts, rng.normal(size=(n_labels, y_dim))


def test_train_step_deterministic():
    pts, lab = toy()
    cfg = GanTrainConfig(batch=32, labels_per_batch=2, seed=5)
    runs = []
    for _ in range(2):
        tr = GanTrainer(small_gan(), cfg, pts, lab)
        runs.append([gan_train_step(tr) for _ in range(3)])
    assert runs[0] == runs[1]


def test_config_validation():
    with pytest.raises(ValueError):
        GanTrainConfig(batch=1)
    with pytest.raises(ValueError):
        GanTrainConfig(lr_d=0.0)
    with pytest.raises(ValueError):
        GanTrainConfig(objective="hinge")
    with pytest.raises(GanError):
        GanTrainer(small_gan(), GanTrainConfig(), [], np.zeros((0, 4)))


def test_v1_disables_softening():
    pts, lab = toy()
    tr = GanTrainer(small_gan("v1"), GanTrainConfig(batch=16), pts, lab)
    assert tr.step()["sigma"] == 0.0
    tr = GanTrainer(small_gan("full"), GanTrainConfig(batch=16), pts, lab)
    assert tr.step()["sigma"] == 5e-3


def test_log_objective_runs():
    pts, lab = toy()
    tr = GanTrainer(small_gan(), GanTrainConfig(batch=16, objective="log"), pts, lab)
    out = tr.step()
    assert math.isfinite(out["loss_D"]) and math.isfinite(out["loss_G"])


def test_nonfinite_aborts_with_step(monkeypatch):
    pts, lab = toy()
    tr = GanTrainer(small_gan(), GanTrainConfig(batch=16), pts, lab)
    tr.step()
    monkeypatch.setattr(tr, "_generator_step", lambda: float("nan"))
    with pytest.raises(GanError, match="step 1"):
        tr.step()


def test_train_gan_log(tmp_path):
    pts, lab = toy()
    heldout = [(lab[0], pts[0])]
    cfg = GanTrainConfig(batch=16, total_steps=5, eval_every=2, eval_points=32)
    model, rows = train_gan(pts, lab, cfg, heldout=heldout, log_path=tmp_path / "m.csv",
                            g_width=6, d_width=6, emd_points=16, model=small_gan(width=6))
    assert [r["step"] for r in rows] == [0, 2, 4, 5]
    with open(tmp_path / "m.csv") as fh:
        got = list(csv.DictReader(fh))
    assert list(got[0]) == ["step", "loss_D", "loss_G", "sigma", "CD", "EMD"]
    assert all(math.isfinite(float(r["CD"])) and math.isfinite(float(r["EMD"])) for r in got)


def test_normalisation_applied(rng):
    pts, lab = toy()
    m = small_gan()
    m.centre, m.scale = np.array([10.0, 0, 0]), 3.0
    tr = GanTrainer(m, GanTrainConfig(batch=16), [p * 3.0 + [10, 0, 0] for p in pts], lab)
    assert np.allclose(tr.points[0], pts[0])
    raw = generate_cloud(small_gan(), lab[0], 5, seed=1)
    assert np.allclose(generate_cloud(m, lab[0], 5, seed=1), raw * 3.0 + [10, 0, 0])


def test_degenerate_target_collapses():
    target = np.array([[0.2, -0.1, 0.3]])
    lab = np.ones((1, 4))
    m = small_gan(width=16, seed=1)
    cfg = GanTrainConfig(batch=64, lr_d=1e-3, lr_g=1e-3, labels_per_batch=1,
                         schedule=AnnealSchedule(sigma0=0.0), seed=1)
    tr = GanTrainer(m, cfg, [target], lab)
    best = np.inf
    while tr.step_count < 2000 and best >= 1e-4:
        for _ in range(100):
            tr.step()
        best = min(best, chamfer_distance(generate_cloud(m, lab[0], 256, seed=0), target))
    assert best < 1e-4


def test_sphere_family_labels():
    fam = SphereFamily()
    p = np.array([[1.0, 0.0], [1.2, 0.3]])
    y = fam.label(p)
    assert y.shape == (2, 256) and np.abs(y).max() < 1
    assert np.array_equal(fam.label(p[0]), y[:1])
    tr, lab, held, tp, hp = toy_dataset(4, 2, seed=0, n_points=100, ref_points=200)
    assert len(tr) == 4 and lab.shape == (4, 256) and len(held) == 2 and held[0][1].shape == (200, 3)
    r = np.linalg.norm(tr[0] - [0, 0, tp[0][1]], axis=1)
    assert np.allclose(r, tp[0][0])
