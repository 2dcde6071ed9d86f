"""Conditional per-point GAN: G(z, y) is one 3D point, D(x, y) one score.

Training uses the Wasserstein objective with a gradient penalty on point
coordinates. Real points fed to the critic are softened by isotropic Gaussian
noise whose variance is annealed to zero over training.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import (
    Adam, MlpSpec, Tensor, backward, concat, grad, init_params, load_checkpoint,
    mlp_forward, no_grad, save_checkpoint, softplus, sqnorm, sqrt,
)
from .autodiff.tensor import NonFiniteError
from .losses import chamfer_distance, emd_exact

Z_DIM = 128
Y_DIM = 256
VARIANTS = ("full", "v1", "v2")


class GanError(RuntimeError):
    pass


# ------------------------------------------------------------------ schedule

@dataclass(frozen=True)
class AnnealSchedule:
    sigma0: float = 5e-3
    decay: float = 0.1         # fraction of sigma0 removed per interval
    interval: int = 50_000

    def __post_init__(self):
        if self.sigma0 < 0 or self.decay < 0 or self.interval < 1:
            raise ValueError("invalid anneal schedule")


def sigma_at_step(schedule, step):
    """Variance of the real-point softening noise at generator step ``step``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    k = step // schedule.interval
    return schedule.sigma0 * max(0.0, 1.0 - schedule.decay * k)


def soften_real(x, sigma, rng):
    """``x + sqrt(sigma) * eps``; ``sigma`` is a variance."""
    if sigma < 0:
        raise ValueError("variance must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return x + math.sqrt(sigma) * rng.standard_normal(x.shape)


# --------------------------------------------------------------------- model

@dataclass(frozen=True)
class GanTrainConfig:
    lr_d: float = 1e-4
    lr_g: float = 1e-5
    batch: int = 2048
    total_steps: int = 20_000
    n_critic: int = 5
    gp_weight: float = 10.0
    labels_per_batch: int = 16
    seed: int = 0
    objective: str = "wasserstein"   # or "log"
    betas: tuple = (0.0, 0.9)
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    eval_every: int = 1000
    eval_points: int = 1024

    def __post_init__(self):
        if self.lr_d <= 0 or self.lr_g <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch < 2:
            raise ValueError("batch must be at least 2")
        if self.n_critic < 1 or self.total_steps < 0:
            raise ValueError("invalid step counts")
        if self.objective not in ("wasserstein", "log"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class GanModel:
    g_spec: MlpSpec
    d_spec: MlpSpec
    g_params: dict
    d_params: dict
    variant: str = "full"
    # generated points are ``G(z, y) * scale + centre``; training data is
    # normalised the same way by the trainer
    centre: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    @property
    def cond_mode(self):
        return self.g_spec.cond_mode

    def tensors(self):
        out = {f"G.{k}": v.data for k, v in self.g_params.items()}
        out.update({f"D.{k}": v.data for k, v in self.d_params.items()})
        return out

    def save(self, path, extra=None):
        t = self.tensors()
        t["meta.width"] = np.array([self.g_spec.widths[0], self.d_spec.widths[0]], dtype=np.float64)
        t["meta.variant"] = np.array([VARIANTS.index(self.variant)], dtype=np.float64)
        t["norm.centre"] = np.asarray(self.centre, dtype=np.float64)
        t["norm.scale"] = np.asarray(float(self.scale))
        t.update(extra or {})
        save_checkpoint(path, t)

    @classmethod
    def load(cls, path):
        t = load_checkpoint(path)
        gw, dw = (int(v) for v in t["meta.width"])
        variant = VARIANTS[int(t["meta.variant"][0])]
        model = build_gan(variant, g_width=gw, d_width=dw, seed=0)
        model.centre = np.array(t["norm.centre"])
        model.scale = float(t["norm.scale"])
        for k, p in model.g_params.items():
            p.data = np.array(t[f"G.{k}"])
        for k, p in model.d_params.items():
            p.data = np.array(t[f"D.{k}"])
        return model


def build_gan(variant="full", g_width=128, d_width=128, seed=0, z_dim=Z_DIM, y_dim=Y_DIM):
    """9-layer generator and 8-layer critic; v2 conditions by concatenation."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    mode = "concatenation" if variant == "v2" else "injection"
    g_spec = MlpSpec(z_dim, (g_width,) * 8 + (3,), ("leaky_relu",) * 8 + ("identity",), y_dim, mode)
    d_spec = MlpSpec(3, (d_width,) * 7 + (1,), ("leaky_relu",) * 7 + ("identity",), y_dim, mode)
    return GanModel(g_spec, d_spec, init_params(g_spec, seed), init_params(d_spec, seed + 1), variant)


def _labels(y):
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    return y.reshape(1, -1) if y.ndim == 1 else y


def generator(model, z, y, y_index=None):
    return mlp_forward(model.g_spec, model.g_params, z, y, y_index)


def critic(model, x, y, y_index=None):
    return mlp_forward(model.d_spec, model.d_params, x, y, y_index)


def generate_cloud(model, y, n, seed=0, chunk=4096):
    """``n`` i.i.d. points of the surface labelled ``y``."""
    y = _labels(y)
    if y.shape != (1, model.g_spec.cond_dim):
        raise ValueError(f"expected a {model.g_spec.cond_dim}-d label, got shape {y.shape}")
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, model.g_spec.in_dim))
    yt = Tensor(y)
    out = []
    with no_grad():
        for s in range(0, n, chunk):
            zz = z[s:s + chunk]
            out.append(generator(model, Tensor(zz), yt, np.zeros(len(zz), dtype=np.int64)).data)
    return np.vstack(out) * model.scale + np.asarray(model.centre)


def gradient_penalty(model, x_real, x_fake, y, y_index=None, u=None, rng=None):
    """Mean of (|grad_x D(x_hat, y)| - 1)^2 on random real/fake interpolates.

    The returned tensor is differentiable w.r.t. the critic parameters.
    """
    x_real = np.asarray(getattr(x_real, "data", x_real), dtype=np.float64)
    x_fake = np.asarray(getattr(x_fake, "data", x_fake), dtype=np.float64)
    if u is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        u = rng.random((len(x_real), 1))
    x_hat = Tensor(u * x_real + (1 - u) * x_fake, requires_grad=True)
    y = Tensor(_labels(y))
    if y_index is None and y.shape[0] == 1:
        y_index = np.zeros(len(x_hat.data), dtype=np.int64)
    out = critic(model, x_hat, y, y_index)
    (g,) = grad(out.sum(), [x_hat], create_graph=True)
    norm = sqrt(sqnorm(g, axis=1) + 1e-12)
    d = norm - 1.0
    return (d * d).mean()


# ------------------------------------------------------------------ training

def label_lr_scale(params, spec):
    """Step multipliers for label projections.

    Adam moves every weight by about the same amount, so a projection summing
    ``cond_dim`` label entries would otherwise change sqrt(cond_dim) times
    faster than the point pathway.
    """
    if not spec.cond_dim:
        return {}
    return {k: 1.0 / np.sqrt(spec.cond_dim) for k in params if k.endswith(".U")}


class GanTrainer:
    """Owns the model, optimisers and RNG; one ``step`` is one generator update."""

    def __init__(self, model, config, data_points, labels):
        """``data_points[i]`` is an (n_i, 3) array of real points for ``labels[i]``."""
        if len(data_points) != len(labels) or not len(labels):
            raise GanError("need one point set per label")
        if model.variant == "v1":
            config = replace(config, schedule=replace(config.schedule, sigma0=0.0))
        self.model = model
        self.config = config
        self.points = [(np.asarray(p, dtype=np.float64) - model.centre) / model.scale for p in data_points]
        self.labels = _labels(labels)
        self.rng = np.random.default_rng(config.seed)
        self.opt_d = Adam(model.d_params, config.lr_d, config.betas, lr_scale=label_lr_scale(model.d_params, model.d_spec))
        self.opt_g = Adam(model.g_params, config.lr_g, config.betas, lr_scale=label_lr_scale(model.g_params, model.g_spec))
        self.step_count = 0

    def _sample_batch(self):
        cfg = self.config
        k = min(cfg.labels_per_batch, len(self.labels))
        which = self.rng.choice(len(self.labels), size=k, replace=False)
        per = np.full(k, cfg.batch // k)
        per[: cfg.batch - per.sum()] += 1
        xs, idx = [], []
        for j, (lab, m) in enumerate(zip(which, per)):
            pts = self.points[lab]
            xs.append(pts[self.rng.integers(len(pts), size=m)])
            idx.append(np.full(m, j, dtype=np.int64))
        return np.vstack(xs), Tensor(self.labels[which]), np.concatenate(idx)

    def _critic_step(self, sigma):
        cfg, m = self.config, self.model
        x, y, idx = self._sample_batch()
        x = soften_real(x, sigma, self.rng)
        b = len(x)
        z = Tensor(self.rng.standard_normal((b, m.g_spec.in_dim)))
        with no_grad():
            fake = generator(m, z, y, idx).data
        self.opt_d.zero_grad()
        if cfg.objective == "wasserstein" or cfg.gp_weight > 0:
            u = self.rng.random((b, 1))
            x_hat = Tensor(u * x + (1 - u) * fake, requires_grad=True)
            rows = concat([Tensor(x), Tensor(fake), x_hat], axis=0)
            out = critic(m, rows, y, np.concatenate([idx, idx, idx]))
            (g,) = grad(out[2 * b:].sum(), [x_hat], create_graph=True)
            d = sqrt(sqnorm(g, axis=1) + 1e-12) - 1.0
            penalty = (d * d).mean()
        else:
            out = critic(m, concat([Tensor(x), Tensor(fake)], axis=0), y, np.concatenate([idx, idx]))
            penalty = Tensor(0.0)
        real_s, fake_s = out[:b], out[b:2 * b]
        if cfg.objective == "wasserstein":
            adv = fake_s.mean() - real_s.mean()
        else:
            adv = softplus(-real_s).mean() + softplus(fake_s).mean()
        loss = adv + penalty * cfg.gp_weight
        backward(loss)
        self.opt_d.step()
        return float(loss.data), float(real_s.data.mean() - fake_s.data.mean())

    def _generator_step(self):
        cfg, m = self.config, self.model
        k = min(cfg.labels_per_batch, len(self.labels))
        which = self.rng.choice(len(self.labels), size=k, replace=False)
        idx = np.repeat(np.arange(k), cfg.batch // k + 1)[: cfg.batch]
        y = Tensor(self.labels[which])
        z = Tensor(self.rng.standard_normal((cfg.batch, m.g_spec.in_dim)))
        fake = generator(m, z, y, idx)
        score = critic(m, fake, y, idx)
        loss = -score.mean() if cfg.objective == "wasserstein" else softplus(-score).mean()
        (gs) = grad(loss, list(m.g_params.values()))
        self.opt_g.step(dict(zip(m.g_params, (g.data for g in gs))))
        return float(loss.data)

    def step(self):
        sigma = sigma_at_step(self.config.schedule, self.step_count)
        try:
            for _ in range(self.config.n_critic):
                loss_d, w_est = self._critic_step(sigma)
            loss_g = self._generator_step()
        except NonFiniteError as exc:
            raise GanError(f"non-finite value at generator step {self.step_count}: {exc}") from exc
        if not (math.isfinite(loss_d) and math.isfinite(loss_g)):
            raise GanError(f"non-finite loss at generator step {self.step_count}: D={loss_d} G={loss_g}")
        self.step_count += 1
        return {"loss_D": loss_d, "loss_G": loss_g, "sigma": sigma, "w_estimate": w_est}

    def state_tensors(self):
        t = self.model.tensors()
        t.update(self.opt_d.state_tensors("adam_d"))
        t.update(self.opt_g.state_tensors("adam_g"))
        t["train.step"] = np.asarray(float(self.step_count))
        return t


def gan_train_step(trainer):
    """One generator update preceded by ``n_critic`` critic updates."""
    return trainer.step()


def evaluate_gan(model, heldout, n_points=1024, seed=0, emd_points=None):
    """Mean CD (and EMD when ``emd_points``) over ``heldout`` (label, reference) pairs."""
    cds, emds = [], []
    for i, (y, ref) in enumerate(heldout):
        gen = generate_cloud(model, y, n_points, seed=seed + i)
        cds.append(chamfer_distance(gen, ref))
        if emd_points:
            emds.append(emd_exact(gen, ref, max_points=emd_points, seed=seed + i))
    return float(np.mean(cds)), (float(np.mean(emds)) if emds else float("nan"))


LOG_FIELDS = ("step", "loss_D", "loss_G", "sigma", "CD", "EMD")


def train_gan(data_points, labels, config=GanTrainConfig(), variant="full", heldout=None,
              log_path=None, g_width=128, d_width=128, emd_points=None, model=None):
    """Train a GAN; returns ``(model, log_rows)``.

    The log gets a row every ``config.eval_every`` generator steps (and at
    steps 0 and ``total_steps``); CD/EMD columns are filled when ``heldout``
    is given.
    """
    if model is None:
        model = build_gan(variant, g_width, d_width, seed=config.seed)
    trainer = GanTrainer(model, config, data_points, labels)
    rows = []

    def log(stats):
        cd, emd = (float("nan"), float("nan"))
        if heldout:
            cd, emd = evaluate_gan(model, heldout, config.eval_points, seed=10_000, emd_points=emd_points)
        rows.append({"step": trainer.step_count, "loss_D": stats.get("loss_D", float("nan")),
                     "loss_G": stats.get("loss_G", float("nan")),
                     "sigma": sigma_at_step(trainer.config.schedule, trainer.step_count),
                     "CD": cd, "EMD": emd})

    log({})
    stats = {}
    for s in range(config.total_steps):
        stats = trainer.step()
        if (s + 1) % config.eval_every == 0 or s + 1 == config.total_steps:
            log(stats)
    if log_path is not None:
        write_metric_log(log_path, rows)
    model.trainer_state = trainer
    return model, rows


def write_metric_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "step" else int(r[k])) for k in LOG_FIELDS})


# ------------------------------------------------------------------ toy data

def sphere_points(n, radius, centre, rng):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(centre) + radius * v


@dataclass(frozen=True)
class SphereFamily:
    """Spheres with radius in [0.5, 1.5] and centre height in [-0.5, 0.5].

    Labels are a fixed smooth lift of the two parameters to 256 dimensions.
    """

    radius: tuple = (0.5, 1.5)
    height: tuple = (-0.5, 0.5)
    label_seed: int = 1234

    def sample_params(self, count, rng):
        return np.column_stack([rng.uniform(*self.radius, count), rng.uniform(*self.height, count)])

    def label(self, params):
        params = np.atleast_2d(params)
        rng = np.random.default_rng(self.label_seed)
        a = rng.normal(0, 1.0, size=(2, Y_DIM))
        b = rng.uniform(-1, 1, size=Y_DIM)
        norm = np.column_stack([
            (params[:, 0] - np.mean(self.radius)) / (0.5 * np.ptp(self.radius)),
            (params[:, 1] - np.mean(self.height)) / (0.5 * np.ptp(self.height)),
        ])
        return np.tanh(norm @ a + b)

    def points(self, params, n, rng):
        r, h = params
        return sphere_points(n, r, (0.0, 0.0, h), rng)


def toy_dataset(n_train, n_heldout, seed, n_points=2048, ref_points=16384, family=SphereFamily()):
    """Training point sets/labels and held-out (label, dense reference) pairs."""
    rng = np.random.default_rng(seed)
    tp = family.sample_params(n_train, rng)
    hp = family.sample_params(n_heldout, rng)
    train_pts = [family.points(p, n_points, rng) for p in tp]
    heldout = [(family.label(p)[0], family.points(p, ref_points, rng)) for p in hp]
    return train_pts, family.label(tp), heldout, tp, hp


def gan_config_dict(config):
    d = asdict(config)
    d["schedule"] = asdict(config.schedule)
    return d
