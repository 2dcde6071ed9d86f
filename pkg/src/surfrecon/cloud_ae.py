"""Point-cloud autoencoder whose bottleneck provides the 256-d surface labels.

The encoder is a shared per-point MLP (3 -> 64 -> 128 -> 256) followed by a
max over points and an affine 256 -> 256 head, so it is exactly invariant to
point order and to duplicated points. The decoder maps a label to 1024 points.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Adam, MlpSpec, Tensor, add, backward, init_params, load_checkpoint, matmul,
    mlp_forward, no_grad, reshape, save_checkpoint,
)
from .autodiff.tensor import NonFiniteError
from .geom import PointCloud
from .losses import chamfer_loss

LABEL_DIM = 256
DECODED_POINTS = 1024
MIN_POINTS = 64


class AEError(RuntimeError):
    pass


def _as_points(cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise AEError(f"expected an (n, 3) point array, got {pts.shape}")
    return pts


class PointEncoder:
    """Per-point MLP, max pool, affine head. Parameters live in ``params``."""

    point_spec = MlpSpec(3, (64, 128, LABEL_DIM), ("leaky_relu",) * 3)

    def __init__(self, seed=0):
        self.params = {f"pt.{k}": v for k, v in init_params(self.point_spec, seed).items()}
        rng = np.random.default_rng(seed + 7)
        self.params["head.W"] = Tensor(rng.normal(0, np.sqrt(1.0 / LABEL_DIM), (LABEL_DIM, LABEL_DIM)), requires_grad=True)
        self.params["head.b"] = Tensor(np.zeros(LABEL_DIM), requires_grad=True)

    def forward(self, clouds):
        """Labels for a list of normalised (n_i, 3) arrays, as a (B, 256) tensor."""
        sizes = [len(c) for c in clouds]
        if min(sizes) < 1:
            raise AEError("empty cloud")
        pts = Tensor(np.vstack(clouds))
        pp = {k[3:]: v for k, v in self.params.items() if k.startswith("pt.")}
        feats = mlp_forward(self.point_spec, pp, pts)
        # max over each cloud's rows: gather the argmax entry of every column
        bounds = np.cumsum([0] + sizes)
        rows = np.stack([lo + feats.data[lo:hi].argmax(axis=0) for lo, hi in zip(bounds[:-1], bounds[1:])])
        cols = np.broadcast_to(np.arange(LABEL_DIM), rows.shape)
        pooled = feats[(rows, cols)]
        return add(matmul(pooled, self.params["head.W"]), self.params["head.b"])

    def copy_from(self, other):
        for k, v in other.params.items():
            self.params[k].data = v.data.copy()


@dataclass(frozen=True)
class AEConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3
    encode_points: int = 512      # points per cloud seen by the encoder during training
    target_points: int = 2048     # points per cloud the Chamfer target keeps
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("invalid AE config")
        if self.encode_points < MIN_POINTS:
            raise ValueError(f"encode_points must be >= {MIN_POINTS}")


class CloudAE:
    decoder_spec = MlpSpec(LABEL_DIM, (512, 1024, 3 * DECODED_POINTS), ("leaky_relu", "leaky_relu", "identity"))

    def __init__(self, seed=0, centre=(0.0, 0.0, 0.0), scale=1.0):
        self.encoder = PointEncoder(seed)
        self.dec_params = init_params(self.decoder_spec, seed + 1)
        self.centre = np.asarray(centre, dtype=np.float64)
        self.scale = float(scale)
        self.trained = False

    # coordinates -------------------------------------------------------
    def normalise(self, pts):
        return (np.asarray(pts, dtype=np.float64) - self.centre) / self.scale

    def denormalise(self, pts):
        return np.asarray(pts) * self.scale + self.centre

    # public API --------------------------------------------------------
    def encode(self, cloud):
        pts = _as_points(cloud)
        if len(pts) < MIN_POINTS:
            raise AEError(f"encode needs at least {MIN_POINTS} points, got {len(pts)}")
        with no_grad():
            return self.encoder.forward([self.normalise(pts)]).data[0]

    def encode_many(self, clouds):
        return np.stack([self.encode(c) for c in clouds])

    def decode(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (LABEL_DIM,):
            raise AEError(f"expected a {LABEL_DIM}-d label, got shape {y.shape}")
        with no_grad():
            out = mlp_forward(self.decoder_spec, self.dec_params, Tensor(y[None, :])).data
        return PointCloud(self.denormalise(out.reshape(DECODED_POINTS, 3)))

    def parameters(self):
        p = dict(self.encoder.params)
        p.update({f"dec.{k}": v for k, v in self.dec_params.items()})
        return p

    def version_hash(self):
        h = hashlib.sha256()
        for k, v in sorted(self.parameters().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        h.update(self.centre.tobytes())
        h.update(np.float64(self.scale).tobytes())
        return h.hexdigest()[:16]

    def save(self, path):
        t = {k: v.data for k, v in self.parameters().items()}
        t["norm.centre"] = self.centre
        t["norm.scale"] = np.asarray(self.scale)
        t["meta.trained"] = np.asarray(float(self.trained))
        save_checkpoint(path, t)

    @classmethod
    def load(cls, path):
        t = load_checkpoint(path)
        ae = cls(0, t["norm.centre"], float(t["norm.scale"]))
        for k, v in ae.parameters().items():
            v.data = np.array(t[k])
        ae.trained = bool(t["meta.trained"])
        return ae


def _reconstruction_loss(ae, batch_enc, batch_tgt):
    y = ae.encoder.forward(batch_enc)
    out = mlp_forward(ae.decoder_spec, ae.dec_params, y)
    total = None
    for b, tgt in enumerate(batch_tgt):
        pred = reshape(out[b], (DECODED_POINTS, 3))
        term = chamfer_loss(pred, tgt)
        total = term if total is None else total + term
    return total * (1.0 / len(batch_tgt))


def train_ae(clouds, config=AEConfig(), min_clouds=200, log=None):
    """Fit an autoencoder by Chamfer reconstruction; returns ``(ae, history)``.

    ``history`` holds ``(epoch, mean step loss)`` rows, one per pass over the
    data. Coordinates are normalised by the dataset centroid and the largest
    distance from it.
    """
    data = [_as_points(c) for c in clouds]
    if len(data) < min_clouds:
        raise AEError(f"train_ae needs at least {min_clouds} clouds, got {len(data)}")
    if any(len(d) < MIN_POINTS for d in data):
        raise AEError(f"every training cloud needs at least {MIN_POINTS} points")
    allpts = np.vstack(data)
    centre = allpts.mean(axis=0)
    scale = float(np.sqrt(((allpts - centre) ** 2).sum(axis=1)).max())
    ae = CloudAE(config.seed, centre, scale)
    norm = [ae.normalise(d) for d in data]
    rng = np.random.default_rng(config.seed)
    opt = Adam(ae.parameters(), config.lr)
    steps_per_epoch = max(1, int(np.ceil(len(norm) / config.batch)))
    history, epoch_losses = [], []
    order = rng.permutation(len(norm))
    pos = 0
    for step in range(config.steps):
        if pos + config.batch > len(order):
            order = rng.permutation(len(norm))
            pos = 0
        idx = order[pos:pos + config.batch]
        pos += config.batch
        enc, tgt = [], []
        for i in idx:
            d = norm[i]
            enc.append(d[rng.choice(len(d), min(config.encode_points, len(d)), replace=False)])
            tgt.append(d if len(d) <= config.target_points else
                       d[rng.choice(len(d), config.target_points, replace=False)])
        opt.zero_grad()
        try:
            loss = _reconstruction_loss(ae, enc, tgt)
        except NonFiniteError as exc:
            raise AEError(f"AE training diverged at step {step}: {exc}") from exc
        backward(loss)
        opt.step()
        epoch_losses.append(float(loss.data))
        if len(epoch_losses) == steps_per_epoch or step == config.steps - 1:
            history.append((len(history), float(np.mean(epoch_losses))))
            if log is not None:
                log(history[-1])
            epoch_losses = []
    ae.trained = True
    return ae, history


def reconstruction_chamfer(ae, cloud):
    """Chamfer between a cloud and its reconstruction, in normalised units."""
    from .losses import chamfer_distance

    pts = _as_points(cloud)
    rec = ae.decode(ae.encode(pts)).points
    return chamfer_distance(ae.normalise(rec), ae.normalise(pts))


def label_dataset(clouds, ae):
    """One label per cloud, as a list of ``(cloud, y)`` pairs."""
    if not getattr(ae, "trained", False):
        raise AEError("label_dataset needs a trained autoencoder")
    return [(c, ae.encode(c)) for c in clouds]
