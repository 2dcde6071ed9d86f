"""Observation encoder + shape decoder trained end to end with the six-term loss.

An observation (a partial, jittered, rotated view of a surface) is encoded to
a 256-d label estimate, decoded to PCA coefficients and synthesised to a full
mesh. The pseudo-pair loop manufactures training targets for unlabelled
observations with the conditional GAN.
"""
from __future__ import annotations

import copy
import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Adam, MlpSpec, Tensor, backward, init_params, load_checkpoint, matmul, mlp_forward, no_grad, reshape,
    save_checkpoint,
)
from .autodiff.tensor import NonFiniteError
from .cloud_ae import LABEL_DIM, MIN_POINTS, PointEncoder
from .geom import PointCloud, estimate_normals, mesh_topology, read_ply, write_ply
from .morph import PcaModel
from .losses import (
    COMPONENTS, LossError, LossWeights, chamfer_distance, chamfer_loss, collision_loss,
    edge_loss, emd_exact, feature_loss, laplacian_loss, normal_loss, region_mask, total_loss,
)
from .pointgan import generate_cloud


class PipelineError(RuntimeError):
    pass


class EvaluationError(ValueError):
    pass


PROVENANCES = ("synthetic", "pseudo-pair")
DOMAINS = ("in", "shifted")


@dataclass
class Sample:
    """One training/evaluation record."""

    observation: np.ndarray           # (n, 3) partial view
    cloud: PointCloud                 # target points with normals
    label: np.ndarray                 # (256,) target label
    vertices: np.ndarray | None = None
    provenance: str = "synthetic"
    domain: str = "in"
    key: str = ""


@dataclass
class PipelineSettings:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3
    obs_points: int = 256
    region_rho: float = 1.0
    collision_radius: float = 1.5
    seed: int = 0

    @classmethod
    def from_config(cls, cfg, seed=0, steps=None):
        p = cfg["pipeline"]
        return cls(p["steps"] if steps is None else steps, p["batch"], p["lr"], p["obs_points"],
                   p["region_rho"], p["collision_radius"], seed)


def canonical_subset(points, k):
    """Order-independent subset of ``k`` points: lexicographic sort, even stride."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts[np.lexsort(pts.T[::-1])]
    if len(pts) <= k:
        return pts
    return pts[np.linspace(0, len(pts) - 1, k).round().astype(np.int64)]


class PipelineModel:
    """Observation encoder, (256, 128, n_t) shape decoder and the PCA model."""

    def __init__(self, pca, geometry, centre, scale, obs_points=256, seed=0, encoder=None):
        self.pca = pca
        self.geometry = geometry
        self.centre = np.asarray(centre, dtype=np.float64)
        self.scale = float(scale)
        self.obs_points = obs_points
        self.encoder = PointEncoder(seed)
        if encoder is not None:
            self.encoder.copy_from(encoder)
        self.decoder_spec = MlpSpec.simple((LABEL_DIM, 128, pca.n_components), hidden="relu")
        self.dec_params = init_params(self.decoder_spec, seed + 11)
        # outputs are in units of each component's spread
        top = float(pca.sigmas.max()) if pca.sigmas.size else 1.0
        self.coef_scale = np.maximum(pca.sigmas, 1e-6 * top)
        self._basis_t = pca.basis.T.copy()

    def parameters(self):
        p = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        p.update({f"dec.{k}": v for k, v in self.dec_params.items()})
        return p

    def clone(self):
        return copy.deepcopy(self)

    def _prepare(self, obs):
        pts = np.asarray(getattr(obs, "points", obs), dtype=np.float64)
        if len(pts) < MIN_POINTS:
            raise PipelineError(f"observation needs at least {MIN_POINTS} points, got {len(pts)}")
        return (pts - self.centre) / self.scale

    def _encode(self, batch):
        return self.encoder.forward(batch)

    def _decode(self, y):
        out = mlp_forward(self.decoder_spec, self.dec_params, y)
        return out * Tensor(self.coef_scale)

    def _vertices(self, p):
        flat = matmul(p, Tensor(self._basis_t)) + Tensor(self.pca.mean)
        return flat

    def obs_encode(self, observation):
        pts = canonical_subset(self._prepare(observation), self.obs_points)
        with no_grad():
            return self._encode([pts]).data[0]

    def shape_decode(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (LABEL_DIM,):
            raise PipelineError(f"expected a {LABEL_DIM}-d label, got shape {y.shape}")
        with no_grad():
            return self._decode(Tensor(y[None, :])).data[0]

    def reconstruct(self, observation):
        return self.pca.synthesize(self.shape_decode(self.obs_encode(observation)))

    def save(self, path):
        t = {k: v.data for k, v in self.parameters().items()}
        t.update({"pca.mean": self.pca.mean, "pca.basis": self.pca.basis, "pca.sigma": self.pca.sigmas})
        t["norm.centre"] = self.centre
        t["norm.scale"] = np.asarray(self.scale)
        t["meta.obs_points"] = np.asarray(float(self.obs_points))
        save_checkpoint(path, t)

    @classmethod
    def load(cls, path, geometry=None):
        t = load_checkpoint(path)
        pca = PcaModel(t["pca.mean"], t["pca.basis"], t["pca.sigma"])
        if geometry is None:
            from .synth import surface_family
            geometry = Geometry.from_family(surface_family())
        model = cls(pca, geometry, t["norm.centre"], float(t["norm.scale"]), int(t["meta.obs_points"]))
        for k, v in model.parameters().items():
            v.data = np.array(t[k])
        return model

    def predict_points(self, sample, rho=1.0):
        """Reconstructed vertices inside the target's Chamfer region."""
        verts = self.reconstruct(sample.observation)
        return verts[region_mask(verts, sample.cloud.points, rho)]


@dataclass
class Geometry:
    """Fixed mesh data the losses need."""

    edges: np.ndarray
    laplacian: object
    landmarks: np.ndarray
    active: np.ndarray       # vertices subject to the collision term

    @classmethod
    def from_family(cls, family):
        topo = mesh_topology(family.template)
        return cls(topo.edges, topo.laplacian, family.template.landmarks, family.tongue_mask())


def sample_components(verts, y_pred, sample, model, settings):
    """The six loss components for one predicted mesh (tensor, (N, 3))."""
    geo = model.geometry
    mean = model.pca.mean_vertices
    gt = sample.cloud
    mask = region_mask(verts.data, gt.points, settings.region_rho)
    edge_mask = mask[geo.edges[:, 0]] & mask[geo.edges[:, 1]]
    terms = {
        "chamfer": lambda: chamfer_loss(verts, gt.points, pred_mask=mask),
        "laplacian": lambda: laplacian_loss(verts, mean, geo.laplacian),
        "edge": lambda: edge_loss(verts, mean, geo.edges),
        "collision": lambda: collision_loss(verts[np.flatnonzero(geo.active)], geo.landmarks,
                                            settings.collision_radius),
        "feature": lambda: feature_loss(y_pred, sample.label),
    }
    if gt.normals is not None and edge_mask.any():
        terms["normal"] = lambda: normal_loss(verts, geo.edges, gt, edge_mask)
    comps = {"normal": Tensor(0.0)}
    for name, term in terms.items():
        try:
            comps[name] = term()
        except NonFiniteError as exc:
            raise PipelineError(f"non-finite {name} loss for sample {sample.key!r}: {exc}") from exc
    return comps


def _batch_loss(model, batch, settings, weights, rng):
    obs = []
    for s in batch:
        pts = model._prepare(s.observation)
        k = min(settings.obs_points, len(pts))
        obs.append(pts[rng.choice(len(pts), k, replace=False)])
    y = model._encode(obs)
    flat = model._vertices(model._decode(y))
    n = model.pca.n_vertices
    sums = {}
    for b, s in enumerate(batch):
        verts = reshape(flat[b], (n, 3))
        comps = sample_components(verts, y[b], s, model, settings)
        for k, v in comps.items():
            sums[k] = v if k not in sums else sums[k] + v
    comps = {k: v * (1.0 / len(batch)) for k, v in sums.items()}
    return total_loss(comps, weights), comps


def fit(model, samples, weights, settings, log=None, step_offset=0):
    """Continue training ``model`` in place; returns per-step log rows."""
    if not samples:
        raise PipelineError("no training samples")
    rng = np.random.default_rng(settings.seed)
    params = model.parameters()
    opt = Adam(params, settings.lr)
    rows = []
    w = weights.as_dict()
    for step in range(settings.steps):
        idx = rng.choice(len(samples), min(settings.batch, len(samples)), replace=False)
        batch = [samples[i] for i in idx]
        opt.zero_grad()
        try:
            total, comps = _batch_loss(model, batch, settings, weights, rng)
        except NonFiniteError as exc:
            raise PipelineError(f"non-finite value at step {step}: {exc}") from exc
        bad = [k for k, v in comps.items() if not np.isfinite(v.data).all()]
        if bad:
            raise PipelineError(f"non-finite loss component(s) {bad} at step {step}")
        backward(total)
        opt.step()
        row = {"step": step_offset + step, "total": float(total.data)}
        row.update({k: float(comps[k].data) for k in COMPONENTS})
        row["weighted_sum"] = sum(w[k] * row[k] for k in COMPONENTS)
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def train_pipeline(samples, pca, ae, weights=LossWeights(), settings=PipelineSettings(), geometry=None,
                   family=None, log=None):
    """Fresh model (encoder initialised from the autoencoder's) trained on ``samples``."""
    if pca.n_components < 1:
        raise PipelineError("PCA model has no components")
    if not getattr(ae, "trained", False):
        raise PipelineError("train_pipeline needs a trained autoencoder")
    if geometry is None:
        if family is None:
            from .synth import surface_family
            family = surface_family()
        geometry = Geometry.from_family(family)
    for s in samples:
        if np.asarray(s.label).shape != (LABEL_DIM,):
            raise PipelineError("every sample needs a 256-d label")
    model = PipelineModel(pca, geometry, ae.centre, ae.scale, settings.obs_points, settings.seed, ae.encoder)
    rows = fit(model, samples, weights, settings, log)
    return model, rows


def retrain(model, samples, weights=LossWeights(), settings=PipelineSettings(), log=None):
    """Continue training a copy of ``model`` on mixed-provenance data."""
    new = model.clone()
    rows = fit(new, samples, weights, settings, log)
    return new, rows


# ------------------------------------------------------------ pseudo pairs

def make_pseudo_pairs(observations, pipeline, gan, n_points, seed=0, ae=None, domain="shifted"):
    """Generated target clouds for unlabelled observations.

    The label stored with each pair is the autoencoder's label of the
    generated cloud when ``ae`` is given, else the encoder's estimate.
    """
    if pipeline is None or gan is None:
        raise PipelineError("pseudo pairs need a trained pipeline and GAN")
    out = []
    for i, obs in enumerate(observations):
        y_tilde = pipeline.obs_encode(obs)
        pts = generate_cloud(gan, y_tilde, n_points, seed=seed + i)
        cloud = estimate_normals(PointCloud(pts), k=8)
        label = ae.encode(cloud) if ae is not None else y_tilde
        out.append(Sample(np.asarray(getattr(obs, "points", obs)), cloud, label,
                          provenance="pseudo-pair", domain=domain, key=f"pseudo-{seed}-{i}"))
    return out


# -------------------------------------------------------------- evaluation

METRIC_FIELDS = ("method", "EMD", "CD", "n", "seed")


def masked_chamfer(pred_vertices, gt_points, rho=1.0):
    mask = region_mask(pred_vertices, gt_points, rho)
    return chamfer_distance(np.asarray(pred_vertices)[mask], gt_points)


def evaluate(predictors, samples, seed=0, emd_points=256):
    """Mean CD and EMD per method over ``samples``.

    ``predictors`` maps a method name to ``f(sample) -> (m, 3)`` predicted
    points; CD is taken against the sample's target cloud.
    """
    if not samples:
        raise EvaluationError("cannot evaluate an empty split")
    rows = []
    for name, predict in predictors.items():
        cds, emds = [], []
        for i, s in enumerate(samples):
            pred = np.asarray(predict(s))
            gt = s.cloud.points
            cds.append(chamfer_distance(pred, gt))
            k = min(emd_points, len(pred), len(gt))
            emds.append(emd_exact(pred, gt, max_points=k, seed=seed + i) if k else float("nan"))
        rows.append({"method": name, "EMD": float(np.mean(emds)), "CD": float(np.mean(cds)),
                     "n": len(samples), "seed": seed})
    return rows


def write_metrics(path, rows, fields=METRIC_FIELDS):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in fields})


def render_scatter_svg(path, predicted, target, size=400, title=""):
    """Side (x, z) projection of predicted (red) and target (blue) points."""
    pred = np.asarray(predicted)
    tgt = np.asarray(target)
    both = np.vstack([pred, tgt])
    lo, hi = both[:, [0, 2]].min(axis=0), both[:, [0, 2]].max(axis=0)
    span = float(max(hi - lo)) or 1.0
    pad = 10

    def xy(p):
        u = pad + (p[:, 0] - lo[0]) / span * (size - 2 * pad)
        v = size - pad - (p[:, 2] - lo[1]) / span * (size - 2 * pad)
        return u, v

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        parts.append(f'<text x="{pad}" y="{pad + 4}" font-size="10">{title}</text>')
    for pts, colour in ((tgt, "#1f5fbf"), (pred, "#c8321e")):
        u, v = xy(pts)
        parts.extend(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1" fill="{colour}"/>' for a, b in zip(u, v))
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


# ------------------------------------------------------------------ manifest

MANIFEST_VERSION = 1
SPLITS = ("train", "test", "shifted", "unlabelled")


@dataclass
class ManifestRecord:
    key: str
    cloud: str
    split: str
    provenance: str = "synthetic"
    label: list | None = None
    mesh: str | None = None
    observation: str | None = None
    domain: str = "in"


@dataclass
class DatasetManifest:
    root: str
    records: list = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def validate(self):
        seen = {}
        for r in self.records:
            if r.split not in SPLITS:
                raise PipelineError(f"unknown split {r.split!r}")
            if r.provenance not in PROVENANCES:
                raise PipelineError(f"unknown provenance {r.provenance!r}")
            if r.key in seen and seen[r.key] != r.split:
                raise PipelineError(f"record {r.key} appears in splits {seen[r.key]} and {r.split}")
            seen[r.key] = r.split
            for p in (r.cloud, r.mesh, r.observation):
                if p is not None and not os.path.exists(os.path.join(self.root, p)):
                    raise PipelineError(f"missing file {p}")
            if r.label is not None and len(r.label) != LABEL_DIM:
                raise PipelineError(f"record {r.key}: label must be {LABEL_DIM}-d")
        return self

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def save(self, path):
        self.validate()
        doc = {"version": self.version, "records": [r.__dict__ for r in self.records]}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != MANIFEST_VERSION:
            raise PipelineError(f"unsupported manifest version {doc.get('version')}")
        m = cls(os.path.dirname(os.path.abspath(path)), [ManifestRecord(**r) for r in doc["records"]])
        return m.validate()

    def load_record(self, r):
        cloud = read_ply(os.path.join(self.root, r.cloud))
        obs = read_ply(os.path.join(self.root, r.observation)).points if r.observation else None
        verts = read_ply(os.path.join(self.root, r.mesh)).vertices if r.mesh else None
        label = np.asarray(r.label) if r.label is not None else None
        return Sample(obs, cloud, label, verts, r.provenance, r.domain, r.key)

    def load_samples(self, split):
        return [self.load_record(r) for r in self.split(split)]


def write_sample_files(root, sample, prefix, mesh=None):
    """PLY files for one sample; returns relative paths (cloud, observation, mesh)."""
    os.makedirs(os.path.join(root, "clouds"), exist_ok=True)
    cloud_rel = os.path.join("clouds", f"{prefix}.ply")
    write_ply(os.path.join(root, cloud_rel), sample.cloud, binary=True)
    obs_rel = None
    if sample.observation is not None:
        obs_rel = os.path.join("clouds", f"{prefix}.obs.ply")
        write_ply(os.path.join(root, obs_rel), PointCloud(sample.observation), binary=True)
    mesh_rel = None
    if mesh is not None:
        mesh_rel = os.path.join("clouds", f"{prefix}.mesh.ply")
        write_ply(os.path.join(root, mesh_rel), mesh, binary=True)
    return cloud_rel, obs_rel, mesh_rel


__all__ = [
    "DatasetManifest", "EvaluationError", "Geometry", "LossError", "ManifestRecord", "PipelineError",
    "PipelineModel", "PipelineSettings", "Sample", "canonical_subset", "evaluate", "fit",
    "make_pseudo_pairs", "masked_chamfer", "render_scatter_svg", "retrain", "sample_components",
    "train_pipeline", "write_metrics",
]
