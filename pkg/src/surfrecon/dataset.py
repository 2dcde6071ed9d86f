"""Synthetic experiment data: morph model, labelled splits and observations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .morph import augment_expressions, fit_pca
from .pipeline import Sample
from .synth import IN_DOMAIN, SHIFTED_DOMAIN, make_observation, synth_expressions, synth_family


@dataclass
class SyntheticData:
    expressions: object          # augmented ExpressionSet the PCA was fitted on
    pca: object
    splits: dict                 # split name -> list of Sample (labels filled by ``attach_labels``)
    params: dict                 # split name -> list of SynthParams
    seed: int

    def clouds(self, split):
        return [s.cloud for s in self.splits[split]]


def _samples(count, seed, n_points, noise, domain_name, widen=1.0, exclude_inner=False, prefix=""):
    domain = SHIFTED_DOMAIN if domain_name == "shifted" else IN_DOMAIN
    if count == 0:
        return [], []
    expr, clouds, params = synth_expressions(count, seed, n_points, noise, widen, exclude_inner)
    obs_seeds = np.random.SeedSequence([seed, 7]).generate_state(count)
    out = []
    for i, (v, c) in enumerate(zip(expr.vertices, clouds)):
        obs = make_observation(c, int(obs_seeds[i]), domain)
        out.append(Sample(obs.points, c, None, v, "synthetic", domain_name, f"{prefix}{i:05d}"))
    return out, params


def build_dataset(cfg, seed=0):
    """Everything the experiments need from one config and seed.

    Split shapes are fresh draws from the family (disjoint seeds); the shifted
    and unlabelled splits use widened parameter ranges and shifted cameras.
    """
    d = cfg["data"]
    ss = np.random.SeedSequence(seed).generate_state(6)
    base, _, _ = synth_family(d["n_expressions"], int(ss[0]), n_points=16)
    expressions = augment_expressions(base, max(d["n_augmented"], d["n_expressions"]), seed=int(ss[1]))
    n_t = min(d["n_components"], len(expressions) - 1)
    pca = fit_pca(expressions, n_t)
    n, noise, widen = d["cloud_points"], d["noise"], d["shift_widen"]
    plan = {
        "train": (d["n_train"], int(ss[2]), "in", 1.0, False),
        "test": (d["n_test"], int(ss[3]), "in", 1.0, False),
        "shifted": (d["n_shifted_test"], int(ss[4]), "shifted", widen, True),
        "unlabelled": (d["n_unlabelled"], int(ss[5]), "shifted", widen, True),
    }
    splits, params = {}, {}
    for name, (count, s, dom, w, excl) in plan.items():
        splits[name], params[name] = _samples(count, s, n, noise, dom, w, excl, prefix=f"{name}-")
    return SyntheticData(expressions, pca, splits, params, seed)


def attach_labels(samples, ae):
    """Set each sample's label to the autoencoder's code of its target cloud."""
    for s in samples:
        s.label = ae.encode(s.cloud)
    return samples
