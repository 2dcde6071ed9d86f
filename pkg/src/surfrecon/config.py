"""Run configuration: INI-style sections of typed keys with documented defaults.

Unknown sections or keys, unparsable values and out-of-range values raise
:class:`ConfigError`.
"""
from __future__ import annotations

import configparser
import hashlib
import io

# section -> key -> (type, default, check, help)
_POS = (lambda v: v > 0, "must be positive")
_NONNEG = (lambda v: v >= 0, "must be non-negative")
_FRAC = (lambda v: 0 < v < 1, "must lie in (0, 1)")
_ANY = (lambda v: True, "")

SCHEMA = {
    "data": {
        "n_expressions": (int, 75, (lambda v: v >= 75, "must be >= 75"), "base expressions drawn from the family"),
        "n_augmented": (int, 720, _POS, "expressions after blending augmentation"),
        "n_train": (int, 500, _POS, "training shapes (clouds + observations)"),
        "n_test": (int, 100, _POS, "in-domain test shapes"),
        "n_shifted_test": (int, 100, _NONNEG, "shifted-domain test shapes"),
        "n_unlabelled": (int, 300, _NONNEG, "shifted-domain observations without ground truth"),
        "cloud_points": (int, 2048, _POS, "points per sampled cloud"),
        "noise": (float, 0.0, _NONNEG, "Gaussian noise on sampled clouds (cm)"),
        "n_components": (int, 110, _POS, "PCA components"),
        "shift_widen": (float, 1.3, _POS, "parameter-range growth for shifted shapes"),
    },
    "ae": {
        "steps": (int, 2000, _NONNEG, "optimiser steps"),
        "batch": (int, 8, _POS, "clouds per step"),
        "lr": (float, 1e-3, _POS, "Adam step size"),
        "encode_points": (int, 512, (lambda v: v >= 64, "must be >= 64"), "points per cloud fed to the encoder"),
    },
    "gan": {
        "lr_d": (float, 1e-4, _POS, "critic step size"),
        "lr_g": (float, 1e-5, _POS, "generator step size"),
        "batch": (int, 2048, (lambda v: v >= 2, "must be >= 2"), "real points per critic step"),
        "total_steps": (int, 20000, _NONNEG, "generator steps"),
        "n_critic": (int, 5, _POS, "critic steps per generator step"),
        "gp_weight": (float, 10.0, _NONNEG, "gradient penalty weight"),
        "labels_per_batch": (int, 16, _POS, "distinct labels per batch"),
        "sigma0": (float, 5e-3, _NONNEG, "initial softening variance"),
        "anneal_decay": (float, 0.1, _NONNEG, "fraction of sigma0 removed per interval"),
        "anneal_interval": (int, 50000, _POS, "steps per anneal interval"),
        "width": (int, 128, _POS, "hidden width of G and D"),
        "objective": (str, "wasserstein", (lambda v: v in ("wasserstein", "log"), "must be wasserstein or log"), "adversarial loss form"),
        "eval_every": (int, 1000, _POS, "steps between metric rows"),
        "eval_points": (int, 1024, _POS, "generated points per evaluated label"),
    },
    "pipeline": {
        "steps": (int, 2000, _NONNEG, "optimiser steps"),
        "batch": (int, 8, _POS, "samples per step"),
        "lr": (float, 1e-3, _POS, "Adam step size"),
        "obs_points": (int, 256, (lambda v: v >= 64, "must be >= 64"), "observation points fed to the encoder"),
        "region_rho": (float, 1.0, _POS, "Chamfer region radius (cm)"),
        "collision_radius": (float, 1.5, _POS, "landmark sphere radius (cm)"),
    },
    "loss": {
        "chamfer": (float, 1.2, _NONNEG, "weight of the Chamfer term"),
        "normal": (float, 1.6e-4, _NONNEG, "weight of the normal term"),
        "laplacian": (float, 0.4, _NONNEG, "weight of the Laplacian term"),
        "edge": (float, 0.2, _NONNEG, "weight of the edge-length term"),
        "collision": (float, 0.8, _NONNEG, "weight of the collision term"),
        "feature": (float, 1.5, _NONNEG, "weight of the label term"),
    },
    "retrain": {
        "steps": (int, 1000, _NONNEG, "continued-training steps"),
        "pseudo_ratio": (float, 2.8, _NONNEG, "pseudo pairs per original sample"),
        "pseudo_points": (int, 2048, _POS, "points per generated pseudo cloud"),
        "use_all_data": (bool, False, _ANY, "train on every split instead of the training split"),
    },
    "eval": {
        "emd_points": (int, 256, _POS, "points per cloud for exact EMD"),
        "render": (bool, True, _ANY, "write SVG scatter renderings"),
        "split": (str, "test", (lambda v: v in ("test", "shifted", "train"), "must be test, shifted or train"), "evaluated split"),
    },
}


class ConfigError(ValueError):
    pass


def _parse(kind, raw):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    return kind(raw.strip())


class Config:
    """Resolved configuration; ``cfg["gan"]["lr_d"]`` style access."""

    def __init__(self, values):
        self._values = values

    def __getitem__(self, section):
        return self._values[section]

    def sections(self):
        return dict(self._values)

    @classmethod
    def defaults(cls):
        return cls({s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls.defaults()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                kind, _, (check, why), _ = SCHEMA[section][key]
                try:
                    value = _parse(kind, raw)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from exc
                if not check(value):
                    raise ConfigError(f"{section}.{key}={value!r} {why}")
                cfg._values[section][key] = value
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_text(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for s, keys in self._values.items():
            parser[s] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def schema_text():
    """Human-readable description of every key and its default."""
    lines = []
    for s, keys in SCHEMA.items():
        lines.append(f"[{s}]")
        for k, (kind, default, _, help_) in keys.items():
            lines.append(f"  {k} ({kind.__name__}, default {default!r}): {help_}")
    return "\n".join(lines)
