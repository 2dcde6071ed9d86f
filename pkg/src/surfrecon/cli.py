"""Command-line driver.

Every command works inside one run directory (``--out``)::

    config.copy       resolved configuration
    metadata.json     config hash, package versions, seed, per-command record
    manifest.json     dataset manifest (samples, labels, splits, provenance)
    checkpoints/      pca, ae, gan-<variant>, pipeline, pipeline-retrained
    metrics.csv       evaluation table (method, EMD, CD, n, seed)
    renders/          SVG scatter plots of predictions against targets
    logs/             training curves

Exit status: 0 success, 1 runtime failure, 2 usage error or unknown command,
3 invalid configuration or empty evaluation split.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__, kernels
from .cloud_ae import AEConfig, CloudAE, train_ae
from .config import Config, ConfigError, schema_text
from .geom import write_ply
from .losses import LossWeights
from .pipeline import (
    DatasetManifest, EvaluationError, ManifestRecord, PipelineModel, PipelineSettings, evaluate,
    make_pseudo_pairs, masked_chamfer, render_scatter_svg, retrain, train_pipeline, write_metrics,
    write_sample_files,
)
from .pointgan import VARIANTS, AnnealSchedule, GanModel, GanTrainConfig, generate_cloud, train_gan

COMMANDS = ("synth", "train-ae", "train-gan", "train-pipeline", "pseudo-pairs", "retrain", "eval", "export")


class RunDir:
    def __init__(self, root):
        self.root = os.path.abspath(root)
        for sub in ("checkpoints", "renders", "logs"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def ckpt(self, name):
        return self.path("checkpoints", f"{name}.sfck")

    @property
    def manifest_path(self):
        return self.path("manifest.json")

    def manifest(self):
        if not os.path.exists(self.manifest_path):
            raise RuntimeError(f"no manifest in {self.root}; run 'synth' first")
        return DatasetManifest.load(self.manifest_path)

    def record(self, command, cfg, seed, extra=None):
        meta_path = self.path("metadata.json")
        meta = {}
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                meta = json.load(fh)
        meta["config_hash"] = cfg.digest()
        meta["seed"] = seed
        meta["versions"] = {
            "surfrecon": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "kernels": kernels.BACKEND,
        }
        entry = {"config_hash": cfg.digest(), "seed": seed, "timestamp": time.time()}
        entry.update(extra or {})
        meta.setdefault("commands", {})[command] = entry
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)


def _write_rows(path, rows):
    if not rows:
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _load_config(args, run):
    if args.config:
        cfg = Config.load(args.config)
    elif os.path.exists(run.path("config.copy")):
        cfg = Config.load(run.path("config.copy"))
    else:
        cfg = Config.defaults()
    with open(run.path("config.copy"), "w") as fh:
        fh.write(cfg.to_text())
    return cfg


def _settings(cfg, seed, steps=None):
    return PipelineSettings.from_config(cfg, seed=seed, steps=steps)


def _weights(cfg):
    return LossWeights(**cfg["loss"])


def _gan_config(cfg, seed):
    g = cfg["gan"]
    return GanTrainConfig(
        lr_d=g["lr_d"], lr_g=g["lr_g"], batch=g["batch"], total_steps=g["total_steps"], n_critic=g["n_critic"],
        gp_weight=g["gp_weight"], labels_per_batch=g["labels_per_batch"], seed=seed, objective=g["objective"],
        schedule=AnnealSchedule(g["sigma0"], g["anneal_decay"], g["anneal_interval"]),
        eval_every=g["eval_every"], eval_points=g["eval_points"],
    )


# ------------------------------------------------------------------ commands

def cmd_synth(args, cfg, run):
    from .dataset import build_dataset

    data = build_dataset(cfg, args.seed)
    data.pca.save(run.ckpt("pca"))
    fam_template = data.expressions.template
    records = []
    for split, samples in data.splits.items():
        for s in samples:
            mesh = fam_template.with_vertices(s.vertices)
            cloud, obs, mesh_rel = write_sample_files(run.root, s, s.key, mesh)
            records.append(ManifestRecord(s.key, cloud, split, s.provenance, None, mesh_rel, obs, s.domain))
    DatasetManifest(run.root, records).save(run.manifest_path)
    return {"samples": len(records), "components": data.pca.n_components}


def cmd_train_ae(args, cfg, run):
    man = run.manifest()
    train = man.load_samples("train")
    a = cfg["ae"]
    ae, history = train_ae([s.cloud for s in train if s.provenance == "synthetic"],
                           AEConfig(a["steps"], a["batch"], a["lr"], a["encode_points"], seed=args.seed))
    ae.save(run.ckpt("ae"))
    _write_rows(run.path("logs", "ae.csv"), [{"epoch": e, "chamfer": v} for e, v in history])
    for r in man.records:
        if r.provenance == "synthetic":
            r.label = [float(v) for v in ae.encode(man.load_record(r).cloud)]
    man.save(run.manifest_path)
    return {"ae_version": ae.version_hash(), "final_loss": history[-1][1] if history else None}


def _labelled(samples):
    return [s for s in samples if s.label is not None]


def cmd_train_gan(args, cfg, run):
    ae = CloudAE.load(run.ckpt("ae"))
    man = run.manifest()
    train = _labelled(man.load_samples("train"))
    test = _labelled(man.load_samples("test"))
    if not train:
        raise RuntimeError("no labelled training samples; run 'train-ae' first")
    gcfg = _gan_config(cfg, args.seed)
    w = cfg["gan"]["width"]
    from .pointgan import build_gan

    model = build_gan(args.variant, w, w, seed=args.seed)
    model.centre, model.scale = ae.centre.copy(), ae.scale
    heldout = [(s.label, s.cloud.points) for s in test[:10]]
    model, rows = train_gan([s.cloud.points for s in train], np.stack([s.label for s in train]), gcfg,
                            args.variant, heldout=heldout, log_path=run.path("logs", f"gan-{args.variant}.csv"),
                            emd_points=cfg["eval"]["emd_points"], model=model)
    model.save(run.ckpt(f"gan-{args.variant}"))
    return {"variant": args.variant, "final_cd": rows[-1]["CD"]}


def cmd_train_pipeline(args, cfg, run):
    from .morph import PcaModel

    ae = CloudAE.load(run.ckpt("ae"))
    pca = PcaModel.load(run.ckpt("pca"))
    train = [s for s in _labelled(run.manifest().load_samples("train")) if s.provenance == "synthetic"]
    if not train:
        raise RuntimeError("no labelled training samples; run 'train-ae' first")
    model, rows = train_pipeline(train, pca, ae, _weights(cfg), _settings(cfg, args.seed))
    model.save(run.ckpt("pipeline"))
    _write_rows(run.path("logs", "pipeline.csv"), rows)
    return {"final_total": rows[-1]["total"] if rows else None}


def cmd_pseudo_pairs(args, cfg, run):
    man = run.manifest()
    pipe = PipelineModel.load(run.ckpt("pipeline"))
    gan = GanModel.load(run.ckpt(f"gan-{args.variant}"))
    ae = CloudAE.load(run.ckpt("ae"))
    unl = man.load_samples("unlabelled")
    n_orig = sum(1 for r in man.split("train") if r.provenance == "synthetic")
    count = int(round(cfg["retrain"]["pseudo_ratio"] * n_orig)) if unl else 0
    obs = [unl[i % len(unl)].observation for i in range(count)]
    pairs = make_pseudo_pairs(obs, pipe, gan, cfg["retrain"]["pseudo_points"], seed=args.seed, ae=ae)
    man.records = [r for r in man.records if r.provenance != "pseudo-pair"]
    for p in pairs:
        cloud, obs_rel, _ = write_sample_files(run.root, p, p.key)
        man.records.append(ManifestRecord(p.key, cloud, "train", "pseudo-pair", [float(v) for v in p.label],
                                          None, obs_rel, p.domain))
    man.save(run.manifest_path)
    return {"pairs": len(pairs)}


def cmd_retrain(args, cfg, run):
    man = run.manifest()
    pipe = PipelineModel.load(run.ckpt("pipeline"))
    samples = _labelled(man.load_samples("train"))
    if cfg["retrain"]["use_all_data"]:
        samples += [s for split in ("test", "shifted") for s in _labelled(man.load_samples(split))]
    settings = _settings(cfg, args.seed, steps=cfg["retrain"]["steps"])
    model, rows = retrain(pipe, samples, _weights(cfg), settings)
    model.save(run.ckpt("pipeline-retrained"))
    _write_rows(run.path("logs", "retrain.csv"), rows)
    return {"samples": len(samples), "pseudo": sum(s.provenance == "pseudo-pair" for s in samples)}


def _predictors(run, cfg):
    from .morph import PcaModel

    rho = cfg["pipeline"]["region_rho"]
    out = {}
    if os.path.exists(run.ckpt("pca")):
        mean = PcaModel.load(run.ckpt("pca")).mean_vertices
        out["mean-shape"] = lambda s: mean[_region(mean, s, rho)]
    for name in ("pipeline", "pipeline-retrained"):
        if os.path.exists(run.ckpt(name)):
            model = PipelineModel.load(run.ckpt(name))
            out[name] = lambda s, m=model: m.predict_points(s, rho)
    n_pts = cfg["gan"]["eval_points"]
    for v in VARIANTS:
        if os.path.exists(run.ckpt(f"gan-{v}")):
            gan = GanModel.load(run.ckpt(f"gan-{v}"))
            out[f"gan-{v}"] = lambda s, g=gan: generate_cloud(g, s.label, n_pts, seed=0)
    return out


def _region(verts, sample, rho):
    from .losses import region_mask

    return region_mask(verts, sample.cloud.points, rho)


def cmd_eval(args, cfg, run):
    split = cfg["eval"]["split"]
    samples = run.manifest().load_samples(split)
    if not samples:
        raise EvaluationError(f"split {split!r} is empty")
    preds = _predictors(run, cfg)
    if any(k.startswith("gan-") for k in preds) and any(s.label is None for s in samples):
        preds = {k: v for k, v in preds.items() if not k.startswith("gan-")}
    if not preds:
        raise RuntimeError("no trained models to evaluate")
    rows = evaluate(preds, samples, seed=args.seed, emd_points=cfg["eval"]["emd_points"])
    for r in rows:
        r["split"] = split
    write_metrics(run.path("metrics.csv"), rows)
    if cfg["eval"]["render"]:
        s = samples[0]
        for name, f in preds.items():
            render_scatter_svg(run.path("renders", f"{split}-{name}.svg"), f(s), s.cloud.points, title=f"{name} / {s.key}")
    return {"rows": len(rows), "split": split}


def cmd_export(args, cfg, run):
    split = cfg["eval"]["split"]
    samples = run.manifest().load_samples(split)
    if not samples:
        raise EvaluationError(f"split {split!r} is empty")
    name = "pipeline-retrained" if os.path.exists(run.ckpt("pipeline-retrained")) else "pipeline"
    model = PipelineModel.load(run.ckpt(name))
    from .synth import surface_family

    template = surface_family().template
    os.makedirs(run.path("export"), exist_ok=True)
    rows = []
    for s in samples:
        verts = model.reconstruct(s.observation)
        write_ply(run.path("export", f"{s.key}.ply"), template.with_vertices(verts))
        rows.append({"key": s.key, "masked_cd": masked_chamfer(verts, s.cloud.points, cfg["pipeline"]["region_rho"])})
    _write_rows(run.path("export", "index.csv"), rows)
    return {"meshes": len(rows), "model": name}


HANDLERS = {
    "synth": cmd_synth, "train-ae": cmd_train_ae, "train-gan": cmd_train_gan,
    "train-pipeline": cmd_train_pipeline, "pseudo-pairs": cmd_pseudo_pairs, "retrain": cmd_retrain,
    "eval": cmd_eval, "export": cmd_export,
}


def build_parser():
    p = argparse.ArgumentParser(prog="surfrecon", description=__doc__.split("\n")[0],
                                epilog="config keys:\n" + schema_text(),
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI config file (defaults, or the run's config.copy)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run", help="run directory")
    p.add_argument("--variant", choices=VARIANTS, default="full", help="GAN variant")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    run = RunDir(args.out)
    try:
        cfg = _load_config(args, run)
    except ConfigError as exc:
        print(f"surfrecon: invalid config: {exc}", file=sys.stderr)
        return 3
    try:
        extra = HANDLERS[args.command](args, cfg, run)
    except (ConfigError, EvaluationError) as exc:
        print(f"surfrecon {args.command}: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime-failure status
        print(f"surfrecon {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    run.record(args.command, cfg, args.seed, extra)
    print(f"surfrecon {args.command}: {json.dumps(extra, sort_keys=True)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
