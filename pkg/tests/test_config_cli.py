import json

import pytest

from helpers import SMOKE_INI, run_smoke
from surfrecon.cli import main
from surfrecon.config import SCHEMA, Config, ConfigError, schema_text


# ------------------------------------------------------------------ config

def test_defaults_carry_named_constants():
    cfg = Config.defaults()
    assert cfg["loss"]["chamfer"] == 1.2 and cfg["loss"]["normal"] == 1.6e-4 and cfg["loss"]["feature"] == 1.5
    assert cfg["gan"]["lr_d"] == 1e-4 and cfg["gan"]["lr_g"] == 1e-5 and cfg["gan"]["batch"] == 2048
    assert cfg["gan"]["sigma0"] == 5e-3 and cfg["gan"]["anneal_interval"] == 50_000
    assert cfg["data"]["n_expressions"] == 75 and cfg["data"]["n_augmented"] == 720
    assert cfg["data"]["n_components"] == 110 and cfg["retrain"]["pseudo_ratio"] == 2.8


def test_roundtrip_and_digest():
    cfg = Config.from_text(SMOKE_INI)
    back = Config.from_text(cfg.to_text())
    assert back.sections() == cfg.sections() and back.digest() == cfg.digest()
    assert cfg.digest() != Config.defaults().digest()


@pytest.mark.parametrize("text, match", [
    ("[nope]\nx = 1\n", "unknown section"),
    ("[gan]\nfoo = 1\n", "unknown key"),
    ("[gan]\nbatch = many\n", "cannot parse"),
    ("[gan]\nbatch = 1\n", ">= 2"),
    ("[gan]\nobjective = hinge\n", "wasserstein or log"),
    ("[data]\nn_expressions = 10\n", ">= 75"),
    ("[eval]\nrender = maybe\n", "cannot parse"),
    ("not an ini", "malformed"),
])
def test_invalid_config(text, match):
    with pytest.raises(ConfigError, match=match):
        Config.from_text(text)


def test_schema_text_documents_every_key():
    text = schema_text()
    for section, keys in SCHEMA.items():
        assert f"[{section}]" in text
        assert all(f"  {k} (" in text for k in keys)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "absent.ini")


# ------------------------------------------------------------------ cli

def test_unknown_command_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_invalid_config_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[gan]\nlr_d = -1\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "run")]) == 3
    assert "invalid config" in capsys.readouterr().err


def test_runtime_failure_exit_1(tmp_path, capsys):
    assert main(["train-ae", "--out", str(tmp_path / "run")]) == 1
    assert "synth" in capsys.readouterr().err


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg = root / "smoke.ini"
    cfg.write_text(SMOKE_INI)
    codes = run_smoke(root / "run", seed=3, config_path=cfg)
    return root / "run", codes


def test_smoke_all_commands(smoke_run):
    run, codes = smoke_run
    assert codes == [0] * len(codes)
    for rel in ("config.copy", "metadata.json", "manifest.json", "metrics.csv", "checkpoints/pca.sfck",
                "checkpoints/ae.sfck", "checkpoints/gan-full.sfck", "checkpoints/pipeline.sfck",
                "checkpoints/pipeline-retrained.sfck", "logs/pipeline.csv", "export/index.csv"):
        assert (run / rel).exists(), rel
    assert list((run / "renders").glob("*.svg"))
    meta = json.loads((run / "metadata.json").read_text())
    assert meta["seed"] == 3 and len(meta["config_hash"]) == 16
    assert set(meta["commands"]) == {"synth", "train-ae", "train-gan", "train-pipeline", "pseudo-pairs",
                                     "retrain", "eval", "export"}
    header = (run / "metrics.csv").read_text().splitlines()[0]
    assert header == "method,EMD,CD,n,seed"
    manifest = json.loads((run / "manifest.json").read_text())
    prov = {r["provenance"] for r in manifest["records"]}
    assert prov == {"synthetic", "pseudo-pair"}


def test_pipeline_log_weighted_sum(smoke_run):
    import csv

    run, _ = smoke_run
    with open(run / "logs" / "pipeline.csv") as fh:
        for row in csv.DictReader(fh):
            assert abs(float(row["total"]) - float(row["weighted_sum"])) < 1e-9


def test_eval_empty_split_exit_3(smoke_run, tmp_path, capsys):
    run, _ = smoke_run
    cfg = Config.from_text(SMOKE_INI + "\n").to_text().replace("split = test", "split = shifted")
    # point eval at a split that has no records
    import shutil

    other = tmp_path / "run"
    shutil.copytree(run, other)
    man = json.loads((other / "manifest.json").read_text())
    man["records"] = [r for r in man["records"] if r["split"] != "shifted"]
    (other / "manifest.json").write_text(json.dumps(man))
    p = tmp_path / "c.ini"
    p.write_text(cfg)
    assert main(["eval", "--config", str(p), "--out", str(other)]) == 3
    assert "empty" in capsys.readouterr().err
