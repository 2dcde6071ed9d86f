"""Shared numerical oracles for the test suite."""
from pathlib import Path

import numpy as np


def fd_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        a = f()
        x[i] = old - eps
        b = f()
        x[i] = old
        g[i] = (a - b) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(1e-8, np.abs(a).max(), np.abs(b).max()))


# tiny end-to-end run: every command, a few steps each
SMOKE_INI = (Path(__file__).resolve().parents[1] / "configs" / "smoke.ini").read_text()

SMOKE_COMMANDS = ("synth", "train-ae", "train-gan", "train-pipeline", "pseudo-pairs", "retrain", "eval", "export")


def run_smoke(out, seed=0, config_path=None):
    """Run every CLI command in ``out``; returns the list of exit codes."""
    from surfrecon.cli import main

    codes = []
    for i, cmd in enumerate(SMOKE_COMMANDS):
        argv = [cmd, "--out", str(out), "--seed", str(seed)]
        if i == 0 and config_path is not None:
            argv += ["--config", str(config_path)]
        codes.append(main(argv))
    return codes
