"""Multilayer perceptrons with optional label conditioning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, concat, leaky_relu, matmul, mul, relu, take_rows, tanh

ACTIVATIONS = ("leaky_relu", "relu", "tanh", "identity")
COND_MODES = (None, "injection", "concatenation")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths, activations and conditioning of an MLP.

    ``widths[i]`` is the output width of affine layer ``i``. When ``cond_dim`` is
    non-zero every layer but the last is conditioned on a label ``y``:

    * injection: ``h_i = act(W_i h + b_i) * (U_i y + 1)``
    * concatenation: ``h_i = act(W_i [h ; y] + b_i)``
    """

    in_dim: int
    widths: tuple
    activations: tuple
    cond_dim: int = 0
    cond_mode: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2:
            raise ValueError("an MlpSpec needs at least 2 layers")
        if self.in_dim <= 0 or any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if len(self.activations) != len(self.widths):
            raise ValueError("one activation per layer is required")
        bad = set(self.activations) - set(ACTIVATIONS)
        if bad:
            raise ValueError(f"unknown activations {sorted(bad)}")
        if self.cond_mode not in COND_MODES:
            raise ValueError(f"unknown conditioning mode {self.cond_mode!r}")
        if (self.cond_dim > 0) != (self.cond_mode is not None):
            raise ValueError("cond_dim and cond_mode must be set together")

    @property
    def n_layers(self):
        return len(self.widths)

    @property
    def out_dim(self):
        return self.widths[-1]

    def fan_ins(self):
        dims = (self.in_dim,) + self.widths[:-1]
        out = []
        for i, d in enumerate(dims):
            if self.cond_mode == "concatenation" and i < self.n_layers - 1:
                d += self.cond_dim
            out.append(d)
        return out

    @classmethod
    def simple(cls, widths, hidden="leaky_relu", last="identity", **kw):
        """``widths`` includes the input width: ``(256, 128, 110)`` is 2 layers."""
        n = len(widths) - 1
        return cls(widths[0], tuple(widths[1:]), (hidden,) * (n - 1) + (last,), **kw)


def init_params(spec: MlpSpec, seed: int) -> dict:
    """He init (fan-in) for rectifier layers, Xavier for tanh/identity; zero biases.

    Injection weights start small so every layer's gain stays near 1.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for i, (fan_in, fan_out, act) in enumerate(zip(spec.fan_ins(), spec.widths, spec.activations)):
        if act in ("leaky_relu", "relu"):
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(2.0 / (fan_in + fan_out))
        params[f"l{i}.W"] = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)
        params[f"l{i}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)
        if spec.cond_mode == "injection" and i < spec.n_layers - 1:
            # small gains: the (U y + 1) factors multiply across layers
            ustd = 0.5 / np.sqrt(spec.cond_dim)
            params[f"l{i}.U"] = Tensor(rng.normal(0.0, ustd, size=(spec.cond_dim, fan_out)), requires_grad=True)
    return params


def _activate(h, act):
    if act == "leaky_relu":
        return leaky_relu(h, 0.2)
    if act == "relu":
        return relu(h)
    if act == "tanh":
        return tanh(h)
    return h


def mlp_forward(spec: MlpSpec, params: dict, x: Tensor, y: Tensor | None = None,
                y_index=None) -> Tensor:
    """Run the MLP on a batch of rows ``x``.

    With ``y_index`` the label tensor ``y`` holds one row per distinct label and
    row ``r`` of ``x`` is conditioned on ``y[y_index[r]]``; label projections are
    then computed once per distinct label. Without it ``y`` has one row per
    input row.
    """
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(f"expected input of width {spec.in_dim}, got shape {x.shape}")
    expand = None
    if spec.cond_dim:
        rows = x.shape[0] if y_index is None else None
        if y is None or y.ndim != 2 or y.shape[1] != spec.cond_dim or (rows is not None and y.shape[0] != rows):
            raise ValueError(f"expected label rows of width {spec.cond_dim} matching the input batch")
        if y_index is not None:
            y_index = np.asarray(y_index)
            if len(y_index) != x.shape[0]:
                raise ValueError("y_index must have one entry per input row")
            expand = y_index
    h = x
    last = spec.n_layers - 1
    for i, act in enumerate(spec.activations):
        conditioned = spec.cond_dim and i < last
        W = params[f"l{i}.W"]
        if conditioned and spec.cond_mode == "concatenation":
            if expand is None:
                pre = matmul(concat([h, y], axis=1), W)
            else:
                # W [h ; y] split into its two blocks so y is projected once per label
                n_in = h.shape[1]
                pre = add(matmul(h, W[:n_in]), take_rows(matmul(y, W[n_in:]), expand))
        else:
            pre = matmul(h, W)
        h = _activate(add(pre, params[f"l{i}.b"]), act)
        if conditioned and spec.cond_mode == "injection":
            gain = add(matmul(y, params[f"l{i}.U"]), 1.0)
            if expand is not None:
                gain = take_rows(gain, expand)
            h = mul(h, gain)
    return h
