"""Parameter-holding building blocks and the flat parameter file format.

Modules are plain classes exposing `named_parameters(prefix)`; there is no
module registry.  Weights are initialized from a caller-provided numpy
Generator so model construction is fully seed-determined.
"""

from __future__ import annotations

import json

import numpy as np

from .tensor import (
    Tensor,
    add,
    layer_norm,
    matmul,
    mul,
    relu,
    scaled_attention,
    sigmoid,
)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        # Uniform bias init keeps pre-activations off exact ReLU kinks,
        # which finite-difference checks would otherwise straddle.
        std = 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.normal(0.0, std, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-std, std, d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class LayerNorm:
    """Row normalization with learned affine scale/shift."""

    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x):
        return add(mul(layer_norm(x, self.eps), self.weight), self.bias)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class MultiHeadAttention:
    def __init__(self, rng, d: int, n_heads: int):
        if d % n_heads:
            raise ValueError(f"embedding dim {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q_proj = Linear(rng, d, d)
        self.k_proj = Linear(rng, d, d)
        self.v_proj = Linear(rng, d, d)
        self.out_proj = Linear(rng, d, d)

    def __call__(self, q, k, v):
        att = scaled_attention(self.q_proj(q), self.k_proj(k), self.v_proj(v), self.n_heads)
        return self.out_proj(att)

    def named_parameters(self, prefix: str):
        for name, sub in (
            ("q_proj", self.q_proj),
            ("k_proj", self.k_proj),
            ("v_proj", self.v_proj),
            ("out_proj", self.out_proj),
        ):
            yield from sub.named_parameters(f"{prefix}.{name}")


class FeedForward:
    """Two linear layers with a ReLU between, as in transformer blocks."""

    def __init__(self, rng, d: int, d_hidden: int):
        self.lin1 = Linear(rng, d, d_hidden)
        self.lin2 = Linear(rng, d_hidden, d)

    def __call__(self, x):
        return self.lin2(relu(self.lin1(x)))

    def named_parameters(self, prefix: str):
        yield from self.lin1.named_parameters(f"{prefix}.lin1")
        yield from self.lin2.named_parameters(f"{prefix}.lin2")


class BoxMLP:
    """Three-layer ReLU MLP with sigmoid output, for box regression heads."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int = 4):
        self.lin1 = Linear(rng, d_in, d_hidden)
        self.lin2 = Linear(rng, d_hidden, d_hidden)
        self.lin3 = Linear(rng, d_hidden, d_out)

    def __call__(self, x):
        return sigmoid(self.lin3(relu(self.lin2(relu(self.lin1(x))))))

    def named_parameters(self, prefix: str):
        yield from self.lin1.named_parameters(f"{prefix}.lin1")
        yield from self.lin2.named_parameters(f"{prefix}.lin2")
        yield from self.lin3.named_parameters(f"{prefix}.lin3")


def dropout_mask(rng, shape, rate: float):
    """Inverted-dropout multiplier, or None when the rate is zero."""
    if rate <= 0.0:
        return None
    keep = (rng.random(shape) >= rate).astype(np.float64) / (1.0 - rate)
    return Tensor(keep)


PARAM_FORMAT = "cvtrack-params-v1"


def save_params(named: dict[str, Tensor], path):
    """Write a flat (name, shape, data) container as JSON.

    Python's repr-based float serialization round-trips every finite f64
    bit-exactly, so save -> load -> save is stable.
    """
    records = [
        {"name": name, "shape": list(t.array.shape), "data": t.array.reshape(-1).tolist()}
        for name, t in named.items()
    ]
    with open(path, "w") as fh:
        json.dump({"format": PARAM_FORMAT, "params": records}, fh)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("format") != PARAM_FORMAT:
        raise ValueError(f"unrecognized parameter file format in {path}")
    out: dict[str, np.ndarray] = {}
    for rec in blob["params"]:
        arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        out[rec["name"]] = arr
    return out


def assign_params(named: dict[str, Tensor], arrays: dict[str, np.ndarray]):
    """Copy loaded arrays into live parameters, validating names and shapes."""
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, t in named.items():
        arr = arrays[name]
        if arr.shape != t.array.shape:
            raise ValueError(f"shape mismatch for {name}: file {arr.shape} vs model {t.array.shape}")
        t.array[...] = arr
