"""Low-rank adapter pairs on frozen linear layers.

Each adapted layer holds factors A (d_in x r) and B (d_out x r); the layer
contributes scale * B A^T x on top of the frozen W x, scale = alpha / r.
A starts scaled-normal and B starts zero, so a fresh adapter leaves the
backbone's function untouched.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import model, store


@dataclass
class LoraAdapter:
    r: int
    alpha: float
    dropout_p: float
    layers: dict  # layer path -> (A, B)

    @property
    def scale(self):
        return self.alpha / self.r

    @property
    def n_params(self):
        return sum(a.size + b.size for a, b in self.layers.values())

    def names(self):
        return sorted(self.layers)

    def copy(self):
        return LoraAdapter(
            self.r,
            self.alpha,
            self.dropout_p,
            {n: (a.copy(), b.copy()) for n, (a, b) in self.layers.items()},
        )


def init_lora(config, r, seed, alpha=None, dropout_p=0.1, targets=None):
    """Fresh adapter over the given target layers (default: all seven families
    in every block). Deterministic per (seed, layer path)."""
    if r < 1:
        raise ValueError("rank must be >= 1")
    if r > config.d_model:
        raise ValueError(f"rank {r} exceeds d_model {config.d_model}")
    shapes = model.linear_shapes(config)
    if targets is None:
        targets = sorted(shapes)
    layers = {}
    for name in targets:
        if name not in shapes:
            raise ValueError(f"unknown target layer {name!r}")
        d_out, d_in = shapes[name]
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        A = rng.standard_normal((d_in, r)) / np.sqrt(d_in)
        B = np.zeros((d_out, r))
        layers[name] = (A, B)
    return LoraAdapter(r=r, alpha=float(alpha if alpha is not None else 4 * r),
                       dropout_p=dropout_p, layers=layers)


def lora_param_count(shapes, r):
    """Trainable parameter count for rank-r adapters over the given
    {name: (d_out, d_in)} targets."""
    return sum(r * (d_out + d_in) for d_out, d_in in shapes.values())


def flatten(adapter):
    """Stable flat layout: sorted layer paths, A before B within each layer."""
    parts = []
    for name in adapter.names():
        A, B = adapter.layers[name]
        parts.append(A.ravel())
        parts.append(B.ravel())
    return np.concatenate(parts)


def unflatten(vec, template):
    """Inverse of flatten against a template adapter's shapes."""
    expected = template.n_params
    if vec.shape != (expected,):
        raise ValueError(f"expected flat vector of length {expected}, got {vec.shape}")
    layers, off = {}, 0
    for name in template.names():
        A, B = template.layers[name]
        a = vec[off : off + A.size].reshape(A.shape).copy()
        off += A.size
        b = vec[off : off + B.size].reshape(B.shape).copy()
        off += B.size
        layers[name] = (a, b)
    return LoraAdapter(template.r, template.alpha, template.dropout_p, layers)


def merge_weighted(adapter_list, weights):
    """Single adapter with A = sum lambda_c A_c, B = sum lambda_c B_c.

    Weights are normalized internally (lambda = w / sum w); merging identical
    adapters under any admissible weights is therefore the identity.
    """
    if not adapter_list:
        raise ValueError("no adapters to merge")
    if len(weights) != len(adapter_list):
        raise ValueError("weight count does not match adapter count")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    lam = w / total
    first = adapter_list[0]
    names = first.names()
    for a in adapter_list[1:]:
        if a.names() != names:
            raise ValueError("adapters target different layers")
        for n in names:
            if a.layers[n][0].shape != first.layers[n][0].shape:
                raise ValueError(f"shape mismatch at {n}")
    layers = {}
    for n in names:
        layers[n] = (
            sum(l * a.layers[n][0] for l, a in zip(lam, adapter_list)),
            sum(l * a.layers[n][1] for l, a in zip(lam, adapter_list)),
        )
    return LoraAdapter(first.r, first.alpha, first.dropout_p, layers)


@dataclass
class AdapterBank:
    """K adapters stacked along a leading axis for one batched forward."""

    layers: dict  # layer path -> (A (K, d_in, r), B (K, d_out, r))
    scale: float

    @property
    def size(self):
        return next(iter(self.layers.values()))[0].shape[0]


def stack_bank(adapter_list):
    if not adapter_list:
        raise ValueError("empty adapter list")
    first = adapter_list[0]
    names = first.names()
    for a in adapter_list[1:]:
        if a.names() != names or a.r != first.r or a.scale != first.scale:
            raise ValueError("bank members must share targets, rank, and scale")
    layers = {
        n: (
            np.stack([a.layers[n][0] for a in adapter_list]),
            np.stack([a.layers[n][1] for a in adapter_list]),
        )
        for n in names
    }
    return AdapterBank(layers=layers, scale=first.scale)


def save_adapter(path, adapter, meta=None):
    arrays = {}
    for name, (A, B) in adapter.layers.items():
        arrays[name + ".A"] = A
        arrays[name + ".B"] = B
    full = {
        "r": adapter.r,
        "alpha": adapter.alpha,
        "dropout_p": adapter.dropout_p,
        "targets": adapter.names(),
    }
    full.update(meta or {})
    store.save_arrays(path, "adapter", arrays, full)


def load_adapter(path):
    kind, arrays, meta = store.load_arrays(path)
    if kind != "adapter":
        raise ValueError(f"{path}: expected an adapter checkpoint, got {kind}")
    layers = {n: (arrays[n + ".A"], arrays[n + ".B"]) for n in meta["targets"]}
    return (
        LoraAdapter(int(meta["r"]), float(meta["alpha"]), float(meta["dropout_p"]), layers),
        meta,
    )
