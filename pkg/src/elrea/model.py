"""Small decoder-only transformer with exact forward logits and reverse-mode
gradients, in plain float64 numpy.

Pre-norm blocks, learned absolute positions, gated GELU feed-forward, untied
output head. Everything is deterministic given seeds; dropout exists only on
the adapter input path and only when a seeded stream is supplied. The same
engine serves three adapter shapes: a single low-rank adapter (training), a
stacked bank of adapters evaluated in one batched pass (ensemble decoding),
and a per-token softmax-gated mixture of frozen adapters (learnable-gate
baseline). Gradients are available with respect to the adapter factors, the
backbone, or the gate vectors.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .corpus import ROLE_INSTR, ROLE_RESP

WRT_ADAPTER = "adapter-only"
WRT_BACKBONE = "backbone-only"
WRT_ALL = "all"

# per-block linear families that take adapters, in forward-call order
TARGET_FAMILIES = ("attn.q", "attn.k", "attn.v", "attn.o", "ff.gate", "ff.up", "ff.down")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class LmConfig:
    vocab_size: int = 99
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 256
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "ln_eps": self.ln_eps,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def linear_shapes(config):
    """(d_out, d_in) for every adapter-target linear, keyed by layer path."""
    d, f = config.d_model, config.d_ff
    fam_shapes = {
        "attn.q": (d, d),
        "attn.k": (d, d),
        "attn.v": (d, d),
        "attn.o": (d, d),
        "ff.gate": (f, d),
        "ff.up": (f, d),
        "ff.down": (d, f),
    }
    out = {}
    for i in range(config.n_layers):
        for fam in TARGET_FAMILIES:
            out[f"layers.{i:02d}.{fam}"] = fam_shapes[fam]
    return out


def _param_shapes(config):
    c = config
    shapes = {
        "tok_emb": (c.vocab_size, c.d_model),
        "pos_emb": (c.max_len, c.d_model),
        "ln_f.g": (c.d_model,),
        "ln_f.b": (c.d_model,),
        "head.w": (c.vocab_size, c.d_model),
        "head.b": (c.vocab_size,),
    }
    for name, (d_out, d_in) in linear_shapes(c).items():
        shapes[name + ".w"] = (d_out, d_in)
        shapes[name + ".b"] = (d_out,)
    for i in range(c.n_layers):
        for ln in ("ln1", "ln2"):
            shapes[f"layers.{i:02d}.{ln}.g"] = (c.d_model,)
            shapes[f"layers.{i:02d}.{ln}.b"] = (c.d_model,)
    return shapes


@dataclass
class ParameterStore:
    config: LmConfig
    arrays: dict = field(default_factory=dict)

    def names(self):
        return sorted(self.arrays)

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays.values())

    def flatten(self):
        return np.concatenate([self.arrays[n].ravel() for n in self.names()])

    def with_flat(self, vec):
        """New store with values taken from a flat vector in stable name order."""
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected flat vector of length {self.n_params}")
        arrays, off = {}, 0
        for n in self.names():
            a = self.arrays[n]
            arrays[n] = vec[off : off + a.size].reshape(a.shape).copy()
            off += a.size
        return ParameterStore(self.config, arrays)

    def copy(self):
        return ParameterStore(self.config, {n: a.copy() for n, a in self.arrays.items()})


def init_backbone(config, seed):
    """Deterministic init: scaled normal matrices, zero biases, identity norms.

    Each array draws from its own (seed, name) stream, so values do not
    depend on the presence or shapes of other arrays.
    """
    arrays = {}
    for name, shape in sorted(_param_shapes(config).items()):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        elif name.endswith(".g"):
            arrays[name] = np.ones(shape)
        elif name.endswith(".w") or name.endswith("_emb"):
            fan_in = shape[-1]
            arrays[name] = rng.standard_normal(shape) / math.sqrt(fan_in)
        else:
            raise AssertionError(f"unhandled parameter {name}")
    return ParameterStore(config, arrays)


# --- loss masks ----------------------------------------------------------


def response_mask(seq):
    """Positions whose prediction enters the training loss: response + EOS."""
    mask = seq.roles == ROLE_RESP
    if not mask.any():
        raise ValueError(f"{seq.id}: no response positions to train on")
    return mask


def instruction_mask(seq):
    """Instruction-role positions excluding BOS; used for gradient features."""
    mask = (seq.roles == ROLE_INSTR).copy()
    mask[0] = False
    if not mask.any():
        raise ValueError(f"{seq.id}: no instruction positions beyond BOS")
    return mask


# --- activations ---------------------------------------------------------


def _gelu(z):
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _gelu_grad(z):
    phi = np.exp(-0.5 * z * z) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * phi


def _softmax_rows(s):
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class GatedMixture:
    """Frozen adapter candidates plus one trainable gate vector per candidate
    per adapted layer; mixing weights are a per-token softmax of gate scores."""

    a_stack: dict  # layer -> (n_candidates, d_in, r)
    b_stack: dict  # layer -> (n_candidates, d_out, r)
    gates: dict  # layer -> (n_candidates, d_in)
    scale: float


# --- forward -------------------------------------------------------------


def _check_tokens(config, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < 1:
        raise ValueError("tokens must be a non-empty 1-d array")
    if tokens.size > config.max_len:
        raise ValueError(f"sequence length {tokens.size} exceeds max_len {config.max_len}")
    return tokens


def _forward(params, tokens, adapter=None, mixture=None, dropout_p=0.0, dropout_rng=None):
    cfg = params.config
    P = params.arrays
    tokens = _check_tokens(cfg, tokens)
    T = tokens.size
    H, hd = cfg.n_heads, cfg.head_dim
    isq = 1.0 / math.sqrt(hd)
    causal = np.tril(np.ones((T, T), dtype=bool))
    drop = dropout_p > 0.0 and dropout_rng is not None

    cache = {"tokens": tokens, "lin": {}, "layers": []}

    def lin(name, x):
        y = x @ P[name + ".w"].T + P[name + ".b"]
        slot = {"x": x}
        if mixture is not None and name in mixture.gates:
            A, B = mixture.a_stack[name], mixture.b_stack[name]
            xa = np.einsum("td,cdr->tcr", x, A)
            delta = np.einsum("tcr,cor->tco", xa, B)
            lam = _softmax_rows(x @ mixture.gates[name].T)
            y = y + mixture.scale * np.einsum("tco,tc->to", delta, lam)
            slot.update(delta=delta, lam=lam)
        elif adapter is not None and name in adapter.layers:
            A, B = adapter.layers[name]
            xd, mask = x, None
            if drop:
                keep = dropout_rng.random(x.shape) >= dropout_p
                mask = keep / (1.0 - dropout_p)
                xd = x * mask
            xa = xd @ A
            y = y + adapter.scale * (xa @ B.T)
            slot.update(xd=xd, xa=xa, mask=mask)
        cache["lin"][name] = slot
        return y

    def layernorm(x, g, b):
        mu = x.mean(-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(-1, keepdims=True) + cfg.ln_eps)
        xh = (x - mu) * inv
        return g * xh + b, xh, inv

    x = P["tok_emb"][tokens] + P["pos_emb"][:T]
    for i in range(cfg.n_layers):
        pre = f"layers.{i:02d}."
        L = {}
        u, L["xh1"], L["inv1"] = layernorm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        q = lin(pre + "attn.q", u)
        k = lin(pre + "attn.k", u)
        v = lin(pre + "attn.v", u)
        q2 = q.reshape(T, H, hd).transpose(1, 0, 2)
        k2 = k.reshape(T, H, hd).transpose(1, 0, 2)
        v2 = v.reshape(T, H, hd).transpose(1, 0, 2)
        scores = np.where(causal, (q2 @ k2.transpose(0, 2, 1)) * isq, -np.inf)
        p = _softmax_rows(scores)
        ctx = (p @ v2).transpose(1, 0, 2).reshape(T, cfg.d_model)
        x = x + lin(pre + "attn.o", ctx)
        L.update(q2=q2, k2=k2, v2=v2, p=p)
        u2, L["xh2"], L["inv2"] = layernorm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        gate_out = lin(pre + "ff.gate", u2)
        up_out = lin(pre + "ff.up", u2)
        gact = _gelu(gate_out)
        x = x + lin(pre + "ff.down", gact * up_out)
        L.update(gate_out=gate_out, up_out=up_out, gact=gact)
        cache["layers"].append(L)
    uf, cache["xhf"], cache["invf"] = layernorm(x, P["ln_f.g"], P["ln_f.b"])
    cache["uf"] = uf
    logits = uf @ P["head.w"].T + P["head.b"]
    return logits, cache


def forward(params, adapter, seq):
    """Exact logits for one sequence; dropout off. seq may be a TokenSequence
    or a raw token array."""
    tokens = seq.tokens if hasattr(seq, "tokens") else seq
    logits, _ = _forward(params, tokens, adapter=adapter)
    return logits


def forward_bank(params, bank, tokens):
    """Run every adapter in a stacked bank over the same tokens in one pass.

    bank.layers maps layer path -> (A, B) with leading bank axis K; returns
    logits of shape (K, T, vocab). The replicated-input trick: activations
    carry a leading K axis and diverge only through the adapter deltas.
    """
    cfg = params.config
    P = params.arrays
    tokens = _check_tokens(cfg, tokens)
    T = tokens.size
    K = next(iter(bank.layers.values()))[0].shape[0]
    H, hd = cfg.n_heads, cfg.head_dim
    isq = 1.0 / math.sqrt(hd)
    causal = np.tril(np.ones((T, T), dtype=bool))

    def lin(name, x):
        y = x @ P[name + ".w"].T + P[name + ".b"]
        if name in bank.layers:
            A, B = bank.layers[name]
            y = y + bank.scale * ((x @ A) @ B.transpose(0, 2, 1))
        return y

    def layernorm(x, g, b):
        mu = x.mean(-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(-1, keepdims=True) + cfg.ln_eps)
        return g * ((x - mu) * inv) + b

    emb = P["tok_emb"][tokens] + P["pos_emb"][:T]
    x = np.tile(emb, (K, 1, 1))
    for i in range(cfg.n_layers):
        pre = f"layers.{i:02d}."
        u = layernorm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        q = lin(pre + "attn.q", u).reshape(K, T, H, hd).transpose(0, 2, 1, 3)
        k = lin(pre + "attn.k", u).reshape(K, T, H, hd).transpose(0, 2, 1, 3)
        v = lin(pre + "attn.v", u).reshape(K, T, H, hd).transpose(0, 2, 1, 3)
        scores = np.where(causal, (q @ k.transpose(0, 1, 3, 2)) * isq, -np.inf)
        p = _softmax_rows(scores)
        ctx = (p @ v).transpose(0, 2, 1, 3).reshape(K, T, cfg.d_model)
        x = x + lin(pre + "attn.o", ctx)
        u2 = layernorm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        h = _gelu(lin(pre + "ff.gate", u2)) * lin(pre + "ff.up", u2)
        x = x + lin(pre + "ff.down", h)
    uf = layernorm(x, P["ln_f.g"], P["ln_f.b"])
    return uf @ P["head.w"].T + P["head.b"]


# --- loss ----------------------------------------------------------------


def ntp_loss(logits, seq, mask):
    """Summed NLL of each masked token given its left context. Natural log."""
    tokens = seq.tokens if hasattr(seq, "tokens") else np.asarray(seq, dtype=np.int64)
    loss, _ = _loss_terms(logits, tokens, mask)
    return loss


def _loss_terms(logits, tokens, mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] != tokens.shape[0] or logits.shape[0] != tokens.shape[0]:
        raise ValueError("logits, tokens, and mask lengths disagree")
    if mask[0]:
        raise ValueError("position 0 has no left context and cannot be masked")
    pos = np.nonzero(mask)[0]
    if pos.size == 0:
        raise ValueError("mask selects no positions")
    rows = logits[pos - 1]
    m = rows.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(rows - m).sum(axis=1, keepdims=True))).ravel()
    picked = rows[np.arange(pos.size), tokens[pos]]
    return float((lse - picked).sum()), (pos, rows, lse)


def _dlogits(logits, tokens, mask):
    loss, (pos, rows, lse) = _loss_terms(logits, tokens, mask)
    dl = np.zeros_like(logits)
    dl[pos - 1] = np.exp(rows - lse[:, None])
    dl[pos - 1, tokens[pos]] -= 1.0
    return loss, dl


# --- backward ------------------------------------------------------------


def _acc(d, key, val):
    if key in d:
        d[key] = d[key] + val
    else:
        d[key] = val


def _backward(params, cache, dlogits, adapter=None, mixture=None,
              want_adapter=False, want_backbone=False, want_gates=False):
    cfg = params.config
    P = params.arrays
    tokens = cache["tokens"]
    T = tokens.size
    H, hd = cfg.n_heads, cfg.head_dim
    isq = 1.0 / math.sqrt(hd)
    gb, ga, gg = {}, {}, {}

    def lin_bwd(name, dy):
        c = cache["lin"][name]
        dx = dy @ P[name + ".w"]
        if want_backbone:
            _acc(gb, name + ".w", dy.T @ c["x"])
            _acc(gb, name + ".b", dy.sum(0))
        if mixture is not None and name in mixture.gates:
            A, B = mixture.a_stack[name], mixture.b_stack[name]
            lam = c["lam"]
            dlam = mixture.scale * np.einsum("to,tco->tc", dy, c["delta"])
            ds = lam * (dlam - (dlam * lam).sum(axis=1, keepdims=True))
            if want_gates:
                _acc(gg, name, ds.T @ c["x"])
            dxa = mixture.scale * np.einsum("to,tc,cor->tcr", dy, lam, B)
            dx = dx + np.einsum("tcr,cdr->td", dxa, A) + ds @ mixture.gates[name]
        elif adapter is not None and name in adapter.layers:
            A, B = adapter.layers[name]
            s = adapter.scale
            dyB = dy @ B
            if want_adapter:
                _acc(ga, name, (s * (c["xd"].T @ dyB), s * (dy.T @ c["xa"])))
            dxd = s * (dyB @ A.T)
            dx = dx + (dxd * c["mask"] if c["mask"] is not None else dxd)
        return dx

    def ln_bwd(dy, xh, inv, gname):
        if want_backbone:
            _acc(gb, gname + ".g", (dy * xh).sum(0))
            _acc(gb, gname + ".b", dy.sum(0))
        dxh = dy * P[gname + ".g"]
        return inv * (
            dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True)
        )

    if want_backbone:
        _acc(gb, "head.w", dlogits.T @ cache["uf"])
        _acc(gb, "head.b", dlogits.sum(0))
    dx = ln_bwd(dlogits @ P["head.w"], cache["xhf"], cache["invf"], "ln_f")
    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i:02d}."
        L = cache["layers"][i]
        dh = lin_bwd(pre + "ff.down", dx)
        dgate = dh * L["up_out"] * _gelu_grad(L["gate_out"])
        dup = dh * L["gact"]
        du2 = lin_bwd(pre + "ff.gate", dgate) + lin_bwd(pre + "ff.up", dup)
        dx = dx + ln_bwd(du2, L["xh2"], L["inv2"], pre + "ln2")
        dctx = lin_bwd(pre + "attn.o", dx).reshape(T, H, hd).transpose(1, 0, 2)
        p = L["p"]
        dp = dctx @ L["v2"].transpose(0, 2, 1)
        dv2 = p.transpose(0, 2, 1) @ dctx
        dscores = p * (dp - (dp * p).sum(-1, keepdims=True))
        dq = ((dscores @ L["k2"]) * isq).transpose(1, 0, 2).reshape(T, cfg.d_model)
        dk = ((dscores.transpose(0, 2, 1) @ L["q2"]) * isq).transpose(1, 0, 2).reshape(T, cfg.d_model)
        dv = dv2.transpose(1, 0, 2).reshape(T, cfg.d_model)
        du1 = (
            lin_bwd(pre + "attn.q", dq)
            + lin_bwd(pre + "attn.k", dk)
            + lin_bwd(pre + "attn.v", dv)
        )
        dx = dx + ln_bwd(du1, L["xh1"], L["inv1"], pre + "ln1")
    if want_backbone:
        gtok = np.zeros_like(P["tok_emb"])
        np.add.at(gtok, tokens, dx)
        _acc(gb, "tok_emb", gtok)
        gpos = np.zeros_like(P["pos_emb"])
        gpos[:T] = dx
        _acc(gb, "pos_emb", gpos)
    return gb, ga, gg


def flatten_adapter_grads(adapter, ga):
    """Flat vector over adapter params: sorted layer paths, A before B."""
    parts = []
    for name in sorted(adapter.layers):
        if name in ga:
            dA, dB = ga[name]
        else:
            A, B = adapter.layers[name]
            dA, dB = np.zeros_like(A), np.zeros_like(B)
        parts.append(dA.ravel())
        parts.append(dB.ravel())
    return np.concatenate(parts)


def _flatten_backbone_grads(params, gb):
    parts = []
    for name in params.names():
        g = gb.get(name)
        parts.append(g.ravel() if g is not None else np.zeros(params.arrays[name].size))
    return np.concatenate(parts)


def loss_and_grad(params, adapter, seq, mask, wrt=WRT_ADAPTER,
                  dropout_p=0.0, dropout_rng=None):
    """ntp_loss plus its exact gradient, flattened in stable name order.

    wrt selects the parameter subset: "adapter-only" (sorted adapter layer
    paths, A before B), "backbone-only" (sorted backbone names), or "all"
    (backbone followed by adapter).
    """
    if wrt not in (WRT_ADAPTER, WRT_BACKBONE, WRT_ALL):
        raise ValueError(f"unknown parameter selector {wrt!r}")
    if wrt in (WRT_ADAPTER, WRT_ALL) and adapter is None:
        raise ValueError("adapter gradients requested without an adapter")
    tokens = seq.tokens if hasattr(seq, "tokens") else np.asarray(seq, dtype=np.int64)
    logits, cache = _forward(
        params, tokens, adapter=adapter, dropout_p=dropout_p, dropout_rng=dropout_rng
    )
    loss, dl = _dlogits(logits, tokens, np.asarray(mask, dtype=bool))
    gb, ga, _ = _backward(
        params, cache, dl, adapter=adapter,
        want_adapter=wrt in (WRT_ADAPTER, WRT_ALL),
        want_backbone=wrt in (WRT_BACKBONE, WRT_ALL),
    )
    if wrt == WRT_ADAPTER:
        flat = flatten_adapter_grads(adapter, ga)
    elif wrt == WRT_BACKBONE:
        flat = _flatten_backbone_grads(params, gb)
    else:
        flat = np.concatenate(
            [_flatten_backbone_grads(params, gb), flatten_adapter_grads(adapter, ga)]
        )
    return loss, flat


def grad(params, adapter, seq, mask, wrt=WRT_ADAPTER):
    """Flat gradient of ntp_loss for the selected parameter subset."""
    return loss_and_grad(params, adapter, seq, mask, wrt=wrt)[1]


# --- batched per-sequence gradients --------------------------------------


def _forward_batch(params, tokens, adapter):
    """Forward over right-padded rows; tokens is (n, T) int64, dropout off.

    Pad positions compute garbage activations, which is fine: they carry
    zero loss, and causal attention keeps them out of every real position's
    window, so no gradient ever flows through them."""
    cfg = params.config
    P = params.arrays
    n, T = tokens.shape
    H, hd = cfg.n_heads, cfg.head_dim
    isq = 1.0 / math.sqrt(hd)
    causal = np.tril(np.ones((T, T), dtype=bool))

    cache = {"lin": {}, "layers": []}

    def lin(name, x):
        y = x @ P[name + ".w"].T + P[name + ".b"]
        slot = {"x": x}
        if name in adapter.layers:
            A, B = adapter.layers[name]
            xa = x @ A
            y = y + adapter.scale * (xa @ B.T)
            slot["xa"] = xa
        cache["lin"][name] = slot
        return y

    def layernorm(x, g, b):
        mu = x.mean(-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(-1, keepdims=True) + cfg.ln_eps)
        xh = (x - mu) * inv
        return g * xh + b, xh, inv

    x = P["tok_emb"][tokens] + P["pos_emb"][:T]
    for i in range(cfg.n_layers):
        pre = f"layers.{i:02d}."
        L = {}
        u, L["xh1"], L["inv1"] = layernorm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        q = lin(pre + "attn.q", u).reshape(n, T, H, hd).transpose(0, 2, 1, 3)
        k = lin(pre + "attn.k", u).reshape(n, T, H, hd).transpose(0, 2, 1, 3)
        v = lin(pre + "attn.v", u).reshape(n, T, H, hd).transpose(0, 2, 1, 3)
        scores = np.where(causal, (q @ k.transpose(0, 1, 3, 2)) * isq, -np.inf)
        p = _softmax_rows(scores)
        ctx = (p @ v).transpose(0, 2, 1, 3).reshape(n, T, cfg.d_model)
        x = x + lin(pre + "attn.o", ctx)
        L.update(q2=q, k2=k, v2=v, p=p)
        u2, L["xh2"], L["inv2"] = layernorm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        gate_out = lin(pre + "ff.gate", u2)
        up_out = lin(pre + "ff.up", u2)
        gact = _gelu(gate_out)
        x = x + lin(pre + "ff.down", gact * up_out)
        L.update(gate_out=gate_out, up_out=up_out, gact=gact)
        cache["layers"].append(L)
    uf, cache["xhf"], cache["invf"] = layernorm(x, P["ln_f.g"], P["ln_f.b"])
    logits = uf @ P["head.w"].T + P["head.b"]
    return logits, cache


def _dlogits_batch(logits, tokens, masks):
    """Loss gradients for every row at once; masks is (n, T) bool with
    position 0 clear and pad positions clear."""
    bb, pp = np.nonzero(masks)
    if bb.size == 0:
        raise ValueError("masks select no positions")
    rows = logits[bb, pp - 1]
    m = rows.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(rows - m).sum(axis=1, keepdims=True))
    dl = np.zeros_like(logits)
    dl[bb, pp - 1] = np.exp(rows - lse)
    dl[bb, pp - 1, tokens[bb, pp]] -= 1.0
    return dl


def _backward_batch(params, cache, dlogits, adapter):
    """Per-row adapter gradients from one batched backward pass.

    Returns {layer path: (dA, dB)} with a leading row axis; the x^T dy
    contractions keep that axis instead of summing over it, which is the
    whole point of batching here."""
    cfg = params.config
    P = params.arrays
    isq = 1.0 / math.sqrt(cfg.head_dim)
    n, T, _ = dlogits.shape
    ga = {}

    def lin_bwd(name, dy):
        c = cache["lin"][name]
        dx = dy @ P[name + ".w"]
        if name in adapter.layers:
            A, B = adapter.layers[name]
            s = adapter.scale
            dyB = dy @ B
            ga[name] = (
                s * (c["x"].transpose(0, 2, 1) @ dyB),
                s * (dy.transpose(0, 2, 1) @ c["xa"]),
            )
            dx = dx + s * (dyB @ A.T)
        return dx

    def ln_bwd(dy, xh, inv, gname):
        dxh = dy * P[gname + ".g"]
        return inv * (
            dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True)
        )

    dx = ln_bwd(dlogits @ P["head.w"], cache["xhf"], cache["invf"], "ln_f")
    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i:02d}."
        L = cache["layers"][i]
        dh = lin_bwd(pre + "ff.down", dx)
        dgate = dh * L["up_out"] * _gelu_grad(L["gate_out"])
        dup = dh * L["gact"]
        du2 = lin_bwd(pre + "ff.gate", dgate) + lin_bwd(pre + "ff.up", dup)
        dx = dx + ln_bwd(du2, L["xh2"], L["inv2"], pre + "ln2")
        dctx = lin_bwd(pre + "attn.o", dx)
        dctx = dctx.reshape(n, T, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)
        p = L["p"]
        dp = dctx @ L["v2"].transpose(0, 1, 3, 2)
        dv2 = p.transpose(0, 1, 3, 2) @ dctx
        dscores = p * (dp - (dp * p).sum(-1, keepdims=True))
        dq = ((dscores @ L["k2"]) * isq).transpose(0, 2, 1, 3).reshape(n, T, cfg.d_model)
        dk = ((dscores.transpose(0, 1, 3, 2) @ L["q2"]) * isq)
        dk = dk.transpose(0, 2, 1, 3).reshape(n, T, cfg.d_model)
        dv = dv2.transpose(0, 2, 1, 3).reshape(n, T, cfg.d_model)
        du1 = (
            lin_bwd(pre + "attn.q", dq)
            + lin_bwd(pre + "attn.k", dk)
            + lin_bwd(pre + "attn.v", dv)
        )
        dx = dx + ln_bwd(du1, L["xh1"], L["inv1"], pre + "ln1")
    return ga


def grad_batch(params, adapter, token_rows, masks):
    """Flat adapter gradients for several sequences in one padded pass.

    token_rows and masks are parallel lists of per-sequence arrays; rows are
    right-padded to the longest sequence. Output row i equals
    grad(params, adapter, token_rows[i], masks[i]) up to floating-point
    reassociation, in the same sorted-layer flattening order."""
    if not token_rows:
        return np.empty((0, adapter.n_params))
    T = 0
    for t in token_rows:
        _check_tokens(params.config, t)
        T = max(T, t.size)
    n = len(token_rows)
    tokens = np.zeros((n, T), dtype=np.int64)
    mk = np.zeros((n, T), dtype=bool)
    for i, (t, m) in enumerate(zip(token_rows, masks)):
        if len(m) != t.size:
            raise ValueError("tokens and mask lengths disagree")
        tokens[i, : t.size] = t
        mk[i, : t.size] = np.asarray(m, dtype=bool)
    if mk[:, 0].any():
        raise ValueError("position 0 has no left context and cannot be masked")
    if not mk.any(axis=1).all():
        raise ValueError("mask selects no positions")
    logits, cache = _forward_batch(params, tokens, adapter)
    ga = _backward_batch(params, cache, _dlogits_batch(logits, tokens, mk), adapter)
    parts = []
    for name in sorted(adapter.layers):
        if name in ga:
            dA, dB = ga[name]
        else:
            A, B = adapter.layers[name]
            dA = np.zeros((n,) + A.shape)
            dB = np.zeros((n,) + B.shape)
        parts.append(dA.reshape(n, -1))
        parts.append(dB.reshape(n, -1))
    return np.concatenate(parts, axis=1)


def mole_loss_and_gate_grad(params, mixture, seq, mask):
    """ntp_loss under a gated mixture and its gradient w.r.t. gate vectors only."""
    tokens = seq.tokens if hasattr(seq, "tokens") else np.asarray(seq, dtype=np.int64)
    logits, cache = _forward(params, tokens, mixture=mixture)
    loss, dl = _dlogits(logits, tokens, np.asarray(mask, dtype=bool))
    _, _, gg = _backward(params, cache, dl, mixture=mixture, want_gates=True)
    return loss, gg


def mole_forward(params, mixture, seq):
    tokens = seq.tokens if hasattr(seq, "tokens") else seq
    logits, _ = _forward(params, tokens, mixture=mixture)
    return logits


# --- checkpoint IO -------------------------------------------------------


def save_backbone(path, params, meta=None):
    from . import store

    full = {"config": params.config.to_dict()}
    full.update(meta or {})
    store.save_arrays(path, "backbone", params.arrays, full)


def load_backbone(path):
    from . import store

    kind, arrays, meta = store.load_arrays(path)
    if kind != "backbone":
        raise ValueError(f"{path}: expected a backbone checkpoint, got {kind}")
    return ParameterStore(LmConfig.from_dict(meta["config"]), arrays), meta
