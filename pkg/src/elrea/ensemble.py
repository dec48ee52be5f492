"""Weighted-logit ensemble decoding over an adapter bank, and the comparison
decoders: layer-level mixture-of-experts routing, merged-adapter decoding,
learned per-token gating, independent-adapter logit averaging, sampled
majority voting, and the random-partition / uniform-weight controls.

Every decoder is deterministic given its seed; routing weights are computed
once per instruction and reused for every generated token.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import model
from .adapters import LoraAdapter, stack_bank, init_lora
from .corpus import EOS, Vocab, detokenize, extract_answer
from .router import RoutingWeights
from .trainer import AdamState, adam_step, train

_MOLE_SHUFFLE_TAG = zlib.crc32(b"mole-shuffle")
_ENSEMBLE_SEED_TAG = zlib.crc32(b"extra-adapter")
_SAMPLE_TAG = zlib.crc32(b"consistency-sample")
_TIE_TAG = zlib.crc32(b"tie-break")
_PARTITION_TAG = zlib.crc32(b"random-partition")

# the token table is fixed by construction, so one shared instance suffices
_VOCAB = Vocab()


@dataclass
class EnsembleSpec:
    """A backbone plus the adapter list [base, expert_1 .. expert_C] and
    decode parameters shared by every instruction."""

    backbone: model.ParameterStore
    adapters: list
    max_new_tokens: int = 64
    weights_source: str = "routed"  # routed | uniform | custom
    _bank: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.adapters:
            raise ValueError("ensemble needs at least one adapter")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")

    @property
    def bank(self):
        if self._bank is None:
            self._bank = stack_bank(self.adapters)
        return self._bank


@dataclass
class GenerationResult:
    id: str
    tokens: np.ndarray  # full context, prompt included
    prompt_len: int
    text: str  # decoded continuation
    weights: np.ndarray  # the weight vector applied at every step
    route_calls: int
    decode_steps: int
    truncated: bool

    @property
    def answer(self):
        return extract_answer(self.text)


def ensemble_next_token(logit_rows, weights):
    """Argmax of the weighted sum of per-adapter logit rows.

    Weights need not sum to 1; ties go to the lowest token id.
    """
    rows = np.asarray(logit_rows, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0 or rows.shape[1] == 0:
        raise ValueError("expected a nonempty stack of logit rows")
    if w.shape != (rows.shape[0],):
        raise ValueError("one weight per logit row required")
    if float(w.sum()) <= 0.0:
        raise ValueError("total ensemble weight must be positive")
    return int(np.argmax(w @ rows))


def _decode(next_token, prompt_tokens, max_len, max_new):
    toks = [int(t) for t in prompt_tokens]
    steps = 0
    while steps < max_new and len(toks) < max_len:
        t = next_token(np.asarray(toks, dtype=np.int64))
        toks.append(t)
        steps += 1
        if t == EOS:
            return toks, steps, False
    return toks, steps, True


def _result(instance_id, toks, prompt_len, weights, route_calls, steps, truncated):
    return GenerationResult(
        id=instance_id,
        tokens=np.asarray(toks, dtype=np.int64),
        prompt_len=prompt_len,
        text=detokenize(_VOCAB, np.asarray(toks[prompt_len:], dtype=np.int64)),
        weights=np.asarray(weights, dtype=np.float64),
        route_calls=route_calls,
        decode_steps=steps,
        truncated=truncated,
    )


def generate(spec, prompt, routing):
    """Greedy ensemble decode; the routing weights are turned into the
    [base, expert...] weight vector exactly once and reused every step."""
    w = np.concatenate(([routing.base_weight], np.asarray(routing.weights)))
    if w.shape[0] != len(spec.adapters):
        raise ValueError(
            f"{w.shape[0]} weights for {len(spec.adapters)} adapters"
        )
    if float(w.sum()) <= 0.0:
        raise ValueError("total ensemble weight must be positive")
    tokens = prompt.tokens if hasattr(prompt, "tokens") else prompt
    instance_id = getattr(prompt, "id", "")
    max_len = spec.backbone.config.max_len
    if tokens.size >= max_len:
        return _result(instance_id, list(tokens), int(tokens.size), w, 1, 0, True)
    bank = spec.bank

    def next_token(toks):
        logits = model.forward_bank(spec.backbone, bank, toks)
        return ensemble_next_token(logits[:, -1, :], w)

    toks, steps, truncated = _decode(next_token, tokens, max_len, spec.max_new_tokens)
    return _result(instance_id, toks, int(tokens.size), w, 1, steps, truncated)


def generate_single(backbone, adapter, prompt, max_new_tokens):
    """Greedy decode under one adapter; no routing involved."""
    tokens = prompt.tokens if hasattr(prompt, "tokens") else prompt
    instance_id = getattr(prompt, "id", "")
    max_len = backbone.config.max_len
    if tokens.size >= max_len:
        return _result(instance_id, list(tokens), int(tokens.size),
                       np.ones(1), 0, 0, True)

    def next_token(toks):
        return int(np.argmax(model.forward(backbone, adapter, toks)[-1]))

    toks, steps, truncated = _decode(next_token, tokens, max_len, max_new_tokens)
    return _result(instance_id, toks, int(tokens.size), np.ones(1), 0, steps,
                   truncated)


# --- layer-level mixture and merged decoding ----------------------------


def _check_mixable(adapter_list):
    first = adapter_list[0]
    for a in adapter_list[1:]:
        if a.names() != first.names() or a.r != first.r or a.scale != first.scale:
            raise ValueError("mixture members must share targets, rank, and scale")


def moe_routing_adapter(adapter_list, weights):
    """One adapter equivalent to mixing the members' layer outputs by λ.

    λ is the normalized weight vector. Ranks concatenate: with B factors
    pre-scaled by λ, a single rank-K·r adapter reproduces Σ λ_k B_k A_kᵀ x
    exactly, so one forward pass covers the whole mixture.
    """
    if not adapter_list:
        raise ValueError("empty adapter list")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(adapter_list),):
        raise ValueError("one weight per adapter required")
    if np.any(w < 0):
        raise ValueError("negative mixture weight")
    total = float(w.sum())
    if total <= 0.0:
        raise ValueError("total mixture weight must be positive")
    lam = w / total
    _check_mixable(adapter_list)
    first = adapter_list[0]
    r_total = first.r * len(adapter_list)
    layers = {}
    for name in first.names():
        a_cat = np.concatenate([a.layers[name][0] for a in adapter_list], axis=1)
        b_cat = np.concatenate(
            [l * a.layers[name][1] for l, a in zip(lam, adapter_list)], axis=1
        )
        layers[name] = (a_cat, b_cat)
    return LoraAdapter(r=r_total, alpha=first.scale * r_total, dropout_p=0.0,
                       layers=layers)


def moe_routing_forward(backbone, adapter_list, weights, seq):
    """Logits with every adapted layer mixing member outputs by normalized λ."""
    return model.forward(backbone, moe_routing_adapter(adapter_list, weights), seq)


# --- learned per-token gating -------------------------------------------


def init_gating(adapter_list):
    """Zero-initialized gate vectors over frozen candidates; softmax of zero
    scores starts every token at the uniform mixture."""
    if not adapter_list:
        raise ValueError("empty adapter list")
    _check_mixable(adapter_list)
    first = adapter_list[0]
    a_stack, b_stack, gates = {}, {}, {}
    for name in first.names():
        a_stack[name] = np.stack([a.layers[name][0] for a in adapter_list])
        b_stack[name] = np.stack([a.layers[name][1] for a in adapter_list])
        d_in = first.layers[name][0].shape[0]
        gates[name] = np.zeros((len(adapter_list), d_in))
    return model.GatedMixture(a_stack=a_stack, b_stack=b_stack, gates=gates,
                              scale=first.scale)


def _flat_gates(mixture, paths):
    return np.concatenate([mixture.gates[p].ravel() for p in paths])


def _set_gates(mixture, paths, vec):
    out = {}
    at = 0
    for p in paths:
        shape = mixture.gates[p].shape
        n = shape[0] * shape[1]
        out[p] = vec[at : at + n].reshape(shape)
        at += n
    mixture.gates = out


def gating_train(backbone, adapter_list, dataset, epochs=1, lr=2e-5, batch=8,
                 seed=0):
    """Fit the gate vectors by next-token loss; candidates stay frozen.

    Returns the trained mixture and per-epoch mean losses.
    """
    mixture = init_gating(adapter_list)
    if not dataset:
        raise ValueError("empty dataset")
    masks = [model.response_mask(s) for s in dataset]
    paths = sorted(mixture.gates)
    flat = _flat_gates(mixture, paths)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / batch)
    state = AdamState.fresh(flat.size, lr, epochs * steps_per_epoch)
    epoch_losses = []
    for e in range(epochs):
        perm = np.random.default_rng([seed, _MOLE_SHUFFLE_TAG, e]).permutation(n)
        total = 0.0
        for b0 in range(0, n, batch):
            members = perm[b0 : b0 + batch]
            gsum = np.zeros_like(flat)
            for j in members:
                loss, gg = model.mole_loss_and_gate_grad(
                    backbone, mixture, dataset[j], masks[j]
                )
                gsum += np.concatenate([gg[p].ravel() for p in paths])
                total += loss
            state, flat = adam_step(state, gsum / members.size, flat)
            _set_gates(mixture, paths, flat)
        epoch_losses.append(total / n)
    return mixture, epoch_losses


def gating_generate(backbone, mixture, prompt, max_new_tokens):
    tokens = prompt.tokens if hasattr(prompt, "tokens") else prompt
    instance_id = getattr(prompt, "id", "")
    max_len = backbone.config.max_len
    if tokens.size >= max_len:
        return _result(instance_id, list(tokens), int(tokens.size),
                       np.ones(1), 0, 0, True)

    def next_token(toks):
        return int(np.argmax(model.mole_forward(backbone, mixture, toks)[-1]))

    toks, steps, truncated = _decode(next_token, tokens, max_len, max_new_tokens)
    return _result(instance_id, toks, int(tokens.size), np.ones(1), 0, steps,
                   truncated)


def gating_lambda_table(backbone, mixture, seqs):
    """Mean mixing weight per (adapted layer, candidate) over the given
    sequences' tokens; for inspecting how skewed the learned gates are."""
    paths = sorted(mixture.gates)
    k = next(iter(mixture.gates.values())).shape[0]
    sums = {p: np.zeros(k) for p in paths}
    count = 0
    for s in seqs:
        tokens = s.tokens if hasattr(s, "tokens") else s
        _, cache = model._forward(backbone, tokens, mixture=mixture)
        for p in paths:
            sums[p] += cache["lin"][p]["lam"].sum(axis=0)
        count += tokens.size
    return {p: sums[p] / count for p in paths}


# --- independent-adapter averaging --------------------------------------


def train_extra_adapters(backbone, dataset, n_extra, seed, r, epochs, eta0,
                         batch, alpha=None, dropout_p=0.1):
    """Fresh adapters trained independently on the full dataset, for
    mean-logit decoding alongside the base adapter."""
    out = []
    for j in range(n_extra):
        sub = np.random.default_rng([seed, _ENSEMBLE_SEED_TAG, j])
        init_seed = int(sub.integers(2**31))
        shuffle_seed = int(sub.integers(2**31))
        adapter = init_lora(backbone.config, r, init_seed, alpha=alpha,
                            dropout_p=dropout_p)
        run = train(backbone, adapter, dataset, epochs=epochs, eta0=eta0,
                    batch=batch, seed=shuffle_seed)
        out.append(run.adapters[-1])
    return out


def mean_logit_routing(n_members):
    """Equal weights over bank members; argmax of the sum equals argmax of
    the mean."""
    if n_members < 1:
        raise ValueError("need at least one member")
    return RoutingWeights(
        cosines=np.zeros(n_members - 1),
        standardized=np.zeros(n_members - 1),
        weights=np.ones(n_members - 1),
        base_weight=1.0,
    )


# --- sampled majority voting --------------------------------------------


@dataclass
class VoteResult:
    id: str
    answer: str | None
    answers: list  # one entry per sample, None where unparsable
    samples: list  # GenerationResult per sample


def sample_generate(backbone, adapter, prompt, max_new_tokens, temperature, rng):
    """Ancestral sampling from the full softmax at the given temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    tokens = prompt.tokens if hasattr(prompt, "tokens") else prompt
    instance_id = getattr(prompt, "id", "")
    max_len = backbone.config.max_len
    if tokens.size >= max_len:
        return _result(instance_id, list(tokens), int(tokens.size),
                       np.ones(1), 0, 0, True)

    def next_token(toks):
        row = model.forward(backbone, adapter, toks)[-1] / temperature
        row = row - row.max()
        p = np.exp(row)
        p /= p.sum()
        return int(rng.choice(p.size, p=p))

    toks, steps, truncated = _decode(next_token, tokens, max_len, max_new_tokens)
    return _result(instance_id, toks, int(tokens.size), np.ones(1), 0, steps,
                   truncated)


def majority_vote(answers, seed, instance_id=""):
    """Modal non-None answer; ties resolved by a seeded draw over the sorted
    tied answers. None when nothing parsed."""
    votes = {}
    for a in answers:
        if a is not None:
            votes[a] = votes.get(a, 0) + 1
    if not votes:
        return None
    top = max(votes.values())
    tied = sorted(a for a, c in votes.items() if c == top)
    if len(tied) == 1:
        return tied[0]
    rng = np.random.default_rng([seed, _TIE_TAG, zlib.crc32(instance_id.encode())])
    return tied[int(rng.integers(len(tied)))]


def self_consistency(backbone, adapter, prompt, n_samples=5, temperature=1.0,
                     seed=0, max_new_tokens=64, tie_seed=None):
    """n sampled generations, answers extracted, majority vote with seeded
    tie-break. Unparsable-only sample sets yield answer None."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    instance_id = getattr(prompt, "id", "")
    id_tag = zlib.crc32(instance_id.encode())
    samples, answers = [], []
    for s in range(n_samples):
        rng = np.random.default_rng([seed, _SAMPLE_TAG, id_tag, s])
        g = sample_generate(backbone, adapter, prompt, max_new_tokens,
                            temperature, rng)
        samples.append(g)
        answers.append(g.answer)
    return VoteResult(
        id=instance_id,
        answer=majority_vote(answers, seed if tie_seed is None else tie_seed,
                             instance_id),
        answers=answers,
        samples=samples,
    )


# --- partition and weight controls --------------------------------------


def random_cluster_partition(ids, sizes, seed):
    """Seeded permutation of the ids sliced into the given sizes; the sizes
    are meant to be copied from a fitted cluster model."""
    ids = sorted(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids")
    if any(s < 1 for s in sizes):
        raise ValueError("cluster sizes must be positive")
    if sum(sizes) != len(ids):
        raise ValueError(f"sizes sum to {sum(sizes)}, dataset has {len(ids)}")
    perm = np.random.default_rng([seed, _PARTITION_TAG]).permutation(len(ids))
    out = {}
    at = 0
    for c, s in enumerate(sizes, start=1):
        for k in perm[at : at + s]:
            out[ids[int(k)]] = c
        at += s
    return out


def uniform_weights(n_clusters):
    """Every weight literally 1.0, base included; the ensemble sum is
    deliberately unnormalized."""
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    return RoutingWeights(
        cosines=np.zeros(n_clusters),
        standardized=np.zeros(n_clusters),
        weights=np.ones(n_clusters),
        base_weight=1.0,
    )
