"""Per-instance gradient direction features.

For each training instruction and each fine-tuning epoch: take the adapter
gradient of the instruction-token loss at that epoch's checkpoint, push it
through the optimizer's moment transform (the hypothetical next Adam update),
project it with a seeded {-1,+1} matrix, then average over epochs and
normalize to a unit direction on the projection sphere.

The projection matrix R (d_proj x source_dim) is never materialized; each
row block is regenerated on demand from (seed, block index), so projections
are independent of batch composition.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model, store

ROW_BLOCK = 1024
GRAD_CHUNK = 128
ZERO_NORM_EPS = 1e-12


class FeatureError(ValueError):
    pass


class ZeroDirectionError(FeatureError):
    """Epoch-averaged feature cancelled to (numerically) zero."""


@dataclass
class ProjectionSpec:
    seed: int
    d_proj: int
    source_dim: int

    def __post_init__(self):
        if self.d_proj < 1 or self.source_dim < 1:
            raise ValueError("projection dimensions must be >= 1")


@dataclass
class GradientFeature:
    id: str
    epoch: int
    vector: np.ndarray


@dataclass
class FeatureMatrix:
    ids: list  # sorted instance ids, aligned with matrix rows
    matrix: np.ndarray  # (N, d_proj), unit rows
    failed: dict = field(default_factory=dict)  # id -> reason
    spec: ProjectionSpec | None = None

    def row(self, instance_id):
        return self.matrix[self.ids.index(instance_id)]


# --- Adam moment transform ----------------------------------------------


def adam_feature(grad, state, eta):
    """The parameter step Adam would take for this gradient, from the
    snapshot's moments, without mutating the snapshot. Accepts a stack of
    gradients as leading axes; the moments broadcast across them."""
    if grad.shape[-1:] != state.m.shape:
        raise ValueError("gradient and moment dimensions disagree")
    t1 = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t1)
    v_hat = v / (1.0 - state.beta2 ** t1)
    return eta * m_hat / (np.sqrt(v_hat) + state.eps)


def accumulate_adam_rows(acc, grad, state, eta):
    """acc += adam_feature(grad, state, eta) for a (n, dim) gradient stack,
    with the arithmetic reassociated into in-place whole-array passes.
    Agrees with the plain formula to a few ulp; one scratch array."""
    if grad.shape[-1:] != state.m.shape:
        raise ValueError("gradient and moment dimensions disagree")
    t1 = state.t + 1
    mc = 1.0 / (1.0 - state.beta1 ** t1)
    vc = 1.0 / (1.0 - state.beta2 ** t1)
    denom = np.multiply(grad, grad, out=np.empty_like(grad))
    denom *= (1.0 - state.beta2) * vc
    denom += (state.beta2 * vc) * state.v
    np.sqrt(denom, out=denom)
    denom += state.eps
    num = np.multiply(grad, eta * (1.0 - state.beta1) * mc, out=np.empty_like(grad))
    num += (eta * state.beta1 * mc) * state.m
    num /= denom
    acc += num


# --- instruction gradients ----------------------------------------------


def _instruction_view(seq):
    """The sequence truncated after SEP, with its instruction loss mask.
    Positions beyond SEP cannot influence instruction loss terms."""
    sep = seq.sep_index
    sub = type(seq)(seq.id, seq.tokens[: sep + 1], seq.roles[: sep + 1])
    return sub, model.instruction_mask(sub)


def instruction_gradient(backbone, adapter, seq):
    """Adapter gradient of the loss over instruction positions (BOS excluded,
    SEP included)."""
    sub, mask = _instruction_view(seq)
    return model.grad(backbone, adapter, sub, mask)


# --- random projection --------------------------------------------------


def _r_block(spec, block_index, rows, out=None):
    """Rows [block_index*ROW_BLOCK, +rows) of R as a (rows, source_dim) array
    of {-1.0, +1.0}, from the block's own counter-derived stream. out, when
    given, must be a C-contiguous (rows, source_dim) float64 array; it is
    filled in place and returned."""
    rng = np.random.default_rng([spec.seed, block_index])
    nbits = rows * spec.source_dim
    raw = np.frombuffer(rng.bytes((nbits + 7) // 8), dtype=np.uint8)
    bits = np.unpackbits(raw, count=nbits).reshape(rows, spec.source_dim)
    if out is None:
        out = np.empty((rows, spec.source_dim))
    np.multiply(bits, 2.0, out=out)
    out -= 1.0
    return out


def project_rows(G, spec):
    """Project rows of G (n x source_dim) to (n x d_proj), blockwise.

    A single reused block buffer keeps allocator traffic off the hot loop;
    R is still never materialized beyond one block."""
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if G.shape[1] != spec.source_dim:
        raise ValueError(
            f"source dimension {G.shape[1]} does not match spec {spec.source_dim}"
        )
    out = np.empty((G.shape[0], spec.d_proj))
    buf = np.empty((min(ROW_BLOCK, spec.d_proj), spec.source_dim))
    n_blocks = math.ceil(spec.d_proj / ROW_BLOCK)
    for bi in range(n_blocks):
        i0 = bi * ROW_BLOCK
        rows = min(ROW_BLOCK, spec.d_proj - i0)
        out[:, i0 : i0 + rows] = G @ _r_block(spec, bi, rows, out=buf[:rows]).T
    return out


def project(g, spec):
    """R g for a single flat gradient."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise ValueError("project expects a flat vector")
    return project_rows(g[None, :], spec)[0]


# --- epoch averaging ----------------------------------------------------


def epoch_avg_normalize(features):
    """Mean over per-epoch projected features, then unit-normalize."""
    if not features:
        raise ValueError("no epoch features")
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in features])
    if stack.ndim != 2:
        raise ValueError("epoch features must share one length")
    mean = stack.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < ZERO_NORM_EPS:
        raise ZeroDirectionError("epoch-averaged feature has (near-)zero norm")
    return mean / norm


# --- feature matrix -----------------------------------------------------


def build_feature_matrix(backbone, dataset, run, spec, out_path=None, batch_size=64):
    """One unit direction row per instance.

    dataset: list of TokenSequence. run: a TrainRun (or anything with
    .adapters, .states, .eta_finals). Instances are processed in sorted-id
    order in fixed-size batches; with out_path set, completed batches are
    persisted incrementally and a rerun resumes after the last complete
    batch, reproducing the final matrix bit-identically. Per-instance
    failures are recorded, not fatal.
    """
    epochs = list(zip(run.adapters, run.states, run.eta_finals))
    if not epochs:
        raise ValueError("training run has no checkpoints")
    by_id = {}
    for seq in dataset:
        if seq.id in by_id:
            raise ValueError(f"duplicate instance id {seq.id!r}")
        by_id[seq.id] = seq
    order = sorted(by_id)

    done_rows, done_flags = {}, {}
    part_path = None
    if out_path is not None:
        part_path = out_path + ".part"
        done_rows, done_flags = _read_partial(part_path, spec.d_proj)

    n_batches = math.ceil(len(order) / batch_size)
    for bi in range(n_batches):
        chunk = order[bi * batch_size : (bi + 1) * batch_size]
        if all(cid in done_rows or cid in done_flags for cid in chunk):
            continue
        results = _compute_batch(backbone, [by_id[c] for c in chunk], epochs, spec)
        for cid, res in zip(chunk, results):
            if isinstance(res, str):
                done_flags[cid] = res
            else:
                done_rows[cid] = res
        if part_path is not None:
            _append_partial(part_path, chunk, results)

    ids = [c for c in order if c in done_rows]
    failed = {c: done_flags[c] for c in order if c in done_flags}
    matrix = (
        np.stack([done_rows[c] for c in ids])
        if ids
        else np.empty((0, spec.d_proj))
    )
    fm = FeatureMatrix(ids=ids, matrix=matrix, failed=failed, spec=spec)
    if out_path is not None:
        save_feature_matrix(out_path, fm)
        if os.path.exists(part_path):
            os.remove(part_path)
    return fm


def _compute_batch(backbone, seqs, epochs, spec):
    """Rows or failure strings for one batch.

    Gradients for all surviving instances run through the padded batch
    kernel in GRAD_CHUNK groups, one pass per epoch checkpoint. Per-epoch
    features are then averaged in source space before one blockwise
    projection pass: projection is linear, so this equals averaging
    projected features while costing one GEMM row per instance instead of
    E, and R is regenerated once per batch rather than once per epoch row."""
    results = [None] * len(seqs)
    subs, masks, owners = [], [], []
    for i, seq in enumerate(seqs):
        try:
            sub, mask = _instruction_view(seq)
            if sub.tokens.size > backbone.config.max_len:
                raise FeatureError(
                    f"sequence length {sub.tokens.size} exceeds "
                    f"max_len {backbone.config.max_len}"
                )
            subs.append(sub)
            masks.append(mask)
            owners.append(i)
        except (ValueError, FeatureError) as e:
            results[i] = str(e) or e.__class__.__name__
    if subs:
        raw = np.empty((len(subs), spec.source_dim))
        # chunks of near-equal length waste little work on padding; the
        # per-row results do not depend on the grouping
        by_len = sorted(range(len(subs)), key=lambda j: subs[j].tokens.size)
        for c0 in range(0, len(by_len), GRAD_CHUNK):
            grp = by_len[c0 : c0 + GRAD_CHUNK]
            rows = [subs[j].tokens for j in grp]
            mks = [masks[j] for j in grp]
            acc = np.zeros((len(grp), spec.source_dim))
            for adapter, state, eta in epochs:
                g = model.grad_batch(backbone, adapter, rows, mks)
                accumulate_adam_rows(acc, g, state, eta)
            raw[grp] = acc
        raw /= float(len(epochs))
        projected = project_rows(raw, spec)
        norms = np.linalg.norm(projected, axis=1)
        for j, i in enumerate(owners):
            if norms[j] < ZERO_NORM_EPS:
                results[i] = "epoch-averaged feature has (near-)zero norm"
            else:
                results[i] = projected[j] / norms[j]
    return results


# Partial-progress file: framed append-only records, one per instance.
# Frame: u32 id length, id bytes, u8 status (0 row follows, 1 failure),
# then d_proj little-endian float64 or a u32-length reason string. A crash
# can only truncate the final frame, which the reader drops; a recomputed
# batch may re-append frames, which is harmless because recomputation is
# bit-deterministic.


def _read_partial(part_path, d_proj):
    import struct

    rows, flags = {}, {}
    if not os.path.exists(part_path):
        return rows, flags
    row_bytes = d_proj * 8
    with open(part_path, "rb") as f:
        while True:
            head = f.read(4)
            if len(head) < 4:
                break
            (id_len,) = struct.unpack("<I", head)
            cid_raw = f.read(id_len)
            status = f.read(1)
            if len(cid_raw) < id_len or len(status) < 1:
                break
            cid = cid_raw.decode("utf-8")
            if status == b"\x00":
                payload = f.read(row_bytes)
                if len(payload) < row_bytes:
                    break
                rows[cid] = np.frombuffer(payload, dtype="<f8").copy()
            else:
                rhead = f.read(4)
                if len(rhead) < 4:
                    break
                (rlen,) = struct.unpack("<I", rhead)
                reason = f.read(rlen)
                if len(reason) < rlen:
                    break
                flags[cid] = reason.decode("utf-8")
    return rows, flags


def _append_partial(part_path, chunk, results):
    import struct

    with open(part_path, "ab") as f:
        for cid, res in zip(chunk, results):
            cid_raw = cid.encode("utf-8")
            f.write(struct.pack("<I", len(cid_raw)) + cid_raw)
            if isinstance(res, str):
                reason = res.encode("utf-8")
                f.write(b"\x01" + struct.pack("<I", len(reason)) + reason)
            else:
                f.write(b"\x00" + np.ascontiguousarray(res, dtype="<f8").tobytes())
        f.flush()
        os.fsync(f.fileno())


def save_feature_matrix(path, fm):
    meta = {
        "ids": fm.ids,
        "failed": fm.failed,
        "seed": fm.spec.seed if fm.spec else None,
        "d_proj": fm.matrix.shape[1],
        "source_dim": fm.spec.source_dim if fm.spec else None,
    }
    store.save_arrays(path, "features", {"matrix": fm.matrix}, meta)


def load_feature_matrix(path):
    kind, arrays, meta = store.load_arrays(path)
    if kind != "features":
        raise ValueError(f"{path}: expected a feature matrix, got {kind}")
    spec = None
    if meta.get("seed") is not None and meta.get("source_dim") is not None:
        spec = ProjectionSpec(int(meta["seed"]), int(meta["d_proj"]),
                              int(meta["source_dim"]))
    return FeatureMatrix(ids=list(meta["ids"]), matrix=arrays["matrix"],
                         failed=dict(meta["failed"]), spec=spec)


def export_csv(fm, path, n_coords=8):
    """Inspection export: id, norm, and the first few coordinates per row."""
    k = min(n_coords, fm.matrix.shape[1])
    with open(path, "w", encoding="utf-8") as f:
        f.write("id,norm," + ",".join(f"c{i}" for i in range(k)) + "\n")
        for cid, row in zip(fm.ids, fm.matrix):
            norm = float(np.linalg.norm(row))
            f.write(cid + f",{norm!r}," + ",".join(repr(float(x)) for x in row[:k]) + "\n")
        for cid, reason in fm.failed.items():
            f.write(cid + ",failed," + reason.replace(",", ";").replace("\n", " ") + "\n")
