"""Adam fine-tuning of adapter factors on a frozen backbone, with per-epoch
adapter checkpoints and matching optimizer-state snapshots.

The learning rate decays linearly from eta0 to zero over the full scheduled
step count. Snapshots carry everything needed to replay the next epoch
bit-exactly: flat moments, step counter, and the schedule itself.
"""

from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import adapters, model, store

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

_SHUFFLE_TAG = zlib.crc32(b"shuffle")
_DROPOUT_TAG = zlib.crc32(b"dropout")


@dataclass
class AdamState:
    t: int
    m: np.ndarray
    v: np.ndarray
    eta0: float
    total_steps: int
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def fresh(cls, n, eta0, total_steps):
        return cls(t=0, m=np.zeros(n), v=np.zeros(n), eta0=eta0, total_steps=total_steps)

    def scheduled_eta(self, t):
        """Rate applied at 0-based step t; decays linearly to zero."""
        if not 0 <= t < self.total_steps:
            raise ValueError(f"step {t} outside schedule of {self.total_steps}")
        return self.eta0 * (self.total_steps - t) / self.total_steps

    def copy(self):
        return AdamState(self.t, self.m.copy(), self.v.copy(), self.eta0,
                         self.total_steps, self.beta1, self.beta2, self.eps)


def adam_step(state, grad, params):
    """One optimizer step at the state's scheduled rate.

    Returns (new state, new params); params move by -eta * m_hat / (sqrt(v_hat) + eps)
    with bias-corrected moments. Inputs are never mutated.
    """
    if grad.shape != params.shape or grad.shape != state.m.shape:
        raise ValueError("gradient, parameter, and moment dimensions disagree")
    eta = state.scheduled_eta(state.t)
    t1 = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t1)
    v_hat = v / (1.0 - state.beta2 ** t1)
    new_params = params - eta * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(t1, m, v, state.eta0, state.total_steps,
                          state.beta1, state.beta2, state.eps)
    return new_state, new_params


@dataclass
class TrainRun:
    epochs: int
    batch: int
    seed: int
    eta0: float
    steps_per_epoch: int
    adapters: list = field(default_factory=list)  # per-epoch checkpoints
    states: list = field(default_factory=list)  # matching AdamState snapshots
    eta_means: list = field(default_factory=list)  # mean scheduled rate per epoch
    eta_finals: list = field(default_factory=list)  # rate at each epoch's last step
    epoch_losses: list = field(default_factory=list)  # mean per-sequence loss
    loss_curves: list = field(default_factory=list)  # per-epoch [(step, loss), ...]


def batch_gradient(backbone, adapter, seqs, masks, dropout_rng=None):
    """Mean of per-sequence adapter gradients; also returns the mean loss."""
    total_g = None
    total_loss = 0.0
    p = adapter.dropout_p if dropout_rng is not None else 0.0
    for seq, mask in zip(seqs, masks):
        loss, g = model.loss_and_grad(
            backbone, adapter, seq, mask, wrt=model.WRT_ADAPTER,
            dropout_p=p, dropout_rng=dropout_rng,
        )
        total_loss += loss
        total_g = g if total_g is None else total_g + g
    n = len(seqs)
    return total_g / n, total_loss / n


def train(backbone, adapter, dataset, epochs, eta0, batch, seed,
          run_dir=None, dropout=True, start_epoch=0, state=None):
    """Fine-tune adapter factors only; the backbone never moves.

    dataset is a list of TokenSequence with response positions to supervise.
    Each epoch shuffles with its own derived stream, so training epoch e+1
    from snapshot e (start_epoch=e+1 with the snapshot state) replays the
    original run bit-exactly.
    """
    if not dataset:
        raise ValueError("empty dataset")
    n = len(dataset)
    steps_per_epoch = math.ceil(n / batch)
    total_steps = epochs * steps_per_epoch
    masks = [model.response_mask(seq) for seq in dataset]

    theta = adapters.flatten(adapter)
    if state is None:
        if start_epoch != 0:
            raise ValueError("resume requires the matching optimizer snapshot")
        state = AdamState.fresh(theta.size, eta0, total_steps)
    else:
        state = state.copy()

    run = TrainRun(epochs=epochs, batch=batch, seed=seed, eta0=eta0,
                   steps_per_epoch=steps_per_epoch)
    template = adapter
    for e in range(start_epoch, epochs):
        perm = np.random.default_rng([seed, _SHUFFLE_TAG, e]).permutation(n)
        etas, curve = [], []
        loss_sum = 0.0
        current = adapters.unflatten(theta, template)
        for bi in range(steps_per_epoch):
            idx = perm[bi * batch : (bi + 1) * batch]
            drng = (
                np.random.default_rng([seed, _DROPOUT_TAG, e, bi])
                if dropout and adapter.dropout_p > 0
                else None
            )
            g, mean_loss = batch_gradient(
                backbone, current,
                [dataset[i] for i in idx], [masks[i] for i in idx],
                dropout_rng=drng,
            )
            etas.append(state.scheduled_eta(state.t))
            state, theta = adam_step(state, g, theta)
            current = adapters.unflatten(theta, template)
            loss_sum += mean_loss * len(idx)
            curve.append((bi, mean_loss))
        run.adapters.append(current)
        run.states.append(state.copy())
        run.eta_means.append(float(np.mean(etas)))
        run.eta_finals.append(float(etas[-1]))
        run.epoch_losses.append(loss_sum / n)
        run.loss_curves.append(curve)
        if run_dir is not None:
            _persist_epoch(run_dir, e, current, state, run, seed)
    return run


def _persist_epoch(run_dir, e, adapter, state, run, seed):
    epoch_dir = os.path.join(run_dir, f"epoch-{e}")
    os.makedirs(epoch_dir, exist_ok=True)
    adapters.save_adapter(os.path.join(epoch_dir, "adapter.ckpt"), adapter,
                          meta={"epoch": e, "seed": seed})
    save_adam(os.path.join(epoch_dir, "adam.ckpt"), state)
    store.write_json(
        os.path.join(epoch_dir, "meta.json"),
        {
            "epoch": e,
            "seed": seed,
            "batch": run.batch,
            "eta0": run.eta0,
            "eta_mean": run.eta_means[-1],
            "eta_final": run.eta_finals[-1],
            "epoch_loss": run.epoch_losses[-1],
            "steps_per_epoch": run.steps_per_epoch,
        },
    )
    with open(os.path.join(epoch_dir, "loss.csv"), "w", encoding="utf-8") as f:
        f.write("step,loss\n")
        for step, loss in run.loss_curves[-1]:
            f.write(f"{step},{loss!r}\n")


def save_adam(path, state):
    store.save_arrays(
        path, "adam", {"m": state.m, "v": state.v},
        {
            "t": state.t,
            "eta0": state.eta0,
            "total_steps": state.total_steps,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
        },
    )


def load_adam(path):
    kind, arrays, meta = store.load_arrays(path)
    if kind != "adam":
        raise ValueError(f"{path}: expected an optimizer snapshot, got {kind}")
    return AdamState(
        t=int(meta["t"]), m=arrays["m"], v=arrays["v"], eta0=float(meta["eta0"]),
        total_steps=int(meta["total_steps"]), beta1=float(meta["beta1"]),
        beta2=float(meta["beta2"]), eps=float(meta["eps"]),
    )


def load_epoch(run_dir, e):
    """(adapter, AdamState) persisted for epoch e."""
    epoch_dir = os.path.join(run_dir, f"epoch-{e}")
    adapter, _ = adapters.load_adapter(os.path.join(epoch_dir, "adapter.ckpt"))
    return adapter, load_adam(os.path.join(epoch_dir, "adam.ckpt"))


def load_run(run_dir, epochs):
    """Rebuild the per-epoch view of a persisted run from its checkpoints.

    Loss curves stay on disk; everything downstream stages need (adapters,
    optimizer snapshots, learning-rate bookkeeping) is restored.
    """
    run = None
    for e in range(epochs):
        adapter, state = load_epoch(run_dir, e)
        meta = store.read_json(os.path.join(run_dir, f"epoch-{e}", "meta.json"))
        if run is None:
            run = TrainRun(
                epochs=epochs,
                batch=int(meta["batch"]),
                seed=int(meta["seed"]),
                eta0=float(meta["eta0"]),
                steps_per_epoch=int(meta["steps_per_epoch"]),
            )
        run.adapters.append(adapter)
        run.states.append(state)
        run.eta_means.append(float(meta["eta_mean"]))
        run.eta_finals.append(float(meta["eta_final"]))
        run.epoch_losses.append(float(meta["epoch_loss"]))
    return run


def trajectory_influence(g_train, g_valid, etas):
    """Accumulated lr-weighted inner product of per-epoch features."""
    if not (len(g_train) == len(g_valid) == len(etas)):
        raise ValueError("epoch counts disagree")
    return float(sum(
        eta * float(np.dot(gt, gv)) for gt, gv, eta in zip(g_train, g_valid, etas)
    ))
