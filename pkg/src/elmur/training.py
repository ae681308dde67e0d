"""Behavior-cloning training: per-segment loss, AdamW with warmup and
optional cosine decay, global-norm gradient clipping, checkpointing, and
an end-to-end finite-difference gradient check.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import zipfile
from dataclasses import dataclass, asdict

import numpy as np

from . import numcore as nc
from .model import ElmurModel, ModelConfig
from .numcore import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 2.06e-4
    warmup_steps: int = 200
    cosine_decay: bool = True
    lr_end_factor: float = 1.0
    weight_decay: float = 1e-4
    epochs: int = 40
    grad_clip: float = 5.0
    beta1: float = 0.95
    beta2: float = 0.999
    label_smoothing: float = 0.16
    seed: int = 0
    precision: int = 32

    def __post_init__(self):
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be > 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label smoothing must be in [0, 1), got {self.label_smoothing}")


def bc_loss(predictions, targets, mask, action_space="discrete", label_smoothing=0.0):
    """Mean loss over unmasked tokens: smoothed cross-entropy or MSE.

    predictions: Tensor (B, L, n) logits or (B, L, d_a) means;
    targets: int (B, L) classes or float (B, L, d_a); mask: bool (B, L).
    """
    mask = np.asarray(mask, dtype=bool)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("bc_loss: all positions masked")
    w = mask.astype(predictions.data.dtype)
    if action_space == "discrete":
        n = predictions.shape[-1]
        logp = nc.log_softmax(predictions)
        onehot = np.eye(n, dtype=predictions.data.dtype)[np.asarray(targets, dtype=np.int64)]
        q = (1.0 - label_smoothing) * onehot + label_smoothing / n
        per_token = nc.scale(nc.reduce_sum(nc.mul(logp, q), axis=-1), -1.0)
    elif action_space == "continuous":
        diff = predictions - Tensor(np.asarray(targets))
        per_token = nc.reduce_mean(nc.mul(diff, diff), axis=-1)
    else:
        raise ValueError(f"unknown action space {action_space!r}")
    return nc.scale(nc.reduce_sum(nc.mul(per_token, w)), 1.0 / n_valid)


def lr_schedule(step, cfg: TrainConfig, total_steps):
    """Linear warmup to cfg.lr, then cosine decay to lr * end factor if enabled."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if not cfg.cosine_decay or total_steps <= cfg.warmup_steps:
        return cfg.lr
    progress = (step - cfg.warmup_steps) / max(1, total_steps - cfg.warmup_steps)
    progress = min(progress, 1.0)
    floor = cfg.lr * cfg.lr_end_factor
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads, max_norm):
    """Global-norm clipping in place; returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return total


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, named_params, cfg: TrainConfig):
        self.params = list(named_params)
        self.cfg = cfg
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.eps = 1e-8

    def step(self, lr):
        """Apply one update from the accumulated .grad fields.

        Skips the update (and reports False) if any gradient is non-finite.
        """
        grads = {}
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                return False
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        for name, p in self.params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** t)
            vhat = self.v[name] / (1 - b2 ** t)
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps)
                                    + self.cfg.weight_decay * p.data)
        return True

    def state_arrays(self):
        out = {}
        for name in self.m:
            out[f"adam_m.{name}"] = self.m[name]
            out[f"adam_v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        for name in self.m:
            self.m[name] = arrays[f"adam_m.{name}"]
            self.v[name] = arrays[f"adam_v.{name}"]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def pad_episodes(episodes, obs_dim):
    """Stack episodes into (obs, times, targets, valid), padded to the longest."""
    batch = len(episodes)
    longest = max(len(e) for e in episodes)
    obs = np.zeros((batch, longest, obs_dim))
    times = np.zeros((batch, longest), dtype=np.int64)
    targets = np.zeros((batch, longest), dtype=np.int64)
    valid = np.zeros((batch, longest), dtype=bool)
    for i, ep in enumerate(episodes):
        n = len(ep)
        obs[i, :n] = ep.observations
        times[i, :n] = ep.times
        # padded times keep increasing so anchors stay monotone for dead rows
        times[i, n:] = ep.times[-1] + 1 + np.arange(longest - n)
        targets[i, :n] = ep.actions
        valid[i, :n] = True
    return obs, times, targets, valid


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, optimizer, rng_state, step, train_cfg):
    """Versioned zip container: npz payload plus a text manifest of shapes."""
    arrays = {f"param.{name}": p.data for name, p in model.parameters()}
    arrays.update(optimizer.state_arrays())
    manifest = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "step": step,
        "precision": nc.get_precision(),
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(train_cfg),
        "rng_state": rng_state,
        "shapes": {name: list(a.shape) for name, a in arrays.items()},
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with zipfile.ZipFile(path, "w") as z:
        z.writestr("manifest.json", json.dumps(manifest, indent=1))
        z.writestr("arrays.npz", buf.getvalue())


def load_checkpoint(path):
    """Returns (model, train_cfg, optimizer, rng_state, step)."""
    with zipfile.ZipFile(path) as z:
        manifest = json.loads(z.read("manifest.json"))
        if manifest["checkpoint_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['checkpoint_version']}")
        with z.open("arrays.npz") as f:
            arrays = dict(np.load(io.BytesIO(f.read())))
    nc.set_precision(manifest["precision"])
    model = ElmurModel(ModelConfig(**manifest["model_config"]))
    for name, p in model.parameters():
        p.data = arrays[f"param.{name}"].astype(nc.dtype())
    train_cfg = TrainConfig(**manifest["train_config"])
    optimizer = AdamW(model.parameters(), train_cfg)
    optimizer.step_count = manifest["step"]
    optimizer.load_state_arrays(arrays)
    return model, train_cfg, optimizer, manifest["rng_state"], manifest["step"]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(model, dataset, cfg: TrainConfig, log_path=None, checkpoint_path=None,
          callbacks=(), resume=None, detach_memory=True):
    """Epochs over shuffled whole-episode batches; per-batch summed segment losses.

    Deterministic under cfg.seed. Returns the list of per-step log rows
    (step, epoch, loss, lr, grad_norm, wall_time).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    nc.set_precision(cfg.precision)
    n_batches = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches

    if resume is not None:
        # caller passes cfg matching the uninterrupted run (e.g. its epochs)
        model, _, optimizer, rng_state, step = resume
        optimizer.cfg = cfg
        shuffle_rng = np.random.default_rng()
        shuffle_rng.bit_generator.state = rng_state["shuffle"]
        drop_rng = np.random.default_rng()
        drop_rng.bit_generator.state = rng_state["dropout"]
    else:
        optimizer = AdamW(model.parameters(), cfg)
        shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        drop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        step = 0

    log_rows = []
    start_epoch = step // n_batches
    t0 = time.time()
    for epoch in range(start_epoch, cfg.epochs):
        order = shuffle_rng.permutation(len(dataset))
        for b in range(n_batches):
            batch = [dataset[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            obs, times, targets, valid = pad_episodes(batch, model.cfg.obs_dim)
            segments, outputs, _ = model.forward_trajectory(
                obs, times, targets, valid, train=True, rng=drop_rng,
                detach=detach_memory, seed=cfg.seed)
            loss = None
            for seg, out in zip(segments, outputs):
                if not seg.valid.any():
                    continue
                term = bc_loss(out, seg.targets, seg.valid, model.cfg.action_space,
                               cfg.label_smoothing)
                loss = term if loss is None else nc.add(loss, term)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise nc.NonFiniteError(f"non-finite loss at step {step}")
            for _, p in model.parameters():
                p.zero_grad()
            nc.backward(loss)
            grads = [p.grad for _, p in model.parameters() if p.grad is not None]
            grad_norm = clip_gradients(grads, cfg.grad_clip)
            step += 1
            lr = lr_schedule(step, cfg, total_steps)
            optimizer.step(lr)
            log_rows.append((step, epoch, loss_val, lr, grad_norm, time.time() - t0))
        for cb in callbacks:
            cb(model, epoch, log_rows)

    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "epoch", "loss", "lr", "grad_norm", "wall_time"])
            writer.writerows(log_rows)
    if checkpoint_path is not None:
        rng_state = {"shuffle": shuffle_rng.bit_generator.state,
                     "dropout": drop_rng.bit_generator.state}
        save_checkpoint(checkpoint_path, model, optimizer, rng_state, step, cfg)
    return log_rows


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def trajectory_loss(model, obs, times, targets, valid, detach=False, seed=0):
    """Summed per-segment loss for a fixed trajectory (no dropout)."""
    segments, outputs, _ = model.forward_trajectory(
        obs, times, targets, valid, train=False, detach=detach, seed=seed)
    loss = None
    for seg, out in zip(segments, outputs):
        term = bc_loss(out, seg.targets, seg.valid, model.cfg.action_space)
        loss = term if loss is None else nc.add(loss, term)
    return loss


def gradient_check(model, obs, times, targets, valid, h=1e-5, max_entries=6, seed=0):
    """Central finite differences vs analytic gradients in 64-bit.

    Checks up to max_entries coordinates per parameter; runs with memory
    detaching off so cross-segment paths are on the tape (routing in MoE
    blocks stays frozen because selection reads raw values). Returns the
    max relative error across all checked coordinates.
    """
    if nc.get_precision() != 64:
        raise RuntimeError("gradient_check requires 64-bit precision")
    loss = trajectory_loss(model, obs, times, targets, valid, detach=False)
    for _, p in model.parameters():
        p.zero_grad()
    nc.backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.parameters():
        flat = p.data.reshape(-1)
        grad = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(max_entries, n), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            up = float(trajectory_loss(model, obs, times, targets, valid, detach=False).data)
            flat[i] = orig - h
            down = float(trajectory_loss(model, obs, times, targets, valid, detach=False).data)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            # the 1e-6 floor keeps coordinates whose true gradient sits at
            # the FD noise level (~ulp(loss)/h) from reading as mismatches
            denom = max(abs(fd), abs(grad[i]), 1e-6)
            worst = max(worst, abs(fd - grad[i]) / denom)
    return worst
