"""Rollout evaluation, extrapolation sweeps, train-vs-validation
generalization matrices, the ablation runner, and mean +/- SEM reporting.

Success rates are exact fractions over episodes; the SEM is always
computed across run means, never across episodes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc, tasks, training
from .model import ElmurModel, ModelConfig
from .training import TrainConfig


@dataclass
class EvalReport:
    per_length: dict            # length -> success fraction
    episodes_per_length: int
    config_fingerprint: str
    run_means: list = field(default_factory=list)

    @property
    def grand_mean(self):
        mean, _ = sem(self.run_means or list(self.per_length.values()))
        return mean

    @property
    def sem(self):
        _, err = sem(self.run_means or list(self.per_length.values()))
        return err


def sem(values):
    """(mean, standard error of the mean); SEM is 0 for a single value."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("sem of empty input")
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def config_fingerprint(*cfg_dicts):
    blob = json.dumps(cfg_dicts, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def greedy_actions(outputs, valid):
    """Per-token argmax over concatenated segment outputs; (B, T) ints."""
    logits = np.concatenate([o.data for o in outputs], axis=1)
    del valid  # padding never reaches success scoring; kept for signature clarity
    return logits.argmax(axis=-1)


def _batched_rollout(model, episodes, seed):
    """Greedy predictions for same-length episodes in one batch.

    Rows are independent by construction, so batching whole episodes is
    value-equivalent to one-episode evaluation with persistent memory.
    """
    obs, times, targets, valid = training.pad_episodes(episodes, model.cfg.obs_dim)
    with nc.no_grad():
        _, outputs, _ = model.forward_trajectory(
            obs, times, targets, valid, train=False, detach=True, seed=seed)
    return greedy_actions(outputs, valid)


def rollout_eval(model, task, lengths, n_episodes, seed, task_kwargs=None):
    """Per-length success fractions with memory persisting over each episode."""
    task_kwargs = dict(task_kwargs or {})
    per_length = {}
    for li, length in enumerate(lengths):
        if task == "tmaze":
            episodes = [tasks.tmaze_generate(tasks.TMazeConfig(length),
                                             tasks.episode_seed(seed, li * 1_000_000 + i))
                        for i in range(n_episodes)]
            score = tasks.tmaze_success
        elif task == "repeat_first":
            episodes = []
            for i in range(n_episodes):
                ep_seed = tasks.episode_seed(seed, li * 1_000_000 + i)
                step = task_kwargs.get("marker_step", 0)
                if "marker_range" in task_kwargs:
                    lo, hi = task_kwargs["marker_range"]
                    step = int(np.random.default_rng(ep_seed ^ 0x5EED).integers(lo, hi + 1))
                cfg = tasks.RepeatFirstConfig(task_kwargs.get("alphabet", 5), length,
                                              task_kwargs.get("supervision", "all"),
                                              task_kwargs.get("recall_window", 1),
                                              task_kwargs.get("marker", False), step,
                                              task_kwargs.get("lag", 0),
                                              task_kwargs.get("filler_alphabet", 0))
                episodes.append(tasks.repeat_first_generate(cfg, ep_seed))
            score = tasks.recall_success
        else:
            raise ValueError(f"unknown task {task!r}")
        predicted = _batched_rollout(model, episodes, seed)
        hits = sum(score(ep, predicted[i, :len(ep)]) for i, ep in enumerate(episodes))
        per_length[int(length)] = hits / n_episodes
    return per_length


def extrapolation_sweep(model, lengths, n_episodes, seed, out_path=None, runs=1):
    """Success over a grid of corridor lengths; optional CSV (length, success, sem)."""
    rows = []
    for length in lengths:
        vals = [rollout_eval(model, "tmaze", [length], n_episodes,
                             tasks.episode_seed(seed, r))[int(length)]
                for r in range(runs)]
        mean, err = sem(vals)
        rows.append((int(length), mean, err))
    if out_path:
        with open(out_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["length", "success", "sem"])
            w.writerows(rows)
    return rows


def _train_tmaze_model(model_cfg, train_cfg, corridor_range, n_episodes, seed,
                       detach_memory=True):
    data = tasks.generate_dataset("tmaze", n_episodes, seed, corridor_range=corridor_range)
    model = ElmurModel(model_cfg, seed=seed)
    cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
    training.train(model, data, cfg, detach_memory=detach_memory)
    return model


def generalization_matrix(model_cfg, train_cfg, train_lengths, val_lengths,
                          runs, n_train_episodes, n_eval_episodes, seed,
                          out_path=None):
    """Train one model per training corridor length, evaluate on every
    validation length; returns rows (train_len, val_len, success, sem)."""
    cells = {}
    for tl in train_lengths:
        per_run = {vl: [] for vl in val_lengths}
        for r in range(runs):
            run_seed = tasks.episode_seed(seed, tl * 1000 + r)
            model = _train_tmaze_model(model_cfg, train_cfg, (2, tl),
                                       n_train_episodes, run_seed)
            res = rollout_eval(model, "tmaze", val_lengths, n_eval_episodes, run_seed)
            for vl in val_lengths:
                per_run[vl].append(res[int(vl)])
        for vl in val_lengths:
            cells[(tl, vl)] = sem(per_run[vl])
    rows = [(tl, vl, cells[(tl, vl)][0], cells[(tl, vl)][1])
            for tl in train_lengths for vl in val_lengths]
    if out_path:
        with open(out_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["train_len", "val_len", "success", "sem"])
            w.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

KNOWN_VARIANTS = ("baseline", "shared_memory", "no_rel_bias", "no_lru",
                  "no_rel_bias_no_lru", "moe_to_mlp")


def apply_variant(cfg: ModelConfig, variant):
    """A fresh config with one ablation switch flipped."""
    d = cfg.to_dict()
    if variant == "baseline":
        pass
    elif variant == "shared_memory":
        d["shared_memory"] = True
    elif variant == "no_rel_bias":
        d["rel_bias"] = False
    elif variant == "no_lru":
        d["lru_enabled"] = False
    elif variant == "no_rel_bias_no_lru":
        d["rel_bias"] = False
        d["lru_enabled"] = False
    elif variant == "moe_to_mlp":
        d["ffn"] = "mlp"
    elif variant.startswith("mem_slots="):
        d["mem_slots"] = int(variant.split("=")[1])
    elif variant.startswith("lru_blend="):
        d["lru_blend"] = float(variant.split("=")[1])
    elif variant.startswith("mem_init_std="):
        d["mem_init_std"] = float(variant.split("=")[1])
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return ModelConfig(**d)


def ablation_run(base_cfg, train_cfg, variants, runs, seed,
                 task="tmaze", alphabet=5, episode_len=None, train_lengths=None,
                 n_train_episodes=400, n_eval_episodes=50, out_path=None,
                 detach_memory=True, supervision="final", marker=True):
    """Mean +/- SEM cue-recall success per variant, trained short and
    evaluated at a longer horizon.

    The train/eval horizon gap is what separates the variants. At horizons
    matching training, every variant succeeds regardless of slot count:
    each segment's tokens learn to surface the cue (the read parameters
    are shared across segments), so the next write re-encodes it and a
    single constantly overwritten slot relays the cue forward. Beyond the
    training horizon that relay chain was never trained, and success
    requires the cue to survive in a slot: persistence then depends on
    slot count and the write-blend decay, which is exactly what the
    variants change.

    task="tmaze" trains on corridors whose junction lies up to
    ceil((max train length) / L) segments past the cue and evaluates at
    episode_len (default 1000). task="repeat_first" trains first-symbol
    recall on train_lengths and evaluates at episode_len (default 3L),
    with supervision="final" keeping early steps cue-free. marker=True adds
    a first-step flag channel so the read can identify the cue slot by
    content when several slots are filled (base_cfg.obs_dim must then be
    alphabet + 1).
    """
    L = base_cfg.context_len
    if task == "tmaze":
        episode_len = episode_len or 1000
        train_lengths = train_lengths or [3 * L]
    else:
        episode_len = episode_len or 3 * L
        if train_lengths is None:
            train_lengths = [episode_len - L - L // 2, episode_len - L]
    rows = []
    for vi, variant in enumerate(variants):
        cfg = apply_variant(base_cfg, variant)
        run_means = []
        for r in range(runs):
            run_seed = tasks.episode_seed(seed, (vi + 1) * 1000 + r)
            if task == "tmaze":
                data = tasks.generate_dataset(
                    "tmaze", n_train_episodes, run_seed,
                    corridor_range=(2, max(train_lengths)))
                eval_kwargs = None
            else:
                data = []
                for ti, tl in enumerate(train_lengths):
                    data += tasks.generate_dataset(
                        "repeat_first", n_train_episodes // len(train_lengths),
                        tasks.episode_seed(run_seed, ti), alphabet=alphabet,
                        length=tl, supervision=supervision, marker=marker,
                        recall_window=tl - L * ((tl - 1) // L) if supervision == "final" else 1)
                eval_kwargs = {"alphabet": alphabet, "supervision": supervision,
                               "marker": marker,
                               "recall_window": episode_len - L * ((episode_len - 1) // L)
                               if supervision == "final" else 1}
            model = ElmurModel(cfg, seed=run_seed)
            tcfg = TrainConfig(**{**train_cfg.__dict__, "seed": run_seed})
            training.train(model, data, tcfg, detach_memory=detach_memory)
            res = rollout_eval(model, task, [episode_len], n_eval_episodes,
                               run_seed, task_kwargs=eval_kwargs)
            run_means.append(res[episode_len])
        mean, err = sem(run_means)
        rows.append((variant, mean, err, runs))
    if out_path:
        with open(out_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "mean", "sem", "n_runs"])
            w.writerows(rows)
    return rows


def run_summary(path, command, cfg_dicts, seed, started):
    summary = {
        "command": command,
        "config_fingerprint": config_fingerprint(*cfg_dicts),
        "seed": seed,
        "wall_time_s": round(time.time() - started, 3),
        "configs": cfg_dicts,
    }
    with open(path, "w") as f:
        json.dump(summary, f, indent=1, default=str)
    return summary
