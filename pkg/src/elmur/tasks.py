"""Synthetic partially observable tasks and oracle dataset generation.

T-Maze: a corridor of N steps ending in a junction; the turn direction is
cued only at t=0, so the junction decision requires recalling the cue.
RepeatFirst: a random symbol stream whose target at every step is the
first symbol. Both emit oracle-labelled trajectories for behavior cloning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LEFT, RIGHT, FORWARD = 0, 1, 2
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed or mismatched dataset file."""


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim) float
    actions: np.ndarray       # (T,) int
    times: np.ndarray         # (T,) int, 0..T-1
    task: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.actions)


@dataclass
class TMazeConfig:
    corridor: int  # junction at step N; episode has N+1 steps
    obs_dim = 3
    n_actions = 3


@dataclass
class RepeatFirstConfig:
    alphabet: int
    length: int
    supervision: str = "all"  # "all" | "final" | "echo"
    recall_window: int = 1    # trailing steps that target the cue symbol
    marker: bool = False      # extra observation channel flagging the cue step
    marker_step: int = 0      # which step carries the marker (and the cue)
    lag: int = 0              # echo supervision: target = symbol lag steps back
    filler_alphabet: int = 0  # >0: steps after the cue draw from a disjoint range

    def __post_init__(self):
        if self.alphabet < 2:
            raise ValueError(f"alphabet must be >= 2, got {self.alphabet}")
        if self.supervision not in ("all", "final", "echo"):
            raise ValueError(f"supervision must be 'all', 'final' or 'echo', "
                             f"got {self.supervision!r}")
        if self.supervision == "echo" and not 1 <= self.lag < self.length:
            raise ValueError(f"echo lag must be in [1, length), got {self.lag}")
        if not 1 <= self.recall_window <= self.length:
            raise ValueError(f"recall window must be in [1, length], got {self.recall_window}")
        if not 0 <= self.marker_step < self.length:
            raise ValueError(f"marker step must be in [0, length), got {self.marker_step}")
        if self.marker_step != 0 and not self.marker:
            raise ValueError("marker_step requires marker=True")


def tmaze_generate(cfg: TMazeConfig, seed):
    """One oracle T-Maze episode; the seed picks the cue (+1 right, -1 left).

    Observation layout: (cue channel, corridor flag, junction flag). The
    cue appears only at t=0; oracle actions go FORWARD down the corridor
    and turn with the cue at the junction.
    """
    n = cfg.corridor
    if n < 1:
        raise ValueError(f"corridor length must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    cue = 1 if rng.random() < 0.5 else -1
    obs = np.zeros((n + 1, 3))
    obs[0] = (cue, 1.0, 0.0)
    obs[1:n, 1] = 1.0
    obs[n] = (0.0, 0.0, 1.0)
    actions = np.full(n + 1, FORWARD, dtype=np.int64)
    actions[n] = RIGHT if cue == 1 else LEFT
    return Trajectory(obs, actions, np.arange(n + 1, dtype=np.int64),
                      task="tmaze", seed=int(seed), meta={"corridor": n, "cue": cue})


def tmaze_success(traj: Trajectory, predicted_actions):
    """True iff the junction action matches the cue; corridor steps don't count."""
    predicted = np.asarray(predicted_actions)
    if len(predicted) != len(traj):
        raise ValueError("prediction length does not match trajectory")
    return bool(predicted[-1] == traj.actions[-1])


def repeat_first_generate(cfg: RepeatFirstConfig, seed):
    """Random one-hot symbol stream whose final target is the cue symbol
    (the symbol at marker_step; step 0 by default).

    supervision="all" labels every step with the cue; supervision="final"
    labels earlier steps with the current symbol and only the trailing
    recall_window steps with the cue. The "final" variant keeps early
    representations cue-free, which makes slot capacity bind: with "all",
    every segment is trained to surface the cue, so its write re-encodes
    it and even a single constantly overwritten slot can relay it
    forward. marker=True appends an observation channel that is 1 only at
    marker_step, letting a reader identify which memory slot encodes the
    cue segment by content alone. supervision="echo" instead targets the
    symbol lag steps back at every step where it exists (earlier steps
    target the current symbol): dense recall supervision whose dependency
    reaches a fixed number of segments into the past.
    """
    rng = np.random.default_rng(seed)
    symbols = rng.integers(0, cfg.alphabet, size=cfg.length)
    if cfg.filler_alphabet:
        # every step after the cue shows a filler symbol from a disjoint
        # range, so the cue class is recoverable only from the cue step
        fill = rng.integers(cfg.alphabet, cfg.alphabet + cfg.filler_alphabet,
                            size=cfg.length - 1)
        symbols = np.concatenate([symbols[:1], fill])
    width = cfg.alphabet + cfg.filler_alphabet + (1 if cfg.marker else 0)
    obs = np.zeros((cfg.length, width))
    obs[np.arange(cfg.length), symbols] = 1.0
    if cfg.marker:
        obs[cfg.marker_step, cfg.alphabet + cfg.filler_alphabet] = 1.0
    cue = symbols[cfg.marker_step]
    if cfg.supervision == "final":
        actions = symbols.astype(np.int64).copy()
        actions[-cfg.recall_window:] = cue
    elif cfg.supervision == "echo":
        # target the symbol lag steps back once it exists; the dependency
        # spans lag // L segment boundaries at context length L
        actions = symbols.astype(np.int64).copy()
        actions[cfg.lag:] = symbols[:-cfg.lag]
        cue = actions[-1]
    else:
        actions = np.full(cfg.length, cue, dtype=np.int64)
    return Trajectory(obs, actions, np.arange(cfg.length, dtype=np.int64),
                      task="repeat_first", seed=int(seed),
                      meta={"alphabet": cfg.alphabet, "first": int(cue)})


def recall_success(traj: Trajectory, predicted_actions):
    """True iff the final-step prediction recalls the episode's target symbol."""
    predicted = np.asarray(predicted_actions)
    if len(predicted) != len(traj):
        raise ValueError("prediction length does not match trajectory")
    return bool(predicted[-1] == traj.actions[-1])


def episode_seed(base_seed, index):
    """Derive a per-episode seed from (base, index); stable and collision-safe."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(task, n_episodes, base_seed, **task_kwargs):
    """n_episodes oracle trajectories with per-episode derived seeds.

    tmaze accepts corridor=int or corridor_range=(lo, hi) sampled uniformly;
    repeat_first accepts marker_step=int or marker_range=(lo, hi) likewise.
    """
    out = []
    for i in range(n_episodes):
        seed = episode_seed(base_seed, i)
        if task == "tmaze":
            corridor = task_kwargs.get("corridor")
            if corridor is None:
                lo, hi = task_kwargs["corridor_range"]
                corridor = int(np.random.default_rng(seed ^ 0x5EED).integers(lo, hi + 1))
            out.append(tmaze_generate(TMazeConfig(corridor), seed))
        elif task == "repeat_first":
            step = task_kwargs.get("marker_step", 0)
            if "marker_range" in task_kwargs:
                lo, hi = task_kwargs["marker_range"]
                step = int(np.random.default_rng(seed ^ 0x5EED).integers(lo, hi + 1))
            cfg = RepeatFirstConfig(task_kwargs["alphabet"], task_kwargs["length"],
                                    task_kwargs.get("supervision", "all"),
                                    task_kwargs.get("recall_window", 1),
                                    task_kwargs.get("marker", False), step,
                                    task_kwargs.get("lag", 0),
                                    task_kwargs.get("filler_alphabet", 0))
            out.append(repeat_first_generate(cfg, seed))
        else:
            raise ValueError(f"unknown task {task!r}")
    return out


def dataset_write(path, trajectories, obs_dim, n_actions):
    """One JSON record per line; the first line is a versioned header."""
    with open(path, "w") as f:
        header = {"format_version": FORMAT_VERSION, "obs_dim": obs_dim, "n_actions": n_actions}
        f.write(json.dumps(header) + "\n")
        for traj in trajectories:
            rec = {
                "task": traj.task,
                "seed": traj.seed,
                "length": len(traj),
                "obs": traj.observations.tolist(),
                "actions": traj.actions.tolist(),
                "meta": traj.meta,
            }
            f.write(json.dumps(rec) + "\n")


def dataset_read(path):
    """Inverse of dataset_write; returns (trajectories, header)."""
    with open(path) as f:
        try:
            header = json.loads(f.readline())
        except json.JSONDecodeError as e:
            raise DatasetError(f"bad dataset header: {e}") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported format_version {header.get('format_version')!r}")
        out = []
        for i, line in enumerate(f):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                traj = Trajectory(
                    np.asarray(rec["obs"], dtype=float),
                    np.asarray(rec["actions"], dtype=np.int64),
                    np.arange(rec["length"], dtype=np.int64),
                    task=rec["task"], seed=rec["seed"], meta=rec.get("meta", {}))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise DatasetError(f"corrupt record {i}: {e}") from None
            if len(traj) != rec["length"]:
                raise DatasetError(f"corrupt record {i}: length field mismatch")
            out.append(traj)
    return out, header
