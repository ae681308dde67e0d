"""LRU slot store and the executable theory that goes with it.

The store keeps M d-dimensional slots per batch row plus an integer anchor
per slot (the absolute environment step of its last write; -1 marks an
empty slot). Writes fill empty slots first with full replacement, then
refresh the least recently used slot with the convex blend
m' = lam * u + (1 - lam) * m.

The calculators (forgetting coefficients, half-life, effective horizon,
boundedness check) make the blend's retention behaviour testable in
closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class LruConfig:
    slots: int
    blend: float
    init_std: float = 0.0

    def __post_init__(self):
        if self.slots < 1:
            raise ValueError(f"slot count must be >= 1, got {self.slots}")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError(f"blend must be in [0, 1], got {self.blend}")
        if self.init_std < 0.0:
            raise ValueError(f"init std must be >= 0, got {self.init_std}")


@dataclass
class MemoryState:
    """Slot matrix (B, M, d) plus anchors (B, M); anchor -1 = never written."""

    m: np.ndarray
    p: np.ndarray

    def copy(self):
        return MemoryState(self.m.copy(), self.p.copy())


def lru_init(cfg: LruConfig, batch, dim, seed, dtype=np.float64):
    """Cold start: slots ~ N(0, sigma^2), all anchors -1."""
    rng = np.random.default_rng(seed)
    m = (rng.standard_normal((batch, cfg.slots, dim)) * cfg.init_std).astype(dtype)
    p = np.full((batch, cfg.slots), -1, dtype=np.int64)
    return MemoryState(m, p)


def select_write_slot(p, lru_enabled=True):
    """Per batch row: the slot index to write and whether it is an empty fill.

    Empty slots (anchor < 0) win first, lowest index; otherwise the
    least recently used slot, ties to the lowest index. With lru_enabled
    False (ablation), slot 0 is always blended and never fill-replaced.
    """
    batch, slots = p.shape
    if not lru_enabled:
        return np.zeros(batch, dtype=np.int64), np.zeros(batch, dtype=bool)
    empty = p < 0
    has_empty = empty.any(axis=1)
    first_empty = np.argmax(empty, axis=1)
    oldest = np.argmin(p, axis=1)  # argmin takes the lowest index on ties
    j = np.where(has_empty, first_empty, oldest)
    return j.astype(np.int64), has_empty


def lru_update(state: MemoryState, u_tilde, t, cfg: LruConfig, lru_enabled=True):
    """One write: returns a new state, leaving all unselected slots bit-identical."""
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(state.p.shape[0], int(t), dtype=np.int64)
    if np.any(t <= state.p.max(axis=1)):
        raise ValueError("write time must exceed every current anchor")
    j, is_fill = select_write_slot(state.p, lru_enabled)
    alpha = np.where(is_fill, 1.0, cfg.blend)
    rows = np.arange(state.p.shape[0])
    out = state.copy()
    old = state.m[rows, j]
    out.m[rows, j] = alpha[:, None] * u_tilde[rows, j] + (1.0 - alpha[:, None]) * old
    out.p[rows, j] = t
    return out


# ---------------------------------------------------------------------------
# retention theory
# ---------------------------------------------------------------------------

def forgetting_coefficients(lam, k):
    """Weights of a slot's contents after k blended overwrites.

    Returns (weight of the initial content, weights of writes u=1..k).
    The unrolled blend gives (1-lam)^k for the initial content and
    lam*(1-lam)^(k-u) for the u-th write; together they sum to 1.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"blend must be in [0, 1], got {lam}")
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    initial = (1.0 - lam) ** k
    writes = [lam * (1.0 - lam) ** (k - u) for u in range(1, k + 1)]
    return initial, writes


def half_life(lam):
    """Overwrites until the initial content's weight halves: ln2 / -ln(1-lam)."""
    if lam <= 0.0 or lam > 1.0:
        raise ValueError(f"blend must be in (0, 1], got {lam}")
    if lam == 1.0:
        return 0.0
    return math.log(2.0) / (-math.log(1.0 - lam))


def effective_horizon(slots, seg_len, lam, eps):
    """Environment steps until a stored contribution's weight decays below eps.

    One slot is overwritten per segment, so a given slot is hit once every
    `slots` segments of `seg_len` steps: H = M * L * ln(eps) / ln(1-lam).
    """
    if slots < 1 or seg_len < 1:
        raise ValueError("slots and segment length must be >= 1")
    if not 0.0 < lam < 1.0:
        raise ValueError(f"horizon needs blend in (0, 1), got {lam}")
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"eps must be in (0, 1], got {eps}")
    return slots * seg_len * math.log(eps) / math.log(1.0 - lam)


def verify_boundedness(C, lam, n_steps, seed, slots=4, dim=8):
    """Monte-Carlo check of norm stability under bounded writes.

    Initial slots and every write have norm <= C; returns the maximum slot
    norm observed over n_steps updates (provably <= C).
    """
    rng = np.random.default_rng(seed)
    cfg = LruConfig(slots=slots, blend=lam, init_std=0.0)

    def bounded(shape):
        v = rng.standard_normal(shape)
        norms = np.linalg.norm(v, axis=-1, keepdims=True)
        return v / np.maximum(norms, 1.0) * C * rng.random(norms.shape)

    state = MemoryState(bounded((1, slots, dim)), np.full((1, slots), -1, dtype=np.int64))
    max_norm = float(np.linalg.norm(state.m, axis=-1).max())
    for step in range(n_steps):
        state = lru_update(state, bounded((1, slots, dim)), step, cfg)
        max_norm = max(max_norm, float(np.linalg.norm(state.m, axis=-1).max()))
    return max_norm
