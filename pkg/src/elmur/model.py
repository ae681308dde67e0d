"""Model composition: the memory-augmented layer, the stack, and
segment-level recurrence over whole trajectories.

Each layer runs a token track (causal self-attention, memory read via
cross-attention, FFN) and a memory track (cross-attention write from the
post-FFN token states, memory FFN, LRU slot update). Memory persists
across segments; by default gradient flow is severed at every segment
boundary and the carried state is a plain array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import layers, memory, numcore as nc
from .numcore import Tensor


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 2
    mem_slots: int = 2
    lru_blend: float = 0.05
    mem_init_std: float = 0.001
    max_bias_distance: int = 32
    context_len: int = 10
    ffn: str = "moe"  # "mlp" | "moe"
    n_routed: int = 2
    n_shared: int = 2
    top_k: int = 2
    d_ff_routed: int = 32
    d_ff_shared: int = 512
    d_ff_mlp: int = 256
    dropout: float = 0.10
    attn_dropout: float = 0.17
    mem_dropout: float = 0.01
    label_smoothing: float = 0.16
    shared_memory: bool = False
    rel_bias: bool = True
    lru_enabled: bool = True
    obs_dim: int = 3
    action_space: str = "discrete"  # "discrete" | "continuous"
    n_actions: int = 3
    action_dim: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.context_len < 1 or self.mem_slots < 1:
            raise ValueError("context length and memory size must be >= 1")
        if self.ffn not in ("mlp", "moe"):
            raise ValueError(f"ffn must be 'mlp' or 'moe', got {self.ffn!r}")
        if self.action_space not in ("discrete", "continuous"):
            raise ValueError(f"unknown action space {self.action_space!r}")

    def to_dict(self):
        return asdict(self)

    @property
    def out_dim(self):
        return self.n_actions if self.action_space == "discrete" else self.action_dim


@dataclass
class Segment:
    """One window of a trajectory: observations, absolute times, targets, padding."""

    obs: np.ndarray       # (B, L', obs_dim)
    times: np.ndarray     # (B, L') int
    targets: np.ndarray   # (B, L') int or (B, L', action_dim) float
    valid: np.ndarray     # (B, L') bool


class ElmurLayer:
    """One layer: token track plus memory track with its own slot store."""

    def __init__(self, cfg: ModelConfig, rng):
        d, h = cfg.d_model, cfg.n_heads
        self.cfg = cfg
        self.self_attn = layers.AttentionParams(d, h, rng)
        self.sa_bias = layers.RelativeBiasTable(cfg.context_len, h, rng)
        self.norm_sa = layers.AddNormParams(d)
        self.read_attn = layers.AttentionParams(d, h, rng)
        self.norm_read = layers.AddNormParams(d)
        self.token_ffn = self._make_ffn(cfg, rng)
        self.norm_ffn = layers.AddNormParams(d)
        self.bias_table = layers.RelativeBiasTable(cfg.max_bias_distance, h, rng)
        self.write_attn = layers.AttentionParams(d, h, rng)
        self.norm_write = layers.AddNormParams(d)
        self.mem_ffn = self._make_ffn(cfg, rng)
        self.norm_mem_ffn = layers.AddNormParams(d)

    @staticmethod
    def _make_ffn(cfg, rng):
        if cfg.ffn == "moe":
            return layers.MoEParams(cfg.d_model, cfg.n_routed, cfg.n_shared,
                                    cfg.top_k, cfg.d_ff_routed, cfg.d_ff_shared, rng)
        return layers.MlpParams(cfg.d_model, cfg.d_ff_mlp, rng)

    def _ffn(self, x, params):
        if isinstance(params, layers.MoEParams):
            return layers.ffn_moe(x, params)
        return layers.ffn_mlp(x, params)

    def parameters(self):
        parts = [
            ("self_attn", self.self_attn), ("sa_bias", self.sa_bias),
            ("norm_sa", self.norm_sa), ("read_attn", self.read_attn),
            ("norm_read", self.norm_read), ("token_ffn", self.token_ffn),
            ("norm_ffn", self.norm_ffn), ("bias_table", self.bias_table),
            ("write_attn", self.write_attn), ("norm_write", self.norm_write),
            ("mem_ffn", self.mem_ffn), ("norm_mem_ffn", self.norm_mem_ffn),
        ]
        for prefix, part in parts:
            for name, p in part.parameters():
                yield f"{prefix}.{name}", p

    def forward(self, h, state, times, valid, train=False, rng=None, detach=True):
        """One segment through this layer; returns (h', new memory state)."""
        cfg = self.cfg
        att_drop = cfg.attn_dropout if train else 0.0

        m_in = state.m
        m_t = m_in if isinstance(m_in, Tensor) else Tensor(np.asarray(m_in))
        if detach and isinstance(m_in, Tensor):
            m_t = m_in.detach()
        p = state.p

        # token track
        h = layers.add_norm(h, layers.self_attention(
            h, self.self_attn, self.sa_bias, pad_mask=valid,
            dropout_rate=att_drop, rng=rng), self.norm_sa)
        bias_read = layers.relative_bias(self.bias_table, times, p, "read") if cfg.rel_bias else None
        h = layers.add_norm(h, layers.cross_attention(
            h, m_t, bias_read, self.read_attn,
            dropout_rate=att_drop, rng=rng), self.norm_read)
        h = layers.add_norm(h, self._ffn(h, self.token_ffn), self.norm_ffn)

        # memory track: write from post-FFN token states, query is pre-update memory
        bias_write = layers.relative_bias(self.bias_table, times, p, "write") if cfg.rel_bias else None
        has_valid = valid.any(axis=1)
        key_mask = np.where(has_valid[:, None], valid, True)  # dead rows: write skipped below
        u = layers.add_norm(m_t, layers.cross_attention(
            m_t, h, bias_write, self.write_attn, key_mask=key_mask,
            dropout_rate=att_drop, rng=rng), self.norm_write)
        u_tilde = layers.add_norm(u, self._ffn(u, self.mem_ffn), self.norm_mem_ffn)
        if train and cfg.mem_dropout > 0.0:
            u_tilde = nc.dropout(u_tilde, cfg.mem_dropout, rng)

        new_state = self._lru_write(m_t, p, u_tilde, times, valid, has_valid, detach)
        return h, new_state

    def _lru_write(self, m_t, p, u_tilde, times, valid, has_valid, detach):
        cfg = self.cfg
        batch, slots = p.shape
        j, is_fill = memory.select_write_slot(p, cfg.lru_enabled)
        alpha = np.where(is_fill, 1.0, cfg.lru_blend)
        alpha = np.where(has_valid, alpha, 0.0)
        t_write = np.where(valid, times, -1).max(axis=1)
        if np.any(t_write[has_valid] <= p[np.arange(batch), j][has_valid]):
            raise ValueError("segment write time does not exceed current anchors")

        w = np.zeros((batch, slots, 1), dtype=m_t.data.dtype)
        w[np.arange(batch), j, 0] = alpha
        blended = nc.add(nc.mul(m_t, 1.0 - w), nc.mul(u_tilde, w))
        new_p = p.copy()
        rows = np.flatnonzero(has_valid)
        new_p[rows, j[rows]] = t_write[rows]
        if detach:
            return memory.MemoryState(blended.data.copy(), new_p)
        return memory.MemoryState(blended, new_p)


class ElmurModel:
    """Layer stack with per-layer slot memory, observation encoder, action head."""

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.enc_w = layers._param(rng, (cfg.obs_dim, d))
        self.enc_b = Tensor(np.zeros(d), requires_grad=True)
        self.layers = [ElmurLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.head_w = layers._param(rng, (d, cfg.out_dim))
        self.head_b = Tensor(np.zeros(cfg.out_dim), requires_grad=True)

    def parameters(self):
        yield "enc_w", self.enc_w
        yield "enc_b", self.enc_b
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters():
                yield f"layer{i}.{name}", p
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def count_parameters(self):
        return sum(p.data.size for _, p in self.parameters())

    def init_memory(self, batch, seed=0):
        """Fresh per-layer slot states (a single shared state under the ablation)."""
        cfg = self.cfg
        n = 1 if cfg.shared_memory else cfg.n_layers
        lru = memory.LruConfig(cfg.mem_slots, cfg.lru_blend, cfg.mem_init_std)
        return [memory.lru_init(lru, batch, cfg.d_model, seed + i, dtype=nc.dtype())
                for i in range(n)]

    def encode(self, obs):
        x = Tensor(np.asarray(obs))
        return nc.gelu(nc.add(nc.matmul(x, self.enc_w), self.enc_b))

    def forward_segment(self, segment: Segment, states, train=False, rng=None, detach=True):
        """One segment through the whole stack; returns (outputs, new states)."""
        cfg = self.cfg
        h = self.encode(segment.obs)
        if train and cfg.dropout > 0.0:
            h = nc.dropout(h, cfg.dropout, rng)
        new_states = list(states)
        for i, layer in enumerate(self.layers):
            si = 0 if cfg.shared_memory else i
            h, new_states[si] = layer.forward(
                h, new_states[si], segment.times, segment.valid,
                train=train, rng=rng, detach=detach)
        out = nc.add(nc.matmul(h, self.head_w), self.head_b)
        return out, new_states

    def forward_trajectory(self, obs, times, targets, valid, states=None,
                           train=False, rng=None, detach=True, seed=0):
        """Process a trajectory as ceil(T/L) segments, carrying memory forward.

        Returns (list of per-segment Segment, list of per-segment output
        tensors, final states). With detach=True (the training default)
        gradient flow is severed at every segment boundary.
        """
        obs = np.asarray(obs)
        if obs.ndim != 3 or obs.shape[1] == 0:
            raise ValueError("trajectory must be (B, T, obs_dim) with T >= 1")
        batch, total, _ = obs.shape
        if states is None:
            states = self.init_memory(batch, seed=seed)
        length = self.cfg.context_len
        segments, outputs = [], []
        for start in range(0, total, length):
            end = min(start + length, total)
            seg = Segment(obs[:, start:end], np.asarray(times)[:, start:end],
                          np.asarray(targets)[:, start:end],
                          np.asarray(valid)[:, start:end])
            out, states = self.forward_segment(seg, states, train=train, rng=rng, detach=detach)
            segments.append(seg)
            outputs.append(out)
        return segments, outputs, states
