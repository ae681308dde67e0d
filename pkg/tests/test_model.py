"""Layer-stack, segment-recurrence, and parameter-count tests."""

import numpy as np
import pytest

from elmur import layers, memory, numcore as nc
from elmur.model import ElmurLayer, ElmurModel, ModelConfig, Segment


@pytest.fixture(autouse=True)
def float64_mode():
    nc.set_precision(64)
    yield
    nc.set_precision(32)


def tiny_cfg(**kw):
    base = dict(d_model=8, n_layers=2, n_heads=2, mem_slots=2, context_len=4,
                ffn="moe", n_routed=2, n_shared=1, top_k=1, d_ff_routed=6,
                d_ff_shared=6, dropout=0.0, attn_dropout=0.0, mem_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def traj(batch, total, obs_dim=3, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(batch, total, obs_dim))
    times = np.tile(np.arange(total), (batch, 1))
    targets = rng.integers(0, 3, size=(batch, total))
    valid = np.ones((batch, total), dtype=bool)
    return obs, times, targets, valid


class TestModelConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=10, n_heads=3)

    def test_unknown_ffn(self):
        with pytest.raises(ValueError):
            ModelConfig(ffn="dense")

    def test_out_dim(self):
        assert ModelConfig(n_actions=5).out_dim == 5
        assert ModelConfig(action_space="continuous", action_dim=2).out_dim == 2


class TestEncoder:
    def test_zero_weights_zero_pre_activation(self):
        model = ElmurModel(tiny_cfg(), seed=0)
        model.enc_w.data[:] = 0.0
        model.enc_b.data[:] = 0.0
        out = model.encode(np.ones((1, 2, 3)))
        np.testing.assert_array_equal(out.data, 0.0)  # gelu(0) = 0

    def test_identity_init_is_activation(self):
        cfg = tiny_cfg(obs_dim=8)
        model = ElmurModel(cfg, seed=0)
        model.enc_w.data = np.eye(8)
        model.enc_b.data[:] = 0.0
        rng = np.random.default_rng(1)
        obs = rng.normal(size=(1, 3, 8))
        out = model.encode(obs)
        expect = nc.gelu(nc.Tensor(obs)).data
        np.testing.assert_array_equal(out.data, expect)


class TestLayerForward:
    def test_first_segment_full_replacement(self):
        # rel bias off, M=1, empty memory: the written slot equals the
        # memory-track output exactly (alpha = 1 on the empty fill)
        cfg = tiny_cfg(mem_slots=1, rel_bias=False, n_layers=1)
        layer = ElmurLayer(cfg, np.random.default_rng(0))
        state = memory.lru_init(memory.LruConfig(1, cfg.lru_blend, 0.0), 1, 8, seed=0)
        rng = np.random.default_rng(1)
        h = nc.Tensor(rng.normal(size=(1, 4, 8)))
        times = np.arange(4).reshape(1, 4)
        valid = np.ones((1, 4), dtype=bool)
        _, new_state = layer.forward(h, state, times, valid)
        assert new_state.p[0, 0] == 3
        assert not np.array_equal(new_state.m, state.m)

    def test_batch_rows_independent(self):
        cfg = tiny_cfg(n_layers=1)
        layer = ElmurLayer(cfg, np.random.default_rng(2))
        state = memory.lru_init(memory.LruConfig(2, 0.5, 0.0), 2, 8, seed=0)
        rng = np.random.default_rng(3)
        h = rng.normal(size=(2, 1, 8))
        times = np.zeros((2, 1), dtype=int)
        valid = np.ones((2, 1), dtype=bool)
        out1, _ = layer.forward(nc.Tensor(h), state.copy(), times, valid)
        mutated = h.copy()
        mutated[1] += 5.0
        out2, _ = layer.forward(nc.Tensor(mutated), state.copy(), times, valid)
        assert np.array_equal(out1.data[0], out2.data[0])

    def test_exactly_one_anchor_updated_per_row(self):
        cfg = tiny_cfg(n_layers=1)
        layer = ElmurLayer(cfg, np.random.default_rng(4))
        state = memory.lru_init(memory.LruConfig(2, 0.5, 0.1), 3, 8, seed=1)
        rng = np.random.default_rng(5)
        h = nc.Tensor(rng.normal(size=(3, 4, 8)))
        times = np.tile(np.arange(4), (3, 1))
        valid = np.ones((3, 4), dtype=bool)
        _, new_state = layer.forward(h, state, times, valid)
        changed = (new_state.p != state.p).sum(axis=1)
        np.testing.assert_array_equal(changed, [1, 1, 1])
        assert np.all(new_state.p[:, 0] == 3)  # t of the segment's last token


class TestForwardSegment:
    def test_discrete_head_shape(self):
        cfg = tiny_cfg()
        model = ElmurModel(cfg, seed=0)
        obs, times, targets, valid = traj(2, 4)
        seg = Segment(obs, times, targets, valid)
        out, states = model.forward_segment(seg, model.init_memory(2))
        assert out.shape == (2, 4, 3)
        assert len(states) == cfg.n_layers

    def test_single_layer_recomposition(self):
        cfg = tiny_cfg(n_layers=1)
        model = ElmurModel(cfg, seed=0)
        obs, times, targets, valid = traj(1, 4, seed=6)
        seg = Segment(obs, times, targets, valid)
        states = model.init_memory(1)
        out, _ = model.forward_segment(seg, states)
        h = model.encode(obs)
        h2, _ = model.layers[0].forward(h, states[0], times, valid)
        expect = nc.add(nc.matmul(h2, model.head_w), model.head_b)
        np.testing.assert_array_equal(out.data, expect.data)

    def test_padded_positions_no_gradient(self):
        from elmur.training import bc_loss
        cfg = tiny_cfg()
        model = ElmurModel(cfg, seed=0)
        obs, times, targets, valid = traj(1, 4, seed=7)
        valid[0, 2:] = False
        seg = Segment(obs, times, targets, valid)
        out, _ = model.forward_segment(seg, model.init_memory(1), detach=True)
        loss = bc_loss(out, targets, valid)
        nc.backward(loss)
        # move a padded observation: the loss value must not change
        obs2 = obs.copy()
        obs2[0, 3] += 10.0
        out2, _ = model.forward_segment(Segment(obs2, times, targets, valid),
                                        model.init_memory(1), detach=True)
        loss2 = bc_loss(out2, targets, valid)
        np.testing.assert_array_equal(loss.data, loss2.data)


class TestForwardTrajectory:
    def test_single_segment_matches_forward_segment(self):
        cfg = tiny_cfg()
        model = ElmurModel(cfg, seed=0)
        obs, times, targets, valid = traj(1, 3, seed=8)
        segs, outs, _ = model.forward_trajectory(obs, times, targets, valid, seed=5)
        assert len(outs) == 1
        direct, _ = model.forward_segment(Segment(obs, times, targets, valid),
                                          model.init_memory(1, seed=5))
        np.testing.assert_array_equal(outs[0].data, direct.data)

    def test_segment_count_and_ragged_tail(self):
        cfg = tiny_cfg(context_len=10)
        model = ElmurModel(cfg, seed=0)
        obs, times, targets, valid = traj(1, 25, seed=9)
        segs, outs, _ = model.forward_trajectory(obs, times, targets, valid)
        assert len(segs) == 3
        assert segs[-1].obs.shape[1] == 5

    def test_causality_across_segments(self):
        cfg = tiny_cfg(context_len=4)
        model = ElmurModel(cfg, seed=0)
        obs, times, targets, valid = traj(2, 12, seed=10)
        _, outs1, _ = model.forward_trajectory(obs, times, targets, valid, seed=3)
        mutated = obs.copy()
        mutated[:, 8:] += 5.0  # touch only the last segment
        _, outs2, _ = model.forward_trajectory(mutated, times, targets, valid, seed=3)
        for i in range(2):
            assert np.array_equal(outs1[i].data, outs2[i].data)
        assert not np.array_equal(outs1[2].data, outs2[2].data)

    def test_write_count_matches_segments(self):
        cfg = tiny_cfg(context_len=4, mem_slots=2)
        model = ElmurModel(cfg, seed=0)
        obs, times, targets, valid = traj(1, 12, seed=11)
        _, _, states = model.forward_trajectory(obs, times, targets, valid)
        # 3 segments on 2 slots: anchors show the two most recent writes
        for st in states:
            np.testing.assert_array_equal(np.sort(st.p[0]), [7, 11])

    def test_empty_trajectory_rejected(self):
        model = ElmurModel(tiny_cfg(), seed=0)
        with pytest.raises(ValueError):
            model.forward_trajectory(np.zeros((1, 0, 3)), np.zeros((1, 0)),
                                     np.zeros((1, 0)), np.zeros((1, 0)))

    def test_shared_memory_single_state(self):
        cfg = tiny_cfg(shared_memory=True)
        model = ElmurModel(cfg, seed=0)
        assert len(model.init_memory(1)) == 1
        obs, times, targets, valid = traj(1, 8, seed=12)
        _, _, states = model.forward_trajectory(obs, times, targets, valid)
        assert len(states) == 1

    def test_detached_state_is_plain_array(self):
        model = ElmurModel(tiny_cfg(), seed=0)
        obs, times, targets, valid = traj(1, 4, seed=13)
        _, _, states = model.forward_trajectory(obs, times, targets, valid, detach=True)
        assert isinstance(states[0].m, np.ndarray)
        _, _, states = model.forward_trajectory(obs, times, targets, valid, detach=False)
        assert isinstance(states[0].m, nc.Tensor)


class TestCountParameters:
    def test_hand_count_tiny_mlp(self):
        # d=4, H=1, 1 layer, mlp hidden 8, obs_dim 3, 3 actions, L=4, D=5
        cfg = ModelConfig(d_model=4, n_layers=1, n_heads=1, mem_slots=1,
                          context_len=4, max_bias_distance=5, ffn="mlp",
                          d_ff_mlp=8, obs_dim=3, n_actions=3)
        model = ElmurModel(cfg, seed=0)
        enc = 3 * 4 + 4
        head = 4 * 3 + 3
        attn = 4 * (4 * 4)          # wq wk wv wo
        addnorm = 2 * 4
        mlp = 4 * 8 + 8 + 8 * 4 + 4
        sa_bias = (2 * 4 - 1) * 1
        mem_bias = (2 * 5 - 1) * 1
        layer = 3 * attn + 5 * addnorm + 2 * mlp + sa_bias + mem_bias
        assert model.count_parameters() == enc + head + layer

    def test_doubling_layers(self):
        cfg1 = tiny_cfg(n_layers=1)
        cfg2 = tiny_cfg(n_layers=2)
        m1 = ElmurModel(cfg1, seed=0).count_parameters()
        m2 = ElmurModel(cfg2, seed=0).count_parameters()
        edges = 3 * 8 + 8 + 8 * 3 + 3  # encoder + head
        assert m2 - m1 == m1 - edges

    def test_zero_layers(self):
        cfg = tiny_cfg(n_layers=0)
        model = ElmurModel(cfg, seed=0)
        assert model.count_parameters() == (3 * 8 + 8) + (8 * 3 + 3)
