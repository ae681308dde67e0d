"""LRU slot store and retention-theory tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elmur import memory
from elmur.memory import LruConfig, MemoryState


def fresh_state(batch=1, slots=3, dim=2):
    return MemoryState(
        np.zeros((batch, slots, dim)),
        np.full((batch, slots), -1, dtype=np.int64),
    )


class TestLruConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            LruConfig(slots=0, blend=0.5)
        with pytest.raises(ValueError):
            LruConfig(slots=1, blend=1.5)
        with pytest.raises(ValueError):
            LruConfig(slots=1, blend=0.5, init_std=-1.0)


class TestLruInit:
    def test_zero_std(self):
        state = memory.lru_init(LruConfig(2, 0.5, 0.0), batch=3, dim=4, seed=0)
        assert np.all(state.m == 0.0)
        assert np.all(state.p == -1)

    def test_sample_statistics(self):
        sigma = 0.3
        state = memory.lru_init(LruConfig(100, 0.5, sigma), batch=1, dim=100, seed=1)
        vals = state.m.ravel()
        n = vals.size
        assert abs(vals.mean()) < 3 * sigma / math.sqrt(n)
        se_std = sigma / math.sqrt(2 * (n - 1))
        assert abs(vals.std(ddof=1) - sigma) < 3 * se_std

    def test_seed_determinism(self):
        cfg = LruConfig(4, 0.5, 0.1)
        a = memory.lru_init(cfg, 2, 8, seed=7)
        b = memory.lru_init(cfg, 2, 8, seed=7)
        assert np.array_equal(a.m, b.m) and np.array_equal(a.p, b.p)


class TestLruUpdate:
    def test_fresh_write_fills_slot_zero(self):
        state = fresh_state(slots=3)
        u = np.arange(6, dtype=float).reshape(1, 3, 2)
        out = memory.lru_update(state, u, 0, LruConfig(3, 0.5))
        np.testing.assert_array_equal(out.m[0, 0], u[0, 0])
        np.testing.assert_array_equal(out.p, [[0, -1, -1]])

    def test_fill_order_then_lru(self):
        cfg = LruConfig(3, 0.5)
        state = fresh_state(slots=3)
        for t in range(3):
            u = np.full((1, 3, 2), float(t + 1))
            state = memory.lru_update(state, u, t, cfg)
            assert state.p[0, t] == t
        # all filled: oldest is slot 0
        state = memory.lru_update(state, np.zeros((1, 3, 2)), 3, cfg)
        np.testing.assert_array_equal(state.p, [[3, 1, 2]])

    def test_blend_lambda_zero_keeps_content(self):
        cfg = LruConfig(1, 0.0)
        state = MemoryState(np.ones((1, 1, 2)), np.array([[0]], dtype=np.int64))
        out = memory.lru_update(state, np.full((1, 1, 2), 9.0), 1, cfg)
        np.testing.assert_array_equal(out.m, state.m)
        assert out.p[0, 0] == 1

    def test_blend_lambda_one_overwrites(self):
        cfg = LruConfig(1, 1.0)
        state = MemoryState(np.ones((1, 1, 2)), np.array([[0]], dtype=np.int64))
        u = np.full((1, 1, 2), 9.0)
        out = memory.lru_update(state, u, 1, cfg)
        np.testing.assert_array_equal(out.m, u)

    def test_untouched_slots_bit_identical(self):
        rng = np.random.default_rng(0)
        cfg = LruConfig(4, 0.3)
        state = MemoryState(rng.normal(size=(2, 4, 3)), np.array([[5, 2, 7, 3], [1, 9, 4, 6]], dtype=np.int64))
        before = state.m.copy()
        out = memory.lru_update(state, rng.normal(size=(2, 4, 3)), 10, cfg)
        # oldest per row: slot 1 (row 0), slot 0 (row 1)
        untouched0 = [0, 2, 3]
        assert np.array_equal(out.m[0, untouched0], before[0, untouched0])
        assert np.array_equal(out.m[1, 1:], before[1, 1:])

    def test_exactly_one_anchor_changes(self):
        rng = np.random.default_rng(1)
        cfg = LruConfig(3, 0.5)
        state = MemoryState(rng.normal(size=(2, 3, 2)), np.array([[0, 1, 2], [2, 0, 1]], dtype=np.int64))
        out = memory.lru_update(state, rng.normal(size=(2, 3, 2)), 5, cfg)
        assert (out.p != state.p).sum(axis=1).tolist() == [1, 1]

    def test_argmin_tie_lowest_index(self):
        cfg = LruConfig(3, 0.5)
        state = MemoryState(np.zeros((1, 3, 1)), np.array([[4, 4, 4]], dtype=np.int64))
        out = memory.lru_update(state, np.ones((1, 3, 1)), 5, cfg)
        np.testing.assert_array_equal(out.p, [[5, 4, 4]])

    def test_non_increasing_time_rejected(self):
        cfg = LruConfig(2, 0.5)
        state = MemoryState(np.zeros((1, 2, 1)), np.array([[3, 1]], dtype=np.int64))
        with pytest.raises(ValueError):
            memory.lru_update(state, np.ones((1, 2, 1)), 3, cfg)

    def test_lru_disabled_always_blends_slot_zero(self):
        cfg = LruConfig(3, 0.5)
        state = fresh_state(slots=3)
        u = np.full((1, 3, 2), 2.0)
        out = memory.lru_update(state, u, 0, cfg, lru_enabled=False)
        # no empty-fill: slot 0 gets the blend even on a fresh state
        np.testing.assert_array_equal(out.m[0, 0], [1.0, 1.0])
        np.testing.assert_array_equal(out.p, [[0, -1, -1]])
        out2 = memory.lru_update(out, u, 1, cfg, lru_enabled=False)
        assert out2.p[0, 0] == 1 and out2.p[0, 1] == -1


class TestForgettingCoefficients:
    def test_k_zero(self):
        initial, writes = memory.forgetting_coefficients(0.5, 0)
        assert initial == 1.0 and writes == []

    def test_hand_case(self):
        initial, writes = memory.forgetting_coefficients(0.5, 2)
        assert initial == 0.25
        np.testing.assert_allclose(writes, [0.25, 0.5])

    def test_matches_chained_updates(self):
        lam, k = 0.5, 2
        cfg = LruConfig(1, lam)
        # scalar slot, one-hot writes: track each contribution separately
        state = MemoryState(np.array([[[1.0]]]), np.array([[0]], dtype=np.int64))
        writes = [3.0, 5.0]
        for t, w in enumerate(writes, start=1):
            state = memory.lru_update(state, np.array([[[w]]]), t, cfg)
        initial, ws = memory.forgetting_coefficients(lam, k)
        expect = initial * 1.0 + sum(c * w for c, w in zip(ws, writes))
        np.testing.assert_allclose(state.m[0, 0, 0], expect, rtol=1e-12)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            memory.forgetting_coefficients(1.5, 3)
        with pytest.raises(ValueError):
            memory.forgetting_coefficients(0.5, -1)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.0, 1.0, allow_nan=False),
    st.integers(0, 60),
)
def test_coefficients_convex(lam, k):
    initial, writes = memory.forgetting_coefficients(lam, k)
    assert initial >= 0.0 and all(w >= 0.0 for w in writes)
    assert abs(initial + sum(writes) - 1.0) < 1e-12


class TestHalfLife:
    def test_half(self):
        assert memory.half_life(0.5) == 1.0

    def test_small_lambda_asymptote(self):
        lam = 1e-3
        exact = memory.half_life(lam)
        asymptote = math.log(2.0) / lam
        assert abs(exact - asymptote) / asymptote < 1e-3
        assert abs(exact - 692.8005) < 0.001

    @pytest.mark.parametrize("lam", [0.05, 0.2, 0.5, 0.8])
    def test_simulated_crossing(self, lam):
        k = 0
        w = 1.0
        while w > 0.5:
            w *= 1.0 - lam
            k += 1
        assert k == math.ceil(memory.half_life(lam))

    def test_lambda_one_is_zero(self):
        assert memory.half_life(1.0) == 0.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            memory.half_life(0.0)


class TestEffectiveHorizon:
    def test_unit_case(self):
        assert memory.effective_horizon(1, 1, 0.5, 0.5) == 1.0

    def test_default_operating_point(self):
        # M=2 slots, L=10 segment steps, blend 0.05, half weight
        h = memory.effective_horizon(2, 10, 0.05, 0.5)
        assert abs(h - 20 * math.log(0.5) / math.log(0.95)) < 1e-9
        assert abs(h - 270.268146679) < 1e-6

    def test_eps_one_is_zero(self):
        assert memory.effective_horizon(3, 7, 0.3, 1.0) == 0.0

    def test_domain_errors(self):
        for lam in (0.0, 1.0):
            with pytest.raises(ValueError):
                memory.effective_horizon(2, 10, lam, 0.5)
        with pytest.raises(ValueError):
            memory.effective_horizon(0, 10, 0.5, 0.5)


class TestBoundedness:
    def test_lambda_zero_constant_once_filled(self):
        # no blending on a filled state: content never changes
        cfg = LruConfig(2, 0.0)
        rng = np.random.default_rng(5)
        state = MemoryState(rng.normal(size=(1, 2, 3)), np.array([[0, 1]], dtype=np.int64))
        before = state.m.copy()
        for t in range(2, 30):
            state = memory.lru_update(state, rng.normal(size=(1, 2, 3)), t, cfg)
        np.testing.assert_array_equal(state.m, before)

    def test_bounded_writes_stay_bounded(self):
        for lam in (0.1, 0.5, 0.9):
            assert memory.verify_boundedness(1.0, lam, 10_000, seed=3) <= 1.0 + 1e-9

    def test_alternating_full_overwrite(self):
        C = 2.0
        cfg = LruConfig(1, 1.0)
        state = MemoryState(np.array([[[C, 0.0]]]), np.array([[0]], dtype=np.int64))
        for t in range(1, 20):
            sign = 1.0 if t % 2 == 0 else -1.0
            u = np.array([[[sign * C, 0.0]]])
            state = memory.lru_update(state, u, t, cfg)
            assert np.linalg.norm(state.m[0, 0]) == C


class TestClosedFormEquivalence:
    @pytest.mark.parametrize("lam", [0.05, 0.2, 0.5, 0.8, 1.0])
    def test_eq_unroll_matches_simulation(self, lam):
        cfg = LruConfig(1, lam)
        rng = np.random.default_rng(17)
        m0 = float(rng.normal())
        writes = rng.normal(size=50)
        state = MemoryState(np.array([[[m0]]]), np.array([[0]], dtype=np.int64))
        for k in range(1, 51):
            state = memory.lru_update(state, np.array([[[writes[k - 1]]]]), k, cfg)
            initial, ws = memory.forgetting_coefficients(lam, k)
            expect = initial * m0 + float(np.dot(ws, writes[:k]))
            assert abs(state.m[0, 0, 0] - expect) < 1e-12


class TestFillOrderProperty:
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_first_m_updates_fill_in_order(self, slots, seed):
        rng = np.random.default_rng(seed)
        cfg = LruConfig(slots, 0.5)
        state = memory.lru_init(cfg, batch=1, dim=2, seed=seed)
        for t in range(slots):
            u = rng.normal(size=(1, slots, 2))
            state = memory.lru_update(state, u, t, cfg)
            np.testing.assert_array_equal(state.m[0, t], u[0, t])
            assert state.p[0, t] == t
