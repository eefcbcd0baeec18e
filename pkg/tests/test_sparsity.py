import io

import numpy as np
import pytest

from sparselab.autograd import Tensor
from sparselab.sparsity import (SparseLayerState, SparsityError,
                                TopologySchedule, allocate_density,
                                export_masks, grow_step, import_masks,
                                init_mask, prune_step, topology_update)

RNG = np.random.default_rng


def _solve_budget_oracle(shapes, method, density):
    """Independent bisection on the global scale c for the capped allocation."""
    from sparselab.sparsity import _layer_scale
    sizes = np.array([np.prod(s) for _, s in shapes], dtype=float)
    scales = np.array([_layer_scale(s, method) for _, s in shapes])
    budget = density * sizes.sum()

    def used(c):
        return (np.minimum(1.0, c * scales) * sizes).sum()

    lo, hi = 0.0, 1.0
    while used(hi) < budget - 1e-9:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if used(mid) < budget:
            lo = mid
        else:
            hi = mid
    c = 0.5 * (lo + hi)
    return np.minimum(1.0, c * scales)


class TestAllocateDensity:
    SHAPES = [("conv1", (64, 3, 3, 3)), ("conv2", (128, 64, 3, 3)),
              ("conv3", (256, 128, 3, 3)), ("fc", (256, 10))]

    def test_uniform(self):
        alloc = allocate_density(self.SHAPES, "uniform", 0.05)
        assert all(d == 0.05 for _, d in alloc.per_layer)

    def test_dense_limit(self):
        for method in ("uniform", "er", "erk"):
            alloc = allocate_density(self.SHAPES, method, 1.0)
            assert all(d == 1.0 for _, d in alloc.per_layer)

    def test_smaller_layer_gets_higher_density(self):
        shapes = [("big", (100, 100)), ("small", (10, 10))]
        alloc = allocate_density(shapes, "erk", 0.1)
        assert alloc.density_of("small") > alloc.density_of("big")

    def test_budget_meets_global_density(self):
        rng = RNG(0)
        for trial in range(12):
            n_layers = rng.integers(2, 6)
            shapes = []
            for li in range(n_layers):
                if rng.random() < 0.5:
                    shapes.append((f"c{li}", (int(rng.integers(4, 64)),
                                              int(rng.integers(1, 32)), 3, 3)))
                else:
                    shapes.append((f"l{li}", (int(rng.integers(8, 256)),
                                              int(rng.integers(2, 64)))))
            density = float(rng.uniform(0.01, 0.6))
            method = "erk" if trial % 2 else "er"
            alloc = allocate_density(shapes, method, density)
            sizes = np.array([np.prod(s) for _, s in shapes], dtype=float)
            ds = np.array([d for _, d in alloc.per_layer])
            realized = (ds * sizes).sum() / sizes.sum()
            assert realized == pytest.approx(density, rel=1e-6)
            assert (ds <= 1.0 + 1e-12).all()
            oracle = _solve_budget_oracle(shapes, method, density)
            np.testing.assert_allclose(ds, oracle, rtol=1e-6, atol=1e-9)

    def test_rejects_bad_density(self):
        with pytest.raises(SparsityError):
            allocate_density(self.SHAPES, "erk", 0.0)
        with pytest.raises(SparsityError):
            allocate_density(self.SHAPES, "erk", 1.5)
        with pytest.raises(SparsityError):
            allocate_density([], "erk", 0.5)


class TestInitMask:
    def test_dense_limit_all_ones(self):
        mask = init_mask((4, 4), 1.0, RNG(0))
        np.testing.assert_array_equal(mask, 1.0)

    def test_exact_cardinality(self):
        mask = init_mask((10,), 0.5, RNG(1))
        assert int(mask.sum()) == 5

    def test_seed_determinism(self):
        a = init_mask((8, 8), 0.3, RNG(7))
        b = init_mask((8, 8), 0.3, RNG(7))
        np.testing.assert_array_equal(a, b)
        c = init_mask((8, 8), 0.3, RNG(8))
        assert (a != c).any()

    def test_rejects_dead_layer(self):
        with pytest.raises(SparsityError, match="dead"):
            init_mask((100,), 0.001, RNG(0))


def _random_state(seed, size=40, density=0.5):
    rng = RNG(seed)
    w = Tensor(rng.normal(size=size).astype(np.float32), requires_grad=True)
    return SparseLayerState.create("w", w, density, rng), rng


class TestPruneGrow:
    def test_prune_zero_rate_is_noop(self):
        state, _ = _random_state(0)
        before = state.mask.copy()
        pruned, _ = prune_step(state, 0.0)
        assert pruned.size == 0
        np.testing.assert_array_equal(state.mask, before)

    def test_prunes_smallest_magnitudes(self):
        w = Tensor(np.array([0.1, 0.5, 0.9, 0.3], dtype=np.float32),
                   requires_grad=True)
        state = SparseLayerState("w", w, np.ones(4, dtype=np.float32), 4)
        pruned, old = prune_step(state, 0.5)
        assert sorted(pruned.tolist()) == [0, 3]
        np.testing.assert_allclose(sorted(np.abs(old)), [0.1, 0.3])
        assert state.weight.data[0] == 0.0 and state.weight.data[3] == 0.0

    def test_prune_matches_full_sort_oracle(self):
        for seed in range(30):
            state, _ = _random_state(seed, size=64, density=0.6)
            r = RNG(seed + 1000).uniform(0, 0.9)
            active = np.flatnonzero(state.mask.reshape(-1))
            mags = np.abs(state.weight.data.reshape(-1)[active])
            k = int(round(r * state.target_nnz))
            oracle = set(active[np.argsort(mags, kind="stable")[:k]].tolist())
            pruned, _ = prune_step(state, r)
            assert set(pruned.tolist()) == oracle

    def test_grow_by_gradient_picks_largest(self):
        w = Tensor(np.zeros(5, dtype=np.float32), requires_grad=True)
        mask = np.array([1, 0, 0, 0, 1], dtype=np.float32)
        state = SparseLayerState("w", w, mask, 3)
        grad = np.array([9.0, 0.2, 0.7, 0.4, 9.0], dtype=np.float32)
        grow_step(state, 1, "gradient", dense_grad=grad, excluded=np.array([4]))
        assert state.mask[2] == 1.0 and state.weight.data[2] == 0.0

    def test_grow_requires_inputs(self):
        state, _ = _random_state(3)
        pruned, old = prune_step(state, 0.3)
        with pytest.raises(SparsityError, match="dense gradients"):
            grow_step(state, len(pruned), "gradient", excluded=pruned)
        with pytest.raises(SparsityError, match="rng"):
            grow_step(state, len(pruned), "random", excluded=pruned)

    def test_grow_restores_largest_pruned_when_pool_short(self):
        # fully dense layer: pruning leaves no candidates outside the pruned set
        w = Tensor(np.array([0.4, -0.9, 0.1], dtype=np.float32), requires_grad=True)
        state = SparseLayerState("w", w, np.ones(3, dtype=np.float32), 3)
        pruned, old = prune_step(state, 2 / 3)
        assert sorted(pruned.tolist()) == [0, 2]
        grow_step(state, 2, "gradient", dense_grad=np.zeros(3, np.float32),
                  excluded=pruned, excluded_values=old)
        assert state.nnz == 3
        assert state.weight.data[0] == pytest.approx(0.4)

    def test_hundred_cycles_conserve_density(self):
        state, rng = _random_state(9, size=80, density=0.4)
        sched = TopologySchedule(r0=0.5, delta_t=1, t_end=100, growth="random")
        for t in range(1, 101):
            r = sched.rate(t)
            pruned, old = prune_step(state, r)
            grow_step(state, len(pruned), "random", rng=rng,
                      excluded=pruned, excluded_values=old)
            assert state.nnz == state.target_nnz
            masked = state.weight.data.reshape(-1)[state.mask.reshape(-1) == 0]
            np.testing.assert_array_equal(masked, 0.0)


class TestSchedule:
    def test_rate_endpoints(self):
        sched = TopologySchedule(r0=0.3, delta_t=10, t_end=100)
        assert sched.rate(0) == pytest.approx(0.3)
        assert sched.rate(100) == pytest.approx(0.0, abs=1e-12)
        assert sched.rate(101) == 0.0

    def test_cosine_midpoint(self):
        sched = TopologySchedule(r0=0.4, delta_t=10, t_end=100)
        assert sched.rate(50) == pytest.approx(0.2)

    def test_update_steps(self):
        sched = TopologySchedule(r0=0.3, delta_t=10, t_end=75)
        hits = [t for t in range(0, 120) if sched.is_update_step(t)]
        assert hits == [10, 20, 30, 40, 50, 60, 70]

    def test_validation(self):
        with pytest.raises(SparsityError):
            TopologySchedule(r0=1.0)
        with pytest.raises(SparsityError):
            TopologySchedule(growth="momentum")


class TestTopologyUpdate:
    def test_hand_simulated_two_layer_update(self):
        # independently scripted prune-then-grow on known numbers
        wa = Tensor(np.array([0.05, 0.8, -0.02, 0.6], dtype=np.float32),
                    requires_grad=True)
        sa = SparseLayerState("a", wa, np.array([1, 1, 1, 0], np.float32), 3)
        wb = Tensor(np.array([-0.3, 0.0, 0.9, 0.0, 0.1, -0.7], dtype=np.float32),
                    requires_grad=True)
        sb = SparseLayerState("b", wb, np.array([1, 0, 1, 0, 1, 1], np.float32), 4)
        sched = TopologySchedule(r0=2 / 3, delta_t=5, t_end=10, growth="gradient")
        grads = {"a": np.array([0, 0, 0, 5.0], np.float32),
                 "b": np.array([0, 7.0, 0, 2.0, 0, 0], np.float32)}
        # at t=5: r = (r0/2)(1+cos(pi/2)) = r0/2 = 1/3
        # layer a: k=round(3/3)=1, prune idx2 (|w|=.02); grow idx3 (only candidate)
        # layer b: k=round(4/3)=1, prune idx4 (|w|=.1); grow idx1 (|g|=7 > 2)
        topology_update([sa, sb], sched, 5, dense_grads=grads)
        np.testing.assert_array_equal(sa.mask, [1, 1, 0, 1])
        np.testing.assert_array_equal(sb.mask, [1, 1, 1, 0, 0, 1])
        assert wa.data[3] == 0.0 and wb.data[1] == 0.0

    def test_zero_rate_is_noop(self):
        state, _ = _random_state(11)
        sched = TopologySchedule(r0=0.3, delta_t=5, t_end=10, growth="gradient")
        before_mask = state.mask.copy()
        before_w = state.weight.data.copy()
        topology_update([state], sched, 12, dense_grads=None)  # past t_end
        np.testing.assert_array_equal(state.mask, before_mask)
        np.testing.assert_array_equal(state.weight.data, before_w)

    def test_missing_gradients_rejected(self):
        state, _ = _random_state(12)
        sched = TopologySchedule(r0=0.3, delta_t=5, t_end=10, growth="gradient")
        with pytest.raises(SparsityError, match="dense gradients"):
            topology_update([state], sched, 5, dense_grads=None)


def test_mask_snapshot_roundtrip():
    state_a, _ = _random_state(20, size=24, density=0.5)
    state_b, _ = _random_state(21, size=12, density=0.25)
    state_b.name = "layer_b"
    buf = io.BytesIO()
    export_masks([state_a, state_b], buf)
    buf.seek(0)
    masks = import_masks(buf)
    np.testing.assert_array_equal(masks["w"], state_a.mask)
    np.testing.assert_array_equal(masks["layer_b"], state_b.mask)
