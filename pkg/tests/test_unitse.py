import copy

import numpy as np
import pytest

from mmolre import tensor as tt
from mmolre.tensor import ShapeError, Tensor
from mmolre.unitse import (
    ExpertParams,
    MoLREConfig,
    init_block,
    init_expert,
    init_router,
    init_unitse,
    low_rank_expert_forward,
    molre_layer_forward,
    router_gates,
    top_k_select,
    unitse_forward,
)
from oracles import expert_ref, molre_ref, router_ref


def small_cfg(d=8, n=5, k=3, rank=2, blocks=2):
    return MoLREConfig(d=d, n_experts=n, top_k=k, shared_ranks=[rank] * n, task_rank=rank, num_blocks=blocks)


def zero_expert(p: ExpertParams):
    for t in (p.w1, p.b1, p.w2, p.b2):
        t.data[...] = 0.0


class TestConfig:
    def test_defaults(self):
        cfg = MoLREConfig()
        assert (cfg.d, cfg.n_experts, cfg.top_k, cfg.task_rank) == (768, 15, 8, 128)
        assert cfg.shared_ranks == [128] * 15
        assert cfg.kernel_sizes == (3, 1)

    def test_heterogeneous_ranks(self):
        cfg = MoLREConfig(shared_ranks=[16 + 8 * n for n in range(15)])
        assert cfg.shared_ranks[-1] == 128

    @pytest.mark.parametrize(
        "kwargs",
        [dict(top_k=0), dict(top_k=16), dict(shared_ranks=[128] * 14), dict(task_rank=769), dict(kernel_sizes=(2, 1))],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            MoLREConfig(**kwargs)


class TestExpert:
    def test_zero_params_give_zero(self, rng):
        p = init_expert(rng, 8, 2)
        zero_expert(p)
        out = low_rank_expert_forward(Tensor(rng.normal(size=(5, 8))), p)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_full_width_shape(self, rng):
        p = init_expert(rng, 768, 128)
        out = low_rank_expert_forward(Tensor(rng.normal(size=(7, 768))), p)
        assert out.shape == (7, 768)

    def test_matches_composed_oracle(self, rng):
        p = init_expert(rng, 8, 2)
        p.b1.data[...] = rng.normal(size=2)
        x = rng.normal(size=(4, 8))
        np.testing.assert_allclose(low_rank_expert_forward(Tensor(x), p).data, expert_ref(x, p), atol=1e-12)

    def test_kernel_three_three(self, rng):
        p = init_expert(rng, 8, 2, (3, 3))
        x = rng.normal(size=(6, 8))
        assert p.w2.shape == (3, 2, 8)
        np.testing.assert_allclose(low_rank_expert_forward(Tensor(x), p).data, expert_ref(x, p), atol=1e-12)

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            low_rank_expert_forward(Tensor(np.zeros((3, 6))), init_expert(rng, 8, 2))


class TestRouter:
    def test_zero_params_uniform(self, rng):
        p = init_router(rng, 8, 4)
        for t in (p.w1, p.b1, p.w2, p.b2, p.proj, p.proj_b):
            t.data[...] = 0.0
        np.testing.assert_allclose(router_gates(Tensor(rng.normal(size=(3, 8))), p).data, [0.25] * 4, atol=1e-15)

    def test_matches_pipeline_oracle(self, rng):
        p = init_router(rng, 8, 4)
        p.b1.data[...] = rng.normal(size=2)
        x = rng.normal(size=(3, 8))
        np.testing.assert_allclose(router_gates(Tensor(x), p).data, router_ref(x, p), atol=1e-10)

    def test_empty_sequence(self, rng):
        with pytest.raises(ShapeError):
            router_gates(Tensor(np.zeros((0, 8))), init_router(rng, 8, 4))

    def test_d_not_divisible_by_four(self, rng):
        with pytest.raises(ValueError):
            init_router(rng, 6, 3)


class TestTopK:
    def test_full(self):
        assert [i for i, _ in top_k_select([0.1, 0.6, 0.3], 3)] == [1, 2, 0]

    def test_ordered(self):
        assert top_k_select([0.5, 0.3, 0.2], 2) == [(0, 0.5), (1, 0.3)]

    def test_ties_lowest_index(self):
        assert top_k_select([0.25] * 4, 2) == [(0, 0.25), (1, 0.25)]

    @pytest.mark.parametrize("k", [0, 4])
    def test_out_of_range(self, k):
        with pytest.raises(ValueError):
            top_k_select([0.5, 0.3, 0.2], k)


class TestMoLRELayer:
    def test_degenerate_single_expert(self, rng):
        cfg = small_cfg(n=1, k=1)
        block = init_block(rng, cfg)
        x = Tensor(rng.normal(size=(4, 8)))
        h = molre_layer_forward(x, block, "SA", cfg).data
        expected = low_rank_expert_forward(x, block.shared[0]).data + low_rank_expert_forward(x, block.task_experts["SA"]).data
        np.testing.assert_allclose(h, expected, atol=1e-14)

    def test_zero_experts_zero_output(self, rng):
        cfg = small_cfg()
        block = init_block(rng, cfg)
        for e in block.shared + list(block.task_experts.values()):
            zero_expert(e)
        np.testing.assert_array_equal(molre_layer_forward(Tensor(rng.normal(size=(4, 8))), block, "ER", cfg).data, 0.0)

    def test_matches_enumeration_oracle(self, rng):
        cfg = small_cfg(n=5, k=3)
        block = init_block(rng, cfg)
        x = rng.normal(size=(4, 8))
        np.testing.assert_allclose(
            molre_layer_forward(Tensor(x), block, "SA", cfg).data, molre_ref(x, block, "SA", 3), atol=1e-10
        )

    def test_batched_matches_per_sample(self, rng):
        cfg = small_cfg(n=5, k=2)
        block = init_block(rng, cfg)
        x = rng.normal(size=(6, 4, 8))
        batched = molre_layer_forward(Tensor(x), block, "ER", cfg).data
        for i in range(6):
            np.testing.assert_allclose(batched[i], molre_ref(x[i], block, "ER", 2), atol=1e-10)

    def test_unknown_task(self, rng):
        cfg = small_cfg()
        with pytest.raises(KeyError):
            molre_layer_forward(Tensor(np.zeros((2, 8))), init_block(rng, cfg), "XX", cfg)

    def test_gates_not_renormalized(self, rng):
        cfg = small_cfg(n=4, k=2)
        block = init_block(rng, cfg)
        x = Tensor(rng.normal(size=(3, 8)))
        gates = router_gates(x, block.routers["SA"]).data
        chosen = top_k_select(gates, 2)
        assert sum(g for _, g in chosen) < 1.0
        expected = low_rank_expert_forward(x, block.task_experts["SA"]).data
        for n, g in chosen:
            expected = expected + g * low_rank_expert_forward(x, block.shared[n]).data
        np.testing.assert_allclose(molre_layer_forward(x, block, "SA", cfg).data, expected, atol=1e-12)

    def test_unselected_experts_get_zero_grad(self, rng):
        cfg = small_cfg(n=5, k=2)
        block = init_block(rng, cfg)
        x = Tensor(rng.normal(size=(4, 8)))
        chosen = {i for i, _ in top_k_select(router_gates(x, block.routers["SA"]).data, 2)}
        tt.sum(molre_layer_forward(x, block, "SA", cfg)).backward()
        for n, e in enumerate(block.shared):
            norms = [np.abs(t.grad).sum() for t in (e.w1, e.w2, e.b2)]
            if n in chosen:
                assert all(v > 0 for v in norms)
            else:
                assert all(v == 0.0 for v in norms)


class TestUniTSE:
    def test_symmetric_task_params_give_identical_streams(self, rng):
        cfg = small_cfg()
        blocks = init_unitse(rng, cfg)
        for b in blocks:
            b.task_experts["ER"] = copy.deepcopy(b.task_experts["SA"])
            b.routers["ER"] = copy.deepcopy(b.routers["SA"])
        out = unitse_forward(Tensor(rng.normal(size=(5, 8))), blocks, cfg)
        assert out["SA"].data.tobytes() == out["ER"].data.tobytes()

    def test_full_width_two_blocks(self, rng):
        cfg = MoLREConfig(d=768, n_experts=2, top_k=1, shared_ranks=[16, 16], task_rank=16)
        out = unitse_forward(Tensor(rng.normal(size=(6, 768))), init_unitse(rng, cfg), cfg)
        assert out["SA"].shape == out["ER"].shape == (6, 768)

    def test_single_block_is_one_layer(self, rng):
        cfg = small_cfg(blocks=1)
        blocks = init_unitse(rng, cfg)
        x = Tensor(rng.normal(size=(4, 8)))
        out = unitse_forward(x, blocks, cfg)
        for task in cfg.tasks:
            assert out[task].data.tobytes() == molre_layer_forward(x, blocks[0], task, cfg).data.tobytes()

    def test_second_block_routes_on_first_block_output(self, rng):
        cfg = small_cfg(blocks=2)
        blocks = init_unitse(rng, cfg)
        x = rng.normal(size=(4, 8))
        h1 = molre_ref(x, blocks[0], "SA", cfg.top_k)
        h2 = molre_ref(h1, blocks[1], "SA", cfg.top_k)
        np.testing.assert_allclose(unitse_forward(Tensor(x), blocks, cfg)["SA"].data, h2, atol=1e-10)

    def test_block_count_checked(self, rng):
        cfg = small_cfg(blocks=2)
        with pytest.raises(ValueError):
            unitse_forward(Tensor(np.zeros((2, 8))), [], cfg)
        with pytest.raises(ValueError):
            unitse_forward(Tensor(np.zeros((2, 8))), init_unitse(rng, cfg)[:1], cfg)
