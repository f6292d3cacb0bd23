import json

import numpy as np
import pytest

from mmolre import tensor as tt
from mmolre.cost import (
    Conv1dDesc,
    ExpertDesc,
    FusionDesc,
    MoLRELayerDesc,
    RouterDesc,
    compare_moe,
    count_expert_params,
    count_flops,
    count_model_params,
    count_router_params,
)
from mmolre.fusion import FusionConfig, fuse, init_fusion
from mmolre.model import VARIANTS, build_variant
from mmolre.tensor import Tensor
from mmolre.unitse import (
    MoLREConfig,
    init_block,
    init_expert,
    init_router,
    low_rank_expert_forward,
    molre_layer_forward,
    router_gates,
    top_k_select,
)


def measured(fn) -> int:
    with tt.count_flops() as counter:
        fn()
    return sum(counter.values())


class TestParameterCounts:
    def test_low_rank_expert(self):
        assert count_expert_params(768, 128) == 394_112

    def test_full_rank_expert(self):
        assert count_expert_params(768, 768) == 2_360_832

    def test_tiny_expert(self):
        # d=1, r=1: conv3 weights (3) + bias + conv1 weight + bias
        assert count_expert_params(1, 1) == 6

    def test_matches_built_tensors(self, rng):
        p = init_expert(rng, 8, 3)
        assert sum(t.size for t in p.named_parameters().values()) == count_expert_params(8, 3)
        r = init_router(rng, 8, 5)
        assert sum(t.size for t in r.named_parameters().values()) == count_router_params(8, 5)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_model_count_matches_built(self, variant):
        molre = MoLREConfig(d=8, n_experts=3, top_k=2, shared_ranks=[2, 3, 4], task_rank=2)
        fcfg = FusionConfig(d=8, n_layers=2)
        assert build_variant(variant, molre, fcfg).parameter_count() == count_model_params(variant, molre, fcfg)


class TestAnalyticFlops:
    def test_unit_conv(self):
        assert count_flops(Conv1dDesc(1, 1, 1), 1) == 3

    def test_expert_at_full_width(self, rng):
        p = init_expert(rng, 768, 128)
        x = Tensor(rng.normal(size=(50, 768)))
        assert measured(lambda: low_rank_expert_forward(x, p)) == count_flops(ExpertDesc(768, 128), 50)

    def test_expert_per_token_values(self):
        assert count_flops(ExpertDesc(768, 128), 1) == 787_456
        assert count_flops(ExpertDesc(768, 768), 1) == 4_720_896
        ratio = count_flops(ExpertDesc(768, 768), 50) / count_flops(ExpertDesc(768, 128), 50)
        assert ratio == pytest.approx(4_720_896 / 787_456, rel=1e-12)
        assert ratio == pytest.approx(5.995, abs=1e-3)

    def test_router(self, rng):
        p = init_router(rng, 32, 5)
        x = Tensor(rng.normal(size=(7, 32)))
        assert measured(lambda: router_gates(x, p)) == count_flops(RouterDesc(32, 5), 7)

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_molre_layer_with_selection(self, rng, k):
        cfg = MoLREConfig(d=16, n_experts=4, top_k=k, shared_ranks=[2, 4, 6, 8], task_rank=3)
        block = init_block(rng, cfg)
        x = Tensor(rng.normal(size=(6, 16)))
        chosen = tuple(i for i, _ in top_k_select(router_gates(x, block.routers["SA"]).data, k))
        got = measured(lambda: molre_layer_forward(x, block, "SA", cfg))
        assert got == count_flops(MoLRELayerDesc(cfg, chosen), 6)

    def test_fuse(self, rng):
        cfg = FusionConfig(d=16, n_layers=2, d_ff=24)
        p = init_fusion(rng, cfg)
        h_t, h_a = Tensor(rng.normal(size=(5, 16))), Tensor(rng.normal(size=(3, 16)))
        assert measured(lambda: fuse(h_t, h_a, p)) == count_flops(FusionDesc(cfg, 3), 5)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            count_flops(ExpertDesc(8, 2), 0)
        with pytest.raises(TypeError):
            count_flops(object(), 3)


class TestCompareMoE:
    def test_reference_configuration(self):
        rep = compare_moe(MoLREConfig())
        assert 5.0 <= rep.param_ratio <= 6.2
        assert rep.param_ratio == pytest.approx(5.7256, abs=1e-4)
        assert rep.savings_pct > 80.0
        assert 5.0 <= rep.flop_ratio <= 6.2

    def test_block_totals(self):
        rep = compare_moe(MoLREConfig())
        router = count_router_params(768, 15)
        assert rep.params_lowrank == 17 * 394_112 + 2 * router
        assert rep.params_standard == 17 * 2_360_832 + 2 * router

    def test_full_rank_single_expert_ratio_one(self):
        rep = compare_moe(MoLREConfig(d=64, n_experts=1, top_k=1, shared_ranks=[64], task_rank=64))
        assert rep.param_ratio == 1.0 and rep.flop_ratio == 1.0
        assert rep.savings_pct == 0.0

    def test_monotone_in_rank(self):
        ratios = [
            compare_moe(MoLREConfig(shared_ranks=[r] * 15, task_rank=r)).param_ratio for r in (16, 64, 128, 384)
        ]
        assert ratios == sorted(ratios, reverse=True)

    def test_experts_only_scope(self):
        rep = compare_moe(MoLREConfig(), include_routers=False)
        assert rep.param_ratio == pytest.approx(2_360_832 / 394_112, rel=1e-12)
        with pytest.raises(ValueError):
            compare_moe(MoLREConfig(), include_shared=False, include_task=False, include_routers=False)

    def test_report_serializes(self):
        rep = compare_moe(MoLREConfig(d=32, n_experts=4, top_k=2, shared_ranks=[4] * 4, task_rank=4), T=10)
        data = json.loads(rep.to_json())
        assert data["seq_len"] == 10
        assert data["unitse_params_lowrank"] == 4 * data["params_lowrank"]
        assert np.isfinite(data["flop_ratio"])
