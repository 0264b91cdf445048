"""Bench harness tests: batch sizing, determinism of work, FLOP columns."""

import numpy as np
import pytest

from attnshare.bench import bench
from attnshare.config import LisaLayerConfig, ModelConfig, SharingConfig
from attnshare.costs import CostShape, LayerKind, decode_flops_per_token
from attnshare.errors import ConfigError
from attnshare.model import Model, init_weights
from attnshare.sharing import init_lisa_params


@pytest.fixture(scope="module")
def shared_model():
    cfg = ModelConfig(n_layers=4, d=32, h=4, h_kv=4, d_k=8, d_ff=32,
                      vocab=258, max_len=128)
    lcfg = LisaLayerConfig(variant="sl", r_q=2, r_k=2)
    sharing = SharingConfig.uniform([2, 3], "lisa", lcfg)
    params = {i: init_lisa_params(cfg, lcfg, np.random.default_rng(i))
              for i in (2, 3)}
    return Model(cfg, init_weights(cfg, seed=0), sharing, params)


class TestBench:
    def test_rows_and_flop_inequality(self, shared_model):
        rows = bench(shared_model, [(8, 8), (16, 8)], 1 << 18, repeats=1)
        configs = {r.config for r in rows}
        assert configs == {"baseline", "shared"}
        by_shape = {}
        for r in rows:
            by_shape.setdefault((r.l_in, r.l_out), {})[r.config] = r
        for shape, pair in by_shape.items():
            assert (pair["shared"].decode_flops_per_token
                    < pair["baseline"].decode_flops_per_token), shape
            assert (pair["shared"].kv_bytes_per_stream
                    < pair["baseline"].kv_bytes_per_stream), shape

    def test_batch_grows_with_budget(self, shared_model):
        small = bench(shared_model, [(8, 8)], 1 << 16, repeats=1)
        large = bench(shared_model, [(8, 8)], 1 << 22, repeats=1)
        assert large[0].batch > small[0].batch

    def test_shape_exceeding_max_len_rejected(self, shared_model):
        with pytest.raises(ConfigError):
            bench(shared_model, [(200, 200)], 1 << 20, repeats=1)

    def test_flops_match_cost_model(self, shared_model):
        rows = bench(shared_model, [(8, 8)], 1 << 18, repeats=1)
        shape = CostShape.from_model_config("bench", shared_model.config)
        base = [LayerKind()] * 4
        want = decode_flops_per_token(shape, 16, base)
        got = [r for r in rows if r.config == "baseline"][0]
        assert got.decode_flops_per_token == want
