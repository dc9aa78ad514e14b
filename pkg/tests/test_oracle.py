import math

import pytest
from hypothesis import given, settings, strategies as st

from c2csim.errors import ModelError
from c2csim.gemm import (
    GammaCoefficients, GemmWorkload, KernelConfig, oracle_counts, tiling_oracle, traffic_asym, traffic_sym,
)

small = st.builds(
    GemmWorkload,
    m=st.integers(1, 2000), k=st.integers(1, 3000), n=st.integers(1, 2000),
    elem_bytes=st.sampled_from([1, 2, 4]), weight_location=st.sampled_from(["cpu", "hbm"]),
)
tiles = st.builds(KernelConfig, t_m=st.sampled_from([64, 128, 256]), t_n=st.sampled_from([64, 128]),
                  t_k=st.sampled_from([128, 512]))


@settings(max_examples=150, deadline=None)
@given(w=small, cfg=tiles)
def test_sym_traffic_matches_oracle_with_structural_gammas(w, cfg):
    gamma = GammaCoefficients.structural(w, cfg)
    assert traffic_sym(w, cfg, gamma) == tiling_oracle(w, cfg, "sym")


@settings(max_examples=150, deadline=None)
@given(w=small, cfg=tiles)
def test_asym_output_traffic_matches_oracle(w, cfg):
    counts = oracle_counts(w, cfg, "asym")
    gamma = GammaCoefficients.structural(w, cfg)
    e = w.elem_bytes
    assert counts.o_read_bytes + counts.o_write_bytes == gamma.gamma_o * w.m * w.n * e
    assert counts.reductions == math.ceil(w.m / cfg.t_m) * math.ceil(w.n / cfg.t_n) * math.ceil(w.k / cfg.t_k)
    # The oracle keeps no activation reuse across N-tiles.
    assert counts.x_bytes == math.ceil(w.n / cfg.t_n) * w.m * w.k * e
    assert traffic_asym(w, cfg, gamma).c2c_bytes == tiling_oracle(w, cfg, "asym").c2c_bytes


def test_small_case_by_hand():
    # 3x5 output in 2x2 tiles over k=3 split 2+1; bf16.
    w = GemmWorkload(3, 3, 5, 2)
    cfg = KernelConfig(t_m=2, t_n=2, t_k=2)
    sym = oracle_counts(w, cfg, "sym")
    assert sym.w_bytes == 2 * 3 * 5 * 2  # two M-tiles
    assert sym.x_bytes == 3 * 3 * 3 * 2  # three N-tiles
    assert sym.tile_visits == 2 * 3 * 2
    asym = oracle_counts(w, cfg, "asym")
    assert asym.w_bytes == 3 * 5 * 2
    assert asym.o_write_bytes == 2 * 3 * 5 * 2
    assert asym.o_read_bytes == 3 * 5 * 2
    assert sym.flops == asym.flops == 2 * 3 * 3 * 5


def test_budget_and_dataflow_checked():
    w = GemmWorkload(4096, 4096, 4096)
    with pytest.raises(ModelError):
        oracle_counts(w, KernelConfig(t_m=1, t_n=1, t_k=1), "sym", budget=1000)
    with pytest.raises(ModelError):
        oracle_counts(GemmWorkload(4, 4, 4), KernelConfig(), "diag")


def test_one_tile_case():
    cfg = KernelConfig(t_m=64, t_n=64, t_k=64)
    w = GemmWorkload(64, 64, 64)
    for flow in ("sym", "asym"):
        t = tiling_oracle(w, cfg, flow)
        assert t.c2c_bytes == 64 * 64 * 2
        assert t.hbm_bytes == 64 * 64 * 2 + 64 * 64 * 2


def test_weight_bytes_scale_with_m_tiles():
    cfg = KernelConfig(t_m=64, t_n=64, t_k=64)
    one = oracle_counts(GemmWorkload(64, 200, 300), cfg, "sym").w_bytes
    assert oracle_counts(GemmWorkload(256, 200, 300), cfg, "sym").w_bytes == 4 * one


def test_output_bytes_follow_k_tile_count():
    cfg = KernelConfig(t_m=64, t_n=64, t_k=64)
    c = oracle_counts(GemmWorkload(100, 256, 80), cfg, "asym")
    # four K-tiles: four writes and three read-backs of every output element
    assert c.o_write_bytes == 4 * 100 * 80 * 2
    assert c.o_read_bytes == 3 * 100 * 80 * 2
