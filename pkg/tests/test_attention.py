import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from routewin import attention as att
from routewin import oracles as orc
from routewin import tensorlab as tl
from routewin.attention import (AttentionConfig, ConfigError, build_bias_matrix, count_attention_macs,
                                gather_bias, init_rwam, init_swam, regional_similarity, remap_indices,
                                rwam_forward, swam_forward, topk_select, window_descriptors)
from routewin.tensorlab import Tensor
from routewin.verify import (attention_grad_error, dense_coverage_case, dense_coverage_error,
                             random_rwam_case, random_swam_case, rwam_core_macs, rwam_oracle_error,
                             swam_oracle_error)
from routewin.windowing import Region, RegionShape, WindowGrid, build_index_table


# -- router pieces ----------------------------------------------------------

def test_descriptors(rng):
    const = np.full((2, 2, 3, 4), 0.7)
    q, k = window_descriptors(const, np.zeros_like(const))
    assert np.allclose(q, 0.7) and not k.any()
    w = rng.normal(size=(2, 3, 4, 9))
    q, _ = window_descriptors(w, w)
    loop = np.array([[[sum(w[i, j, c]) / 9 for c in range(4)] for j in range(3)] for i in range(2)])
    assert np.max(np.abs(q - loop)) <= 1e-12


def test_similarity_examples(rng):
    table = build_index_table(WindowGrid(1, 3, 3), RegionShape(Region.CROSS, 1))
    same = np.ones((3, 3, 4))
    assert np.allclose(regional_similarity(same, same, table), 0.25)
    # centre (1,1): candidate slot 2 is window (1,2), make it aligned with the query
    q = np.zeros((3, 3, 4))
    q[1, 1] = [1, 0, 0, 0]
    kr = np.zeros((3, 3, 4))
    kr[1, 2] = 10 * q[1, 1]
    kr[0, 1] = [0, 1, 0, 0]
    assert regional_similarity(q, kr, table)[1, 1, 2] >= 0.99
    q, kr = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 4))
    got = regional_similarity(q, kr, table)
    for i in range(3):
        for j in range(3):
            want = orc.softmax_direct([float(q[i, j] @ kr.reshape(9, 4)[t]) for t in table[i, j]])
            assert np.max(np.abs(got[i, j] - want)) <= 1e-10


def test_topk_examples():
    assert list(topk_select(np.array([0.1, 0.5, 0.4]), 2)) == [1, 2]
    assert topk_select(np.full((2, 2, 4), 0.25), 1).ravel().tolist() == [0, 0, 0, 0]
    with pytest.raises(ConfigError):
        topk_select(np.ones(4), 0)
    with pytest.raises(ConfigError):
        topk_select(np.ones(4), 5)


def test_topk_matches_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        h = rng.integers(0, 4, n) / 4.0 if rng.integers(0, 2) else rng.random(n)  # some trials with ties
        r = int(rng.integers(1, n + 1))
        want = sorted(range(n), key=lambda s: (-h[s], s))[:r]
        assert list(topk_select(h, r)) == want


def test_remap_examples():
    grid = WindowGrid(1, 3, 3)
    table = build_index_table(grid, RegionShape(Region.CROSS, 1))
    rel = np.zeros((3, 3, 1), dtype=int)
    J = remap_indices(rel, table)
    assert J[1, 1, 0] == grid.flat(0, 1)
    assert J[0, 0, 0] == grid.flat(0, 0)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 9999))
def test_remap_consistent_with_offsets(s_h, s_w, seed):
    rng = np.random.default_rng(seed)
    shape = RegionShape("rectangle", 1)
    grid = WindowGrid(1, s_h, s_w)
    table = build_index_table(grid, shape)
    rel = rng.integers(0, shape.count, (s_h, s_w, 2))
    J = remap_indices(rel, table)
    offs = orc.region_offsets("rectangle", 1)
    for i in range(s_h):
        for j in range(s_w):
            for t in range(2):
                dy, dx = offs[rel[i, j, t]]
                assert J[i, j, t] == grid.flat(min(max(i + dy, 0), s_h - 1), min(max(j + dx, 0), s_w - 1))


# -- biases -----------------------------------------------------------------

def test_bias_matrix_examples(rng):
    assert build_bias_matrix(Tensor(np.array([[2.5]])), 1).data.shape == (1, 1, 1)
    assert np.all(build_bias_matrix(Tensor(np.full((2, 9), 0.3)), 2).data == 0.3)
    tab = rng.normal(size=(2, 9))
    got = build_bias_matrix(Tensor(tab), 2).data
    for m in range(2):
        for q in range(4):
            for p in range(4):
                (qy, qx), (py, px) = divmod(q, 2), divmod(p, 2)
                assert got[m, q, p] == tab[m, (qy - py + 1) * 3 + (qx - px + 1)]


def test_gather_bias(rng):
    k, m, r_n = 2, 2, 4
    cand, center = rng.normal(size=(r_n, m, 9)), rng.normal(size=(m, 9))
    rel = np.array([[[2]]])
    g = gather_bias(Tensor(cand), Tensor(center), rel, k).data[0, 0]
    assert np.array_equal(g[:, :, :4], build_bias_matrix(Tensor(cand[2]), k).data)
    assert np.array_equal(g[:, :, 4:], build_bias_matrix(Tensor(center), k).data)
    assert not gather_bias(Tensor(np.zeros_like(cand)), Tensor(np.zeros_like(center)), rel, k).data.any()
    rel = rng.integers(0, r_n, (2, 3, 2))
    g = gather_bias(Tensor(cand), Tensor(center), rel, k).data
    for i in range(2):
        for j in range(3):
            for t in range(2):
                assert np.array_equal(g[i, j, :, :, t * 4:(t + 1) * 4],
                                      build_bias_matrix(Tensor(cand[rel[i, j, t]]), k).data)


# -- RWAM -------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["cross", "rectangle"])
def test_single_window_degenerates_to_self_attention(kind, rng):
    k, heads, c = 4, 2, 4
    cfg = AttentionConfig(k=k, heads=heads, r_i=2, region=RegionShape(kind, 1))
    p = init_rwam(rng, c, cfg)
    p["center_bias"] = rng.normal(0, 0.5, p["center_bias"].shape)
    p["bias_table"] = rng.normal(0, 0.5, p["bias_table"].shape)
    x = rng.normal(size=(c, k, k))
    got = rwam_forward(Tensor(x), {n: Tensor(v) for n, v in p.items()}, cfg).data
    swam_p = {n: v for n, v in p.items() if n != "bias_table"}
    swam_p["bias_table"] = p["center_bias"]
    want = orc.swam_loop(x, swam_p, k=k, heads=heads, shift=0)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_two_by_two_grid_all_windows_matches_dense_oracle(rng):
    # every window sees the 3 others; clamped duplicates are masked, so r_i = r_n
    shape = RegionShape(Region.RECTANGLE, 1)
    cfg = AttentionConfig(k=2, heads=1, r_i=shape.count, region=shape)
    p = init_rwam(rng, 2, cfg)
    p["bias_table"] = rng.normal(0, 0.5, p["bias_table"].shape)
    x = rng.normal(size=(2, 4, 4))
    got = rwam_forward(Tensor(x), {n: Tensor(v) for n, v in p.items()}, cfg).data
    want = orc.rwam_dense_coverage(x, p, k=2, heads=1, radius=1)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_rwam_random_configs_match_loop_oracle():
    rng = np.random.default_rng(11)
    errs = [rwam_oracle_error(random_rwam_case(rng)) for _ in range(25)]
    assert max(errs) <= 1e-10


def test_dense_coverage_random():
    rng = np.random.default_rng(12)
    assert max(dense_coverage_error(dense_coverage_case(rng)) for _ in range(5)) <= 1e-10


def test_split_qkv_mode_matches_oracle(rng):
    cfg = AttentionConfig(k=2, heads=1, r_i=1, region=RegionShape("cross", 1), qkv_mode="split")
    p = init_rwam(rng, 6, cfg)
    x = rng.normal(size=(6, 4, 6))
    got = rwam_forward(Tensor(x), {n: Tensor(v) for n, v in p.items()}, cfg).data
    want = orc.rwam_loop(x, p, k=2, heads=1, r_i=1, kind="cross", radius=1, qkv_mode="split")
    assert np.max(np.abs(got - want)) <= 1e-10


def test_attention_rows_sum_to_one(rng):
    case = random_rwam_case(rng, grid=(3, 3))
    rec = []
    rwam_forward(Tensor(case.x), case.tensors(), case.cfg, record=rec)
    assert np.allclose(rec[0]["weights"].sum(-1), 1.0, atol=1e-6)
    sc = random_swam_case(rng, shifted=True)
    rec = []
    swam_forward(Tensor(sc.x), sc.tensors(), sc.cfg, record=rec)
    assert np.allclose(rec[0]["weights"].sum(-1), 1.0, atol=1e-6)


def test_hard_routing_ignores_similarity_values(rng, monkeypatch):
    case = random_rwam_case(rng, k=2, r_i=2, grid=(3, 4))
    base = rwam_forward(Tensor(case.x), case.tensors(), case.cfg).data
    real = att.regional_similarity

    def squashed(*a):
        h = real(*a) ** 2  # monotone: same TopK winners, different values
        return h / h.sum(-1, keepdims=True)

    monkeypatch.setattr(att, "regional_similarity", squashed)
    assert np.array_equal(rwam_forward(Tensor(case.x), case.tensors(), case.cfg).data, base)


def test_rwam_config_errors(rng):
    cfg = AttentionConfig(k=2, heads=2, r_i=1, region=RegionShape("cross", 1))
    p = {n: Tensor(v) for n, v in init_rwam(rng, 4, cfg).items()}
    with pytest.raises(ConfigError):
        rwam_forward(Tensor(np.zeros((4, 3, 4))), p, cfg)
    with pytest.raises(ConfigError):
        rwam_forward(Tensor(np.zeros((3, 4, 4))), p, cfg)
    with pytest.raises(ConfigError):
        AttentionConfig(k=2, r_i=9, region=RegionShape("cross", 1))
    with pytest.raises(ConfigError):
        AttentionConfig(k=4, shift=1)


def test_rwam_gradients_and_zero_key_bias_gradient():
    rng = np.random.default_rng(21)
    for _ in range(2):
        err, key_res = attention_grad_error(random_rwam_case(rng, k=2, grid=(2, 2)), rng)
        assert err <= 1e-4 and key_res <= 1e-8


def test_router_receives_no_gradient(rng):
    case = random_rwam_case(rng, k=2, grid=(2, 2))
    x = Tensor(case.x, requires_grad=True)
    out = rwam_forward(x, case.tensors(), case.cfg)
    seen, ops, stack = set(), [], [out]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        ops.append(n.op)
        stack.extend(n._parents)
    assert id(x) in seen and "matmul" in ops
    # the similarity softmax and TopK are computed on raw arrays, off the tape
    assert not any("route" in o or "topk" in o or "similarity" in o for o in ops)
    assert sum(o == "softmax" for o in ops) == 1


# -- SWAM -------------------------------------------------------------------

@pytest.mark.parametrize("shifted", [False, True])
def test_swam_matches_loop_oracle(shifted):
    rng = np.random.default_rng(31 + shifted)
    assert max(swam_oracle_error(random_swam_case(rng, shifted)) for _ in range(4)) <= 1e-10


def test_swam_constant_input_gives_constant_output(rng):
    cfg = AttentionConfig(k=4, heads=2, shift=2)
    p = {n: Tensor(v) for n, v in init_swam(rng, 4, cfg).items()}
    x = np.broadcast_to(rng.normal(size=(4, 1, 1)), (4, 8, 8)).copy()
    out = swam_forward(Tensor(x), p, cfg).data
    assert np.allclose(out, out[:, :1, :1], atol=1e-12)


def test_shift_roundtrip_is_exact(rng):
    x = rng.normal(size=(3, 8, 8))
    t = tl.roll(tl.roll(Tensor(x), (-2, -2), (1, 2)), (2, 2), (1, 2))
    assert np.array_equal(t.data, x)


def test_swam_window_permutation_equivariance(rng):
    k = 2
    cfg = AttentionConfig(k=k, heads=1)
    p = {n: Tensor(v) for n, v in init_swam(rng, 2, cfg).items()}
    x = rng.normal(size=(2, 4, 6))
    perm = rng.permutation(6)

    def permute(a):
        win = a.reshape(2, 2, k, 3, k).transpose(1, 3, 0, 2, 4).reshape(6, 2, k, k)[perm]
        return win.reshape(2, 3, 2, k, k).transpose(2, 0, 3, 1, 4).reshape(2, 4, 6)

    lhs = swam_forward(Tensor(permute(x)), p, cfg).data
    rhs = permute(swam_forward(Tensor(x), p, cfg).data)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_swam_gradients():
    rng = np.random.default_rng(41)
    err, key_res = attention_grad_error(random_swam_case(rng, shifted=True), rng)
    assert err <= 1e-4 and key_res <= 1e-8


# -- cost -------------------------------------------------------------------

def test_mac_formula_examples():
    cfg = AttentionConfig(k=4, r_i=1, region=RegionShape("cross", 1))
    assert count_attention_macs(cfg, 16, 32, 8) == 2 * count_attention_macs(cfg, 16, 16, 8)
    c0 = AttentionConfig(k=4, r_i=0, region=RegionShape("cross", 1))
    assert count_attention_macs(c0, 4, 4, 8) == 2 * 4 * 4 * 4 * 4 * 8


@pytest.mark.parametrize("k,r_i,h,w,c", [(2, 1, 4, 4, 2), (2, 2, 6, 4, 4), (4, 1, 8, 8, 2),
                                         (4, 2, 8, 12, 4), (2, 3, 8, 8, 2)])
def test_mac_formula_matches_instrumented_count(k, r_i, h, w, c):
    cfg = AttentionConfig(k=k, heads=1, r_i=r_i, region=RegionShape("rectangle", 1))
    assert rwam_core_macs(c, h, w, cfg) == count_attention_macs(cfg, h, w, c)
