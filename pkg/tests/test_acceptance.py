"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated
in the terminal summary.
"""

import io
import math
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from routewin import oracles as orc
from routewin import tensorlab as tl
from routewin.attention import AttentionConfig, count_attention_macs
from routewin.cli import run_cli
from routewin.data import synthetic_pairs
from routewin.network import PUBLISHED_COUNTS, PRESETS, count_layers, init_model
from routewin.objective import LossWeights
from routewin.toolkit import AttnEntry, attn_distance, psnr
from routewin.trainer import (FormatError, Schedule, TrainConfig, cosine_lr, evaluate, load_checkpoint,
                              save_checkpoint, train_loop)
from routewin.verify import (dense_coverage_case, dense_coverage_error, desk_loss_closure,
                             key_bias_residual, op_gradient_cases, random_rwam_case, rwam_core_macs,
                             rwam_oracle_error)
from routewin.windowing import Region, RegionShape


def test_c01_rwam_oracle_equivalence(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    cases = []
    for i in range(100):
        # cycle through both shapes and both r_i so every combination is covered
        kind = (Region.CROSS, Region.RECTANGLE)[i % 2]
        cases.append(random_rwam_case(rng, kind=kind, r_i=1 + (i // 2) % 2))
    errs = [rwam_oracle_error(c) for c in cases]
    dt = time.perf_counter() - t0
    ok = max(errs) <= 1e-10 and dt < 60
    assert criterion(1, "RWAM vs loop oracle", ok,
                     f"100 configs, max abs err {max(errs):.2e} (tol 1e-10), {dt:.1f} s (limit 60 s)")


def test_c02_dense_coverage(criterion):
    rng = np.random.default_rng(7)
    errs = [dense_coverage_error(dense_coverage_case(rng)) for _ in range(10)]
    ok = max(errs) <= 1e-10
    assert criterion(2, "full-coverage routing vs dense oracle", ok,
                     f"10 configs, max abs err {max(errs):.2e} (tol 1e-10)")


def test_c03_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for name, (f, params) in op_gradient_cases(np.random.default_rng(3)).items():
        e = tl.grad_check(f, params)
        if e > worst_op:
            worst_op, worst_name = e, name
    f, leaves, key_leaves = desk_loss_closure(seed=0, size=16)
    model_err = tl.grad_check(f, leaves, h=1e-4, max_entries=8, rng=np.random.default_rng(0))
    key_res = key_bias_residual(f, key_leaves)
    dt = time.perf_counter() - t0
    ok = worst_op <= 1e-4 and model_err <= 1e-4 and key_res <= 1e-8 and dt < 300
    assert criterion(3, "gradient checks", ok,
                     f"ops worst {worst_op:.1e} ({worst_name}); full desk loss {model_err:.1e} "
                     f"over {len(leaves)} tensors; key-bias derivative {key_res:.1e}; {dt:.0f} s")


def test_c04_complexity(criterion):
    cfg = AttentionConfig(k=4, heads=2, r_i=2, region=RegionShape(Region.CROSS, 2))
    sizes, d = (16, 32, 64), 4
    counted = [rwam_core_macs(d, s, s, cfg) for s in sizes]
    formula = [count_attention_macs(cfg, s, s, d) for s in sizes]
    lin = [counted[i + 1] / counted[i] / 4 - 1 for i in range(2)]
    dense = [orc.dense_attention_macs(s, s, d) for s in sizes]
    quad = [dense[i + 1] / dense[i] / 16 - 1 for i in range(2)]
    ok = counted == formula and max(map(abs, lin)) < 0.01 and max(map(abs, quad)) < 0.01
    assert criterion(4, "attention cost is linear in area", ok,
                     f"counted {counted} == formula {formula}; ratio err routed {max(map(abs, lin)):.1e}, "
                     f"dense quadratic err {max(map(abs, quad)):.1e}")


def test_c05_schedule_endpoints(criterion):
    s = Schedule(500)
    a, b = cosine_lr(0, s), cosine_lr(500, s)
    ok = a == 1e-3 and b == 1e-7
    assert criterion(5, "cosine schedule endpoints", ok, f"lr(0)={a!r}, lr(T)={b!r}")


def test_c06_count_report(criterion):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = run_cli(["count", "--config", "RWF-T", "--hw", "256,256", "--itemize"])
    out = buf.getvalue()
    items = count_layers(PRESETS["RWF-T"], 256, 256)
    p, f = sum(i.params for i in items), sum(i.flops for i in items)
    rp, rf = PUBLISHED_COUNTS["RWF-T"]
    dp, df = (p - rp) / rp, (f - rf) / rf
    itemized = all(i.name in out for i in items)
    ok = code == 0 and "published RWF-T" in out and itemized
    assert criterion(6, "RWF-T parameter/FLOP report", ok,
                     f"{p / 1e6:.2f} M params ({dp:+.1%}), {f / 1e9:.2f} G MACs ({df:+.1%}); "
                     f"{len(items)} layers itemised")


@pytest.fixture(scope="module")
def smoke_run():
    pairs = synthetic_pairs(n=4, size=64, seed=0)
    cfg = TrainConfig(preset="RWF-desk", steps=500, batch_size=4, patch=64, seed=0)
    state = init_model(cfg.model_config(), seed=cfg.seed, dtype=cfg.np_dtype)
    data = [(x.astype(cfg.np_dtype), y.astype(cfg.np_dtype)) for x, y in pairs]
    weights = LossWeights(cfg.alpha, cfg.lam)
    t0 = time.perf_counter()
    before = evaluate(state, data, weights)
    train_loop(state, data, cfg)
    after = evaluate(state, data, weights)
    return dict(pairs=pairs, before=before, after=after, seconds=time.perf_counter() - t0)


def _mean_total(evals):
    return float(np.mean([rep.total for rep, _ in evals]))


def test_c07_overfit_smoke(criterion, smoke_run):
    pairs, before, after = smoke_run["pairs"], smoke_run["before"], smoke_run["after"]
    ratio = _mean_total(after) / _mean_total(before)
    base = np.mean([psnr(x, y) for x, y in pairs])
    got = np.mean([psnr(np.clip(r, 0, 1), y) for (_, r), (_, y) in zip(after, pairs)])
    dt = smoke_run["seconds"]
    ok = ratio <= 0.1 and got - base >= 5 and dt < 600
    assert criterion(7, "overfit smoke test", ok,
                     f"loss ratio {ratio:.3f} (need <= 0.1); PSNR {base:.2f} -> {got:.2f} dB "
                     f"({got - base:+.2f}, need >= +5); {dt:.0f} s")


def test_c08_msr_terms_drop(criterion, smoke_run):
    b = np.mean([rep.msr for rep, _ in smoke_run["before"]], axis=0)
    a = np.mean([rep.msr for rep, _ in smoke_run["after"]], axis=0)
    drops = 1 - a / b
    ok = len(drops) == 3 and bool(np.all(drops >= 0.5))
    assert criterion(8, "MSR terms fall by half", ok,
                     "drops " + ", ".join(f"msr{i + 2} {d:.0%}" for i, d in enumerate(drops)))


def test_c09_attention_distance(criterion):
    coords = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    kc = np.broadcast_to(coords, (4, 4, 2))
    ident = attn_distance([AttnEntry(0, 0, "x", 0, np.eye(4), coords, kc)], 2, 2)
    unif = attn_distance([AttnEntry(0, 0, "x", 0, np.full((4, 4), 0.25), coords, kc)], 2, 2)
    rng = np.random.default_rng(9)
    vals = []
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 20, 2))
        q, k = int(rng.integers(1, 30)), int(rng.integers(1, 30))
        a = rng.random((q, k)) ** 4
        a /= a.sum(1, keepdims=True)
        pts = lambda *s: np.stack([rng.integers(0, h, s), rng.integers(0, w, s)], -1).astype(float)
        vals.append(attn_distance([AttnEntry(0, 0, "r", 0, a, pts(q), pts(q, k))], h, w))
    ok = ident == 0.0 and abs(unif - 0.30178) <= 1e-5 and 0 <= min(vals) and max(vals) <= 1
    assert criterion(9, "attention-distance metric", ok,
                     f"identity {ident}, uniform 2x2 {unif:.6f}, 200 random in [{min(vals):.3f}, {max(vals):.3f}]")


def test_c10_persistence(criterion, tmp_path):
    results = []
    for dtype in (np.float32, np.float64):
        state = init_model(PRESETS["RWF-desk"], seed=5, dtype=dtype)
        path = tmp_path / f"m{np.dtype(dtype).itemsize}.rwfc"
        save_checkpoint(state, None, path)
        back = load_checkpoint(path)
        results.append(back.config == state.config and list(back.params) == list(state.params) and all(
            back.params[k].data.tobytes() == v.data.tobytes() and back.params[k].dtype == v.dtype
            for k, v in state.params.items()))
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    try:
        load_checkpoint(path)
        rejected = False
    except FormatError as exc:
        rejected = "CRC" in str(exc)
    ok = all(results) and rejected
    assert criterion(10, "checkpoint persistence", ok,
                     f"bitwise roundtrip float32/float64 {results}; corrupted CRC rejected {rejected}")
