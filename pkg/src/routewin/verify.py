"""Named verification checks: vectorised code against the loop oracles in
:mod:`routewin.oracles`, plus the invariants the rest of the package relies on.

Each check returns a short detail string and raises ``AssertionError`` on
failure.  ``run_checks`` drives them for the ``verify`` CLI command.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import oracles as orc
from . import tensorlab as tl
from .attention import (AttentionConfig, count_attention_macs, count_swam_macs, init_rwam, init_swam,
                        rwam_forward, swam_forward)
from .network import PRESETS, count_layers, count_params_flops, init_model, model_forward
from .objective import LossWeights, fft_loss, total_loss
from .tensorlab import Tensor
from .trainer import (FormatError, OptimState, Schedule, adamw_step, cosine_lr, load_checkpoint,
                      save_checkpoint)
from .toolkit import AttnEntry, attn_distance, psnr
from .windowing import (Region, RegionShape, WindowGrid, build_index_table, from_tokens, merge,
                        partition, to_tokens)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


# ---------------------------------------------------------------------------
# random cases shared with the test-suite
# ---------------------------------------------------------------------------

@dataclass
class AttnCase:
    x: np.ndarray
    params: dict[str, np.ndarray]
    cfg: AttentionConfig

    @property
    def oracle_kwargs(self) -> dict:
        return dict(k=self.cfg.k, heads=self.cfg.heads, qkv_mode=self.cfg.qkv_mode)

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}


def random_rwam_case(rng: np.random.Generator, k=None, kind=None, r_i=None, grid=None) -> AttnCase:
    """Small random RWAM problem: k in {2,4}, grid up to 4x4, 1-2 heads."""
    k = k or int(rng.choice([2, 4]))
    heads = int(rng.integers(1, 3))
    kind = kind or (Region.CROSS if rng.integers(0, 2) else Region.RECTANGLE)
    radius = int(rng.integers(1, 3))
    r_i = r_i or int(rng.integers(1, 3))
    s_h, s_w = grid or (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    c = heads * int(rng.integers(1, 4))
    cfg = AttentionConfig(k=k, heads=heads, r_i=r_i, region=RegionShape(kind, radius))
    params = init_rwam(rng, c, cfg)
    # larger biases than the default init so that they matter in the comparison
    params["bias_table"] = rng.normal(0, 0.5, params["bias_table"].shape)
    params["center_bias"] = rng.normal(0, 0.5, params["center_bias"].shape)
    x = rng.normal(0, 1, (c, s_h * k, s_w * k))
    return AttnCase(x, params, cfg)


def dense_coverage_case(rng: np.random.Generator) -> AttnCase:
    """Rectangle region wide enough to reach every window, with every slot selected."""
    k = int(rng.choice([2, 4]))
    s_h, s_w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    radius = max(s_h, s_w) - 1 if max(s_h, s_w) > 1 else 1
    shape = RegionShape(Region.RECTANGLE, radius)
    heads = int(rng.integers(1, 3))
    c = heads * int(rng.integers(1, 3))
    cfg = AttentionConfig(k=k, heads=heads, r_i=shape.count, region=shape)
    params = init_rwam(rng, c, cfg)
    params["bias_table"] = rng.normal(0, 0.5, params["bias_table"].shape)
    params["center_bias"] = rng.normal(0, 0.5, params["center_bias"].shape)
    return AttnCase(rng.normal(0, 1, (c, s_h * k, s_w * k)), params, cfg)


def random_swam_case(rng: np.random.Generator, shifted: bool) -> AttnCase:
    k = int(rng.choice([2, 4]))
    heads = int(rng.integers(1, 3))
    c = heads * int(rng.integers(1, 3))
    s_h, s_w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    if shifted:
        s_h, s_w = max(s_h, 2), max(s_w, 2)
    cfg = AttentionConfig(k=k, heads=heads, shift=k // 2 if shifted else 0)
    params = init_swam(rng, c, cfg)
    params["bias_table"] = rng.normal(0, 0.5, params["bias_table"].shape)
    return AttnCase(rng.normal(0, 1, (c, s_h * k, s_w * k)), params, cfg)


def rwam_oracle_error(case: AttnCase) -> float:
    got = rwam_forward(Tensor(case.x), case.tensors(), case.cfg).data
    want = orc.rwam_loop(case.x, case.params, r_i=case.cfg.r_i, kind=case.cfg.region.kind.value,
                         radius=case.cfg.region.radius, **case.oracle_kwargs)
    return float(np.max(np.abs(got - want)))


def dense_coverage_error(case: AttnCase) -> float:
    got = rwam_forward(Tensor(case.x), case.tensors(), case.cfg).data
    want = orc.rwam_dense_coverage(case.x, case.params, radius=case.cfg.region.radius, **case.oracle_kwargs)
    return float(np.max(np.abs(got - want)))


def swam_oracle_error(case: AttnCase) -> float:
    got = swam_forward(Tensor(case.x), case.tensors(), case.cfg).data
    want = orc.swam_loop(case.x, case.params, shift=case.cfg.shift, **case.oracle_kwargs)
    return float(np.max(np.abs(got - want)))


def rwam_core_macs(c: int, h: int, w: int, cfg: AttentionConfig, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    p = {k: Tensor(v) for k, v in init_rwam(rng, c, cfg).items()}
    x = Tensor(rng.normal(0, 1, (c, h, w)))
    # the q/k/v and output projections are 1x1 convolutions, not matmuls, so
    # the counter sees only the attention core
    with tl.no_grad(), tl.mac_counter() as ctr:
        rwam_forward(x, p, cfg)
    return ctr["macs"]


def split_key_bias(params: dict[str, Tensor]) -> tuple[list[Tensor], list[Tensor], Callable[[], None]]:
    """Rebuild every ``qkv.bias`` from separate query/key/value leaves.

    The loss is exactly invariant to the key bias (it adds the same constant
    to a whole logit row), so its gradient is identically zero and a relative
    finite-difference error is meaningless there.  Returns the leaves to
    perturb, the key-bias leaves, and a ``refresh`` that must run before each
    forward pass.
    """
    parts = {}
    for name, t in params.items():
        if name.endswith("qkv.bias"):
            d = t.data.size // 3
            parts[name] = tuple(Tensor(t.data[i * d:(i + 1) * d].copy(), requires_grad=True) for i in range(3))
    leaves = [t for n, t in params.items() if n not in parts]
    leaves += [b for bq, _, bv in parts.values() for b in (bq, bv)]
    key_leaves = [bk for _, bk, _ in parts.values()]

    def refresh():
        for name, trio in parts.items():
            params[name] = tl.concat(list(trio))

    refresh()
    return leaves, key_leaves, refresh


def key_bias_residual(f: Callable[[], Tensor], key_leaves: list[Tensor], h: float = 1e-4) -> float:
    """Largest |analytic| or |central difference| derivative w.r.t. the key-bias entries."""
    for t in key_leaves:
        t.requires_grad, t.grad = True, None
    f().backward()
    worst = max(float(np.max(np.abs(t.grad))) for t in key_leaves)
    with tl.no_grad():
        for t in key_leaves:
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                o = flat[i]
                flat[i] = o + h
                fp = float(f().data)
                flat[i] = o - h
                fm = float(f().data)
                flat[i] = o
                worst = max(worst, abs(fp - fm) / (2 * h))
    return worst


def desk_loss_closure(seed: int = 0, size: int = 16):
    """Full RWF-desk objective (alpha = lambda = 0.1) on a ``3 x size x size`` input."""
    rng = np.random.default_rng(seed)
    state = init_model(PRESETS["RWF-desk"], seed=seed)
    x = Tensor(rng.uniform(0, 1, (3, size, size)))
    with tl.no_grad():
        restored0 = model_forward(x, state)[0].data
    # residuals of random sign and magnitude in [0.2, 0.3]: far from the
    # pixel-domain L1 kinks, and continuous so no DFT coefficient of the
    # residual is exactly zero; a small |f| keeps finite-difference roundoff low
    y = Tensor(restored0 + rng.choice([-1.0, 1.0], restored0.shape) * rng.uniform(0.2, 0.3, restored0.shape))
    weights = LossWeights(alpha=0.1, lam=0.1)

    leaves, key_leaves, refresh = split_key_bias(state.params)

    def f():
        refresh()
        restored, msr, _ = model_forward(x, state)
        return total_loss(restored, y, msr, weights)[0]

    return f, leaves, key_leaves


# ---------------------------------------------------------------------------
# differentiable-op gradient cases
# ---------------------------------------------------------------------------

def op_gradient_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One scalar-valued closure per differentiable op, with the tensors to perturb."""
    def t(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    w_out = Tensor(rng.normal(0, 1, (64,)))  # fixed readout makes every output entry matter

    def read(y: Tensor) -> Tensor:
        flat = tl.reshape(y, (-1,))
        n = flat.shape[0]
        wv = Tensor(np.resize(w_out.data, n))
        return tl.sum(flat * wv)

    cases = {}
    a, b = t(3, 4), t(3, 4)
    cases["add"] = (lambda: read(a + b), [a, b])
    cases["sub"] = (lambda: read(a - b), [a, b])
    cases["mul"] = (lambda: read(a * b), [a, b])
    d = t(3, 4, lo=0.5, hi=2.0)
    cases["div"] = (lambda: read(a / d), [a, d])
    cases["neg"] = (lambda: read(-a), [a])
    e = Tensor(rng.choice([-1, 1], (3, 4)) * rng.uniform(0.2, 1.0, (3, 4)), requires_grad=True)
    cases["abs"] = (lambda: read(tl.abs(e)), [e])
    cases["square"] = (lambda: read(tl.square(a)), [a])
    cases["gelu"] = (lambda: read(tl.gelu(a)), [a])
    bc = t(4)
    cases["broadcast_add"] = (lambda: read(a + bc), [a, bc])
    cases["reshape"] = (lambda: read(tl.reshape(a, (2, 6))), [a])
    g = t(2, 3, 4)
    cases["transpose"] = (lambda: read(tl.transpose(g, (2, 0, 1))), [g])
    cases["getitem"] = (lambda: read(g[:, 1:, ::2]), [g])
    idx = np.array([[0, 2], [1, 1]])
    cases["take"] = (lambda: read(tl.take(g, idx, axis=1)), [g])
    cases["concat"] = (lambda: read(tl.concat([a, b], axis=0)), [a, b])
    cases["split"] = (lambda: read(tl.split(a, 2, axis=1)[1] * 2.0 + tl.split(a, 2, axis=1)[0]), [a])
    cases["roll"] = (lambda: read(tl.roll(g, (1, -1), (1, 2))), [g])
    cases["sum"] = (lambda: read(tl.sum(g, axis=1)), [g])
    cases["mean"] = (lambda: read(tl.mean(g, axis=(0, 2))), [g])
    m1, m2 = t(2, 3, 4), t(2, 4, 5)
    cases["matmul"] = (lambda: read(tl.matmul(m1, m2)), [m1, m2])
    cases["softmax"] = (lambda: read(tl.softmax(g, -1)), [g])
    img = t(3, 6, 6)
    wc, bcv = t(4, 3, 3, 3), t(4)
    cases["conv2d"] = (lambda: read(tl.conv2d(img, wc, bcv, 1, 1)), [img, wc, bcv])
    w2 = t(4, 3, 2, 2)
    cases["conv2d_stride2"] = (lambda: read(tl.conv2d(img, w2, None, 2, 0)), [img, w2])
    w1, b1 = t(5, 3, 1, 1), t(5)
    cases["conv1x1"] = (lambda: read(tl.conv1x1(img, w1, b1)), [img, w1, b1])
    wd, bd = t(3, 1, 3, 3), t(3)
    cases["dwconv"] = (lambda: read(tl.dwconv(img, wd, bd)), [img, wd, bd])
    gam, bet = t(3, lo=0.5, hi=1.5), t(3)
    cases["layer_norm"] = (lambda: read(tl.layer_norm(img, gam, bet)), [img, gam, bet])
    ps = t(8, 3, 2)
    cases["pixel_shuffle"] = (lambda: read(tl.pixel_shuffle(ps, 2)), [ps])
    cases["pixel_unshuffle"] = (lambda: read(tl.pixel_unshuffle(img, 2)), [img])
    cases["pad_edge"] = (lambda: read(tl.pad_edge(img, 2, 3)), [img])
    cases["crop"] = (lambda: read(tl.crop(img, 4, 5)), [img])
    cases["dft2"] = (lambda: read(tl.dft2(img)[0]) + read(tl.dft2(img)[1]) * 0.5, [img])
    cases["resample"] = (lambda: read(tl.resample(img, 3, 3)), [img])
    y = Tensor(rng.uniform(-1, 1, (3, 6, 6)) + 5.0)
    cases["fft_loss"] = (lambda: fft_loss(img, y), [img])
    return cases


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

_REGISTRY: dict[str, Callable[[], str]] = {}


def check(name: str):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn
    return deco


def _close(got, want, tol, what):
    err = float(np.max(np.abs(np.asarray(got) - np.asarray(want))))
    assert err <= tol, f"{what}: max abs error {err:.3e} > {tol:g}"
    return err


@check("ops.matmul")
def _matmul():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    return f"max err {_close(tl.matmul(Tensor(a), Tensor(b)).data, orc.matmul_loops(a, b), 1e-12, 'matmul'):.1e}"


@check("ops.softmax")
def _softmax():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 6)) * 5
    want = np.array([orc.softmax_direct(r) for r in x])
    got = tl.softmax(Tensor(x), -1).data
    assert np.allclose(got.sum(-1), 1.0, atol=1e-12)
    return f"max err {_close(got, want, 1e-12, 'softmax'):.1e}"


@check("ops.conv2d")
def _conv():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 7, 6))
    errs = []
    for (co, kh, stride, pad) in ((4, 3, 1, 1), (2, 2, 2, 0), (5, 1, 1, 0), (2, 3, 2, 1)):
        w, b = rng.normal(size=(co, 3, kh, kh)), rng.normal(size=co)
        got = tl.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        errs.append(_close(got, orc.conv2d_loops(x, w, b, stride, pad), 1e-12, f"conv k{kh} s{stride}"))
    return f"4 geometries, max err {max(errs):.1e}"


@check("ops.dwconv")
def _dw():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(4, 5, 6)), rng.normal(size=(4, 1, 3, 3)), rng.normal(size=4)
    return f"max err {_close(tl.dwconv(Tensor(x), Tensor(w), Tensor(b)).data, orc.dwconv_loops(x, w, b), 1e-12, 'dwconv'):.1e}"


@check("ops.layer_norm")
def _ln():
    rng = np.random.default_rng(5)
    x, g, b = rng.normal(size=(6, 3, 4)), rng.normal(size=6), rng.normal(size=6)
    got = tl.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    return f"max err {_close(got, orc.layer_norm_direct(x, g, b), 1e-12, 'layer_norm'):.1e}"


@check("ops.gelu")
def _gelu():
    xs = np.linspace(-6, 6, 101)
    got = tl.gelu(Tensor(xs)).data
    return f"max err {_close(got, [orc.gelu_erf(v) for v in xs], 1e-14, 'gelu'):.1e}"


@check("ops.pixel_shuffle")
def _ps():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(8, 3, 4))
    got = tl.pixel_shuffle(Tensor(x), 2).data
    _close(got, orc.pixel_shuffle_loops(x, 2), 0.0, "pixel_shuffle")
    _close(tl.pixel_unshuffle(Tensor(got), 2).data, x, 0.0, "pixel_unshuffle")
    return "exact, unshuffle inverts"


@check("ops.dft2")
def _dft():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 5, 6))
    re, im = tl.dft2(Tensor(x))
    wre, wim = orc.dft2_direct(x)
    e = max(_close(re.data, wre, 1e-9, "dft re"), _close(im.data, wim, 1e-9, "dft im"))
    # linearity
    y = rng.normal(size=(2, 5, 6))
    re2, _ = tl.dft2(Tensor(2 * x - y))
    _close(re2.data, 2 * re.data - tl.dft2(Tensor(y))[0].data, 1e-10, "dft linearity")
    return f"direct O(n^4) DFT max err {e:.1e}"


@check("ops.resample")
def _rs():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 8, 6))
    errs = [_close(tl.resample(Tensor(x), ho, wo).data, orc.bilinear_direct(x, ho, wo), 1e-12, "resample")
            for ho, wo in ((4, 3), (16, 12), (8, 6))]
    return f"max err {max(errs):.1e}"


@check("grad.ops")
def _grad_ops():
    rng = np.random.default_rng(9)
    worst, name = 0.0, ""
    for op, (f, params) in op_gradient_cases(rng).items():
        e = tl.grad_check(f, params)
        assert e <= 1e-4, f"grad_check {op}: {e:.2e}"
        if e > worst:
            worst, name = e, op
    return f"worst {name} {worst:.1e}"


def attention_grad_error(case: AttnCase, rng: np.random.Generator) -> tuple[float, float]:
    """(max relative error over x and parameters, key-bias residual) for one case."""
    x = Tensor(case.x, requires_grad=True)
    p = {k: Tensor(v, requires_grad=True) for k, v in case.params.items()}
    leaves, key_leaves, refresh = split_key_bias(p)
    fwd = rwam_forward if "center_bias" in p else swam_forward
    wv = Tensor(rng.normal(size=case.x.shape))

    def f():
        refresh()
        return tl.sum(fwd(x, p, case.cfg) * wv)

    return tl.grad_check(f, [x, *leaves]), key_bias_residual(f, key_leaves)


@check("grad.attention")
def _grad_attn():
    rng = np.random.default_rng(10)
    worst, resid = 0.0, 0.0
    for case in (random_rwam_case(rng, k=2, grid=(2, 3)), random_rwam_case(rng, k=2, grid=(3, 3)),
                 random_swam_case(rng, shifted=True), random_swam_case(rng, shifted=False)):
        e, r = attention_grad_error(case, rng)
        worst, resid = max(worst, e), max(resid, r)
    assert worst <= 1e-4, f"attention grad_check {worst:.2e}"
    assert resid <= 1e-6, f"key-bias derivative not zero: {resid:.2e}"
    return f"worst {worst:.1e}, key-bias residual {resid:.1e}"


@check("windowing.roundtrip")
def _win():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(3, 8, 12)))
    assert np.array_equal(merge(partition(x, 4), 4, 8, 12).data, x.data)
    assert np.array_equal(from_tokens(to_tokens(x, 4), 4, 8, 12).data, x.data)
    return "partition/merge and tokens exact"


@check("windowing.index_table")
def _index():
    n = 0
    for kind in Region:
        for radius in (1, 2, 3):
            shape = RegionShape(kind, radius)
            for s_h, s_w in ((1, 1), (3, 5), (4, 4)):
                grid = WindowGrid(2, 2 * s_h, 2 * s_w)
                table = build_index_table(grid, shape)
                offs = orc.region_offsets(kind.value, radius)
                assert len(offs) == shape.count
                for i in range(s_h):
                    for j in range(s_w):
                        want = [min(max(i + dy, 0), s_h - 1) * s_w + min(max(j + dx, 0), s_w - 1)
                                for dy, dx in offs]
                        assert list(table[i, j]) == want, f"{kind} r{radius} window {(i, j)}"
                n += 1
    return f"{n} grids enumerated"


@check("attention.rwam_oracle")
def _rwam():
    rng = np.random.default_rng(12)
    errs = [rwam_oracle_error(random_rwam_case(rng)) for _ in range(20)]
    assert max(errs) <= 1e-10, f"rwam vs loop oracle {max(errs):.2e}"
    return f"20 configs, max err {max(errs):.1e}"


@check("attention.dense_coverage")
def _dense():
    rng = np.random.default_rng(13)
    errs = [dense_coverage_error(dense_coverage_case(rng)) for _ in range(5)]
    assert max(errs) <= 1e-10, f"rwam vs dense oracle {max(errs):.2e}"
    return f"5 configs, max err {max(errs):.1e}"


@check("attention.swam_oracle")
def _swam():
    rng = np.random.default_rng(14)
    errs = [swam_oracle_error(random_swam_case(rng, shifted=s)) for s in (False, True) * 4]
    assert max(errs) <= 1e-10, f"swam vs loop oracle {max(errs):.2e}"
    return f"8 configs, max err {max(errs):.1e}"


@check("attention.mac_count")
def _macs():
    cfg = AttentionConfig(k=4, heads=2, r_i=2, region=RegionShape(Region.CROSS, 1))
    counts = []
    for s in (16, 32, 64):
        got = rwam_core_macs(4, s, s, cfg)
        assert got == count_attention_macs(cfg, s, s, 4), f"{s}x{s}: counted {got}"
        counts.append(got)
    for a, b in zip(counts, counts[1:]):
        assert abs(b / a / 4 - 1) < 0.01
    dense = [orc.dense_attention_macs(s, s, 4) for s in (8, 16)]
    assert dense[1] == 16 * dense[0], "dense oracle not quadratic"
    assert count_swam_macs(cfg, 16, 16, 4) == 2 * 16 * 256 * 4
    return f"counts {counts} match 2(r_i+1)k^2hwd"


@check("trainer.schedule")
def _sched():
    s = Schedule(500)
    assert cosine_lr(0, s) == 1e-3 and cosine_lr(500, s) == 1e-7
    lrs = [cosine_lr(t, s) for t in range(501)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    return "endpoints exact, monotone"


@check("trainer.adamw")
def _adamw():
    rng = np.random.default_rng(15)
    p0 = rng.normal(size=6)
    grads = [rng.normal(size=6) for _ in range(100)]
    for wd in (0.0, 1e-4):
        p = Tensor(p0.copy())
        opt = OptimState(weight_decay=wd)
        for g in grads:
            adamw_step({"p": p}, {"p": g.copy()}, opt, 1e-3)
        want = orc.adamw_reference(list(p0), [list(g) for g in grads], 1e-3, weight_decay=wd)
        assert np.array_equal(p.data, np.array(want)), f"wd={wd}: not bitwise equal"
    return "100 steps bitwise equal"


@check("trainer.checkpoint")
def _ckpt():
    state = init_model(PRESETS["RWF-desk"], seed=3, dtype=np.float32)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.rwfc"
        save_checkpoint(state, OptimState(), path)
        back = load_checkpoint(path)
        assert back.config == state.config
        for k, v in state.params.items():
            assert back.params[k].data.dtype == v.data.dtype
            assert back.params[k].data.tobytes() == v.data.tobytes(), k
        second = orc.read_container_minimal(path)
        for k, v in state.params.items():
            assert second[k].tobytes() == v.data.tobytes(), k
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        try:
            load_checkpoint(path)
        except FormatError:
            pass
        else:
            raise AssertionError("corrupted CRC accepted")
    return f"{len(state.params)} tensors bitwise, second reader agrees, bad CRC rejected"


@check("model.count_itemized")
def _count():
    cfg = PRESETS["RWF-T"]
    layers = count_layers(cfg, 256, 256)
    params, flops = count_params_flops(cfg, 256, 256)
    assert sum(l.params for l in layers) == params and sum(l.flops for l in layers) == flops
    return f"RWF-T {params / 1e6:.2f} M params, {flops / 1e9:.2f} G MACs, {len(layers)} items"


@check("model.param_count")
def _pcount():
    for name in ("RWF-desk",):
        cfg = PRESETS[name]
        state = init_model(cfg)
        counted = count_params_flops(cfg, 64, 64)[0]
        actual = sum(v.data.size for v in state.params.values())
        assert counted == actual, f"{name}: counted {counted} vs instantiated {actual}"
    return "analytic count equals instantiated parameter count"


@check("grad.full_model")
def _grad_model():
    f, leaves, key_leaves = desk_loss_closure()
    e = tl.grad_check(f, leaves, h=1e-4, max_entries=2, rng=np.random.default_rng(0))
    assert e <= 1e-4, f"full-model grad_check {e:.2e}"
    return f"{len(leaves)} tensors sampled, worst {e:.1e}"


@check("toolkit.attn_distance")
def _dist():
    coords = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    kc = np.broadcast_to(coords, (4, 4, 2))
    ident = AttnEntry(0, 0, "x", 0, np.eye(4), coords, kc)
    unif = AttnEntry(0, 0, "x", 0, np.full((4, 4), 0.25), coords, kc)
    assert attn_distance([ident], 2, 2) == 0.0
    want = (2 + math.sqrt(2)) / 4 / math.sqrt(8)
    got = attn_distance([unif], 2, 2)
    assert abs(got - want) <= 1e-12 and abs(got - 0.30178) <= 1e-5
    return f"identity 0, uniform 2x2 {got:.5f}"


@check("toolkit.psnr")
def _psnr():
    x = np.zeros((3, 4, 4))
    assert psnr(x, x) == 100.0
    assert abs(psnr(x, x + 0.1) - 20.0) < 1e-9
    return "cap 100 dB, MSE 0.01 -> 20 dB"


def available() -> list[str]:
    return list(_REGISTRY)


def run_checks(filter_: str | None = None, echo: Callable[[str], None] | None = None) -> list[CheckResult]:
    names = [n for n in _REGISTRY if filter_ is None or filter_ in n]
    results = []
    for name in names:
        t0 = time.perf_counter()
        try:
            detail, ok = _REGISTRY[name](), True
        except AssertionError as exc:
            detail, ok = str(exc) or "assertion failed", False
        except Exception as exc:  # a crash in a check is a failed check
            detail, ok = f"{type(exc).__name__}: {exc}", False
        res = CheckResult(name, ok, detail, time.perf_counter() - t0)
        results.append(res)
        if echo:
            echo(f"{'PASS' if ok else 'FAIL'} {name:28s} {res.seconds:6.2f}s  {detail}")
    return results
