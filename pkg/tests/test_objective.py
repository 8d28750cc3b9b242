import numpy as np
import pytest
from hypothesis import given, strategies as st

from routewin import oracles as orc
from routewin import tensorlab as tl
from routewin.objective import (LossWeights, composite_loss, degrade_gt, downsample, fft_loss, l1_loss,
                                msr_loss, msr_targets, total_loss)
from routewin.tensorlab import DimensionError, Tensor


def T(a):
    return Tensor(np.asarray(a, dtype=float))


def test_l1_examples(rng):
    y = rng.normal(size=(3, 4, 5))
    assert l1_loss(T(y), T(y)).item() == 0.0
    assert l1_loss(T(y + 1), T(y)).item() == pytest.approx(1.0, abs=1e-15)
    x = rng.normal(size=(3, 4, 5))
    loop = sum(abs(a - b) for a, b in zip(x.ravel(), y.ravel())) / x.size
    assert abs(l1_loss(T(x), T(y)).item() - loop) <= 1e-12
    with pytest.raises(DimensionError):
        l1_loss(T(x), T(y[:, :3]))


def test_fft_examples(rng):
    y = rng.normal(size=(2, 4, 4))
    assert fft_loss(T(y), T(y)).item() == 0.0
    delta = np.zeros((1, 2, 2))
    delta[0, 0, 0] = 1.0
    assert fft_loss(T(delta), T(np.zeros_like(delta))).item() == pytest.approx(0.5, abs=1e-15)
    x = rng.normal(size=(2, 4, 6))
    re, im = orc.dft2_direct(x - y[:, :, :1].repeat(6, axis=2))
    want = (np.abs(re).sum() + np.abs(im).sum()) / (2 * x.size)
    assert abs(fft_loss(T(x), T(y[:, :, :1].repeat(6, axis=2))).item() - want) <= 1e-9


def test_fft_modulus_variant(rng):
    x, y = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    re, im = orc.dft2_direct(x - y)
    assert abs(fft_loss(T(x), T(y), modulus=True).item() - np.hypot(re, im).mean()) <= 1e-9


def test_composite_examples(rng):
    x, y = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    assert composite_loss(T(y), T(y)).item() == 0.0
    assert composite_loss(T(x), T(y), 0.0).item() == l1_loss(T(x), T(y)).item()
    want = l1_loss(T(x), T(y)).item() + 0.1 * fft_loss(T(x), T(y)).item()
    assert abs(composite_loss(T(x), T(y), 0.1).item() - want) <= 1e-12


@given(st.integers(0, 10 ** 6))
def test_losses_symmetric_and_non_negative(seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 4, 6)), r.normal(size=(2, 4, 6))
    for f in (l1_loss, fft_loss):
        a, b = f(T(x), T(y)).item(), f(T(y), T(x)).item()
        assert a == pytest.approx(b, rel=1e-12) and a > 0


def test_degrade_constant_and_ramp():
    c = np.full((3, 8, 8), 0.3)
    assert np.allclose(degrade_gt(T(c)).data, 0.3, atol=1e-15)
    ramp = np.broadcast_to(np.arange(8.0)[None, None, :] * 0.1 + np.arange(8.0)[None, :, None] * 0.05,
                           (3, 8, 8))
    out = degrade_gt(T(ramp)).data
    assert np.max(np.abs(out[:, 1:-1, 1:-1] - ramp[:, 1:-1, 1:-1])) <= 1e-10


def test_degrade_checkerboard_hand_oracle():
    board = (np.indices((4, 4)).sum(0) % 2).astype(float)[None]
    # each 2x2 cell averages to 1/2, so both resampling steps leave a flat 1/2 image
    assert np.allclose(downsample(T(board)).data, 0.5)
    assert np.allclose(degrade_gt(T(board)).data, 0.5)


def test_degrade_odd_size_rejected():
    with pytest.raises(DimensionError):
        degrade_gt(T(np.zeros((3, 5, 4))))


def test_msr_examples(rng):
    g = np.full((3, 16, 16), 0.7)
    zeros = [T(np.zeros((3, 16 >> j, 16 >> j))) for j in (1, 2, 3)]
    total, terms = msr_loss(zeros, T(g))
    assert total.item() == pytest.approx(0.0, abs=1e-14)

    g = rng.random((3, 16, 16))
    targets = msr_targets(T(g))
    perfect = [Tensor(t.data - degrade_gt(t).data) for t in targets]
    assert msr_loss(perfect, T(g))[0].item() == pytest.approx(0.0, abs=1e-12)

    zeros = [T(np.zeros(t.shape)) for t in targets]
    want = sum(composite_loss(degrade_gt(t), t, 0.1).item() for t in targets)
    assert abs(msr_loss(zeros, T(g))[0].item() - want) <= 1e-12
    # targets come from repeated halving of the clean image
    assert np.allclose(targets[1].data, orc.bilinear_direct(orc.bilinear_direct(g, 8, 8), 4, 4))


def test_msr_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        msr_loss([T(np.zeros((3, 4, 4)))], T(rng.random((3, 16, 16))))


def test_total_loss_report(rng):
    g = rng.random((3, 16, 16))
    zeros = [T(np.zeros((3, 16 >> j, 16 >> j))) for j in (1, 2, 3)]
    targets = msr_targets(T(g))
    perfect = [Tensor(t.data - degrade_gt(t).data) for t in targets]
    tot, rep = total_loss(T(g), T(g), perfect)
    assert rep.total == pytest.approx(0.0, abs=1e-12)

    x = rng.random((3, 16, 16))
    tot, rep = total_loss(T(x), T(g), zeros, LossWeights(0.1, 0.0))
    assert tot.item() == composite_loss(T(x), T(g), 0.1).item()

    res = [T(rng.normal(0, 0.1, (3, 16 >> j, 16 >> j))) for j in (1, 2, 3)]
    w = LossWeights(0.1, 0.3)
    tot, rep = total_loss(T(x), T(g), res, w)
    assert abs(rep.total - (rep.l1 + w.alpha * rep.fft + w.lam * sum(rep.msr))) <= 1e-10
    assert set(rep.as_dict()) == {"l1", "fft", "total", "msr2", "msr3", "msr4"}
    assert abs(rep.l1 - l1_loss(T(x), T(g)).item()) <= 1e-10


def test_loss_weights_validate():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.1)


def test_total_loss_gradient(rng):
    g = Tensor(rng.random((3, 16, 16)))
    x = Tensor(g.data + rng.choice([-1, 1], g.shape) * rng.uniform(0.1, 0.3, g.shape), requires_grad=True)
    res = [Tensor(rng.normal(0, 0.2, (3, 16 >> j, 16 >> j)), requires_grad=True) for j in (1, 2, 3)]
    assert tl.grad_check(lambda: total_loss(x, g, res)[0], [x, *res]) <= 1e-4
