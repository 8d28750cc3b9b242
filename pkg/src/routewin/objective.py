"""Training objective: L1 + frequency L1, multi-scale structure regularisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorlab as tl
from .tensorlab import DimensionError, Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1  # frequency term
    lam: float = 0.1  # MSR term

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


@dataclass
class LossReport:
    l1: float
    fft: float
    msr: list[float] = field(default_factory=list)
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        out = {"l1": self.l1, "fft": self.fft, "total": self.total}
        out.update({f"msr{i + 2}": v for i, v in enumerate(self.msr)})
        return out


def _same_shape(x: Tensor, y: Tensor, what: str) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{what}: shape mismatch {x.shape} vs {y.shape}")


def l1_loss(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "l1_loss")
    return tl.mean(tl.abs(x - y))


def fft_loss(x: Tensor, y: Tensor, modulus: bool = False) -> Tensor:
    """Mean |d real| + |d imag| over every 2-D DFT coefficient.

    With ``modulus`` the complex magnitude of the difference is averaged
    instead (over ``c*h*w`` coefficients).
    """
    _same_shape(x, y, "fft_loss")
    re, im = tl.dft2(x - y)
    if modulus:
        return tl.mean(_sqrt(tl.square(re) + tl.square(im)))
    return (tl.sum(tl.abs(re)) + tl.sum(tl.abs(im))) * (1.0 / (2 * re.data.size))


def _sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    safe = np.where(r > 0, r, 1.0)
    return tl._record(r, (x,), lambda g: (np.where(r > 0, 0.5 * g / safe, 0.0),), "sqrt")


def composite_loss(x: Tensor, y: Tensor, alpha: float = 0.1) -> Tensor:
    if alpha == 0:
        return l1_loss(x, y)
    return l1_loss(x, y) + fft_loss(x, y) * alpha


def downsample(g: Tensor) -> Tensor:
    h, w = g.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"bilinear halving needs even sides, got {h}x{w}")
    return tl.resample(g, h // 2, w // 2)


def degrade_gt(g: Tensor) -> Tensor:
    """Bilinear half-then-double resampling; strips the finest detail."""
    h, w = g.shape[-2:]
    return tl.resample(downsample(g), h, w)


def msr_targets(g: Tensor, levels: int = 3) -> list[Tensor]:
    """Clean images at 1/2, 1/4, ... resolution by repeated bilinear halving."""
    out, cur = [], g
    for _ in range(levels):
        cur = downsample(cur)
        out.append(cur)
    return out


def msr_loss(residuals: list[Tensor], g: Tensor, alpha: float = 0.1,
             targets: list[Tensor] | None = None) -> tuple[Tensor, list[Tensor]]:
    """Sum over sub-scales of composite_loss(R_i + degrade(G_i), G_i)."""
    targets = targets if targets is not None else msr_targets(g, len(residuals))
    terms = []
    for r, gi in zip(residuals, targets):
        _same_shape(r, gi, "msr_loss")
        terms.append(composite_loss(r + degrade_gt(gi), gi, alpha))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, terms


def total_loss(restored: Tensor, g: Tensor, residuals: list[Tensor],
               weights: LossWeights = LossWeights()) -> tuple[Tensor, LossReport]:
    """Base loss on the restored image plus ``lam`` times the MSR sum."""
    l1 = l1_loss(restored, g)
    ff = fft_loss(restored, g)
    total = l1 + ff * weights.alpha if weights.alpha else l1
    msr_terms: list[Tensor] = []
    if residuals and weights.lam:
        msr_total, msr_terms = msr_loss(residuals, g, weights.alpha)
        total = total + msr_total * weights.lam
    elif residuals:
        with tl.no_grad():
            _, msr_terms = msr_loss(residuals, g, weights.alpha)
    report = LossReport(
        l1=l1.item(), fft=ff.item(), msr=[t.item() for t in msr_terms], total=total.item(),
    )
    return total, report
