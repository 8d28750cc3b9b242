"""The U-shaped restoration network: FFN, IRBlock, Block and the full model.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names::

    name    := module "." tensor
    module  := "stem" | "head" | "msr" J | "down" I | "up" I | "skip" I
             | ("enc" I | "dec" I) ".block" B "." sub
    sub     := "norm1" | "rwam" | "swam" | "fuse" | "ffn." ("norm" | "expand" | "dw" | "sca" | "out")
    tensor  := "weight" | "bias" | "bias_table" | "center_bias" | "qkv.weight" | ...

where ``I`` is the scale (0 = full resolution), ``B`` the block index and
``J`` the MSR level (1 = half resolution).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensorlab as tl
from .attention import (
    AttentionConfig, count_attention_macs, count_swam_macs, fan_in_uniform, head_dim,
    init_rwam, init_swam, rwam_forward, swam_forward,
)
from .tensorlab import DimensionError, Tensor
from .windowing import Region, RegionShape

N_SCALES = 4


@dataclass(frozen=True)
class ModelConfig:
    depths: tuple[int, ...] = (2, 4, 6, 8)
    channels: int = 32
    window: int = 8
    heads: tuple[int, ...] = (1, 2, 4, 8)
    r_i: tuple[int, ...] = (1, 1, 1, 1)
    radius: int = 2
    ffn_expansion: int = 2
    msr_enabled: bool = True
    qkv_mode: str = "project"

    def __post_init__(self):
        for name in ("depths", "heads", "r_i"):
            val = tuple(int(v) for v in getattr(self, name))
            if len(val) != N_SCALES:
                raise ValueError(f"{name} needs {N_SCALES} entries, got {val}")
            object.__setattr__(self, name, val)
        if min(self.depths) < 1:
            raise ValueError(f"depths must be >= 1, got {self.depths}")
        if self.channels % 2:
            raise ValueError(f"base channels must be even, got {self.channels}")

    def width(self, scale: int) -> int:
        return self.channels * 2 ** scale

    def attention(self, scale: int, block: int, branch: str) -> AttentionConfig:
        # blocks alternate cross/rectangle regions and unshifted/shifted windows
        kind = Region.CROSS if block % 2 == 0 else Region.RECTANGLE
        shift = 0 if branch == "rwam" or block % 2 == 0 else self.window // 2
        return AttentionConfig(
            k=self.window, heads=self.heads[scale], r_i=self.r_i[scale],
            region=RegionShape(kind, self.radius), shift=shift, qkv_mode=self.qkv_mode,
        )

    @property
    def pad_multiple(self) -> int:
        return self.window * 2 ** (N_SCALES - 1)


PRESETS: dict[str, ModelConfig] = {
    "RWF-T": ModelConfig(depths=(2, 4, 6, 8), channels=32),
    "RWF-S": ModelConfig(depths=(2, 4, 4, 8), channels=48),
    "RWF-B": ModelConfig(depths=(2, 4, 6, 8), channels=64),
    "RWF-desk": ModelConfig(depths=(1, 1, 1, 1), channels=8, window=4, radius=1),
}

# published parameter and FLOP figures for the three sizes, 256x256 input
PUBLISHED_COUNTS = {
    "RWF-T": (11.15e6, 25.29e9),
    "RWF-S": (23.23e6, 47.77e9),
    "RWF-B": (43.06e6, 89.79e9),
}


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def sub(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "ModelState":
        return ModelState(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                                        for k, v in self.params.items()})

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                        for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _conv(rng, c_out, c_in, kh, kw, dtype, bias=True, groups=1):
    fan_in = c_in // groups * kh * kw
    p = {"weight": fan_in_uniform(rng, (c_out, c_in // groups, kh, kw), fan_in, dtype)}
    if bias:
        p["bias"] = fan_in_uniform(rng, (c_out,), fan_in, dtype)
    return p


def _norm(c, dtype):
    return {"weight": np.ones(c, dtype=dtype), "bias": np.zeros(c, dtype=dtype)}


def _prefixed(prefix: str, p: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in p.items()}


def init_block(rng, cfg: ModelConfig, scale: int, block: int, dtype) -> dict[str, np.ndarray]:
    c = cfg.width(scale)
    hidden = cfg.ffn_expansion * c
    p = {}
    p.update(_prefixed("norm1", _norm(c, dtype)))
    p.update(_prefixed("rwam", init_rwam(rng, c // 2, cfg.attention(scale, block, "rwam"), dtype)))
    p.update(_prefixed("swam", init_swam(rng, c // 2, cfg.attention(scale, block, "swam"), dtype)))
    p.update(_prefixed("fuse", _conv(rng, c, c, 1, 1, dtype)))
    p.update(_prefixed("ffn.norm", _norm(c, dtype)))
    p.update(_prefixed("ffn.expand", _conv(rng, 2 * hidden, c, 1, 1, dtype)))
    p.update(_prefixed("ffn.dw", _conv(rng, hidden, hidden, 3, 3, dtype, groups=hidden)))
    p.update(_prefixed("ffn.sca", _conv(rng, hidden, hidden, 1, 1, dtype)))
    p.update(_prefixed("ffn.out", _conv(rng, c, hidden, 1, 1, dtype)))
    return p


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelState:
    """Build every parameter; the key set depends only on ``cfg``."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    C = cfg.channels
    p.update(_prefixed("stem", _conv(rng, C, 3, 3, 3, dtype)))
    for i in range(N_SCALES):
        for b in range(cfg.depths[i]):
            p.update(_prefixed(f"enc{i}.block{b}", init_block(rng, cfg, i, b, dtype)))
        if i < N_SCALES - 1:
            p.update(_prefixed(f"down{i}", _conv(rng, 2 * cfg.width(i), cfg.width(i), 2, 2, dtype)))
    for i in reversed(range(N_SCALES - 1)):
        c = cfg.width(i)
        # 1x1 conv to 2c' = 4c channels, pixel shuffle halves the width of scale i+1
        p.update(_prefixed(f"up{i}", _conv(rng, 4 * c, 2 * c, 1, 1, dtype)))
        p.update(_prefixed(f"skip{i}", _conv(rng, c, 2 * c, 1, 1, dtype)))
        for b in range(cfg.depths[i]):
            p.update(_prefixed(f"dec{i}.block{b}", init_block(rng, cfg, i, b, dtype)))
    if cfg.msr_enabled:
        for j in range(1, N_SCALES):
            p.update(_prefixed(f"msr{j}", _conv(rng, 3, cfg.width(j), 3, 3, dtype)))
    p.update(_prefixed("head", _conv(rng, 3, C, 3, 3, dtype)))
    return ModelState(cfg, {k: Tensor(v, requires_grad=True) for k, v in p.items()})


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _conv_fwd(x: Tensor, p: dict, prefix: str, stride: int = 1, padding: int = 0) -> Tensor:
    return tl.conv2d(x, p[f"{prefix}.weight"], p.get(f"{prefix}.bias"), stride=stride, padding=padding)


def _sub(p: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix + ".")}


def ffn_forward(x: Tensor, p: dict) -> Tensor:
    """LN -> expand -> gated GELU(DWConv) -> simplified channel attention -> project."""
    t = tl.layer_norm(x, p["norm.weight"], p["norm.bias"])
    t = tl.conv1x1(t, p["expand.weight"], p["expand.bias"])
    top, bottom = tl.split(t, 2, axis=0)
    t = tl.gelu(tl.dwconv(top, p["dw.weight"], p["dw.bias"], padding=1)) * bottom
    pooled = tl.mean(t, axis=(1, 2), keepdims=True)
    gate = tl.conv1x1(pooled, p["sca.weight"], p["sca.bias"])
    return tl.conv1x1(t * gate, p["out.weight"], p["out.bias"])


def irblock_forward(x: Tensor, p: dict, cfg: ModelConfig, scale: int, block: int,
                    record: list | None = None) -> Tensor:
    """LN, route-window attention on one channel half and shifted-window on the other, fused."""
    t = tl.layer_norm(x, p["norm1.weight"], p["norm1.bias"])
    left, right = tl.split(t, 2, axis=0)
    rec_r = [] if record is not None else None
    rec_s = [] if record is not None else None
    a = rwam_forward(left, _sub(p, "rwam"), cfg.attention(scale, block, "rwam"), rec_r)
    b = swam_forward(right, _sub(p, "swam"), cfg.attention(scale, block, "swam"), rec_s)
    if record is not None:
        for entry in rec_r + rec_s:
            entry.update(scale=scale, block=block)
            record.append(entry)
    return tl.conv1x1(tl.concat([a, b], axis=0), p["fuse.weight"], p["fuse.bias"])


def block_forward(x: Tensor, p: dict, cfg: ModelConfig, scale: int, block: int,
                  record: list | None = None) -> Tensor:
    x = irblock_forward(x, p, cfg, scale, block, record) + x
    return ffn_forward(x, _sub(p, "ffn")) + x


def _stage(x: Tensor, p: dict, prefix: str, cfg: ModelConfig, scale: int, record) -> Tensor:
    for b in range(cfg.depths[scale]):
        start = len(record) if record is not None else 0
        x = block_forward(x, _sub(p, f"{prefix}.block{b}"), cfg, scale, b, record)
        if record is not None:
            for entry in record[start:]:
                entry["stage"] = prefix
    return x


def model_forward(img: Tensor, state: ModelState, record: bool = False):
    """Restore ``img[3,h,w]``.

    Returns ``(restored, msr_residuals, attn_record)``; the residual list runs
    from half resolution down to 1/8, and ``attn_record`` is None unless
    ``record`` is set.
    """
    cfg, p = state.config, state.params
    _, h, w = img.shape
    if h < cfg.window or w < cfg.window:
        raise DimensionError(f"input {h}x{w} smaller than window {cfg.window}")
    mult = cfg.pad_multiple
    ph, pw = -h % mult, -w % mult
    x_in = tl.pad_edge(img, ph, pw)
    rec: list | None = [] if record else None

    x = _conv_fwd(x_in, p, "stem", padding=1)
    skips = []
    for i in range(N_SCALES):
        x = _stage(x, p, f"enc{i}", cfg, i, rec)
        if i < N_SCALES - 1:
            skips.append(x)
            x = _conv_fwd(x, p, f"down{i}", stride=2)
    residuals: dict[int, Tensor] = {}
    if cfg.msr_enabled:
        residuals[N_SCALES - 1] = _conv_fwd(x, p, f"msr{N_SCALES - 1}", padding=1)
    for i in reversed(range(N_SCALES - 1)):
        x = tl.pixel_shuffle(_conv_fwd(x, p, f"up{i}"), 2)
        x = _conv_fwd(tl.concat([x, skips[i]], axis=0), p, f"skip{i}")
        x = _stage(x, p, f"dec{i}", cfg, i, rec)
        if cfg.msr_enabled and i > 0:
            residuals[i] = _conv_fwd(x, p, f"msr{i}", padding=1)
    out = tl.crop(_conv_fwd(x, p, "head", padding=1), h, w)
    restored = img + out
    msr = [tl.crop(residuals[j], -(-h // 2 ** j), -(-w // 2 ** j)) for j in sorted(residuals)]
    return restored, msr, rec


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------

@dataclass
class LayerCount:
    name: str
    params: int
    flops: int


def _conv_count(name, c_in, c_out, kh, kw, oh, ow, groups=1, bias=True) -> LayerCount:
    params = c_out * (c_in // groups) * kh * kw + (c_out if bias else 0)
    return LayerCount(name, params, c_out * (c_in // groups) * kh * kw * oh * ow)


def _block_counts(cfg: ModelConfig, prefix: str, scale: int, block: int, h: int, w: int) -> list[LayerCount]:
    c = cfg.width(scale)
    cb = c // 2
    hid = cfg.ffn_expansion * c
    hw = h * w
    out = [LayerCount(f"{prefix}.norm1", 2 * c, 2 * c * hw)]
    for branch in ("rwam", "swam"):
        acfg = cfg.attention(scale, block, branch)
        d = head_dim(cb, acfg)
        t = (2 * cfg.window - 1) ** 2
        if acfg.qkv_mode == "project":
            out.append(_conv_count(f"{prefix}.{branch}.qkv", cb, 3 * cb, 1, 1, h, w))
        if branch == "rwam":
            out.append(LayerCount(f"{prefix}.rwam.bias_tables", (acfg.region.count + 1) * acfg.heads * t, 0))
            # router: window means plus descriptor dot products
            s = hw // cfg.window ** 2
            out.append(LayerCount(f"{prefix}.rwam.router", 0, 2 * d * hw + s * acfg.region.count * d))
            out.append(LayerCount(f"{prefix}.rwam.attention", 0, count_attention_macs(acfg, h, w, d)))
        else:
            out.append(LayerCount(f"{prefix}.swam.bias_table", acfg.heads * t, 0))
            out.append(LayerCount(f"{prefix}.swam.attention", 0, count_swam_macs(acfg, h, w, d)))
        out.append(_conv_count(f"{prefix}.{branch}.proj", d, cb, 1, 1, h, w))
    out.append(_conv_count(f"{prefix}.fuse", c, c, 1, 1, h, w))
    out.append(LayerCount(f"{prefix}.ffn.norm", 2 * c, 2 * c * hw))
    out.append(_conv_count(f"{prefix}.ffn.expand", c, 2 * hid, 1, 1, h, w))
    out.append(_conv_count(f"{prefix}.ffn.dw", hid, hid, 3, 3, h, w, groups=hid))
    out.append(LayerCount(f"{prefix}.ffn.gate", 0, hid * hw))
    out.append(LayerCount(f"{prefix}.ffn.sca", hid * hid + hid, hid * hid + 2 * hid * hw))
    out.append(_conv_count(f"{prefix}.ffn.out", hid, c, 1, 1, h, w))
    return out


def count_layers(cfg: ModelConfig, h: int, w: int) -> list[LayerCount]:
    """Itemised parameter and multiply-accumulate counts (FLOPs counted as MACs)."""
    mult = cfg.pad_multiple
    h, w = h + (-h % mult), w + (-w % mult)
    items = [_conv_count("stem", 3, cfg.channels, 3, 3, h, w)]
    for i in range(N_SCALES):
        hi, wi = h >> i, w >> i
        for b in range(cfg.depths[i]):
            items += _block_counts(cfg, f"enc{i}.block{b}", i, b, hi, wi)
        if i < N_SCALES - 1:
            items.append(_conv_count(f"down{i}", cfg.width(i), 2 * cfg.width(i), 2, 2, hi // 2, wi // 2))
    if cfg.msr_enabled:
        j = N_SCALES - 1
        items.append(_conv_count(f"msr{j}", cfg.width(j), 3, 3, 3, h >> j, w >> j))
    for i in reversed(range(N_SCALES - 1)):
        c, hi, wi = cfg.width(i), h >> i, w >> i
        items.append(_conv_count(f"up{i}", 2 * c, 4 * c, 1, 1, hi // 2, wi // 2))
        items.append(_conv_count(f"skip{i}", 2 * c, c, 1, 1, hi, wi))
        for b in range(cfg.depths[i]):
            items += _block_counts(cfg, f"dec{i}.block{b}", i, b, hi, wi)
        if cfg.msr_enabled and i > 0:
            items.append(_conv_count(f"msr{i}", c, 3, 3, 3, hi, wi))
    items.append(_conv_count("head", cfg.channels, 3, 3, 3, h, w))
    return items


def count_params_flops(cfg: ModelConfig, h: int, w: int) -> tuple[int, int]:
    items = count_layers(cfg, h, w)
    return sum(i.params for i in items), sum(i.flops for i in items)


def count_state_params(state: ModelState) -> int:
    return int(sum(p.data.size for p in state.params.values()))


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
