"""Routed window attention (RWAM) and shifted window attention (SWAM).

Both branches work on a ``[c,h,w]`` feature map whose sides are multiples of
the window size.  Tokens are laid out ``[S, k*k, c]`` with ``S = s_h*s_w``
windows in row-major grid order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorlab as tl
from .tensorlab import Tensor
from .windowing import Region, RegionShape, WindowGrid, build_index_table, from_tokens, to_tokens


class ConfigError(ValueError):
    """Raised for attention settings that cannot be realised on a given input."""


@dataclass(frozen=True)
class AttentionConfig:
    k: int = 8
    heads: int = 1
    r_i: int = 1
    region: RegionShape = field(default_factory=lambda: RegionShape(Region.CROSS, 2))
    shift: int = 0
    # "project": 1x1 conv to 3c then chunk (d = c); "split": chunk the input (d = c/3)
    qkv_mode: str = "project"

    def __post_init__(self):
        if self.shift not in (0, self.k // 2):
            raise ConfigError(f"shift must be 0 or {self.k // 2}, got {self.shift}")
        # r_i = 0 (centre window only) is legal for counting; the router rejects it
        if not 0 <= self.r_i <= self.region.count:
            raise ConfigError(f"r_i={self.r_i} outside [0, {self.region.count}]")
        if self.qkv_mode not in ("project", "split"):
            raise ConfigError(f"unknown qkv_mode {self.qkv_mode!r}")


@dataclass
class RouterSelection:
    similarity: np.ndarray  # H: [s_h, s_w, r_n]
    relative: np.ndarray  # I: [s_h, s_w, r_i]
    absolute: np.ndarray  # J: [s_h, s_w, r_i]


def head_dim(c_b: int, cfg: AttentionConfig) -> int:
    """Width ``d`` of Q/K/V for a branch with ``c_b`` channels."""
    if cfg.qkv_mode == "split":
        if c_b % 3:
            raise ConfigError(f"qkv_mode='split' needs channels divisible by 3, got {c_b}")
        return c_b // 3
    return c_b


def _check(c_b: int, h: int, w: int, cfg: AttentionConfig) -> int:
    d = head_dim(c_b, cfg)
    if d % cfg.heads:
        raise ConfigError(f"{cfg.heads} heads do not divide width {d}")
    if h % cfg.k or w % cfg.k:
        raise ConfigError(f"feature map {h}x{w} not divisible by window {cfg.k}")
    return d


# ---------------------------------------------------------------------------
# router
# ---------------------------------------------------------------------------

def window_descriptors(qw, kw):
    """Mean over the k*k token axis of ``[s_h,s_w,d,k*k]`` windows."""
    qw = np.asarray(getattr(qw, "data", qw))
    kw = np.asarray(getattr(kw, "data", kw))
    return qw.mean(axis=-1), kw.mean(axis=-1)


def regional_similarity(q_r, k_r, table: np.ndarray) -> np.ndarray:
    """H[i,j,:] = softmax over candidate slots of <Q_r(i,j), K_r(candidate)>."""
    q_r = np.asarray(getattr(q_r, "data", q_r))
    k_r = np.asarray(getattr(k_r, "data", k_r))
    s_h, s_w, d = q_r.shape
    cand = k_r.reshape(s_h * s_w, d)[table]  # [s_h, s_w, r_n, d]
    logits = np.einsum("ijd,ijnd->ijn", q_r, cand)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def topk_select(sim: np.ndarray, r_i: int) -> np.ndarray:
    """Indices of the r_i largest slots, descending; ties go to the lower slot."""
    r_n = sim.shape[-1]
    if not 1 <= r_i <= r_n:
        raise ConfigError(f"r_i={r_i} outside [1, {r_n}]")
    return np.argsort(-sim, axis=-1, kind="stable")[..., :r_i]


def remap_indices(rel: np.ndarray, table: np.ndarray) -> np.ndarray:
    return np.take_along_axis(table, rel, axis=-1)


def route(q_tokens: np.ndarray, k_tokens: np.ndarray, grid: WindowGrid,
          cfg: AttentionConfig) -> RouterSelection:
    """Run the router on ``[S,k*k,d]`` token arrays.  No gradient flows through here."""
    to_win = lambda t: t.reshape(grid.s_h, grid.s_w, *t.shape[1:]).swapaxes(-1, -2)
    q_r, k_r = window_descriptors(to_win(q_tokens), to_win(k_tokens))
    table = build_index_table(grid, cfg.region)
    sim = regional_similarity(q_r, k_r, table)
    rel = topk_select(sim, cfg.r_i)
    return RouterSelection(sim, rel, remap_indices(rel, table))


def distinct_key_mask(absolute: np.ndarray) -> np.ndarray:
    """Validity of each gathered window ``[S, r_i+1]`` (centre last).

    Border clamping can map several slots, or the centre itself, onto one
    window; only the first occurrence (centre first) is kept so every distinct
    window is attended exactly once.
    """
    S = absolute.shape[0] * absolute.shape[1]
    sel = absolute.reshape(S, -1)
    valid = np.ones((S, sel.shape[1] + 1), dtype=bool)
    for s in range(S):
        seen = {s}
        for t, win in enumerate(sel[s]):
            if win in seen:
                valid[s, t] = False
            seen.add(int(win))
    return valid


# ---------------------------------------------------------------------------
# relative position bias
# ---------------------------------------------------------------------------

def relative_index(k: int) -> np.ndarray:
    """``[k*k, k*k]`` index into a flattened ``(2k-1)^2`` table."""
    ys, xs = np.divmod(np.arange(k * k), k)
    dy = ys[:, None] - ys[None, :] + k - 1
    dx = xs[:, None] - xs[None, :] + k - 1
    return dy * (2 * k - 1) + dx


def build_bias_matrix(table: Tensor, k: int) -> Tensor:
    """``[m,(2k-1)^2] -> [m,k*k,k*k]``."""
    return tl.take(table, relative_index(k), axis=1)


def gather_bias(cand_tables: Tensor, center_table: Tensor, rel: np.ndarray, k: int) -> Tensor:
    """Concatenated bias ``[s_h,s_w,m,k*k,(r_i+1)*k*k]``: selected slots, then centre."""
    s_h, s_w, r_i = rel.shape
    S, kk = s_h * s_w, k * k
    m = center_table.shape[0]
    full = tl.take(cand_tables, relative_index(k), axis=2)  # [r_n,m,kk,kk]
    sel = tl.take(full, rel.reshape(S, r_i), axis=0)  # [S,r_i,m,kk,kk]
    sel = tl.reshape(tl.transpose(sel, (0, 2, 3, 1, 4)), (S, m, kk, r_i * kk))
    center = broadcast_to(build_bias_matrix(center_table, k), (S, m, kk, kk))
    out = tl.concat([sel, center], axis=3)
    return tl.reshape(out, (s_h, s_w, m, kk, (r_i + 1) * kk))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return tl._record(np.broadcast_to(x.data, shape).copy(), (x,),
                      lambda g: (tl._unbroadcast(g, x.shape),), "broadcast")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _init_projections(rng, c_b: int, cfg: AttentionConfig, dtype) -> dict[str, np.ndarray]:
    d = head_dim(c_b, cfg)
    p = {}
    if cfg.qkv_mode == "project":
        p["qkv.weight"] = fan_in_uniform(rng, (3 * c_b, c_b, 1, 1), c_b, dtype)
        p["qkv.bias"] = fan_in_uniform(rng, (3 * c_b,), c_b, dtype)
    p["proj.weight"] = fan_in_uniform(rng, (c_b, d, 1, 1), d, dtype)
    p["proj.bias"] = fan_in_uniform(rng, (c_b,), d, dtype)
    return p


def init_rwam(rng: np.random.Generator, c_b: int, cfg: AttentionConfig, dtype=np.float64) -> dict[str, np.ndarray]:
    p = _init_projections(rng, c_b, cfg, dtype)
    t = (2 * cfg.k - 1) ** 2
    p["bias_table"] = trunc_normal(rng, (cfg.region.count, cfg.heads, t), dtype=dtype)
    p["center_bias"] = trunc_normal(rng, (cfg.heads, t), dtype=dtype)
    return p


def init_swam(rng: np.random.Generator, c_b: int, cfg: AttentionConfig, dtype=np.float64) -> dict[str, np.ndarray]:
    p = _init_projections(rng, c_b, cfg, dtype)
    p["bias_table"] = trunc_normal(rng, (cfg.heads, (2 * cfg.k - 1) ** 2), dtype=dtype)
    return p


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _qkv(x: Tensor, p: dict, cfg: AttentionConfig) -> Tensor:
    if cfg.qkv_mode == "project":
        return tl.conv1x1(x, p["qkv.weight"], p["qkv.bias"])
    return x


def _heads(t: Tensor, m: int) -> Tensor:
    S, kk, d = t.shape
    return tl.transpose(tl.reshape(t, (S, kk, m, d // m)), (0, 2, 1, 3))


def _unheads(t: Tensor) -> Tensor:
    S, m, kk, n = t.shape
    return tl.reshape(tl.transpose(t, (0, 2, 1, 3)), (S, kk, m * n))


def masked_softmax(x: Tensor, valid: np.ndarray | None, axis: int = -1) -> Tensor:
    """Softmax where ``valid == False`` positions get exactly zero weight."""
    if valid is None:
        return tl.softmax(x, axis)
    if not np.all(np.isfinite(x.data)):
        raise tl.NumericError("softmax received non-finite input")
    valid = np.broadcast_to(valid, x.shape)
    z = np.where(valid, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return tl._record(y, (x,), bw, "softmax")


def rwam_forward(x: Tensor, p: dict, cfg: AttentionConfig, record: list | None = None) -> Tensor:
    """Route-window attention on ``x[c_b,h,w]``; output has the same shape."""
    c_b, h, w = x.shape
    d = _check(c_b, h, w, cfg)
    k, m = cfg.k, cfg.heads
    grid = WindowGrid(k, h, w)
    S, kk = grid.count, k * k

    tok = to_tokens(_qkv(x, p, cfg), k)  # [S,kk,3d]
    q, key, v = tl.split(tok, 3, axis=2)
    sel = route(q.data, key.data, grid, cfg)
    J = sel.absolute.reshape(S, cfg.r_i)

    qh, kh, vh = _heads(q, m), _heads(key, m), _heads(v, m)  # [S,m,kk,n]

    def gathered(t: Tensor) -> Tensor:
        g = tl.take(t, J, axis=0)  # [S,r_i,m,kk,n]
        g = tl.reshape(tl.transpose(g, (0, 2, 1, 3, 4)), (S, m, cfg.r_i * kk, d // m))
        return tl.concat([g, t], axis=2)

    kg, vg = gathered(kh), gathered(vh)
    bias = tl.reshape(gather_bias(p["bias_table"], p["center_bias"], sel.relative, k),
                      (S, m, kk, (cfg.r_i + 1) * kk))
    valid = np.repeat(distinct_key_mask(sel.absolute), kk, axis=1)[:, None, None, :]
    logits = tl.matmul(qh, tl.transpose(kg, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // m)) + bias
    attn = masked_softmax(logits, valid)
    out = tl.matmul(attn, vg)
    if record is not None:
        windows = np.concatenate([J, np.arange(S)[:, None]], axis=1)
        record.append({"branch": "rwam", "weights": attn.data, "key_windows": windows,
                       "k": k, "h": h, "w": w, "shift": 0})
    y = from_tokens(_unheads(out), k, h, w)
    return tl.conv1x1(y, p["proj.weight"], p["proj.bias"])


def shift_mask(h: int, w: int, k: int, shift: int) -> np.ndarray:
    """``[S,k*k,k*k]`` validity for cyclically shifted windows (True = same region)."""
    labels = np.zeros((h, w), dtype=np.intp)
    cuts = (slice(0, -k), slice(-k, -shift), slice(-shift, None))
    n = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = n
            n += 1
    lab = labels.reshape(h // k, k, w // k, k).transpose(0, 2, 1, 3).reshape(-1, k * k)
    return lab[:, :, None] == lab[:, None, :]


def swam_forward(x: Tensor, p: dict, cfg: AttentionConfig, record: list | None = None) -> Tensor:
    """Window self-attention with relative position bias and optional cyclic shift."""
    c_b, h, w = x.shape
    d = _check(c_b, h, w, cfg)
    k, m, s = cfg.k, cfg.heads, cfg.shift

    qkv = _qkv(x, p, cfg)
    if s:
        qkv = tl.roll(qkv, (-s, -s), (1, 2))
    q, key, v = tl.split(to_tokens(qkv, k), 3, axis=2)
    qh, kh, vh = _heads(q, m), _heads(key, m), _heads(v, m)
    bias = build_bias_matrix(p["bias_table"], k)  # [m,kk,kk]
    logits = tl.matmul(qh, tl.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // m)) + bias
    if s:
        # masked logits are pushed down by 100 rather than removed
        logits = logits + Tensor(np.where(shift_mask(h, w, k, s), 0.0, -100.0)[:, None].astype(x.dtype))
    attn = tl.softmax(logits, -1)
    out = tl.matmul(attn, vh)
    if record is not None:
        S = out.shape[0]
        record.append({"branch": "swam", "weights": attn.data, "key_windows": np.arange(S)[:, None],
                       "k": k, "h": h, "w": w, "shift": s})
    y = from_tokens(_unheads(out), k, h, w)
    if s:
        y = tl.roll(y, (s, s), (1, 2))
    return tl.conv1x1(y, p["proj.weight"], p["proj.bias"])


def count_attention_macs(cfg: AttentionConfig, h: int, w: int, d: int) -> int:
    """Multiply-accumulates of the RWAM attention core (Q.K^T and A.V)."""
    return 2 * (cfg.r_i + 1) * cfg.k ** 2 * h * w * d


def count_swam_macs(cfg: AttentionConfig, h: int, w: int, d: int) -> int:
    return 2 * cfg.k ** 2 * h * w * d
