"""Slow reference implementations used to cross-check the vectorised code.

Everything here works on plain float64 numpy arrays with explicit loops and
shares no code with the tensor ops it checks.
"""

from __future__ import annotations

import cmath
import math

import numpy as np


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    p, q = a.shape
    r = b.shape[1]
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            acc = 0.0
            for t in range(q):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_direct(v) -> list[float]:
    e = [math.exp(x) for x in v]
    s = math.fsum(e)
    return [x / s for x in e]


def conv2d_loops(x, weight, bias=None, stride=1, padding=0) -> np.ndarray:
    c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for y in range(oh):
            for xx in range(ow):
                acc = 0.0 if bias is None else float(bias[o])
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            sy, sx = y * stride + i - padding, xx * stride + j - padding
                            if 0 <= sy < h and 0 <= sx < w:
                                acc += x[c, sy, sx] * weight[o, c, i, j]
                out[o, y, xx] = acc
    return out


def dwconv_loops(x, weight, bias=None, padding=1) -> np.ndarray:
    c = x.shape[0]
    out = [conv2d_loops(x[ch:ch + 1], weight[ch:ch + 1], None if bias is None else bias[ch:ch + 1],
                        1, padding) for ch in range(c)]
    return np.concatenate(out, axis=0)


def layer_norm_direct(x, gamma, beta, eps=1e-6) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros_like(x)
    for y in range(h):
        for xx in range(w):
            v = [x[ch, y, xx] for ch in range(c)]
            mu = math.fsum(v) / c
            var = math.fsum((t - mu) ** 2 for t in v) / c
            for ch in range(c):
                out[ch, y, xx] = (v[ch] - mu) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def gelu_erf(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def dft2_direct(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """O(n^4) DFT per channel."""
    c, h, w = x.shape
    re, im = np.zeros_like(x), np.zeros_like(x)
    for ch in range(c):
        for u in range(h):
            for v in range(w):
                acc = 0j
                for y in range(h):
                    for xx in range(w):
                        acc += x[ch, y, xx] * cmath.exp(-2j * math.pi * (u * y / h + v * xx / w))
                re[ch, u, v], im[ch, u, v] = acc.real, acc.imag
    return re, im


def pixel_shuffle_loops(x: np.ndarray, s: int) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c // (s * s), h * s, w * s))
    for ch in range(c // (s * s)):
        for y in range(h):
            for xx in range(w):
                for dy in range(s):
                    for dx in range(s):
                        out[ch, s * y + dy, s * xx + dx] = x[ch * s * s + dy * s + dx, y, xx]
    return out


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def region_offsets(kind: str, radius: int) -> list[tuple[int, int]]:
    offs = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            if kind == "cross" and dy != 0 and dx != 0:
                continue
            offs.append((dy, dx))
    return offs  # already in (dy, dx) lexicographic order


def _pointwise(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    wm = weight.reshape(weight.shape[0], -1)
    out = np.zeros((wm.shape[0], h, w))
    for y in range(h):
        for xx in range(w):
            out[:, y, xx] = wm @ x[:, y, xx] + bias
    return out


def _window_tokens(t: np.ndarray, k: int, wy: int, wx: int) -> list[np.ndarray]:
    return [t[:, wy * k + i, wx * k + j] for i in range(k) for j in range(k)]


def _rel_bias(table_row: np.ndarray, k: int, q: int, p: int) -> float:
    qy, qx = divmod(q, k)
    py, px = divmod(p, k)
    return float(table_row[(qy - py + k - 1) * (2 * k - 1) + (qx - px + k - 1)])


def _qkv(x, params, mode):
    if mode == "project":
        t = _pointwise(x, params["qkv.weight"], params["qkv.bias"])
    else:
        t = x
    d = t.shape[0] // 3
    return t[:d], t[d:2 * d], t[2 * d:], d


def rwam_loop(x: np.ndarray, params: dict, k: int, heads: int, r_i: int, kind: str, radius: int,
              qkv_mode: str = "project", return_weights: bool = False):
    """Window-by-window routed attention following the gather-then-attend recipe."""
    q, key, v, d = _qkv(x, params, qkv_mode)
    _, h, w = x.shape
    s_h, s_w = h // k, w // k
    n = d // heads
    offs = region_offsets(kind, radius)
    desc_q, desc_k = {}, {}
    for i in range(s_h):
        for j in range(s_w):
            tq, tk = _window_tokens(q, k, i, j), _window_tokens(key, k, i, j)
            desc_q[i, j] = sum(tq) / len(tq)
            desc_k[i, j] = sum(tk) / len(tk)
    out = np.zeros((d, h, w))
    weights = {}
    for i in range(s_h):
        for j in range(s_w):
            cands = [(min(max(i + dy, 0), s_h - 1), min(max(j + dx, 0), s_w - 1)) for dy, dx in offs]
            sims = softmax_direct([float(desc_q[i, j] @ desc_k[c]) for c in cands])
            order = sorted(range(len(offs)), key=lambda s: (-sims[s], s))[:r_i]
            # distinct key windows: centre first, then routed slots by rank
            chosen = [("c", (i, j))]
            for slot in order:
                if all(cands[slot] != win for _, win in chosen):
                    chosen.append((slot, cands[slot]))
            qt = _window_tokens(q, k, i, j)
            for m in range(heads):
                hs = slice(m * n, (m + 1) * n)
                for qi, qv in enumerate(qt):
                    logits, vals = [], []
                    for slot, (wy, wx) in chosen:
                        table = params["center_bias"][m] if slot == "c" else params["bias_table"][slot, m]
                        kt, vt = _window_tokens(key, k, wy, wx), _window_tokens(v, k, wy, wx)
                        for pi in range(k * k):
                            logits.append(float(qv[hs] @ kt[pi][hs]) / math.sqrt(n) + _rel_bias(table, k, qi, pi))
                            vals.append(vt[pi][hs])
                    a = softmax_direct(logits)
                    weights[i, j, m, qi] = a
                    o = sum(wt * vv for wt, vv in zip(a, vals))
                    out[hs, i * k + qi // k, j * k + qi % k] = o
    y = _pointwise(out, params["proj.weight"], params["proj.bias"])
    return (y, weights) if return_weights else y


def rwam_dense_coverage(x: np.ndarray, params: dict, k: int, heads: int, radius: int,
                        qkv_mode: str = "project") -> np.ndarray:
    """Every query attends to every pixel; each non-centre window's bias comes
    from the lowest candidate slot that lands on it."""
    q, key, v, d = _qkv(x, params, qkv_mode)
    _, h, w = x.shape
    s_h, s_w = h // k, w // k
    n = d // heads
    offs = region_offsets("rectangle", radius)
    out = np.zeros((d, h, w))
    for py in range(h):
        for px in range(w):
            wy, wx = py // k, px // k
            slot_of = {}
            for slot, (dy, dx) in enumerate(offs):
                tgt = (min(max(wy + dy, 0), s_h - 1), min(max(wx + dx, 0), s_w - 1))
                slot_of.setdefault(tgt, slot)
            qi = (py % k) * k + px % k
            for m in range(heads):
                hs = slice(m * n, (m + 1) * n)
                logits, vals = [], []
                for ky in range(h):
                    for kx in range(w):
                        kw_ = (ky // k, kx // k)
                        table = (params["center_bias"][m] if kw_ == (wy, wx)
                                 else params["bias_table"][slot_of[kw_], m])
                        pi = (ky % k) * k + kx % k
                        logits.append(float(q[hs, py, px] @ key[hs, ky, kx]) / math.sqrt(n)
                                      + _rel_bias(table, k, qi, pi))
                        vals.append(v[hs, ky, kx])
                a = softmax_direct(logits)
                out[hs, py, px] = sum(wt * vv for wt, vv in zip(a, vals))
    return _pointwise(out, params["proj.weight"], params["proj.bias"])


def swam_loop(x: np.ndarray, params: dict, k: int, heads: int, shift: int,
              qkv_mode: str = "project") -> np.ndarray:
    """Shifted window attention by explicit index arithmetic (no rolls)."""
    q, key, v, d = _qkv(x, params, qkv_mode)
    _, h, w = x.shape
    n = d // heads

    def region(pos: int, size: int) -> int:
        # label of a shifted-frame coordinate along one axis
        if not shift:
            return 0
        return 0 if pos < size - k else (1 if pos < size - shift else 2)

    out = np.zeros((d, h, w))
    for wy in range(h // k):
        for wx in range(w // k):
            coords = [(wy * k + i, wx * k + j) for i in range(k) for j in range(k)]
            for qi, (sy, sx) in enumerate(coords):
                oy, ox = (sy + shift) % h, (sx + shift) % w
                for m in range(heads):
                    hs = slice(m * n, (m + 1) * n)
                    logits, vals = [], []
                    for pi, (ty, tx) in enumerate(coords):
                        ky, kx = (ty + shift) % h, (tx + shift) % w
                        val = float(q[hs, oy, ox] @ key[hs, ky, kx]) / math.sqrt(n)
                        val += _rel_bias(params["bias_table"][m], k, qi, pi)
                        if (region(sy, h), region(sx, w)) != (region(ty, h), region(tx, w)):
                            val -= 100.0
                        logits.append(val)
                        vals.append(v[hs, ky, kx])
                    a = softmax_direct(logits)
                    out[hs, oy, ox] = sum(wt * vv for wt, vv in zip(a, vals))
    return _pointwise(out, params["proj.weight"], params["proj.bias"])


def dense_attention_macs(h: int, w: int, d: int) -> int:
    """MACs of full-image attention, counted by running it through the tensor matmul."""
    from . import tensorlab as tl

    rng = np.random.default_rng(0)
    q = tl.Tensor(rng.standard_normal((h * w, d)))
    k = tl.Tensor(rng.standard_normal((h * w, d)))
    with tl.no_grad(), tl.mac_counter() as ctr:
        a = tl.softmax(tl.matmul(q, tl.transpose(k, (1, 0))), -1)
        tl.matmul(a, k)
    return ctr["macs"]


def bilinear_direct(img: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Half-pixel aligned bilinear resize evaluated pixel by pixel."""
    c, h, w = img.shape
    out = np.zeros((c, h_out, w_out))

    def src(i, n_in, n_out):
        s = (i + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1)
        lo = int(math.floor(s))
        return lo, min(lo + 1, n_in - 1), s - lo

    for y in range(h_out):
        y0, y1, ty = src(y, h, h_out)
        for x in range(w_out):
            x0, x1, tx = src(x, w, w_out)
            out[:, y, x] = ((1 - ty) * (1 - tx) * img[:, y0, x0] + (1 - ty) * tx * img[:, y0, x1]
                            + ty * (1 - tx) * img[:, y1, x0] + ty * tx * img[:, y1, x1])
    return out


# ---------------------------------------------------------------------------
# optimiser and container
# ---------------------------------------------------------------------------

def adamw_reference(p: list[float], grads: list[list[float]], lr: float, beta1=0.9, beta2=0.999,
                    eps=1e-8, weight_decay=0.0) -> list[float]:
    """Scalar AdamW over a sequence of gradients, same operation order as the
    decoupled-decay formulation (decay, moments, bias-corrected step)."""
    p = list(p)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for i, gi in enumerate(g):
            m[i] = m[i] * beta1 + (1.0 - beta1) * gi
            v[i] = v[i] * beta2 + (1.0 - beta2) * gi * gi
            p[i] = p[i] * (1.0 - lr * weight_decay)
            p[i] = p[i] - lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)
    return p


def read_container_minimal(path) -> dict[str, np.ndarray]:
    """Bare-bones reader of the checkpoint container, written from the format
    description alone (no validation beyond the CRC)."""
    import struct
    import zlib

    with open(path, "rb") as fh:
        buf = fh.read()
    assert buf[:4] == b"RWFC"
    assert zlib.crc32(buf[:-4]) == int.from_bytes(buf[-4:], "little")
    count = int.from_bytes(buf[8:12], "little")
    pos, out = 12, {}
    for _ in range(count):
        n = int.from_bytes(buf[pos:pos + 4], "little")
        key = buf[pos + 4:pos + 4 + n].decode()
        pos += 4 + n
        tag, rank = buf[pos], int.from_bytes(buf[pos + 1:pos + 5], "little")
        pos += 5
        dims = [int.from_bytes(buf[pos + 8 * i:pos + 8 * i + 8], "little") for i in range(rank)]
        pos += 8 * rank
        size = struct.calcsize("<f" if tag == 0 else "<d")
        count_el = int(np.prod(dims)) if dims else 1
        vals = struct.unpack_from(("<%df" if tag == 0 else "<%dd") % count_el, buf, pos)
        pos += size * count_el
        out[key] = np.array(vals, dtype=np.float32 if tag == 0 else np.float64).reshape(dims)
    return out
