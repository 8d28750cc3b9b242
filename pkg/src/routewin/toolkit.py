"""Evaluation metrics and the attention-distance analyzer."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorlab import Tensor, no_grad
from .network import ModelState, model_forward

PSNR_CAP = 100.0


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 100."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class AttnEntry:
    """Attention of one head in one block.

    ``weights[Q,K]`` are row-stochastic, ``q_coords[Q,2]`` and
    ``k_coords[Q,K,2]`` are (row, col) positions in input-image pixels.
    """

    scale: int | str
    block: int | str
    branch: str
    head: int | str
    weights: np.ndarray
    q_coords: np.ndarray
    k_coords: np.ndarray

    def validate(self, h: int, w: int, tol: float = 1e-6) -> None:
        q, k = self.weights.shape
        if self.q_coords.shape != (q, 2) or self.k_coords.shape != (q, k, 2):
            raise ValueError(f"{self.label}: coordinate shapes do not match weights {self.weights.shape}")
        rows = self.weights.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > tol) or np.any(self.weights < 0):
            raise ValueError(f"{self.label}: weights are not row-stochastic")
        for c in (self.q_coords.reshape(-1, 2), self.k_coords.reshape(-1, 2)):
            if np.any(c < 0) or np.any(c[:, 0] > h - 1) or np.any(c[:, 1] > w - 1):
                raise ValueError(f"{self.label}: coordinates outside a {h}x{w} image")

    @property
    def label(self) -> str:
        return f"{self.scale}/{self.block}/{self.branch}/{self.head}"

    def mean_distance(self) -> float:
        """Unnormalised mean over queries of the attention-weighted pixel distance."""
        d = np.sqrt(((self.k_coords - self.q_coords[:, None, :]) ** 2).sum(axis=-1))
        return float(np.mean((self.weights * d).sum(axis=1)))


AttnRecord = list[AttnEntry]


def entry_distance(entry: AttnEntry, h: int, w: int) -> float:
    return entry.mean_distance() / math.hypot(h, w)


def attn_distance(rec: AttnRecord, h: int, w: int) -> float:
    """Normalised average attention distance: unweighted mean over entries,
    each divided by the image diagonal."""
    if not rec:
        raise ValueError("attn_distance: empty attention record")
    for e in rec:
        e.validate(h, w)
    return float(np.mean([entry_distance(e, h, w) for e in rec]))


def _window_positions(wins: np.ndarray, k: int, s_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Feature-map (row, col) of token ``t`` in window ``wins``: shapes ``wins.shape + (k*k,)``."""
    t = np.arange(k * k)
    rows = (wins // s_w)[..., None] * k + t // k
    cols = (wins % s_w)[..., None] * k + t % k
    return rows, cols


def entries_from_model(raw: list[dict], h: int, w: int) -> AttnRecord:
    """Turn the per-block dicts produced by ``model_forward(record=True)`` into
    per-head entries in input-image coordinates.

    Positions in the padded margin are clamped to the border pixel they
    replicate.
    """
    out: AttnRecord = []
    for r in raw:
        k, fh, fw, shift, scale = r["k"], r["h"], r["w"], r["shift"], r["scale"]
        s_w = fw // k
        S, m, kk, K = r["weights"].shape
        wins = np.arange(S)
        qy, qx = _window_positions(wins, k, s_w)  # [S,kk]
        ky, kx = _window_positions(r["key_windows"], k, s_w)  # [S,nwin,kk]
        qy, qx = (qy + shift) % fh, (qx + shift) % fw
        ky, kx = (ky + shift) % fh, (kx + shift) % fw
        f = 2 ** scale
        off = (f - 1) / 2.0

        def to_img(yy, xx):
            return np.stack([np.clip(yy * f + off, 0, h - 1), np.clip(xx * f + off, 0, w - 1)], axis=-1)

        qc = to_img(qy, qx).reshape(S * kk, 2)
        kc = to_img(ky, kx).reshape(S, 1, K, 2)
        kc = np.broadcast_to(kc, (S, kk, K, 2)).reshape(S * kk, K, 2)
        block = f"{r.get('stage', 'blk')}.{r['block']}"
        for head in range(m):
            wts = r["weights"][:, head].reshape(S * kk, K).astype(np.float64)
            out.append(AttnEntry(scale, block, r["branch"], head, wts, qc, kc))
    return out


def analyze_image(state: ModelState, img: np.ndarray) -> AttnRecord:
    _, h, w = img.shape
    dtype = next(state.parameters()).dtype
    with no_grad():
        _, _, raw = model_forward(Tensor(img.astype(dtype)), state, record=True)
    return entries_from_model(raw, h, w)


def distance_rows(rec: AttnRecord, h: int, w: int) -> list[tuple]:
    """``(scale, block, branch, head, distance)`` rows followed by the aggregate."""
    rows = [(e.scale, e.block, e.branch, e.head, entry_distance(e, h, w)) for e in rec]
    rows.append(("ALL", "ALL", "ALL", "ALL", attn_distance(rec, h, w)))
    return rows


def write_distance_csv(rows: list[tuple], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scale", "block", "branch", "head", "distance"])
        for *labels, v in rows:
            wr.writerow([*labels, repr(float(v))])


def read_distance_csv(path: str | os.PathLike) -> list[tuple]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["scale", "block", "branch", "head", "distance"]:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(*row[:4], float(row[4])) for row in rd]
