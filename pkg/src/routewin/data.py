"""Image files, paired datasets and synthetic degradation pairs."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .trainer import IngestionError


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit RGB PNG as ``[3,h,w]`` floats in [0,1]."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise IngestionError(f"{path}: only PNG images are supported")
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise IngestionError(f"{path}: not a PNG file ({im.format})")
            if im.mode != "RGB":
                raise IngestionError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    img = np.asarray(getattr(img, "data", img), dtype=np.float64)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


@dataclass
class DatasetIndex:
    root: Path
    pairs: list[tuple[Path, Path]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def load(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(load_image(a), load_image(b)) for a, b in self.pairs]


def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc


def index_dataset(root: str | os.PathLike) -> DatasetIndex:
    """Pair ``root/input/NAME`` with ``root/target/NAME``, sorted by name."""
    root = Path(root)
    ind, tgt = root / "input", root / "target"
    for d in (ind, tgt):
        if not d.is_dir():
            raise IngestionError(f"missing directory {d}")
    inputs = {p.name: p for p in ind.iterdir() if p.is_file()}
    targets = {p.name: p for p in tgt.iterdir() if p.is_file()}
    problems = [f"input without target: {n}" for n in sorted(inputs.keys() - targets.keys())]
    problems += [f"target without input: {n}" for n in sorted(targets.keys() - inputs.keys())]
    pairs = []
    for name in sorted(inputs.keys() & targets.keys()):
        a, b = inputs[name], targets[name]
        if _image_size(a) != _image_size(b):
            problems.append(f"size mismatch: {name} {_image_size(a)} vs {_image_size(b)}")
        pairs.append((a, b))
    if problems:
        raise IngestionError("; ".join(problems))
    return DatasetIndex(root, pairs)


def synthetic_clean(size: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-smooth RGB image: a colour gradient with a few hard-edged shapes."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, base = rng.uniform(-0.3, 0.3, size=3)
        img[c] = 0.5 + base + a * yy + b * xx
    for _ in range(int(rng.integers(3, 6))):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.08, 0.25)
        colour = rng.uniform(0, 1, size=3)
        if rng.integers(0, 2):
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * 0.6)
        img[:, mask] = colour[:, None]
    # thin stripes give the high-frequency content blur destroys
    stripes = 0.1 * np.sign(np.sin(xx * size * rng.uniform(0.6, 1.2)))
    img += stripes[None] * (yy > 0.5)[None]
    return np.clip(img, 0.0, 1.0)


def degrade(clean: np.ndarray, rng: np.random.Generator, sigma: float = 0.0, noise: float = 0.0,
            transmission: float = 0.6, airlight: float = 0.9) -> np.ndarray:
    """Atmospheric-scattering haze ``J*t + A*(1-t)``, optionally after a Gaussian blur and with noise."""
    out = clean
    if sigma > 0:
        out = np.stack([gaussian_filter(ch, sigma, mode="reflect") for ch in out])
    out = out * transmission + airlight * (1.0 - transmission)
    if noise > 0:
        out = out + rng.normal(0, noise, size=clean.shape)
    return np.clip(out, 0.0, 1.0)


def synthetic_pairs(n: int = 4, size: int = 64, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` (degraded, clean) pairs of ``[3,size,size]`` images."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        clean = synthetic_clean(size, rng)
        pairs.append((degrade(clean, rng), clean))
    return pairs


def write_dataset(pairs, root: str | os.PathLike) -> DatasetIndex:
    root = Path(root)
    (root / "input").mkdir(parents=True, exist_ok=True)
    (root / "target").mkdir(parents=True, exist_ok=True)
    for i, (x, y) in enumerate(pairs):
        save_image(x, root / "input" / f"{i:04d}.png")
        save_image(y, root / "target" / f"{i:04d}.png")
    return index_dataset(root)
