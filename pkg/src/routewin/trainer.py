"""AdamW, cosine schedule, patch sampling, the training loop and checkpoint files."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorlab as tl
from .network import PRESETS, ModelConfig, ModelState, model_forward
from .objective import LossReport, LossWeights, total_loss
from .tensorlab import NumericError, Tensor

log = logging.getLogger(__name__)


class FormatError(ValueError):
    """Malformed checkpoint or run-config file."""


class IngestionError(ValueError):
    """Training data that cannot be used as given."""


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {key!r}")
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        m = opt.m.get(key)
        if m is None:
            m = opt.m[key] = np.zeros_like(p.data)
            opt.v[key] = np.zeros_like(p.data)
        v = opt.v[key]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p.data *= 1.0 - lr * opt.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    lr_start: float = 1e-3
    lr_end: float = 1e-7


def cosine_lr(t: float, sched: Schedule) -> float:
    if sched.total_steps <= 0:
        return sched.lr_start
    t = min(max(t, 0), sched.total_steps)
    if t == 0:
        return sched.lr_start
    if t == sched.total_steps:
        return sched.lr_end
    return sched.lr_end + 0.5 * (sched.lr_start - sched.lr_end) * (1 + math.cos(math.pi * t / sched.total_steps))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    input: np.ndarray
    target: np.ndarray
    hflip: bool = False
    vflip: bool = False
    offset: tuple[int, int] = (0, 0)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so replays are bit-identical."""
    return np.random.Generator(np.random.Philox(key=seed))


def sample_patch(pair: tuple[np.ndarray, np.ndarray], p: int, rng: np.random.Generator,
                 augment: bool = True) -> TrainSample:
    """Crop the same ``p x p`` window from input and target and flip both alike."""
    x, y = pair
    _, h, w = x.shape
    if y.shape != x.shape:
        raise IngestionError(f"input {x.shape} and target {y.shape} differ")
    if h < p or w < p:
        raise IngestionError(f"image {h}x{w} smaller than patch {p}")
    oy = int(rng.integers(0, h - p + 1))
    ox = int(rng.integers(0, w - p + 1))
    hflip = vflip = False
    if augment:
        hflip, vflip = (bool(b) for b in rng.integers(0, 2, size=2))
    xs, ys = x[:, oy:oy + p, ox:ox + p], y[:, oy:oy + p, ox:ox + p]
    if hflip:
        xs, ys = xs[:, :, ::-1], ys[:, :, ::-1]
    if vflip:
        xs, ys = xs[:, ::-1], ys[:, ::-1]
    return TrainSample(np.ascontiguousarray(xs), np.ascontiguousarray(ys), hflip, vflip, (oy, ox))


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    preset: str = "RWF-desk"
    steps: int = 500
    batch_size: int = 4
    patch: int = 64
    lr_start: float = 1e-3
    lr_end: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    alpha: float = 0.1
    lam: float = 0.1
    seed: int = 0
    ckpt_every: int = 100
    augment: bool = True
    dtype: str = "float32"
    # model overrides; None keeps the preset value
    depths: tuple[int, ...] | None = None
    channels: int | None = None
    window: int | None = None
    heads: tuple[int, ...] | None = None
    r_i: tuple[int, ...] | None = None
    radius: int | None = None
    ffn_expansion: int | None = None
    msr_enabled: bool | None = None
    qkv_mode: str | None = None

    def model_config(self) -> ModelConfig:
        if self.preset not in PRESETS:
            raise FormatError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        over = {f.name: getattr(self, f.name) for f in dataclasses.fields(ModelConfig)
                if getattr(self, f.name, None) is not None}
        return dataclasses.replace(PRESETS[self.preset], **over)

    @property
    def np_dtype(self):
        return {"float32": np.float32, "float64": np.float64}[self.dtype]


# run-config key -> TrainConfig field
_CONFIG_ALIASES = {"lambda": "lam", "msr": "msr_enabled"}


def _parse_value(raw: str, annotation: str):
    raw = raw.strip()
    if "bool" in annotation:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "tuple" in annotation:
        return tuple(int(v) for v in raw.replace("[", "").replace("]", "").split(",") if v.strip())
    if annotation.startswith("int"):
        return int(raw)
    if annotation.startswith("float"):
        return float(raw)
    return raw


def parse_run_config(text: str) -> TrainConfig:
    """Parse ``key=value`` lines (``#`` comments); unknown keys are errors."""
    fields = {f.name: str(f.type) for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _CONFIG_ALIASES.get(key, key)
        if name not in fields:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        try:
            values[name] = _parse_value(raw, fields[name])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    cfg = TrainConfig(**values)
    if cfg.dtype not in ("float32", "float64"):
        raise FormatError(f"dtype must be float32 or float64, got {cfg.dtype!r}")
    cfg.model_config()
    return cfg


def load_run_config(path: str | os.PathLike) -> TrainConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def format_run_config(cfg: TrainConfig) -> str:
    inverse = {v: k for k, v in _CONFIG_ALIASES.items()}
    lines = []
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if val is None:
            continue
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{inverse.get(f.name, f.name)}={val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"RWFC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_container(tensors: dict[str, np.ndarray], path: str | os.PathLike) -> None:
    """Write tensors to the RWFC container; CRC32 covers every preceding byte."""
    body = bytearray(MAGIC)
    body += struct.pack("<II", VERSION, len(tensors))
    for key, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise FormatError(f"{key}: unsupported dtype {arr.dtype}")
        kb = key.encode("utf-8")
        body += struct.pack("<I", len(kb)) + kb
        body += struct.pack("<BI", _TAGS[arr.dtype], arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    body += struct.pack("<I", zlib.crc32(body))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(body))
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError(f"truncated container at byte offset {len(buf)}")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at byte offset 0")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError(f"CRC mismatch at byte offset {len(buf) - 4}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte offset 4")
    pos, end = 12, len(buf) - 4
    out: dict[str, np.ndarray] = {}

    def need(n):
        if pos + n > end:
            raise FormatError(f"truncated record at byte offset {pos}")

    for _ in range(count):
        need(4)
        (klen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(klen)
        key = buf[pos:pos + klen].decode("utf-8")
        pos += klen
        need(5)
        tag, rank = struct.unpack_from("<BI", buf, pos)
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} at byte offset {pos}")
        pos += 5
        need(8 * rank)
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        out[key] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != end:
        raise FormatError(f"{end - pos} trailing bytes at byte offset {pos}")
    return out


_CFG_PREFIX = "__config__."


def _config_tensors(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {
        _CFG_PREFIX + "depths": np.array(cfg.depths, dtype=np.float64),
        _CFG_PREFIX + "channels": np.array([cfg.channels], dtype=np.float64),
        _CFG_PREFIX + "window": np.array([cfg.window], dtype=np.float64),
        _CFG_PREFIX + "heads": np.array(cfg.heads, dtype=np.float64),
        _CFG_PREFIX + "r_i": np.array(cfg.r_i, dtype=np.float64),
        _CFG_PREFIX + "radius": np.array([cfg.radius], dtype=np.float64),
        _CFG_PREFIX + "ffn_expansion": np.array([cfg.ffn_expansion], dtype=np.float64),
        _CFG_PREFIX + "msr_enabled": np.array([float(cfg.msr_enabled)]),
        _CFG_PREFIX + "qkv_split": np.array([float(cfg.qkv_mode == "split")]),
    }


def _config_from(tensors: dict[str, np.ndarray]) -> ModelConfig:
    try:
        g = lambda k: tensors[_CFG_PREFIX + k]
        return ModelConfig(
            depths=tuple(int(v) for v in g("depths")), channels=int(g("channels")[0]),
            window=int(g("window")[0]), heads=tuple(int(v) for v in g("heads")),
            r_i=tuple(int(v) for v in g("r_i")), radius=int(g("radius")[0]),
            ffn_expansion=int(g("ffn_expansion")[0]), msr_enabled=bool(g("msr_enabled")[0]),
            qkv_mode="split" if g("qkv_split")[0] else "project",
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint lacks config entry {exc}") from exc


def save_checkpoint(state: ModelState, opt: OptimState | None, path: str | os.PathLike) -> None:
    """Model tensors (plus the config) to ``path``; optimizer state to ``path + '.opt'``."""
    tensors = _config_tensors(state.config)
    tensors.update({k: v.data for k, v in state.params.items()})
    write_container(tensors, path)
    if opt is not None:
        ot = {
            "step": np.array([opt.step], dtype=np.float64),
            "hyper": np.array([opt.beta1, opt.beta2, opt.eps, opt.weight_decay], dtype=np.float64),
        }
        ot.update({f"m.{k}": v for k, v in opt.m.items()})
        ot.update({f"v.{k}": v for k, v in opt.v.items()})
        write_container(ot, str(path) + ".opt")


def load_checkpoint(path: str | os.PathLike, with_optimizer: bool = False):
    tensors = read_container(path)
    cfg = _config_from(tensors)
    params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items() if not k.startswith(_CFG_PREFIX)}
    state = ModelState(cfg, params)
    if not with_optimizer:
        return state
    opt_path = Path(str(path) + ".opt")
    if not opt_path.exists():
        return state, None
    ot = read_container(opt_path)
    b1, b2, eps, wd = (float(v) for v in ot["hyper"])
    opt = OptimState(b1, b2, eps, wd, int(ot["step"][0]),
                     {k[2:]: v for k, v in ot.items() if k.startswith("m.")},
                     {k[2:]: v for k, v in ot.items() if k.startswith("v.")})
    return state, opt


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    lr: float
    report: LossReport
    grad_norm: float


def _mean_reports(reports: Sequence[LossReport]) -> LossReport:
    n = len(reports)
    msr = [sum(r.msr[i] for r in reports) / n for i in range(len(reports[0].msr))]
    return LossReport(
        l1=sum(r.l1 for r in reports) / n, fft=sum(r.fft for r in reports) / n,
        msr=msr, total=sum(r.total for r in reports) / n,
    )


def batch_loss_and_grads(state: ModelState, samples: Sequence[TrainSample],
                         weights: LossWeights) -> tuple[LossReport, dict[str, np.ndarray]]:
    dtype = next(iter(state.params.values())).dtype
    grads = {k: np.zeros_like(v.data) for k, v in state.params.items()}
    reports = []
    for s in samples:
        state.zero_grad()
        restored, residuals, _ = model_forward(Tensor(s.input.astype(dtype)), state)
        loss, rep = total_loss(restored, Tensor(s.target.astype(dtype)), residuals, weights)
        if not math.isfinite(rep.total):
            raise NumericError(f"non-finite loss {rep.total}")
        loss.backward()
        for k, p in state.params.items():
            if p.grad is not None:
                grads[k] += p.grad
        reports.append(rep)
    inv = 1.0 / len(samples)
    for g in grads.values():
        g *= inv
    state.zero_grad()
    return _mean_reports(reports), grads


def _epoch_order(n: int, rng: np.random.Generator):
    """Endless stream of dataset indices, reshuffled every epoch."""
    while True:
        yield from (int(i) for i in rng.permutation(n))


def train_loop(state: ModelState, dataset: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig,
               out_dir: str | os.PathLike | None = None, opt: OptimState | None = None,
               on_step: Callable[[StepRecord], None] | None = None):
    """Train ``state`` in place; returns ``(state, opt, history)``.

    Checkpoints go to ``out_dir/last.rwfc`` every ``cfg.ckpt_every`` steps and
    at the end.  A non-finite loss aborts the run and leaves the last good
    checkpoint untouched.
    """
    if not dataset:
        raise IngestionError("empty dataset")
    opt = opt or OptimState(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    history: list[StepRecord] = []
    if cfg.steps <= 0:
        return state, opt, history
    weights = LossWeights(cfg.alpha, cfg.lam)
    sched = Schedule(cfg.steps, cfg.lr_start, cfg.lr_end)
    rng = make_rng(cfg.seed)
    order = _epoch_order(len(dataset), rng)
    ckpt = Path(out_dir) / "last.rwfc" if out_dir is not None else None
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
    log.info("training %d steps, alpha=%g lambda=%g batch=%d patch=%d seed=%d",
             cfg.steps, cfg.alpha, cfg.lam, cfg.batch_size, cfg.patch, cfg.seed)
    for step in range(cfg.steps):
        lr = cosine_lr(step, sched)
        idx = [next(order) for _ in range(cfg.batch_size)]
        samples = [sample_patch(dataset[i], cfg.patch, rng, cfg.augment) for i in idx]
        try:
            report, grads = batch_loss_and_grads(state, samples, weights)
        except NumericError as exc:
            raise TrainingAborted(f"step {step}: {exc}; last good checkpoint kept at {ckpt}") from exc
        norm = clip_global_norm(grads, cfg.clip_norm)
        adamw_step(state.params, grads, opt, lr)
        rec = StepRecord(step, lr, report, norm)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
        if ckpt is not None and ((step + 1) % cfg.ckpt_every == 0 or step + 1 == cfg.steps):
            save_checkpoint(state, opt, ckpt)
    return state, opt, history


def evaluate(state: ModelState, dataset: Sequence[tuple[np.ndarray, np.ndarray]],
             weights: LossWeights = LossWeights()) -> list[tuple[LossReport, np.ndarray]]:
    """Loss report and restored image for each full-size pair, no tape."""
    dtype = next(iter(state.params.values())).dtype
    out = []
    with tl.no_grad():
        for x, y in dataset:
            restored, residuals, _ = model_forward(Tensor(x.astype(dtype)), state)
            _, rep = total_loss(restored, Tensor(y.astype(dtype)), residuals, weights)
            out.append((rep, restored.data))
    return out
