"""Command-line entry point: ``routewin {train,infer,analyze-attn,count,verify}``.

Exit codes: 0 success, 1 verification or training failure, 2 usage or
configuration error, 3 data error (images, datasets, checkpoints).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .attention import ConfigError
from .data import IngestionError, index_dataset, load_image, save_image
from .network import PUBLISHED_COUNTS, PRESETS, count_layers, init_model, model_forward
from .objective import LossWeights
from .tensorlab import DimensionError, Tensor, no_grad
from .toolkit import analyze_image, distance_rows, entry_distance, psnr, write_distance_csv
from .trainer import (FormatError, TrainConfig, TrainingAborted, evaluate, format_run_config,
                      load_checkpoint, load_run_config, train_loop)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("routewin")


class UsageError(Exception):
    pass


def _pngs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise IngestionError(f"no PNG files in {path}")
        return files
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    return [path]


def _run_config(path: str) -> TrainConfig:
    """Run configs are user input, so their errors are usage errors."""
    try:
        return load_run_config(path)
    except FormatError as exc:
        raise UsageError(f"{path}: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _run_config(args.config)
    pairs = index_dataset(args.data).load()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(format_run_config(cfg), encoding="utf-8")
    state = init_model(cfg.model_config(), seed=cfg.seed, dtype=cfg.np_dtype)
    dtype = cfg.np_dtype
    dataset = [(x.astype(dtype), y.astype(dtype)) for x, y in pairs]
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        header_written = False

        def on_step(rec):
            nonlocal header_written
            d = rec.report.as_dict()
            if not header_written:
                wr.writerow(["step", "lr", *d.keys(), "grad_norm"])
                header_written = True
            wr.writerow([rec.step, repr(rec.lr), *(repr(v) for v in d.values()), repr(rec.grad_norm)])
            if rec.step % max(1, cfg.steps // 10) == 0:
                log.info("step %d lr %.3g total %.5f", rec.step, rec.lr, d["total"])

        state, _, history = train_loop(state, dataset, cfg, out_dir=out, on_step=on_step)
    if history:
        weights = LossWeights(cfg.alpha, cfg.lam)
        evals = evaluate(state, dataset, weights)
        base = np.mean([psnr(x, y) for x, y in dataset])
        got = np.mean([psnr(np.clip(r, 0, 1), y) for (_, r), (_, y) in zip(evals, dataset)])
        print(f"steps {len(history)}  loss {history[0].report.total:.5f} -> {history[-1].report.total:.5f}")
        print(f"train PSNR {got:.2f} dB (identity {base:.2f} dB)")
    print(f"checkpoint {out / 'last.rwfc'}  log {log_path}")
    return EXIT_OK


def _restore(state, img: np.ndarray) -> np.ndarray:
    dtype = next(state.parameters()).dtype
    with no_grad():
        return model_forward(Tensor(img.astype(dtype)), state)[0].data


def cmd_infer(args) -> int:
    state = load_checkpoint(args.ckpt)
    src, dst = Path(args.input), Path(args.output)
    files = _pngs(src)
    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        targets = [dst / f.name for f in files]
    else:
        if dst.is_dir():
            targets = [dst / src.name]
        else:
            dst.parent.mkdir(parents=True, exist_ok=True)
            targets = [dst]
    for f, t in zip(files, targets):
        save_image(_restore(state, load_image(f)), t)
        print(f"{f} -> {t}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    state = load_checkpoint(args.ckpt)
    files = _pngs(Path(args.input))
    if len(files) == 1:
        img = load_image(files[0])
        rows = distance_rows(analyze_image(state, img), *img.shape[1:])
    else:
        # per-component distances averaged over images; the aggregate is the
        # unweighted mean of the per-image aggregates
        acc, aggs = defaultdict(list), []
        for f in files:
            img = load_image(f)
            rec = analyze_image(state, img)
            vals = [entry_distance(e, *img.shape[1:]) for e in rec]
            for e, v in zip(rec, vals):
                acc[(e.scale, e.block, e.branch, e.head)].append(v)
            aggs.append(float(np.mean(vals)))
        rows = [(*k, float(np.mean(v))) for k, v in acc.items()]
        rows.append(("ALL", "ALL", "ALL", "ALL", float(np.mean(aggs))))
    write_distance_csv(rows, args.out)
    print(f"normalised attention distance {rows[-1][-1]!r} over {len(files)} image(s) -> {args.out}")
    return EXIT_OK


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--hw expects H,W, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise UsageError(f"--hw must be positive, got {text!r}")
    return h, w


def cmd_count(args) -> int:
    h, w = _parse_hw(args.hw)
    if Path(args.config).is_file():
        tc = _run_config(args.config)
        cfg, label = tc.model_config(), tc.preset
    elif args.config in PRESETS:
        cfg, label = PRESETS[args.config], args.config
    else:
        raise UsageError(f"--config: {args.config!r} is neither a run-config file nor a preset {sorted(PRESETS)}")
    items = count_layers(cfg, h, w)
    total_p = sum(i.params for i in items)
    total_f = sum(i.flops for i in items)
    print(f"model {label}  input {h}x{w}  (FLOPs counted as multiply-accumulates)")
    print(f"{'component':<14}{'params':>14}{'GMACs':>12}")
    groups: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for i in items:
        g = groups[i.name.split(".")[0]]
        g[0] += i.params
        g[1] += i.flops
    for name, (p, f) in groups.items():
        print(f"{name:<14}{p:>14,}{f / 1e9:>12.4f}")
    print(f"{'total':<14}{total_p:>14,}{total_f / 1e9:>12.4f}")
    ref = PUBLISHED_COUNTS.get(label)
    if ref is not None and cfg == PRESETS[label] and (h, w) == (256, 256):
        dp = 100 * (total_p - ref[0]) / ref[0]
        df = 100 * (total_f - ref[1]) / ref[1]
        print(f"published {label}: {ref[0] / 1e6:.2f} M params ({dp:+.1f}%), {ref[1] / 1e9:.2f} G FLOPs ({df:+.1f}%)")
        if max(abs(dp), abs(df)) > 25:
            print("gap above 25%: see the per-layer itemisation below")
            args.itemize = True
    if args.itemize:
        print(f"\n{'layer':<40}{'params':>12}{'MACs':>16}")
        for i in items:
            print(f"{i.name:<40}{i.params:>12,}{i.flops:>16,}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import available, run_checks

    if args.list:
        print("\n".join(available()))
        return EXIT_OK
    results = run_checks(args.filter, echo=print)
    if not results:
        raise UsageError(f"no check matches {args.filter!r}; see `verify --list`")
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="routewin", description="Route-window restoration transformer toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train on a paired dataset")
    t.add_argument("--config", required=True, help="key=value run-config file")
    t.add_argument("--data", required=True, help="directory with input/ and target/ PNGs")
    t.add_argument("--out", required=True, help="output directory for checkpoint and log")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="restore a PNG or a directory of PNGs")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.set_defaults(fn=cmd_infer)

    a = sub.add_parser("analyze-attn", help="normalised average attention distance to CSV")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--input", required=True)
    a.add_argument("--out", required=True, help="CSV path")
    a.set_defaults(fn=cmd_analyze)

    c = sub.add_parser("count", help="parameter and FLOP report")
    c.add_argument("--config", required=True, help="run-config file or preset name")
    c.add_argument("--hw", required=True, help="input size H,W")
    c.add_argument("--itemize", action="store_true", help="list every layer")
    c.set_defaults(fn=cmd_count)

    v = sub.add_parser("verify", help="run the oracle and invariant checks")
    v.add_argument("--filter", default=None, help="substring of check names to run")
    v.add_argument("--list", action="store_true", help="list check names and exit")
    v.set_defaults(fn=cmd_verify)
    return p


def run_cli(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, IngestionError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
