"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure, 3 I/O error (missing or unreadable files, corrupt checkpoints).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import plotting, verify
from .backbone import PRESETS, ModelConfig, VMamba, preset
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RUN_DIR_ENV, ConfigError, RunConfig, build_config, parse_set_args
from .data import (
    DatasetError,
    DatasetIndex,
    image_size_stats,
    load_images,
    load_split_file,
    normalize,
    normalized_entropy,
    scan_image_directory,
    stratified_split,
    synth_dataset_generate,
)
from .training import EmaState, Split, TrainConfig, evaluate, swapped_weights, train_loop

log = logging.getLogger("resvmamba")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3
EMA_PREFIX = "ema/"
LOG_FIELDS = ("kind", "epoch", "step", "lr", "loss", "val_top1", "val_top5", "ema_top1", "ema_top5", "wall_time")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers
def _tsv(rows: list[dict], cols) -> str:
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    lines = ["\t".join(cols)] + ["\t".join(cell(r.get(c)) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _model_config(cfg: RunConfig, num_classes: int):
    over = dict(num_classes=num_classes, variant=cfg.variant, input_size=(cfg.image_size, cfg.image_size), expansion=cfg.expansion)
    if cfg.state_size:
        over["state_size"] = cfg.state_size
    return preset(cfg.model, **over)


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        warmup_epochs=cfg.warmup_epochs,
        batch_size=cfg.batch_size,
        eval_batch_size=cfg.eval_batch_size,
        lr=cfg.lr,
        min_lr=cfg.min_lr,
        warmup_lr=cfg.warmup_lr,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        adam_eps=cfg.adam_eps,
        label_smoothing=cfg.label_smoothing,
        ema_decay=cfg.ema_decay,
        seed=cfg.seed,
        chunk=cfg.chunk or None,
    )


def _load_split(idx: DatasetIndex, name: str, size: int) -> Split:
    images, labels = load_images(idx, name, (size, size))
    return Split(normalize(images), labels)


def _dataset(cfg: RunConfig, run_dir: Path) -> tuple[RunConfig, DatasetIndex]:
    """Resolve the dataset for a training run and pin its location into the config."""
    if cfg.synth:
        root = run_dir / "synth"
        if not root.is_dir():
            synth_dataset_generate(cfg.synth_classes, cfg.synth_per_class, cfg.image_size, cfg.seed, root)
        cfg.data = str(root)
    if not cfg.data:
        raise UsageError("no dataset: pass --data DIR or --synth")
    if cfg.split_file:
        idx = load_split_file(cfg.data, cfg.split_file)
    else:
        idx = stratified_split(scan_image_directory(cfg.data), cfg.split_ratio, cfg.seed)
    idx.write_split_file(run_dir / "split.tsv")
    cfg.split_file = str(run_dir / "split.tsv")
    return cfg, idx


def _checkpoint(path: Path, model: VMamba, ema: EmaState, cfg: RunConfig, extra: dict) -> None:
    tensors = model.state_dict()
    for (name, _), sh in zip(model.named_parameters().items(), ema.shadow):
        tensors[EMA_PREFIX + name] = sh
    meta = {"model": model.config.to_dict(), "run": cfg.to_dict(), **extra}
    save_checkpoint(path, meta, tensors)


def _restore(path: Path) -> tuple[VMamba, list, dict]:
    meta, tensors = load_checkpoint(path)
    try:
        model = VMamba(ModelConfig.from_dict(meta["model"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config in header: {exc}") from None
    raw = {k: v for k, v in tensors.items() if not k.startswith(EMA_PREFIX)}
    model.load_state_dict(raw)
    names = list(model.named_parameters())
    ema = [tensors.get(EMA_PREFIX + n) for n in names]
    if any(e is None for e in ema):
        ema = None
    return model, ema, meta


# ------------------------------------------------------------------- train
def cmd_train(cfg: RunConfig, quiet: bool = False) -> Path:
    """Run the recipe and fill the run directory; returns its path."""
    run_dir = cfg.resolved_run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg, idx = _dataset(cfg, run_dir)
    (run_dir / "config.ini").write_text(cfg.dumps(), encoding="utf-8")
    train = _load_split(idx, "train", cfg.image_size)
    val = _load_split(idx, "val", cfg.image_size) if idx.subset("val") else None
    test = None
    if cfg.test_data:
        test = _load_split(scan_image_directory(cfg.test_data, split="test"), "test", cfg.image_size)

    model = VMamba(_model_config(cfg, idx.num_classes), seed=cfg.seed)
    tcfg = _train_config(cfg)
    log.info("model %s/%s: %d parameters, %d train / %d val images", cfg.model, cfg.variant, model.num_parameters(), len(train), len(val) if val else 0)
    init_train = evaluate(model, train, tcfg.eval_batch_size, tcfg.topk, chunk=tcfg.chunk)

    records: list[dict] = []
    log_path = run_dir / "log.jsonl"
    log_file = log_path.open("w", encoding="utf-8")

    def on_record(r):
        records.append(r)
        log_file.write(json.dumps(r, sort_keys=True) + "\n")
        if r["kind"] == "epoch" and not quiet:
            log.info("epoch %d loss %.4f val %s ema %s", r["epoch"], r["loss"], r["val_top1"], r["ema_top1"])

    def on_best(m, ema, best):
        _checkpoint(run_dir / "best.ckpt", m, ema, cfg, {"epoch": best["epoch"], "val": best})

    try:
        out = train_loop(model, train, val, tcfg, on_record=on_record, on_best=on_best)
    finally:
        log_file.close()
    ema = out["ema"]
    _checkpoint(run_dir / "last.ckpt", model, ema, cfg, {"epoch": cfg.epochs, "val": out["last"]})

    def both(split):
        raw = evaluate(model, split, tcfg.eval_batch_size, tcfg.topk, chunk=tcfg.chunk)
        with swapped_weights(model, ema.shadow):
            sm = evaluate(model, split, tcfg.eval_batch_size, tcfg.topk, chunk=tcfg.chunk)
        return {"raw": raw, "ema": sm}

    summary = {
        "model": cfg.model,
        "variant": cfg.variant,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "steps": out["steps"],
        "num_parameters": model.num_parameters(),
        "initial_train": init_train,
        "train": both(train),
        "first_step_loss": out["losses"][0],
        "final_step_loss": out["losses"][-1],
        "best_val": out["best"] if val is not None else None,
    }
    if val is not None:
        summary["val"] = both(val)
    if test is not None:
        summary["test"] = both(test)
    _dump_json(summary, run_dir / "summary.json")
    epochs = [r for r in records if r["kind"] == "epoch"]
    (run_dir / "metrics.tsv").write_text(_tsv(epochs, LOG_FIELDS[1:]), encoding="utf-8")
    plotting.plot_training_curves(records, run_dir / "curves.png")
    return run_dir


# -------------------------------------------------------------------- eval
def cmd_eval(checkpoint, split: str = "val", weights: str = "raw", topk=(1, 5), overrides: dict | None = None) -> dict:
    """Metrics of a saved checkpoint on one split of the dataset recorded in it."""
    model, ema, meta = _restore(Path(checkpoint))
    run = dict(meta.get("run", {}))
    run.update(overrides or {})
    try:
        cfg = RunConfig(**run)
    except TypeError as exc:
        raise ConfigError(f"checkpoint run config: {exc}") from None
    if split == "test":
        if not cfg.test_data:
            raise UsageError("no test_data recorded; pass --set test_data=DIR")
        idx = scan_image_directory(cfg.test_data, split="test")
    else:
        idx = load_split_file(cfg.data, cfg.split_file)
    if not idx.subset(split):
        raise UsageError(f"split {split!r} is empty")
    if idx.num_classes != model.config.num_classes:
        raise ConfigError(f"dataset has {idx.num_classes} classes but the checkpoint head has {model.config.num_classes}")
    data = _load_split(idx, split, cfg.image_size)
    if weights == "ema":
        if ema is None:
            raise CheckpointError(f"{checkpoint}: no EMA weights stored")
        with swapped_weights(model, ema):
            res = evaluate(model, data, cfg.eval_batch_size, tuple(topk), chunk=cfg.chunk or None)
    else:
        res = evaluate(model, data, cfg.eval_batch_size, tuple(topk), chunk=cfg.chunk or None)
    return {"checkpoint": str(checkpoint), "split": split, "weights": weights, "count": len(data), **res}


# ----------------------------------------------------------------- analyze
def analysis_report(root) -> tuple[str, dict]:
    """Class counts, normalized entropy and size statistics as tab-separated text."""
    idx = scan_image_directory(root)
    counts = idx.counts()
    stats = image_size_stats(idx)
    ent = normalized_entropy(counts) if len(counts) > 1 and min(counts) > 0 else None
    lines = [
        "# dataset",
        f"classes\t{idx.num_classes}",
        f"images\t{sum(counts)}",
        f"skipped\t{len(idx.skipped)}",
        f"normalized_entropy\t{'' if ent is None else f'{ent:.6f}'}",
        "# image size (height x width)",
        f"max_size\t{stats.max_h}×{stats.max_w}",
        f"min_size\t{stats.min_h}×{stats.min_w}",
        f"mean_std_size\t{stats.mean_std()}",
        "# classes",
        "class\tcount",
    ]
    lines += [f"{n}\t{c}" for n, c in zip(idx.class_names, counts)]
    return "\n".join(lines) + "\n", {"names": idx.class_names, "counts": counts, "entropy": ent}


def cmd_analyze(root, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    text, info = analysis_report(root)
    (out / "report.tsv").write_text(text, encoding="utf-8")
    plotting.plot_class_counts(info["names"], info["counts"], out / "class_counts.png", info["entropy"])
    return out / "report.tsv"


# -------------------------------------------------------------- bench-scan
def bench_scan(lengths, width: int, state: int, batch: int, repeats: int, seed: int = 0, ref_max: int = 256) -> list[dict]:
    """Seconds per forward call for the reference, sequential and chunked scans."""
    from . import autodiff as ad
    from .ssm import selective_scan_fast, selective_scan_ref

    rng = np.random.default_rng(seed)
    rows = []
    impls = {
        "sequential": lambda s, c, d, x, L: selective_scan_fast(s, c, d, x),
        "chunked": lambda s, c, d, x, L: selective_scan_fast(s, c, d, x, chunk=max(1, int(round(L**0.5)))),
        "reference": lambda s, c, d, x, L: selective_scan_ref(s, c, d, x),
    }
    with ad.no_grad():
        for L in lengths:
            step, C, Dsk, x = verify.random_scan_instance(rng, batch=batch, L=L, D=width, N=state)
            for name, fn in impls.items():
                if name == "reference" and L > ref_max:
                    continue
                fn(step, C, Dsk, x, L)  # warm-up
                t0 = time.perf_counter()
                for _ in range(repeats):
                    fn(step, C, Dsk, x, L)
                rows.append({"impl": name, "length": L, "seconds": (time.perf_counter() - t0) / repeats})
    return rows


# --------------------------------------------------------------------- CLI
def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value config file (see README for keys)")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE", help="override one config key; repeatable")
    p.add_argument("--synth", action="store_const", const=True, default=None, help="train on the generated synthetic set")
    p.add_argument("--data", help="dataset root laid out as ROOT/<class>/<images>")
    p.add_argument("--split-file", dest="split_file", help="existing split list to reuse")
    p.add_argument("--model", choices=sorted(PRESETS))
    p.add_argument("--variant", choices=["plain", "res", "global_residual"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-dir", dest="run_dir", help=f"output directory (default: ${RUN_DIR_ENV} or ./runs, then <model>-<variant>-seed<seed>)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="resvmamba", description="Selective-scan vision backbone: training, evaluation, dataset tools and checks.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model; writes a run directory")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the split recorded in it")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--weights", default="raw", choices=["raw", "ema"])
    p.add_argument("--topk", type=_int_list, default=[1, 5], metavar="K,K", help="default 1,5")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", help="write the metrics record as JSON here")

    p = sub.add_parser("analyze", help="class counts, normalized entropy and image sizes of a dataset")
    p.add_argument("root")
    p.add_argument("--out", default="analysis", help="output directory for report.tsv and class_counts.png")

    p = sub.add_parser("split", help="write a stratified train/val split list")
    p.add_argument("root")
    p.add_argument("--ratio", type=float, default=0.7, help="train fraction per class (default 0.7)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="split list path")

    p = sub.add_parser("synth", help="generate the synthetic texture dataset as PNGs")
    p.add_argument("out")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", dest="per_class", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("verify", help="run the fixed-seed invariant suites")
    p.add_argument("--quick", action="store_true", help="fewer instances; skip the full-model gradient check")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench-scan", help="time the scan implementations against sequence length")
    p.add_argument("--lengths", type=_int_list, default=[16, 64, 256, 1024])
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", default="bench", help="output directory for bench.tsv and bench.png")
    return ap


RUN_FLAGS = ("synth", "data", "split_file", "model", "variant", "epochs", "batch_size", "seed", "run_dir")


def _run_config(args) -> RunConfig:
    overrides = parse_set_args(args.sets)
    overrides.update({k: getattr(args, k) for k in RUN_FLAGS if getattr(args, k, None) is not None})
    return build_config(args.config, overrides)


def _dispatch(args) -> int:
    if args.command == "train":
        run_dir = cmd_train(_run_config(args))
        summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
        rows = [{"split": s, "weights": w, **summary[s][w]} for s in ("train", "val", "test") if s in summary for w in ("raw", "ema")]
        sys.stdout.write(_tsv(rows, ["split", "weights", "top1", "top5", "loss"]))
        print(f"run directory\t{run_dir}")
    elif args.command == "eval":
        res = cmd_eval(args.checkpoint, args.split, args.weights, args.topk, parse_set_args(args.sets))
        cols = ["split", "weights", "count"] + [f"top{k}" for k in args.topk] + ["loss"]
        sys.stdout.write(_tsv([res], cols))
        if args.out:
            _dump_json(res, Path(args.out))
    elif args.command == "analyze":
        path = cmd_analyze(args.root, args.out)
        sys.stdout.write(path.read_text(encoding="utf-8"))
    elif args.command == "split":
        idx = stratified_split(scan_image_directory(args.root), args.ratio, args.seed, out=args.out)
        rows = [{"class": n, "train": t, "val": v} for n, t, v in zip(idx.class_names, idx.counts("train"), idx.counts("val"))]
        sys.stdout.write(_tsv(rows, ["class", "train", "val"]))
    elif args.command == "synth":
        idx = synth_dataset_generate(args.classes, args.per_class, args.size, args.seed, args.out)
        print(f"wrote {len(idx.records)} images in {idx.num_classes} classes under {args.out}")
    elif args.command == "verify":
        results = verify.run_all(quick=args.quick, seed=args.seed)
        for r in results:
            print(r.line())
        failed = [r.name for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} suites passed")
        return EXIT_VERIFY if failed else EXIT_OK
    elif args.command == "bench-scan":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = bench_scan(args.lengths, args.width, args.state, args.batch, args.repeats)
        text = _tsv(rows, ["impl", "length", "seconds"])
        (out / "bench.tsv").write_text(text, encoding="utf-8")
        plotting.plot_scan_bench(rows, out / "bench.png")
        sys.stdout.write(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except (ConfigError, UsageError, KeyError, ValueError) as exc:
        if isinstance(exc, (CheckpointError, DatasetError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
