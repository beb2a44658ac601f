"""Command-line pipeline: data prep -> train -> calibrate -> engines -> bench.

Heavy imports happen inside command handlers so `--threads` can cap the BLAS
thread pools before numpy loads (default 1, keeping latency numbers honest).
Every command writes a `run.json` echoing its resolved configuration;
re-running with `--config run.json` reproduces the run, with explicit flags
winning over the config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

OUTPUT_DIR_ENV = "SWINQ_OUT"

# ablation battery: report label -> (precision, method); ledger of why "int8"
# maps to a minmax-calibrated engine lives with the report-format docs
ABLATE_VARIANTS = (
    ("original", "fp32", None),
    ("minmax", "int8", "minmax"),
    ("ema", "int8", "ema"),
    ("omse", "int8", "omse"),
    ("percentile", "int8", "percentile"),
    ("fqvit", "int8", "fqvit"),
    ("int8", "int8", "minmax"),
    ("default_range", "int8", "default_range"),
    ("fp16", "fp16", None),
)


def _set_thread_env(threads: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


def _peek_threads(argv: list[str]) -> int:
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            try:
                return max(1, int(argv[i + 1]))
            except ValueError:
                return 1
        if arg.startswith("--threads="):
            try:
                return max(1, int(arg.split("=", 1)[1]))
            except ValueError:
                return 1
    return 1


def _default_out_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, ".")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of defaults (flags win on conflict)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUTPUT_DIR_ENV} or .)")


def _resolve(
    parser: argparse.ArgumentParser,
    subparsers: dict[str, argparse.ArgumentParser],
    argv: list[str],
) -> argparse.Namespace:
    """Apply --config file values as subcommand defaults, then re-parse
    (explicitly passed flags win because they override defaults)."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        doc.pop("command", None)
        sub = subparsers[args.command]
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in doc.items() if k in known})
        args = parser.parse_args(argv)
    if getattr(args, "out_dir", None) is None:
        args.out_dir = _default_out_dir()
    return args


def _write_run_json(args: argparse.Namespace, command: str) -> None:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command}
    doc.update({k: v for k, v in vars(args).items() if k not in ("config", "func")})
    (out_dir / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _load_model_config(args: argparse.Namespace):
    from .model import PRESETS, ModelConfig

    if getattr(args, "model_config", None):
        return ModelConfig.from_json(Path(args.model_config).read_text())
    return PRESETS[args.preset]


def _preprocess_spec(cfg, normalization: str):
    from . import data

    if normalization == "synthetic":
        return data.PreprocessSpec.synthetic(cfg.image_size)
    return data.PreprocessSpec(resize_shorter=cfg.image_size, crop=cfg.image_size)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    from . import data

    _write_run_json(args, "synth-data")
    out = Path(args.out_dir) / "dataset"
    paths = data.generate_synthetic(out, args.classes, args.per_class, args.size, args.seed)
    print(f"wrote {len(paths)} images under {out}")
    return 0


def cmd_split(args) -> int:
    from . import data

    _write_run_json(args, "split")
    index = data.index_and_split(args.data, args.seed)
    manifest = Path(args.out_dir) / "manifest.json"
    index.save(manifest)
    counts = {s: len(index.split(s)) for s in ("train", "val", "test")}
    print(f"indexed {len(index.samples)} samples {counts} -> {manifest}")
    return 0


def cmd_train(args) -> int:
    from . import data, model, train
    from .tensor import archive_save

    _write_run_json(args, "train")
    cfg = _load_model_config(args)
    index = data.DatasetIndex.load(args.manifest)
    index.root = args.data
    spec = _preprocess_spec(cfg, args.normalization)
    train_set = data.load_split(index, "train", spec)
    val_set = data.load_split(index, "val", spec)
    tcfg = train.TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed
    )
    params, history = train.train_loop(train_set, val_set, cfg, tcfg)

    out_dir = Path(args.out_dir)
    archive_save(model.params_to_archive(params, model.param_spec(cfg)), out_dir / "checkpoint.swta")
    (out_dir / "model_config.json").write_text(cfg.to_json())
    metrics = [
        {"epoch": m.epoch, "train_loss": m.train_loss, "val_accuracy": m.val_accuracy}
        for m in history
    ]
    (out_dir / "train_metrics.json").write_text(json.dumps(metrics, indent=1))
    best = max(h.val_accuracy for h in history)
    print(f"trained {len(history)} epochs; best val accuracy {best:.4f}")
    return 0


def _load_checkpoint(args):
    from .model import params_from_archive
    from .tensor import archive_load

    return params_from_archive(archive_load(args.checkpoint))


def _calibration_images(args, cfg, index):
    from . import data

    spec = _preprocess_spec(cfg, args.normalization)
    samples = data.calibration_samples(index, args.calibration_size)
    return [data.load_sample(index, s, spec) for s in samples]


def cmd_calibrate(args) -> int:
    from . import data, engine

    _write_run_json(args, "calibrate")
    cfg = _load_model_config(args)
    params = _load_checkpoint(args)
    index = data.DatasetIndex.load(args.manifest)
    index.root = args.data
    images = _calibration_images(args, cfg, index)
    result = engine.calibrate_activations(params, cfg, args.method, images)
    out = Path(args.out_dir) / f"calibration_{args.method}.json"
    out.write_text(json.dumps(result.to_json_dict(), indent=1, sort_keys=True))
    print(f"calibrated {len(result.site_qparams)} sites from {result.sample_count} images -> {out}")
    for warning in result.warnings:
        print(f"warning: {warning}")
    return 0


def cmd_build_engine(args) -> int:
    from . import data, engine

    _write_run_json(args, "build-engine")
    cfg = _load_model_config(args)
    params = _load_checkpoint(args)
    mode = engine.PrecisionMode(args.precision, args.method if args.precision == "int8" else None)
    images = []
    if mode.tag == "int8" and mode.method != "default_range":
        if not args.manifest:
            raise ValueError(f"method {mode.method!r} needs --manifest/--data for calibration")
        index = data.DatasetIndex.load(args.manifest)
        index.root = args.data
        images = _calibration_images(args, cfg, index)
    built = engine.build_engine(params, cfg, mode, images)
    label = args.precision if mode.tag != "int8" else mode.method
    out = Path(args.out) if args.out else Path(args.out_dir) / f"engine_{label}.swqe"
    size = engine.save_engine(built, out)
    print(f"built {mode.tag}{'/' + mode.method if mode.method else ''} engine "
          f"({size / (1 << 20):.2f} MB) -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    from . import bench, data, engine

    _write_run_json(args, "evaluate")
    eng = engine.load_engine(args.engine)
    index = data.DatasetIndex.load(args.manifest)
    index.root = args.data
    spec = _preprocess_spec(eng.config, args.normalization)
    metrics, predictions, skipped = bench.evaluate(eng, index, spec, args.split)
    stem = Path(args.engine).stem
    out_dir = Path(args.out_dir)
    bench.write_predictions(predictions, out_dir / f"predictions_{stem}.jsonl")
    doc = {
        "engine": str(args.engine), "split": args.split,
        "accuracy": metrics.accuracy, "precision": metrics.precision,
        "recall": metrics.recall, "f1": metrics.f1,
        "skipped": skipped, "count": len(predictions),
    }
    (out_dir / f"eval_{stem}.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(json.dumps(doc))
    return 0


def cmd_bench(args) -> int:
    from . import bench, data, engine

    _write_run_json(args, "bench")
    eng = engine.load_engine(args.engine)
    index = data.DatasetIndex.load(args.manifest)
    index.root = args.data
    spec = _preprocess_spec(eng.config, args.normalization)
    sample = index.split("test")[0]
    image = data.load_sample(index, sample, spec)
    stats = bench.measure_latency(eng, image, warmup=args.warmup, iters=args.iters)
    doc = {
        "engine": str(args.engine), "warmup_iters": stats.warmup_iters,
        "measured_iters": stats.measured_iters, "mean_ms": stats.mean_ms,
        "median_ms": stats.median_ms, "p95_ms": stats.p95_ms, "fps": stats.fps,
    }
    stem = Path(args.engine).stem
    (Path(args.out_dir) / f"bench_{stem}.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(json.dumps(doc))
    return 0


def _rows_from_json(doc: list[dict]):
    from .bench import BenchRow

    return [
        BenchRow(
            dataset=r["dataset"], method=r["method"], bits=tuple(r["bits"]),
            accuracy=r["accuracy"], precision=r["precision"], recall=r["recall"],
            f1=r["f1"], latency_ms=r["latency_ms"], fps=r["fps"],
            model_size_mb=r["model_size_mb"], thread_count=r["thread_count"],
            host=r["host"],
        )
        for r in doc
    ]


def cmd_report(args) -> int:
    from . import bench

    _write_run_json(args, "report")
    rows = _rows_from_json(json.loads(Path(args.rows).read_text()))
    out_dir = Path(args.out_dir)
    bench.emit_report(rows, out_dir / "report.csv", out_dir / "report.md")
    print(f"report over {len(rows)} rows -> {out_dir / 'report.csv'}")
    return 0


def cmd_ablate(args) -> int:
    from . import bench, data, engine

    _write_run_json(args, "ablate")
    cfg = _load_model_config(args)
    params = _load_checkpoint(args)
    index = data.DatasetIndex.load(args.manifest)
    index.root = args.data
    spec = _preprocess_spec(cfg, args.normalization)
    calib = _calibration_images(args, cfg, index)
    dataset_name = args.dataset_name or Path(args.data).name
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    sample = index.split("test")[0]
    latency_image = data.load_sample(index, sample, spec)

    rows = []
    for label, precision, method in ABLATE_VARIANTS:
        mode = engine.PrecisionMode(precision, method)
        built = engine.build_engine(params, cfg, mode, calib if precision == "int8" else [])
        path = out_dir / f"engine_{label}.swqe"
        engine.save_engine(built, path)
        metrics, predictions, _ = bench.evaluate(built, index, spec, "test")
        bench.write_predictions(predictions, out_dir / f"predictions_{label}.jsonl")
        stats = bench.measure_latency(built, latency_image, warmup=args.warmup, iters=args.iters)
        rows.append(
            bench.BenchRow(
                dataset=dataset_name, method=label, bits=mode.bits,
                accuracy=metrics.accuracy, precision=metrics.precision,
                recall=metrics.recall, f1=metrics.f1,
                latency_ms=stats.mean_ms, fps=stats.fps,
                model_size_mb=engine.engine_file_size_mb(path),
                thread_count=args.threads,
            )
        )
        print(f"{label:>14}: accuracy {metrics.accuracy:.4f}, "
              f"{stats.mean_ms:.2f} ms, {stats.fps:.1f} FPS, "
              f"{rows[-1].model_size_mb:.2f} MB")

    rows_doc = [
        {
            "dataset": r.dataset, "method": r.method, "bits": list(r.bits),
            "accuracy": r.accuracy, "precision": r.precision, "recall": r.recall,
            "f1": r.f1, "latency_ms": r.latency_ms, "fps": r.fps,
            "model_size_mb": r.model_size_mb, "thread_count": r.thread_count,
            "host": r.host,
        }
        for r in bench.sort_rows(rows)
    ]
    (out_dir / "rows.json").write_text(json.dumps(rows_doc, indent=1, sort_keys=True))
    bench.emit_report(rows, out_dir / "report.csv", out_dir / "report.md")
    print(f"ablation report -> {out_dir / 'report.md'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="swinq",
        description="Shifted-window transformer PTQ pipeline: data, training, "
        "engines, and benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    p = registry["synth-data"] = sub.add_parser("synth-data", help="generate a synthetic separable dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_synth_data)

    p = registry["split"] = sub.add_parser("split", help="index a corpus and assign 70/20/10 splits")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_split)

    p = registry["train"] = sub.add_parser("train", help="train a classifier on a split corpus")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--preset", default="small")
    p.add_argument("--model-config")
    p.add_argument("--normalization", choices=("synthetic", "imagenet"), default="synthetic")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_train)

    p = registry["calibrate"] = sub.add_parser("calibrate", help="compute activation quantizer parameters")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preset", default="small")
    p.add_argument("--model-config")
    p.add_argument("--normalization", choices=("synthetic", "imagenet"), default="synthetic")
    p.add_argument("--method", choices=("minmax", "ema", "percentile", "omse", "fqvit"),
                   default="minmax")
    p.add_argument("--calibration-size", type=int, default=32)
    p.set_defaults(func=cmd_calibrate)

    p = registry["build-engine"] = sub.add_parser("build-engine", help="commit a checkpoint to a precision mode")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preset", default="small")
    p.add_argument("--model-config")
    p.add_argument("--precision", choices=("fp32", "fp16", "int8"), required=True)
    p.add_argument("--method",
                   choices=("minmax", "ema", "percentile", "omse", "fqvit", "default_range"),
                   default="minmax")
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--normalization", choices=("synthetic", "imagenet"), default="synthetic")
    p.add_argument("--calibration-size", type=int, default=32)
    p.add_argument("--out", help="engine file path (default <out-dir>/engine_<label>.swqe)")
    p.set_defaults(func=cmd_build_engine)

    p = registry["evaluate"] = sub.add_parser("evaluate", help="classification metrics of an engine on a split")
    _add_common(p)
    p.add_argument("--engine", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--normalization", choices=("synthetic", "imagenet"), default="synthetic")
    p.set_defaults(func=cmd_evaluate)

    p = registry["bench"] = sub.add_parser("bench", help="latency/FPS of single-image inference")
    _add_common(p)
    p.add_argument("--engine", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--normalization", choices=("synthetic", "imagenet"), default="synthetic")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iters", type=int, default=100)
    p.set_defaults(func=cmd_bench)

    p = registry["report"] = sub.add_parser("report", help="render report.csv/report.md from rows.json")
    _add_common(p)
    p.add_argument("--rows", required=True)
    p.set_defaults(func=cmd_report)

    p = registry["ablate"] = sub.add_parser("ablate", help="run every quantization method and emit one report")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preset", default="small")
    p.add_argument("--model-config")
    p.add_argument("--normalization", choices=("synthetic", "imagenet"), default="synthetic")
    p.add_argument("--calibration-size", type=int, default=32)
    p.add_argument("--dataset-name")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iters", type=int, default=100)
    p.set_defaults(func=cmd_ablate)

    return parser, registry


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_thread_env(_peek_threads(argv))
    parser, subparsers = build_parser()
    args = _resolve(parser, subparsers, argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failure -> exit 1 (usage errors exit 2 via argparse)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
