"""CLI: `swinq-interop export` and `swinq-interop fixtures`."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


def cmd_export(args) -> int:
    from .export import export_checkpoint

    manifest = export_checkpoint(args.src, args.out, image_size=args.image_size)
    print(
        f"exported {manifest.exported_scalars:,} scalars "
        f"(dropped {manifest.dropped_scalars:,} across {len(manifest.dropped)} keys) -> {args.out}"
    )
    return 0


def cmd_fixtures(args) -> int:
    from .fixtures import DEFAULT_CONFIG, make_fixtures
    from .reference import RefConfig

    cfg = (
        RefConfig.from_json(Path(args.config).read_text()) if args.config else DEFAULT_CONFIG
    )
    manifest = make_fixtures(cfg, args.seed, args.out)
    print(f"wrote fixtures for {', '.join(manifest['ops'])} -> {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="swinq-interop")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="export a torch checkpoint to a SWTA archive")
    p.add_argument("--src", required=True, help="checkpoint file (state dict)")
    p.add_argument("--out", required=True, help="output .swta path")
    p.add_argument("--image-size", type=int, default=224)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("fixtures", help="generate golden reference fixtures")
    p.add_argument("--config", help="model-config JSON (default: built-in small config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fixtures)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
