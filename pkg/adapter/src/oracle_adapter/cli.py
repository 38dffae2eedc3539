"""Command-line front end: ``oracle-adapter --model ... [--port N]``."""
from __future__ import annotations

import argparse
import sys

from .server import AdapterConfig, serve


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="oracle-adapter",
        description="Serve a classifier over the JSON-lines stdio protocol "
                    "(default) or HTTP (--port).")
    ap.add_argument("--model", required=True,
                    help="stub-uniform | stub-brightness | path to a .py "
                         "module defining build()")
    ap.add_argument("--shape", type=int, nargs=3, metavar=("H", "W", "C"),
                    default=None, help="input image shape")
    ap.add_argument("--classes", type=int, default=None,
                    help="number of classes")
    ap.add_argument("--port", type=int, default=None,
                    help="serve HTTP on this port (0 picks a free one); "
                         "omit to speak stdio")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = AdapterConfig(
        model_source=args.model,
        shape=None if args.shape is None else tuple(args.shape),
        num_classes=args.classes,
        transport="stdio" if args.port is None else "http",
        port=0 if args.port is None else args.port)
    try:
        serve(cfg)
    except ValueError as exc:
        print(f"oracle-adapter: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
