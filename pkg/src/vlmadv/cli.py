"""Command-line entry point.

Subcommands: run (execute a grid), report (render a results store),
convert-dataset (official annotation layouts to the JSONL format),
rewrite-cache (pre-compute question rewrites), protocol-check (validate a
model server). Exit codes: 0 success, 1 config error, 2 endpoint error,
3 partial-failure threshold exceeded.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .dataset import (
    Dataset,
    DatasetError,
    TASK_VQA,
    convert_coco_captions,
    convert_vqa,
    load_dataset,
    save_dataset,
)
from .harness import (
    ConfigError,
    EndpointError,
    StoreError,
    emit_report,
    load_rows,
    load_run_config,
    persist_rows,
    run_grid,
)
from .oracle import (
    OracleClient,
    OracleError,
    ProtocolError,
    RemoteRewriter,
    TransportError,
    open_transport,
)
from .prompts import (
    FixtureRewriter,
    RewriteCache,
    StubRewriter,
    VqaStrategy,
    rewrite_question,
)
from .protocol_check import check_endpoint

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ENDPOINT = 2
EXIT_PARTIAL = 3


def _csv_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlmadv",
        description="Adversarial-robustness grid evaluation for "
                    "vision-language models.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a grid evaluation")
    run.add_argument("--config", required=True, help="TOML run config")
    run.add_argument("--attack", action="append", default=None,
                     help="attack method override (repeat or comma-list)")
    run.add_argument("--eps", action="append", default=None,
                     help="epsilon override, float or a/b (repeatable)")
    run.add_argument("--iters", type=int, default=None)
    run.add_argument("--strategy", action="append", default=None,
                     help="strategy tag override (repeatable)")
    run.add_argument("--dataset", action="append", default=None,
                     help="dataset path override (repeatable)")
    run.add_argument("--sample-size", type=int, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None, help="output directory override")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--format", choices=("markdown", "csv", "both"),
                     default="both")
    run.add_argument("--layout", choices=("strategies", "attacks"),
                     default="strategies")

    report = sub.add_parser("report", help="render a results store")
    report.add_argument("--store", required=True, help="results JSONL store")
    report.add_argument("--format", choices=("markdown", "csv", "both"),
                        default="markdown")
    report.add_argument("--layout", choices=("strategies", "attacks"),
                        default="strategies")
    report.add_argument("--out", default=".", help="output directory")
    report.add_argument("--tolerant", action="store_true",
                        help="skip corrupt store lines instead of failing")
    report.add_argument("--average-tasks", action="store_true",
                        help="append a cross-task mean table (raw scales)")

    conv = sub.add_parser("convert-dataset",
                          help="official annotations to dataset JSONL")
    conv.add_argument("layout", choices=("coco-captions", "vqa"))
    conv.add_argument("--annotations", required=True)
    conv.add_argument("--questions", default=None,
                      help="questions file (vqa layout only)")
    conv.add_argument("--images", required=True, help="image directory")
    conv.add_argument("--out", required=True, help="output JSONL path")
    conv.add_argument("--image-ext", default=".ppm")
    conv.add_argument("--image-pattern", default="{image_id:012d}.ppm")

    cache = sub.add_parser("rewrite-cache",
                           help="pre-compute question rewrites")
    cache.add_argument("--dataset", required=True, help="vqa dataset JSONL")
    cache.add_argument("--strategy", action="append", required=True,
                       help="vqa strategy tag (repeatable)")
    cache.add_argument("--cache", required=True, help="cache JSONL path")
    cache.add_argument("--rewriter", default="stub",
                       help='"stub", "fixture:PATH", or a transport spec')
    cache.add_argument("--timeout", type=float, default=120.0)

    check = sub.add_parser("protocol-check",
                           help="validate a model server endpoint")
    check.add_argument("--endpoint", required=True,
                       help='transport spec: "tcp:HOST:PORT" or a command')
    check.add_argument("--fuzz-lines", type=int, default=1000)
    check.add_argument("--fuzz-seed", type=int, default=0)
    check.add_argument("--timeout", type=float, default=120.0)
    return parser


def _cmd_run(args) -> int:
    overrides = {
        "attack": sum((_csv_list(a) for a in args.attack), [])
        if args.attack else None,
        "eps": sum((_csv_list(e) for e in args.eps), [])
        if args.eps else None,
        "iters": args.iters,
        "strategy": sum((_csv_list(s) for s in args.strategy), [])
        if args.strategy else None,
        "dataset": args.dataset,
        "sample_size": args.sample_size,
        "seed": args.seed,
        "out": args.out,
        "workers": args.workers,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    cfg = load_run_config(args.config, overrides)
    rows = run_grid(cfg)
    out_dir = Path(cfg.output_dir)
    store = persist_rows(rows, out_dir / "results.jsonl")
    paths = emit_report(rows, args.format, out_dir, layout=args.layout)
    print(f"wrote {len(rows)} rows to {store}")
    for path in paths:
        print(f"wrote {path}")
    failed = [r for r in rows if r.status != "ok"]
    if failed:
        for row in failed:
            print(f"FAILED cell: {row.model}/{row.dataset}/"
                  f"{row.strategy}/{row.attack} eps={row.epsilon:.6g} "
                  f"({row.failures} failed samples)", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _cmd_report(args) -> int:
    rows = load_rows(args.store, tolerant=args.tolerant)
    if not rows:
        print("store holds no rows", file=sys.stderr)
        return EXIT_CONFIG
    paths = emit_report(rows, args.format, args.out, layout=args.layout,
                        average_tasks=args.average_tasks)
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_convert(args) -> int:
    if args.layout == "coco-captions":
        records = convert_coco_captions(args.annotations, args.images,
                                        image_ext=args.image_ext)
    else:
        if not args.questions:
            print("vqa layout needs --questions", file=sys.stderr)
            return EXIT_CONFIG
        records = convert_vqa(args.questions, args.annotations, args.images,
                              image_pattern=args.image_pattern)
    dataset = Dataset(tuple(records), base_dir=Path(args.out).resolve().parent)
    save_dataset(dataset, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def _cmd_rewrite_cache(args) -> int:
    spec = args.rewriter
    if spec == "stub":
        client = StubRewriter()
    elif spec.startswith("fixture:"):
        client = FixtureRewriter.from_jsonl(spec.split(":", 1)[1])
    else:
        try:
            client = RemoteRewriter(
                OracleClient(open_transport(spec), timeout=args.timeout))
        except (TransportError, ProtocolError, OracleError, OSError) as exc:
            print(f"rewriter endpoint failed: {exc}", file=sys.stderr)
            return EXIT_ENDPOINT
    dataset = load_dataset(args.dataset, check_images=False)
    cache = RewriteCache(args.cache)
    strategies = sum((_csv_list(s) for s in args.strategy), [])
    done = 0
    for tag in strategies:
        strategy = VqaStrategy(tag)
        for rec in dataset.records:
            if rec.task != TASK_VQA:
                continue
            rewrite_question(client, strategy, rec.question, cache=cache)
            done += 1
    print(f"cached {done} rewrites to {args.cache}")
    return EXIT_OK


def _cmd_protocol_check(args) -> int:
    try:
        transport = open_transport(args.endpoint)
    except (TransportError, OSError) as exc:
        print(f"cannot open endpoint: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    try:
        outcomes = check_endpoint(transport, fuzz_lines=args.fuzz_lines,
                                  seed=args.fuzz_seed, timeout=args.timeout)
    finally:
        transport.close()
    for outcome in outcomes:
        print(outcome.line())
    if all(o.passed for o in outcomes):
        print(f"endpoint conforms ({len(outcomes)} checks)")
        return EXIT_OK
    return EXIT_ENDPOINT


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "report": _cmd_report,
        "convert-dataset": _cmd_convert,
        "rewrite-cache": _cmd_rewrite_cache,
        "protocol-check": _cmd_protocol_check,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StoreError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (TransportError, ProtocolError, OracleError) as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
