"""Command-line interface.

Each verb is a thin client over the service handlers, running in-process so
training works offline with plain exit codes; ``serve`` exposes the same
handlers over HTTP. Exit status is 0 on success and 1 on failure, with the
failing stage reported on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

from .config import DEFAULT_CONFIG_TEXT
from .service.handlers import (
    handle_dump_state,
    handle_eval,
    handle_suite,
    handle_train,
)
from .service.schemas import (
    DumpStateRequest,
    EvalRequest,
    SuiteRequest,
    TrainRequest,
)


def _int_list(raw: str) -> list[int]:
    return [int(v) for v in raw.split(",") if v != ""]


def _str_list(raw: str) -> list[str]:
    return [v.strip() for v in raw.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="schedlab",
        description="Train and compare class-curriculum schedulers on a "
                    "synthetic segmentation world.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training to completion")
    train.add_argument("--config", required=True, help="config file path")
    train.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    train.add_argument("--out", default=None, help="run output directory")

    suite = sub.add_parser("suite", help="compare schedulers across seeds")
    suite.add_argument("--config", required=True)
    suite.add_argument("--seeds", required=True, type=_int_list,
                       help="comma-separated seeds, e.g. 1,2,3,4,5")
    suite.add_argument("--schedulers", type=_str_list, default=[],
                       help="comma-separated scheduler kinds")
    suite.add_argument("--ablations", type=_str_list, default=[],
                       help="comma-separated ablation variants "
                            "(encoder_bypass, distill_bypass, alpha_zero)")
    suite.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes")
    suite.add_argument("--out", default=None)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True,
                          help="checkpoint directory (or run directory)")
    evaluate.add_argument("--config", default=None,
                          help="config path (default: the checkpoint's)")

    dump = sub.add_parser("dump-state",
                          help="export a run's codec pretraining corpus")
    dump.add_argument("--run", required=True, help="run directory")
    dump.add_argument("--out", default=None, help="output file path")

    init = sub.add_parser("init-config",
                          help="print the documented default config")
    init.add_argument("--out", default=None, help="write to a file instead")

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--runs-root", default="schedlab_runs")

    return parser


def _cmd_train(args) -> int:
    report, out_dir = handle_train(TrainRequest(
        config_path=args.config, seed=args.seed, out_dir=args.out))
    print(json.dumps({"out_dir": out_dir, **report.model_dump()}, indent=2))
    return 0


def _cmd_suite(args) -> int:
    result, out_dir = handle_suite(SuiteRequest(
        config_path=args.config, seeds=args.seeds,
        schedulers=args.schedulers, ablations=args.ablations,
        jobs=args.jobs, out_dir=args.out))
    print(f"suite results in {out_dir}")
    for summary in result.summaries:
        print(json.dumps(asdict(summary)))
    failures = [r for r in result.rows if r.status != "ok"]
    if failures:
        print(f"{len(failures)} run(s) failed:", file=sys.stderr)
        for row in failures:
            print(f"  {row.variant} seed {row.seed}: {row.error}",
                  file=sys.stderr)
        return 1
    return 0


def _cmd_eval(args) -> int:
    response = handle_eval(EvalRequest(checkpoint=args.checkpoint,
                                       config_path=args.config))
    print(json.dumps(response.model_dump(), indent=2))
    return 0


def _cmd_dump_state(args) -> int:
    response = handle_dump_state(DumpStateRequest(run_dir=args.run,
                                                  out_path=args.out))
    print(json.dumps(response.model_dump()))
    return 0


def _cmd_init_config(args) -> int:
    if args.out:
        with open(args.out, "w") as handle:
            handle.write(DEFAULT_CONFIG_TEXT)
        print(args.out)
    else:
        print(DEFAULT_CONFIG_TEXT, end="")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(runs_root=args.runs_root), host=args.host,
                port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    commands = {
        "train": _cmd_train,
        "suite": _cmd_suite,
        "eval": _cmd_eval,
        "dump-state": _cmd_dump_state,
        "init-config": _cmd_init_config,
        "serve": _cmd_serve,
    }
    try:
        return commands[args.command](args)
    except Exception as exc:
        print(f"schedlab {args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
