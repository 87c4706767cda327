"""Command-line entry point.

    fingersynth <task> --config <path> [--seed N] [--out DIR]   run in-process
    fingersynth report --run-dir DIR                            consolidated report
    fingersynth serve [--host H] [--port P]                     start the HTTP service
    fingersynth submit --server URL --config <path> [--wait]    thin client: run on a service

Exit codes: 0 ok, 1 configuration error, 2 runtime failure. The
FINGERSYNTH_OUT environment variable overrides the output directory only.
"""

from __future__ import annotations

import argparse
import sys
import time

from .config import TASKS, parse_config
from .errors import ConfigurationError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fingersynth", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for task in TASKS:
        p = sub.add_parser(task, help=f"run the {task} pipeline")
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help="override [run] out_dir")

    p = sub.add_parser("report", help="render the consolidated report for a run directory")
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8710)

    p = sub.add_parser("submit", help="submit a run to a running service")
    p.add_argument("--server", required=True, help="service base URL, e.g. http://127.0.0.1:8710")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--wait", action="store_true", help="poll until the run finishes")
    return parser


def _run_task(args) -> int:
    from . import runner

    overrides = {}
    if args.seed is not None:
        overrides[("run", "seed")] = str(args.seed)
    if args.out is not None:
        overrides[("run", "out_dir")] = args.out
    try:
        cfg = parse_config(args.config, overrides=overrides or None, default_task=args.command)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        result = runner.run(cfg)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    print(f"ok: {len(result.artifacts)} artifacts under {result.out_dir}")
    return 0


def _report(args) -> int:
    from . import runner

    try:
        text = runner.write_report_bundle(args.run_dir)
    except Exception as exc:
        print(f"report failed: {exc}", file=sys.stderr)
        return 2
    print(text, end="")
    return 0


def _serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="warning")
    return 0


def _submit(args) -> int:
    import requests

    try:
        with open(args.config, "r", encoding="utf-8") as f:
            config_text = f.read()
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    payload = {"config_text": config_text, "seed": args.seed, "out_dir": args.out}
    resp = requests.post(f"{args.server}/runs", json=payload, timeout=60)
    if resp.status_code == 400:
        print(f"config error: {resp.json().get('detail')}", file=sys.stderr)
        return 1
    resp.raise_for_status()
    info = resp.json()
    run_id = info["run_id"]
    print(f"submitted {run_id} ({info['task']})")
    if not args.wait:
        return 0
    while info["status"] in ("queued", "running"):
        time.sleep(0.5)
        info = requests.get(f"{args.server}/runs/{run_id}", timeout=60).json()
    if info["status"] == "finished":
        print(f"finished: {info['out_dir']}")
        return 0
    print(f"run failed: {info.get('error')}", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in TASKS:
        return _run_task(args)
    if args.command == "report":
        return _report(args)
    if args.command == "serve":
        return _serve(args)
    return _submit(args)


if __name__ == "__main__":
    sys.exit(main())
