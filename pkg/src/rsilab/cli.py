"""Command-line client for the lab service.

Every subcommand talks to the HTTP API: against a remote server when
--server is given, otherwise against an in-process instance of the same
app. Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

USAGE_EXIT = 1
RUNTIME_EXIT = 2
_POLL_SECONDS = 0.2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*starlette.testclient.*")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _fail(resp) -> int:
    try:
        detail = resp.json().get("detail", resp.text)
    except ValueError:
        detail = resp.text
    print(f"error: {detail}", file=sys.stderr)
    return USAGE_EXIT if resp.status_code == 422 else RUNTIME_EXIT


def _load_config_arg(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        print(f"error: config file not found: {path}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        print(f"error: {path} is not valid JSON: {exc}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _print_round(row: dict) -> None:
    print("round %2d  mmd=%.4f  composite=%.4f  halluc=%.4f" % (
        row["round"], row["mmd_to_reference"], row["mean_composite"],
        row["hallucination_rate"],
    ))


def _poll_run(client, run_id: str) -> int:
    printed = 0
    while True:
        resp = client.get(f"/runs/{run_id}")
        if resp.status_code != 200:
            return _fail(resp)
        status = resp.json()
        for row in status["rounds"][printed:]:
            _print_round(row)
            printed += 1
        if status["state"] == "completed":
            print(f"completed: {status['out_dir']}")
            return 0
        if status["state"] == "failed":
            print(f"error: {status['error']}", file=sys.stderr)
            return USAGE_EXIT if status["error_kind"] == "config" else RUNTIME_EXIT
        time.sleep(_POLL_SECONDS)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    overrides = _load_config_arg(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    body = {
        "config": overrides,
        "out_dir": args.out,
        "baseline": args.baseline,
        "dry_run": args.dry_run,
        "force": args.force,
        "resume": args.resume,
    }
    with _client(args.server) as client:
        resp = client.post("/runs", json=body)
        if resp.status_code != 200:
            return _fail(resp)
        accepted = resp.json()
        if args.dry_run:
            print(json.dumps(accepted["resolved_config"], indent=1, sort_keys=True))
            return 0
        return _poll_run(client, accepted["run_id"])


def _parse_values(raw: str, parameter: str) -> list:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if parameter == "k_select":
        return [int(p) for p in parts]
    if parameter == "strategy":
        return parts
    return [float(p) for p in parts]


def cmd_ablate(args) -> int:
    config = _load_config_arg(args.config)
    if args.spec:
        spec = _load_config_arg(args.spec)
        parameter = spec.get("parameter")
        values = spec.get("values", [])
        seeds = spec.get("seeds", [])
    else:
        if not (args.param and args.values and args.seeds):
            print("error: pass --spec or all of --param/--values/--seeds", file=sys.stderr)
            return USAGE_EXIT
        parameter = args.param
        values = _parse_values(args.values, args.param)
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    body = {
        "config": config,
        "parameter": parameter,
        "values": values,
        "seeds": seeds,
        "out_dir": args.out,
        "force": args.force,
    }
    with _client(args.server) as client:
        resp = client.post("/ablate", json=body)
        if resp.status_code != 200:
            return _fail(resp)
        run_id = resp.json()["run_id"]
        while True:
            resp = client.get(f"/ablate/{run_id}")
            if resp.status_code != 200:
                return _fail(resp)
            status = resp.json()
            if status["state"] == "completed":
                for d in status["run_dirs"]:
                    print(f"run: {d}")
                print(f"aggregate: {status['csv_path']}")
                return 0
            if status["state"] == "failed":
                print(f"error: {status['error']}", file=sys.stderr)
                return USAGE_EXIT if status["error_kind"] == "config" else RUNTIME_EXIT
            time.sleep(_POLL_SECONDS)


def cmd_report(args) -> int:
    with _client(args.server) as client:
        resp = client.post("/reports", json={"run_dirs": args.run_dirs})
        if resp.status_code != 200:
            return _fail(resp)
        report = resp.json()
    for d in report["skipped"]:
        print(f"warning: skipped incomplete run directory {d}", file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "report.csv")
    with open(csv_path, "w") as fh:
        fh.write(report["csv"])
    print(f"wrote {csv_path}")
    for metric, svg in report["svgs"].items():
        path = os.path.join(args.out, f"{metric}.svg")
        with open(path, "w") as fh:
            fh.write(svg)
        print(f"wrote {path}")
    return 0


def cmd_gen_pool(args) -> int:
    body = {
        "world": args.world,
        "size": args.size,
        "vague_fraction": args.vague_fraction,
        "seed": args.seed,
    }
    with _client(args.server) as client:
        resp = client.post("/pools", json=body)
        if resp.status_code != 200:
            return _fail(resp)
        records = resp.json()["records"]
    with open(args.out, "w") as fh:
        json.dump(records, fh, indent=1, sort_keys=True)
    print(f"wrote {args.out} ({len(records)} prompts)")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="rsilab", description=__doc__)
    parser.add_argument("--server", default=None,
                        help="URL of a running lab service (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a self-training run")
    p.add_argument("--config", required=True, help="path to a run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="run directory (overrides output_dir)")
    p.add_argument("--baseline", choices=["random", "sft"], default=None)
    p.add_argument("--dry-run", action="store_true",
                   help="validate and print the resolved config, no compute")
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing completed run directory")
    p.add_argument("--resume", action="store_true",
                   help="continue an interrupted run in --out")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ablate", help="sweep one parameter over a grid of values and seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--param", choices=["beta", "sigma_sq", "k_select", "strategy"])
    p.add_argument("--values", help="comma-separated grid values")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--spec", help="JSON file with {parameter, values, seeds}")
    p.add_argument("--out", required=True, help="parent directory for the sweep")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="aggregate CSV and SVG plots from run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("gen-pool", help="emit a synthetic prompt pool file")
    p.add_argument("--world", default="rings-8")
    p.add_argument("--size", type=int, default=1600)
    p.add_argument("--vague-fraction", type=float, default=0.35)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="pool JSON path")
    p.set_defaults(fn=cmd_gen_pool)

    p = sub.add_parser("serve", help="start the lab service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    try:
        raise SystemExit(args.fn(args))
    except KeyboardInterrupt:
        raise SystemExit(RUNTIME_EXIT)
