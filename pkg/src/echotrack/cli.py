"""Command-line interface.

`run` executes an episode locally (exit codes: 0 ok, 2 config error,
3 numerical abort). `serve` hosts the HTTP service; `submit`, `status` and
`result` are thin clients for a running service.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from .errors import ConfigError, EchoTrackError, NumericalAbort
from .tracker import EpisodeConfig, profile_config, run_episode


def _load_config(args: argparse.Namespace) -> EpisodeConfig:
    overrides: dict = {}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.methods:
        overrides["methods"] = tuple(m.strip() for m in args.methods.split(","))
    base = profile_config(args.profile)
    merged = base.to_dict()
    unknown = set(overrides) - set(merged)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged.update(overrides)
    merged["profile"] = args.profile
    return EpisodeConfig.from_dict(merged)


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        config = _load_config(args)
    except (ConfigError, json.JSONDecodeError, OSError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        manifest = run_episode(
            config,
            args.out,
            stop_after=args.stop_after,
            resume_from=args.resume,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalAbort, EchoTrackError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(manifest["summary"], indent=2))
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("echotrack.service.app:app", host=args.host, port=args.port)
    return 0


def _client(base_url: str):
    import httpx

    return httpx.Client(base_url=base_url, timeout=30.0)


def _cmd_submit(args: argparse.Namespace) -> int:
    payload = {"profile": args.profile, "seed": args.seed or 0}
    if args.methods:
        payload["methods"] = [m.strip() for m in args.methods.split(",")]
    if args.config:
        with open(args.config) as fh:
            payload["overrides"] = json.load(fh)
    if args.out:
        payload["out_dir"] = args.out
    with _client(args.server) as client:
        resp = client.post("/runs", json=payload)
        resp.raise_for_status()
        info = resp.json()
    print(json.dumps(info, indent=2))
    if not args.wait:
        return 0
    run_id = info["run_id"]
    with _client(args.server) as client:
        while True:
            state = client.get(f"/runs/{run_id}").json()
            if state["state"] in ("done", "failed"):
                print(json.dumps(state, indent=2))
                return 0 if state["state"] == "done" else 3
            time.sleep(args.poll)


def _cmd_status(args: argparse.Namespace) -> int:
    with _client(args.server) as client:
        path = f"/runs/{args.run_id}" if args.run_id else "/runs"
        resp = client.get(path)
        resp.raise_for_status()
        print(json.dumps(resp.json(), indent=2))
    return 0


def _cmd_result(args: argparse.Namespace) -> int:
    with _client(args.server) as client:
        resp = client.get(f"/runs/{args.run_id}/result")
        resp.raise_for_status()
        print(json.dumps(resp.json(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echotrack")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an episode locally")
    run_p.add_argument("--config", help="JSON file with config overrides")
    run_p.add_argument("--seed", type=int, default=None, help="episode seed")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    run_p.add_argument("--methods", help="comma-separated subset of ddpm,music,esprit,cnn,kf")
    run_p.add_argument("--stop-after", type=int, default=None, help="stop after this block")
    run_p.add_argument("--resume", default=None, help="checkpoint file to resume from")
    run_p.set_defaults(func=_cmd_run)

    serve_p = sub.add_parser("serve", help="start the HTTP service")
    serve_p.add_argument("--host", default="127.0.0.1")
    serve_p.add_argument("--port", type=int, default=8000)
    serve_p.set_defaults(func=_cmd_serve)

    submit_p = sub.add_parser("submit", help="submit a run to a service")
    submit_p.add_argument("--server", default="http://127.0.0.1:8000")
    submit_p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    submit_p.add_argument("--seed", type=int, default=0)
    submit_p.add_argument("--config", help="JSON file with config overrides")
    submit_p.add_argument("--methods")
    submit_p.add_argument("--out", help="server-side output directory")
    submit_p.add_argument("--wait", action="store_true", help="poll until the run finishes")
    submit_p.add_argument("--poll", type=float, default=2.0)
    submit_p.set_defaults(func=_cmd_submit)

    status_p = sub.add_parser("status", help="query run status")
    status_p.add_argument("run_id", nargs="?", default=None)
    status_p.add_argument("--server", default="http://127.0.0.1:8000")
    status_p.set_defaults(func=_cmd_status)

    result_p = sub.add_parser("result", help="fetch a finished run's summary")
    result_p.add_argument("run_id")
    result_p.add_argument("--server", default="http://127.0.0.1:8000")
    result_p.set_defaults(func=_cmd_result)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
