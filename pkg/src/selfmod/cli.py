"""Command line entry point.

Commands run in-process unless ``--server URL`` is given, in which case the
request goes to a running ``selfmod serve`` instance. Any config key can be
set from a ``--config`` file and overridden with ``--key=value``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import service
from .architectures import ConfigError
from .config import Config, parse_overrides
from .harness import jsonable

POLL_SECONDS = 2.0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfmod", description="Self-modulated GAN experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--server", help="base URL of a running service; run remotely")

    sp = sub.add_parser("train", help="single training run")
    common(sp)
    sp.add_argument("--seed", type=int, required=True)
    for name, helptext in (("grid", "full configuration grid"), ("ablate", "per-layer ablation")):
        common(sub.add_parser(name, help=helptext))
    sp = sub.add_parser("report", help="re-aggregate stored run records")
    sp.add_argument("root", help="grid directory containing runs/")
    sp.add_argument("--out", help="report directory (default <root>/reports)")
    sp.add_argument("--server")
    sp = sub.add_parser("metrics", help="evaluate a saved generator")
    common(sp)
    sp.add_argument("model", help=".npz written by train with model_path=...")
    sp.add_argument("--seed", type=int, default=0)
    sp = sub.add_parser("serve", help="start the HTTP service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    return p


def _remote(server: str, command: str, payload: dict) -> dict:
    import httpx

    base = server.rstrip("/")
    with httpx.Client(base_url=base, timeout=None) as client:
        resp = client.post(f"/{command}", json=payload)
        if resp.status_code >= 400:
            raise SystemExit(f"server error {resp.status_code}: {resp.text}")
        body = resp.json()
        if resp.status_code != 202:
            return body
        job_id = body["job_id"]
        while True:
            status = client.get(f"/jobs/{job_id}").json()
            if status["state"] == "done":
                return status["result"]
            if status["state"] == "failed":
                raise SystemExit(f"job {job_id} failed: {status['error']}")
            time.sleep(POLL_SECONDS)


def run(argv=None) -> dict:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "serve":
        import uvicorn

        uvicorn.run("selfmod.api:app", host=args.host, port=args.port)
        return {}
    if args.command == "report":
        if extra:
            raise ConfigError(f"report takes no config overrides, got {extra}")
        if args.server:
            return _remote(args.server, "report", {"root": args.root, "out_dir": args.out})
        return service.report(args.root, args.out)

    cfg = Config.load(args.config, parse_overrides(extra))
    if args.server:
        payload = {"config": cfg.values}
        if args.command == "train":
            payload["seed"] = args.seed
        if args.command == "metrics":
            payload.update(model_path=args.model, seed=args.seed)
        return _remote(args.server, args.command, payload)
    if args.command == "train":
        return service.train(cfg, args.seed)
    if args.command == "grid":
        return service.grid(cfg)
    if args.command == "ablate":
        return service.ablate(cfg)
    return service.evaluate(args.model, cfg, args.seed)


def main(argv=None) -> int:
    try:
        result = run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if result:
        print(json.dumps(jsonable(result), sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
