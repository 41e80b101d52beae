"""Command-line client for the impression service.

The CLI is a thin client: every subcommand builds a request document
(config file merged with flags, flags winning), posts it to the service,
and writes an effective-config sidecar next to the outputs so any run can
be reproduced with --config. By default requests run against an
in-process instance of the service; --server targets a remote one.

Exit codes: 0 success, 2 config, 3 io, 4 incompatibility, 5 numeric.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path

import httpx
import pydantic

from .service import schemas as sm
from .service.app import create_app

EXIT_CODES = {"config": 2, "io": 3, "incompatible": 4, "numeric": 5, "internal": 1}


class _CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category

_COMMANDS = {
    "train-template": ("/train", sm.TrainRequest),
    "encode": ("/encode", sm.EncodeRequest),
    "synth": ("/synth", sm.SynthRequest),
    "translate": ("/translate", sm.TranslateRequest),
    "retrieve": ("/retrieve", sm.RetrieveRequest),
    "gridify": ("/gridify", sm.GridifyRequest),
    "distance": ("/distance", sm.DistanceRequest),
}


def _fail(category: str, message: str) -> int:
    line = " ".join(str(message).split())
    print(f"error [{category}] {line}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


def _widths(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="impression", description=__doc__.splitlines()[0])
    parser.add_argument("--server", default=None, help="remote service URL (default: run in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = add("train-template", "train the template classifier and save a checkpoint")
    p.add_argument("--dataset", default=None, help="'two-domain', 'mnist', or a labeled manifest")
    p.add_argument("--out", default=None, help="checkpoint output path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--widths", type=_widths, default=None, help="conv block widths, e.g. 16,32,64")
    p.add_argument("--n-per-domain", dest="n_per_domain", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)

    p = add("encode", "encode an image or image set into a code file")
    p.add_argument("--net", default=None)
    p.add_argument("--input", default=None, help="image file, directory, or manifest")
    p.add_argument("--schema", default=None, choices=["mean", "var", "meanvar"])
    p.add_argument("--ensemble", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", default=None)

    p = add("synth", "synthesize images matching a target code")
    p.add_argument("--net", default=None)
    p.add_argument("--target-code", dest="target_code", default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--shift", type=int, default=None)
    p.add_argument("--flip-prob", dest="flip_prob", type=float, default=None)
    p.add_argument("--mode", default=None, choices=["per-image", "ensemble"])
    p.add_argument("--precision", default=None, choices=["float32", "float64"])
    p.add_argument("--out-dir", dest="out_dir", default=None)

    p = add("translate", "translate source images toward a target-domain code")
    p.add_argument("--net", default=None)
    p.add_argument("--source", default=None, help="image file, directory, or manifest")
    p.add_argument("--target-code", dest="target_code", default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--task", default=None, help="published task tag (resolves lambda)")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--shift", type=int, default=None)
    p.add_argument("--flip-prob", dest="flip_prob", type=float, default=None)
    p.add_argument("--mode", default=None, choices=["per-image", "ensemble"])
    p.add_argument("--precision", default=None, choices=["float32", "float64"])
    p.add_argument("--out-dir", dest="out_dir", default=None)

    p = add("retrieve", "rank a corpus by impression distance to a seed set")
    p.add_argument("--net", default=None)
    p.add_argument("--seed-images", dest="seed_images", default=None, help="manifest of seed images")
    p.add_argument("--corpus", default=None, help="manifest of corpus images")
    p.add_argument("--n-t", dest="n_t", type=int, default=None)
    p.add_argument("--schema", default=None, choices=["mean", "var", "meanvar"])
    p.add_argument("--out", default=None, help="ranking CSV output path")

    p = add("gridify", "tile a directory of images into one montage PNG")
    p.add_argument("--inputs", default=None)
    p.add_argument("--cols", type=int, default=None)
    p.add_argument("--pad", type=int, default=None)
    p.add_argument("--out", default=None)

    p = add("distance", "distance between two code files")
    p.add_argument("--code-a", dest="code_a", default=None)
    p.add_argument("--code-b", dest="code_b", default=None)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8600)

    return parser


def _effective_request(args: argparse.Namespace, model: type[pydantic.BaseModel]) -> dict:
    """Merge config-file values with explicitly given flags (flags win)."""
    merged: dict = {}
    if args.config is not None:
        try:
            merged.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise _CliError("io", f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise _CliError("config", f"config file {args.config} is not valid JSON: {exc}") from exc
    skip = {"command", "config", "server"}
    for key, value in vars(args).items():
        if key not in skip and value is not None:
            merged[key] = value
    try:
        request = model.model_validate(merged)
    except pydantic.ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first["loc"]) or "request"
        raise _CliError("config", f"{loc}: {first['msg']}") from exc
    return request.model_dump(by_alias=True)


def _sidecar_path(command: str, payload: dict) -> Path | None:
    if "out_dir" in payload:
        return Path(payload["out_dir"]) / "run_config.json"
    if "out" in payload:
        return Path(str(payload["out"]) + ".config.json")
    return None


def _post(server: str | None, endpoint: str, payload: dict) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=3600.0) as client:
            return client.post(endpoint, json=payload)

    async def in_process() -> httpx.Response:
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(
            transport=transport, base_url="http://impression.internal", timeout=None
        ) as client:
            return await client.post(endpoint, json=payload)

    return asyncio.run(in_process())


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service.app import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    endpoint, model = _COMMANDS[args.command]
    payload = _effective_request(args, model)
    try:
        response = _post(args.server, endpoint, payload)
    except httpx.HTTPError as exc:
        return _fail("io", f"cannot reach service: {exc}")

    if response.status_code != 200:
        try:
            body = response.json()
            category = body.get("category", "internal")
            message = body.get("message", response.text)
        except ValueError:
            category, message = "internal", response.text
        return _fail(category, message)

    sidecar = _sidecar_path(args.command, payload)
    if sidecar is not None:
        sidecar.parent.mkdir(parents=True, exist_ok=True)
        sidecar.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(response.json(), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
