"""Command line client. Every subcommand except `serve` talks to the HTTP
API; by default the app is mounted in-process, with --server pointing the
same commands at a remote instance.

Exit codes: 0 success, 2 configuration or usage error, 3 stage failure.
"""

import argparse
import json
import sys
import warnings

import httpx

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def make_client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    # httpx.ASGITransport is async-only; starlette's TestClient is the
    # supported way to drive an ASGI app from synchronous code. Its import
    # warns about the httpx2 migration, which is not actionable here.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from starlette.testclient import TestClient

    from .service import create_app

    return TestClient(create_app(), base_url="http://llmr.internal")


def _common(parser):
    parser.add_argument("--server", default=None, help="base URL of a running service; default runs in-process")


def _config_args(parser, iteration: bool = False):
    parser.add_argument("--config", required=True, help="path to a run config file")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override config out_dir")
    parser.add_argument("--variant", default=None, help="override retriever variant")
    if iteration:
        parser.add_argument("--iteration", type=int, default=1)
    _common(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llmr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("suite", help="generate the synthetic benchmark and a ready config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--train-size", type=int, default=200)
    p.add_argument("--test-size", type=int, default=100)
    _common(p)

    for name, text in (
        ("rank", "retrieve and LM-rank candidates for one iteration"),
        ("train-reward", "train the reward model for one iteration"),
        ("train-retriever", "distill the retriever for one iteration"),
        ("iterate", "run all three stages for one iteration"),
    ):
        p = sub.add_parser(name, help=text)
        _config_args(p, iteration=True)

    p = sub.add_parser("eval", help="evaluate all strategies on the test sets")
    _config_args(p)

    p = sub.add_parser("run", help="run every iteration, evaluation and reports")
    p.add_argument("--no-shot-scaling", action="store_true")
    _config_args(p)

    p = sub.add_parser("report", help="show saved evaluation tables")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    _common(p)

    p = sub.add_parser("search", help="query the candidate pool")
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--method", choices=("bm25", "dense"), default="bm25")
    p.add_argument("--iteration", type=int, default=None, help="dense index iteration; default latest")
    _config_args(p)

    p = sub.add_parser("score", help="LM-score pool candidates against an input/output pair")
    p.add_argument("--input", required=True, dest="input_text")
    p.add_argument("--output", required=True, dest="output_text")
    p.add_argument("--task", required=True, dest="task_id")
    p.add_argument("--candidates", required=True, help="comma-separated candidate ids")
    _config_args(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=870)
    return parser


def _overrides(args) -> dict:
    return {"seed": args.seed, "out_dir": args.out, "variant": args.variant}


def _post(client: httpx.Client, path: str, payload: dict):
    payload = {k: v for k, v in payload.items() if v is not None}
    return client.post(path, json=payload)


def _print_response(resp: httpx.Response) -> int:
    if resp.status_code == 200:
        print(json.dumps(resp.json(), indent=1, sort_keys=True))
        return EXIT_OK
    try:
        body = resp.json()
    except json.JSONDecodeError:
        body = {"message": resp.text}
    message = body.get("message") or json.dumps(body)
    print(f"error: {message}", file=sys.stderr)
    if resp.status_code in (400, 422):
        return EXIT_CONFIG
    return EXIT_STAGE


def _print_report(resp: httpx.Response) -> int:
    if resp.status_code != 200:
        return _print_response(resp)
    body = resp.json()
    table = body.get("table")
    if table:
        print(table, end="")
    else:
        print(json.dumps(body.get("reports", {}), indent=1, sort_keys=True))
    scaling = body.get("shot_scaling")
    if scaling:
        print()
        print(scaling, end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
        return EXIT_OK

    with make_client(args.server) as client:
        if args.command == "suite":
            resp = _post(
                client,
                "/suite",
                {
                    "out_dir": args.out,
                    "seed": args.seed,
                    "train_size": args.train_size,
                    "test_size": args.test_size,
                },
            )
            return _print_response(resp)

        if args.command in ("rank", "train-reward", "train-retriever", "iterate"):
            payload = {"config": args.config, "iteration": args.iteration, **_overrides(args)}
            resp = _post(client, f"/{args.command}", payload)
            return _print_response(resp)

        if args.command == "eval":
            resp = _post(client, "/eval", {"config": args.config, **_overrides(args)})
            return _print_response(resp)

        if args.command == "run":
            payload = {
                "config": args.config,
                "shot_scaling": not args.no_shot_scaling,
                **_overrides(args),
            }
            resp = _post(client, "/run", payload)
            if resp.status_code != 200:
                return _print_response(resp)
            body = resp.json()
            print(f"executed iterations: {body['executed'] or 'none (all artifacts valid)'}")
            report_resp = _post(client, "/report", {"out_dir": body["out_dir"]})
            return _print_report(report_resp)

        if args.command == "report":
            if not args.config and not args.out:
                print("error: report needs --config or --out", file=sys.stderr)
                return EXIT_CONFIG
            resp = _post(client, "/report", {"config": args.config, "out_dir": args.out})
            return _print_report(resp)

        if args.command == "search":
            payload = {
                "config": args.config,
                "query": args.query,
                "k": args.k,
                "method": args.method,
                "iteration": args.iteration if args.method == "dense" else None,
                **_overrides(args),
            }
            resp = _post(client, "/search", payload)
            return _print_response(resp)

        if args.command == "score":
            payload = {
                "config": args.config,
                "input_text": args.input_text,
                "output_text": args.output_text,
                "task_id": args.task_id,
                "candidate_ids": [c.strip() for c in args.candidates.split(",") if c.strip()],
                **_overrides(args),
            }
            resp = _post(client, "/score", payload)
            return _print_response(resp)

    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
