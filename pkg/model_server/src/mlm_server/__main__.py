"""CLI: serve a masked-LM over the scorer wire protocol, or tokenize passages.

    mlm-sidecar serve --model bert-base-uncased --transport stdio
    mlm-sidecar serve --model bert-base-uncased --transport tcp --port 9000
    mlm-sidecar tokenize --model bert-base-uncased --input passages.txt \
        --n 20 --count 100 --out states.ndjson
"""

from __future__ import annotations

import argparse
import json
import sys


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mlm-sidecar")
    sub = parser.add_subparsers(dest="command", required=True)

    serve_p = sub.add_parser("serve")
    serve_p.add_argument("--model", required=True)
    serve_p.add_argument("--transport", choices=["stdio", "tcp"], default="stdio")
    serve_p.add_argument("--port", type=int, default=0)
    serve_p.add_argument("--host", default="127.0.0.1")
    serve_p.add_argument("--device", default="cpu")
    serve_p.add_argument("--dtype", default="float32",
                         choices=["float32", "float16", "bfloat16"])

    tok_p = sub.add_parser("tokenize")
    tok_p.add_argument("--model", required=True)
    tok_p.add_argument("--input", required=True)
    tok_p.add_argument("--n", type=int, required=True)
    tok_p.add_argument("--count", type=int, required=True)
    tok_p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.command == "serve":
        from .model import ServedModel
        from .server import serve_stdio, serve_tcp

        model = ServedModel(args.model, device=args.device, dtype=args.dtype)
        if args.transport == "stdio":
            serve_stdio(model)
        else:
            serve_tcp(model, args.host, args.port)
        return 0
    if args.command == "tokenize":
        from .tokenize import tokenize_passages

        summary = tokenize_passages(args.model, args.input, args.n, args.count, args.out)
        json.dump(summary.to_json_obj(), sys.stdout)
        sys.stdout.write("\n")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
