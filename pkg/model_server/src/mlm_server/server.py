"""Request loop implementing the scorer wire protocol.

Newline-delimited JSON, one object per line:

    {"op": "meta"}                                   -> vocab_size/mask_id/frozen_suggestion
    {"id", "op": "scores", "tokens": [...], "pos"}   -> {"id", "scores": [...]}
    {"op": "scores_batch", "items": [{tokens, pos}]} -> {"results": [[...], ...]}

Failures are reported as {"id", "error": str}; the connection survives every
error, including out-of-memory on a batch. The loop is single-threaded by
design: throughput comes from client-side batching, not server threads.
"""

from __future__ import annotations

import json
import socketserver
import sys

import torch

from .model import ModelError, ServedModel


class RequestHandler:
    def __init__(self, model: ServedModel):
        self.model = model

    def handle_request(self, request: dict) -> dict:
        rid = request.get("id")
        try:
            op = request.get("op")
            if op == "meta":
                reply = self.model.meta()
            elif op == "scores":
                reply = {"scores": self.model.scores(request.get("tokens"),
                                                     request.get("pos"))}
            elif op == "scores_batch":
                reply = {"results": self.model.scores_batch(request.get("items"))}
            else:
                raise ModelError(f"unknown op {op!r}")
        except ModelError as exc:
            reply = {"error": str(exc)}
        except torch.cuda.OutOfMemoryError:
            torch.cuda.empty_cache()
            reply = {"error": "out of memory; retry with a smaller batch"}
        except Exception as exc:  # keep the connection alive on any failure
            reply = {"error": f"{type(exc).__name__}: {exc}"}
        if rid is not None:
            reply["id"] = rid
        return reply

    def handle_line(self, line: bytes | str) -> bytes:
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("message must be a JSON object")
        except ValueError as exc:
            return _encode({"error": f"malformed request: {exc}"})
        return _encode(self.handle_request(request))


def _encode(obj: dict) -> bytes:
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def serve_stdio(model: ServedModel) -> None:
    handler = RequestHandler(model)
    out = sys.stdout.buffer
    for line in sys.stdin.buffer:
        if not line.strip():
            continue
        out.write(handler.handle_line(line))
        out.flush()


def serve_tcp(model: ServedModel, host: str, port: int) -> None:
    server = make_tcp_server(model, host, port)
    print(f"listening on {server.server_address[0]}:{server.server_address[1]}",
          file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    finally:
        server.server_close()


def make_tcp_server(model: ServedModel, host: str = "127.0.0.1", port: int = 0):
    handler = RequestHandler(model)

    class _Handler(socketserver.StreamRequestHandler):
        def handle(self):
            for line in self.rfile:
                if not line.strip():
                    continue
                self.wfile.write(handler.handle_line(line))
                self.wfile.flush()

    class _Server(socketserver.TCPServer):
        allow_reuse_address = True

    return _Server((host, port), _Handler)
