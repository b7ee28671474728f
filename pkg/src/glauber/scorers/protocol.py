"""Scorer wire protocol: newline-delimited JSON over TCP or child stdio.

This module holds the normative implementation shared by the remote client
and any sidecar serving scores. One JSON object per line:

    handshake  {"op": "meta"}
               -> {"vocab_size": int, "mask_id": int, "frozen_suggestion": [int, ...]}
    scoring    {"id": u64, "op": "scores", "tokens": [int x n], "pos": int}
               -> {"id": u64, "scores": [float x V]}
    batch      {"op": "scores_batch", "items": [{"tokens": [...], "pos": int}, ...]}
               -> {"results": [[float x V], ...]}
    error      {"id": u64, "error": str}

Scores are raw natural-log logits, pre-temperature. ``id`` is echoed when
present. ``frozen_suggestion`` lists token ids (delimiters) whose positions a
client should freeze.
"""

from __future__ import annotations

import json
import socketserver
import sys
from typing import Sequence

import numpy as np

from ..core import SeqState
from ..errors import ProtocolError


def encode_message(obj: dict) -> bytes:
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def decode_message(line: bytes | str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed protocol line: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError(f"protocol message must be a JSON object, got {type(obj).__name__}")
    return obj


class ScorerRequestHandler:
    """Serves any in-process scorer over the wire protocol.

    ``mask_id`` defaults to -1 when the scorer has no mask sentinel (contract
    scorers never read the token at the queried position anyway).
    """

    def __init__(self, scorer, mask_id: int = -1,
                 frozen_suggestion: Sequence[int] = ()):
        self.scorer = scorer
        self.mask_id = int(mask_id)
        self.frozen_suggestion = [int(t) for t in frozen_suggestion]

    def _scores_for(self, tokens, pos) -> list[float]:
        if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
            raise ValueError("tokens must be a list of ints")
        if not isinstance(pos, int) or not 0 <= pos < len(tokens):
            raise ValueError(f"pos {pos} out of range for {len(tokens)} tokens")
        ids = list(tokens)
        if 0 <= self.mask_id < self.scorer.vocab_size:
            ids[pos] = self.mask_id  # scorers must not see the current token
        else:
            ids[pos] = 0
        state = SeqState(np.array(ids, dtype=np.int64))
        scores = np.asarray(self.scorer.local_scores(state, pos), dtype=np.float64)
        return [float(v) for v in scores]

    def handle_request(self, request: dict) -> dict:
        rid = request.get("id")
        try:
            op = request.get("op")
            if op == "meta":
                reply = {
                    "vocab_size": int(self.scorer.vocab_size),
                    "mask_id": self.mask_id,
                    "frozen_suggestion": self.frozen_suggestion,
                }
            elif op == "scores":
                reply = {"scores": self._scores_for(request.get("tokens"), request.get("pos"))}
            elif op == "scores_batch":
                items = request.get("items")
                if not isinstance(items, list):
                    raise ValueError("items must be a list")
                reply = {"results": [self._scores_for(it.get("tokens"), it.get("pos"))
                                     for it in items]}
            else:
                raise ValueError(f"unknown op {op!r}")
        except Exception as exc:  # errors cross the wire, never kill the server
            reply = {"error": str(exc)}
        if rid is not None:
            reply["id"] = rid
        return reply

    def handle_line(self, line: bytes | str) -> bytes:
        try:
            request = decode_message(line)
        except ProtocolError as exc:
            return encode_message({"error": str(exc)})
        return encode_message(self.handle_request(request))

    def serve_stdio(self) -> None:
        """Blocking request loop over this process's stdin/stdout."""
        out = sys.stdout.buffer
        for line in sys.stdin.buffer:
            if not line.strip():
                continue
            out.write(self.handle_line(line))
            out.flush()

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0):
        """Blocking TCP server; returns after ``server_close``. For tests,
        use ``make_tcp_server`` to obtain the bound port first."""
        server = self.make_tcp_server(host, port)
        try:
            server.serve_forever()
        finally:
            server.server_close()

    def make_tcp_server(self, host: str = "127.0.0.1", port: int = 0):
        handler = self

        class _Handler(socketserver.StreamRequestHandler):
            def handle(self):
                for line in self.rfile:
                    if not line.strip():
                        continue
                    self.wfile.write(handler.handle_line(line))
                    self.wfile.flush()

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        return _Server((host, port), _Handler)
