"""Client side of the scorer wire protocol.

Connects to a sidecar over TCP or child-process stdio, performs the meta
handshake, and exposes the ScorerContract surface. Responses are cached by
(masked context, position) with LRU eviction; the scorer contract's
determinism guarantees eviction never changes observable results.
"""

from __future__ import annotations

import json
import shlex
import socket
import subprocess
from collections import OrderedDict
from typing import Sequence

import numpy as np

from ..core import SeqState
from ..errors import InputError, ProtocolError, ScoringError, TransportError
from .protocol import decode_message, encode_message

DEFAULT_CACHE_CAPACITY = 1 << 20


class StdioTransport:
    """Runs the sidecar as a child process and frames lines over its pipes."""

    def __init__(self, command: Sequence[str] | str):
        if isinstance(command, str):
            command = shlex.split(command)
        self._command = list(command)
        try:
            self._proc = subprocess.Popen(
                self._command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise TransportError(f"failed to launch sidecar {self._command}: {exc}") from exc

    def request_line(self, payload: bytes, timeout: float) -> bytes:
        proc = self._proc
        if proc.poll() is not None:
            raise TransportError(f"sidecar exited with code {proc.returncode}")
        try:
            proc.stdin.write(payload)
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"sidecar pipe closed: {exc}") from exc
        # Child stdio has no portable per-read timeout; rely on process death
        # detection. A wedged-but-alive sidecar is out of scope for stdio runs.
        line = proc.stdout.readline()
        if not line:
            raise TransportError("sidecar closed its output stream")
        return line

    def close(self) -> None:
        proc = self._proc
        if proc.poll() is None:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()


class TcpTransport:
    def __init__(self, host: str, port: int, connect_timeout: float = 10.0):
        try:
            self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._file = self._sock.makefile("rb")

    def request_line(self, payload: bytes, timeout: float) -> bytes:
        self._sock.settimeout(timeout)
        try:
            self._sock.sendall(payload)
            line = self._file.readline()
        except socket.timeout as exc:
            raise TransportError(f"request timed out after {timeout}s") from exc
        except OSError as exc:
            raise TransportError(f"connection failed: {exc}") from exc
        if not line:
            raise TransportError("server closed the connection")
        return line

    def close(self) -> None:
        try:
            self._file.close()
            self._sock.close()
        except OSError:
            pass


def _parse_endpoint(endpoint: str):
    """``host:port`` opens TCP; anything else is a sidecar command line."""
    head, sep, tail = endpoint.rpartition(":")
    if sep and head and tail.isdigit() and "/" not in head and " " not in head:
        return TcpTransport(head, int(tail))
    return StdioTransport(endpoint)


class RemoteScorer:
    """ScorerContract backed by a protocol sidecar."""

    def __init__(self, endpoint, timeout: float = 60.0, retries: int = 1,
                 cache_capacity: int = DEFAULT_CACHE_CAPACITY):
        if isinstance(endpoint, str):
            self._transport = _parse_endpoint(endpoint)
        elif isinstance(endpoint, (list, tuple)):
            self._transport = StdioTransport(endpoint)
        else:
            self._transport = endpoint
        self.timeout = float(timeout)
        self.retries = int(retries)
        self._next_id = 0
        self._cache: OrderedDict[bytes, np.ndarray] = OrderedDict()
        self._cache_capacity = int(cache_capacity)
        self.cache_hits = 0
        self.cache_misses = 0
        meta = self._request({"op": "meta"})
        try:
            self._vocab_size = int(meta["vocab_size"])
            self.mask_id = int(meta["mask_id"])
            self.frozen_suggestion = [int(t) for t in meta.get("frozen_suggestion", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad meta reply {meta!r}") from exc
        if self._vocab_size < 2:
            raise ProtocolError(f"server reported vocab_size {self._vocab_size}")

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def _request(self, obj: dict) -> dict:
        self._next_id += 1
        obj = dict(obj, id=self._next_id)
        payload = encode_message(obj)
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                line = self._transport.request_line(payload, self.timeout)
            except TransportError as exc:
                last_error = exc
                continue
            reply = decode_message(line)
            if "error" in reply:
                raise ScoringError(str(reply["error"]))
            if reply.get("id") not in (None, obj["id"]):
                raise ProtocolError(
                    f"response id {reply.get('id')} does not match request id {obj['id']}")
            return reply
        raise TransportError(f"request failed after {self.retries + 1} attempts: {last_error}")

    def _masked_tokens(self, state: SeqState, i: int) -> list[int]:
        tokens = [int(t) for t in state.ids]
        tokens[i] = self.mask_id if self.mask_id >= 0 else 0
        return tokens

    def _cache_key(self, tokens: list[int], i: int) -> bytes:
        return json.dumps([i, tokens], separators=(",", ":")).encode()

    def _cache_put(self, key: bytes, scores: np.ndarray) -> None:
        cache = self._cache
        cache[key] = scores
        cache.move_to_end(key)
        while len(cache) > self._cache_capacity:
            cache.popitem(last=False)

    def _check_scores(self, raw) -> np.ndarray:
        scores = np.asarray(raw, dtype=np.float64)
        if scores.shape != (self._vocab_size,):
            raise ProtocolError(
                f"expected {self._vocab_size} scores, got shape {scores.shape}")
        if not np.isfinite(scores).all():
            raise ProtocolError("server returned non-finite scores")
        scores.setflags(write=False)
        return scores

    def local_scores(self, state: SeqState, i: int) -> np.ndarray:
        if i < 0 or i >= state.n:
            raise InputError(f"position {i} out of range for length {state.n}")
        if i in state.frozen:
            raise InputError(f"position {i} is frozen")
        tokens = self._masked_tokens(state, i)
        key = self._cache_key(tokens, i)
        cached = self._cache.get(key)
        if cached is not None:
            self._cache.move_to_end(key)
            self.cache_hits += 1
            return cached
        self.cache_misses += 1
        reply = self._request({"op": "scores", "tokens": tokens, "pos": i})
        scores = self._check_scores(reply.get("scores"))
        self._cache_put(key, scores)
        return scores

    def local_scores_batch(self, items: Sequence[tuple[SeqState, int]]) -> list[np.ndarray]:
        """Batched scoring; falls back to the cache per item first."""
        out: list[np.ndarray | None] = []
        missing: list[tuple[int, list[int], int]] = []
        for state, i in items:
            tokens = self._masked_tokens(state, i)
            key = self._cache_key(tokens, i)
            cached = self._cache.get(key)
            if cached is not None:
                self.cache_hits += 1
                out.append(cached)
            else:
                self.cache_misses += 1
                out.append(None)
                missing.append((len(out) - 1, tokens, i))
        if missing:
            reply = self._request({
                "op": "scores_batch",
                "items": [{"tokens": tokens, "pos": i} for _, tokens, i in missing],
            })
            results = reply.get("results")
            if not isinstance(results, list) or len(results) != len(missing):
                raise ProtocolError("scores_batch result count mismatch")
            for (slot, tokens, i), raw in zip(missing, results):
                scores = self._check_scores(raw)
                self._cache_put(self._cache_key(tokens, i), scores)
                out[slot] = scores
        return out  # type: ignore[return-value]

    def close(self) -> None:
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
