"""Crop-embedding transport: wire protocol v1 client plus a persistent cache.

Protocol v1 is UTF-8 JSON, one object per line, over the provider's stdio
streams or a TCP connection. The provider's first line is the handshake

    {"protocol": "ccd-view", "version": 1, "embedding_dim": D}

then each request {"id": int, "image": str, "box": [x0, y0, x1, y1],
"resize_long": int} is answered by {"id": int, "embedding": [...]} or
{"id": int, "error": {"code": str, "message": str}}. Responses may arrive in
any order; the client matches them by id and keeps a bounded number of
requests in flight.

The cache is an append-only file of (key JSON line, CCDT-encoded vector)
pairs; hits return the bit-identical float32 vector that was stored.
"""

from __future__ import annotations

import json
import queue
import socket
import subprocess
import threading
from pathlib import Path

import numpy as np

from .errors import (
    EmbeddingValidationError,
    ProtocolError,
    ProviderError,
    ProviderResponseError,
    ProviderTimeoutError,
)
from .tensor_store import tensor_from_bytes, tensor_to_bytes

PROTOCOL_NAME = "ccd-view"
PROTOCOL_VERSION = 1

_EOF = object()

ViewKey = tuple[str, tuple[int, int, int, int], int]


def make_key(image_id: str, box, resize_long: int) -> ViewKey:
    coords = tuple(int(v) for v in (box.coords if hasattr(box, "coords") else box))
    return (str(image_id), coords, int(resize_long))


def check_handshake(doc: dict, expected_dim: int | None = None) -> int:
    """Validate a handshake object; returns the advertised embedding dim."""
    if not isinstance(doc, dict) or doc.get("protocol") != PROTOCOL_NAME:
        raise ProtocolError(f"bad handshake: {doc!r}")
    if doc.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {doc.get('version')!r}")
    dim = doc.get("embedding_dim")
    if not isinstance(dim, int) or dim <= 0:
        raise ProtocolError(f"handshake missing a positive embedding_dim: {doc!r}")
    if expected_dim is not None and dim != expected_dim:
        raise ProtocolError(
            f"provider embedding_dim {dim} does not match manifest {expected_dim}"
        )
    return dim


class EmbeddingCache:
    """(image, box, resize_long) -> float32 vector, persisted append-only.

    Safe for concurrent readers; writes hold an exclusive lock and append a
    single record at a time.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._entries: dict[ViewKey, np.ndarray] = {}
        if self.path is not None and self.path.exists():
            self._load()

    @staticmethod
    def _key_line(key: ViewKey) -> str:
        image, coords, resize_long = key
        return json.dumps({"image": image, "box": list(coords),
                           "resize_long": resize_long}, sort_keys=True)

    def _load(self) -> None:
        data = self.path.read_bytes()
        pos = 0
        while pos < len(data):
            newline = data.find(b"\n", pos)
            if newline < 0:
                raise ProtocolError(f"cache file {self.path}: truncated key line")
            doc = json.loads(data[pos:newline].decode("utf-8"))
            key = make_key(doc["image"], doc["box"], doc["resize_long"])
            arr, pos = tensor_from_bytes(data, newline + 1, source=str(self.path))
            self._entries[key] = arr

    def get(self, key: ViewKey) -> np.ndarray | None:
        with self._lock:
            arr = self._entries.get(key)
        return None if arr is None else arr.copy()

    def put(self, key: ViewKey, vector: np.ndarray) -> None:
        arr = np.ascontiguousarray(vector, dtype=np.float32)
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = arr.copy()
            if self.path is not None:
                record = self._key_line(key).encode("utf-8") + b"\n" + tensor_to_bytes(arr)
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "ab") as fh:
                    fh.write(record)

    def __len__(self) -> int:
        return len(self._entries)


class _LineReaderChannel:
    """Shared reader-thread machinery for stream-backed channels."""

    def __init__(self):
        self._queue: queue.Queue = queue.Queue()
        self._next_id = 0
        self.sent = 0  # requests written, for traffic assertions in tests

    def next_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def _start_reader(self, stream) -> None:
        def pump():
            try:
                for line in stream:
                    self._queue.put(line)
            except (ValueError, OSError):
                pass
            finally:
                self._queue.put(_EOF)

        thread = threading.Thread(target=pump, daemon=True)
        thread.start()

    def recv(self, timeout: float) -> str | None:
        """Next raw line, None on timeout; raises on provider EOF."""
        try:
            item = self._queue.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is _EOF:
            raise ProviderError("provider closed its output stream")
        return item

    def handshake(self, timeout: float = 10.0) -> dict:
        line = self.recv(timeout)
        if line is None:
            raise ProviderTimeoutError("no handshake line from provider")
        try:
            return json.loads(line)
        except json.JSONDecodeError:
            raise ProtocolError(f"handshake line is not JSON: {line!r}")


class SubprocessChannel(_LineReaderChannel):
    """Launches the provider as a subprocess and speaks v1 over its stdio."""

    def __init__(self, command: list[str], cwd: str | None = None):
        super().__init__()
        try:
            self._proc = subprocess.Popen(
                command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                cwd=cwd, text=True, bufsize=1,
            )
        except OSError as exc:
            raise ProviderError(f"cannot launch provider {command!r}: {exc}")
        self._start_reader(self._proc.stdout)

    def send(self, obj: dict) -> None:
        try:
            self._proc.stdin.write(json.dumps(obj) + "\n")
            self._proc.stdin.flush()
            self.sent += 1
        except (BrokenPipeError, ValueError) as exc:
            raise ProviderError(f"provider pipe closed: {exc}")

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            self._proc.terminate()
            try:
                self._proc.wait(timeout=3)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TcpChannel(_LineReaderChannel):
    """Connects to a provider listening on host:port."""

    def __init__(self, address: str, connect_timeout: float = 10.0):
        super().__init__()
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise ProviderError(f"bad provider address {address!r}, expected host:port")
        try:
            self._sock = socket.create_connection((host, int(port)), timeout=connect_timeout)
        except OSError as exc:
            raise ProviderError(f"cannot connect to provider at {address}: {exc}")
        self._sock.settimeout(None)
        self._reader_file = self._sock.makefile("r", encoding="utf-8", newline="\n")
        self._start_reader(self._reader_file)

    def send(self, obj: dict) -> None:
        try:
            self._sock.sendall((json.dumps(obj) + "\n").encode("utf-8"))
            self.sent += 1
        except OSError as exc:
            raise ProviderError(f"provider connection lost: {exc}")

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackChannel(_LineReaderChannel):
    """In-process channel around any object with handshake()/respond() methods.

    Used for the synthetic oracle in tests and studies; requests are answered
    synchronously on send, so recv never blocks.
    """

    def __init__(self, oracle):
        super().__init__()
        self._oracle = oracle

    def handshake(self, timeout: float = 10.0) -> dict:
        return self._oracle.handshake()

    def send(self, obj: dict) -> None:
        self.sent += 1
        self._queue.put(json.dumps(self._oracle.respond(obj)))

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        pass


def request_embeddings(views: list[tuple[str, object]], channel, cache: EmbeddingCache,
                       embedding_dim: int, resize_long: int = 640,
                       window: int = 16, timeout: float = 60.0) -> np.ndarray:
    """Embeddings for (image_id, box) views, in request order.

    The cache is consulted first; duplicate views collapse to one request;
    misses go to the provider with at most ``window`` requests outstanding.
    The timeout is idle time: it resets whenever any response arrives.
    """
    keys = [make_key(image_id, box, resize_long) for image_id, box in views]
    unique: dict[ViewKey, np.ndarray | None] = {}
    for key in keys:
        if key not in unique:
            unique[key] = cache.get(key)

    missing = [key for key, value in unique.items() if value is None]
    if missing:
        pending: dict[int, ViewKey] = {}
        cursor = 0

        def fill():
            nonlocal cursor
            while len(pending) < window and cursor < len(missing):
                key = missing[cursor]
                cursor += 1
                rid = channel.next_id()
                pending[rid] = key
                image, coords, rl = key
                channel.send({"id": rid, "image": image, "box": list(coords),
                              "resize_long": rl})

        fill()
        while pending:
            line = channel.recv(timeout)
            if line is None:
                ids = sorted(pending)
                raise ProviderTimeoutError(
                    f"provider did not answer within {timeout}s; pending request ids {ids}"
                )
            stripped = line.strip()
            if not stripped:
                continue
            try:
                doc = json.loads(stripped)
            except json.JSONDecodeError:
                raise ProtocolError(f"malformed response line: {stripped[:120]!r}")
            if not isinstance(doc, dict) or not isinstance(doc.get("id"), int):
                raise ProtocolError(f"response without an integer id: {stripped[:120]!r}")
            rid = doc["id"]
            if rid not in pending:
                raise ProtocolError(f"response for unknown request id {rid}")
            key = pending.pop(rid)
            if "error" in doc:
                err = doc["error"] if isinstance(doc["error"], dict) else {}
                raise ProviderResponseError(
                    code=str(err.get("code", "unknown")),
                    message=str(err.get("message", doc["error"])),
                    image_id=key[0],
                )
            emb = doc.get("embedding")
            if not isinstance(emb, list):
                raise ProtocolError(f"response {rid} carries neither embedding nor error")
            if len(emb) != embedding_dim:
                raise EmbeddingValidationError(
                    f"embedding for image {key[0]!r} has dim {len(emb)}, expected {embedding_dim}"
                )
            arr = np.asarray(emb, dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise EmbeddingValidationError(f"non-finite embedding for image {key[0]!r}")
            unique[key] = arr
            cache.put(key, arr)
            fill()

    return np.stack([unique[key] for key in keys]) if keys else np.zeros((0, embedding_dim), np.float32)
