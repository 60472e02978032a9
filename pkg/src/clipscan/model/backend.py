"""Backend clients (child process or TCP socket) and a server loop for the wire protocol."""

from __future__ import annotations

import logging
import os
import select
import shlex
import socket
import socketserver
import subprocess
import time
from typing import BinaryIO, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .._validation import clip_array
from .functional import softmax
from .protocol import (
    MSG_ERROR,
    MSG_HANDSHAKE,
    MSG_INFER,
    MSG_SCORES,
    PREFIX_SIZE,
    BackendError,
    BackendTimeout,
    DimensionMismatch,
    ProtocolError,
    TransportError,
    decode_clip,
    encode_clip,
    encode_frame,
    parse_header,
    parse_prefix,
    payload_nbytes,
    read_frame,
)

log = logging.getLogger(__name__)


class _Channel:
    """Blocking byte channel with a per-read deadline."""

    def __init__(self, read_fd: int, write):
        self._fd = read_fd
        self._write = write

    def send(self, data: bytes) -> None:
        try:
            self._write(data)
        except (BrokenPipeError, ConnectionError, OSError) as exc:
            raise TransportError(f"write failed: {exc}") from None

    def _recv_some(self, n: int) -> bytes:
        return os.read(self._fd, n)

    def recv_exact(self, n: int, deadline: float) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BackendTimeout(f"timed out waiting for {n - len(buf)} more bytes")
            ready, _, _ = select.select([self._fd], [], [], remaining)
            if not ready:
                raise BackendTimeout(f"timed out waiting for {n - len(buf)} more bytes")
            try:
                chunk = self._recv_some(n - len(buf))
            except OSError as exc:
                raise TransportError(f"read failed: {exc}") from None
            if not chunk:
                raise TransportError("backend closed the stream")
            buf += chunk
        return bytes(buf)

    def close(self) -> None:
        pass


class SubprocessChannel(_Channel):
    def __init__(self, command):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

        def write(data):
            self.proc.stdin.write(data)
            self.proc.stdin.flush()

        super().__init__(self.proc.stdout.fileno(), write)

    def close(self):
        for f in (self.proc.stdin, self.proc.stdout):
            try:
                f.close()
            except OSError:
                pass
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()


class SocketChannel(_Channel):
    def __init__(self, host: str, port: int, timeout: float):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(None)
        super().__init__(self.sock.fileno(), self.sock.sendall)

    def _recv_some(self, n):
        return self.sock.recv(n)

    def close(self):
        self.sock.close()


class BackendHandle:
    """One connection to a classifier backend; one in-flight request at a time.

    Pass either ``command`` (spawned, spoken to over stdio) or ``host``/``port``.
    Transport failures during inference reconnect and retry once.
    """

    def __init__(self, command=None, host: Optional[str] = None, port: Optional[int] = None, timeout: float = 30.0):
        if (command is None) == (host is None):
            raise ValueError("give exactly one of command or host/port")
        self.command = command
        self.host = host
        self.port = port
        self.timeout = timeout
        self._channel: Optional[_Channel] = None
        self._next_id = 0
        self.classes: Optional[int] = None
        self.name: Optional[str] = None

    def _open(self) -> _Channel:
        if self.command is not None:
            return SubprocessChannel(self.command)
        try:
            return SocketChannel(self.host, int(self.port), self.timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {self.host}:{self.port}: {exc}") from None

    def _read_reply(self, deadline):
        ch = self._channel
        msg_type, n = parse_prefix(ch.recv_exact(PREFIX_SIZE, deadline))
        header = parse_header(ch.recv_exact(n, deadline))
        nbytes = payload_nbytes(msg_type, header)
        if nbytes:
            ch.recv_exact(nbytes, deadline)
        return msg_type, header

    def connect(self) -> "BackendHandle":
        self.close()
        self._channel = self._open()
        try:
            self._channel.send(encode_frame(MSG_HANDSHAKE, {}))
            msg_type, header = self._read_reply(time.monotonic() + self.timeout)
        except BackendError:
            self.close()
            raise
        if msg_type != MSG_HANDSHAKE or not isinstance(header.get("classes"), int):
            self.close()
            raise ProtocolError(f"bad handshake reply {header!r}")
        self.classes = header["classes"]
        self.name = str(header.get("name", ""))
        return self

    handshake = connect

    def close(self) -> None:
        if self._channel is not None:
            self._channel.close()
            self._channel = None

    def __enter__(self):
        return self if self._channel is not None else self.connect()

    def __exit__(self, *exc):
        self.close()

    def _infer_once(self, data: np.ndarray) -> np.ndarray:
        if self._channel is None:
            self.connect()
        rid = self._next_id
        self._next_id += 1
        self._channel.send(encode_clip(data, rid))
        msg_type, header = self._read_reply(time.monotonic() + self.timeout)
        if msg_type == MSG_ERROR:
            if header.get("kind") == DimensionMismatch.kind:
                raise DimensionMismatch(header.get("error", "dimension mismatch"))
            raise ProtocolError(f"backend error: {header.get('error')}")
        if msg_type != MSG_SCORES or header.get("id") != rid or not isinstance(header.get("scores"), list):
            raise ProtocolError(f"unexpected reply {msg_type} {header!r} to request {rid}")
        scores = np.asarray(header["scores"], dtype=np.float64)
        if scores.shape != (self.classes,):
            raise DimensionMismatch(f"backend returned {scores.shape[0]} scores, handshake said {self.classes}")
        return scores

    def infer(self, clip) -> np.ndarray:
        """Raw class scores for one clip."""
        data = clip_array(clip)
        try:
            return self._infer_once(data)
        except TransportError as exc:
            log.warning("backend transport failed (%s); reconnecting once", exc)
            self.close()
            return self._infer_once(data)
        except BackendTimeout:
            self.close()
            raise


def backend_infer(endpoint: BackendHandle, clip) -> np.ndarray:
    return endpoint.infer(clip)


class BackendClassifier(ClassifierMixin, BaseEstimator):
    """Estimator facade over a :class:`BackendHandle`."""

    def __init__(self, command=None, host=None, port=None, timeout=30.0):
        self.command = command
        self.host = host
        self.port = port
        self.timeout = timeout

    def fit(self, X=None, y=None):
        self.handle_ = BackendHandle(self.command, self.host, self.port, self.timeout).connect()
        self.classes_ = np.arange(self.handle_.classes)
        return self

    def _handle(self):
        if not hasattr(self, "handle_"):
            self.fit()
        return self.handle_

    def decision_function(self, X) -> np.ndarray:
        h = self._handle()
        return np.stack([h.infer(x) for x in np.asarray(X)])

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def close(self):
        if hasattr(self, "handle_"):
            self.handle_.close()


# -- server side ---------------------------------------------------------------


class ConstantScorer:
    """Returns the same raw scores for every clip; a mock constant-time backend."""

    def __init__(self, scores: Sequence[float], name: str = "constant"):
        self.scores = np.asarray(scores, dtype=np.float64)
        self.classes = len(self.scores)
        self.name = name
        self.input_shape = None

    def score(self, clip: np.ndarray) -> np.ndarray:
        return self.scores.copy()

    def predict_proba(self, X):
        return np.tile(softmax(self.scores), (len(X), 1))


class ToyScorer:
    """Adapts a toy classifier to the server interface."""

    def __init__(self, model, name: str = "toy"):
        self.model = model
        self.classes = model.n_classes
        self.name = name
        self.input_shape = model.input_shape

    def score(self, clip: np.ndarray) -> np.ndarray:
        from .toy import forward

        return forward(self.model, clip)


def serve(scorer, rfile: BinaryIO, wfile: BinaryIO) -> int:
    """Answer frames until EOF; returns the number of inference requests served."""
    served = 0
    while True:
        try:
            msg_type, header, payload = read_frame(rfile)
        except TransportError:
            return served
        except ProtocolError as exc:
            wfile.write(encode_frame(MSG_ERROR, {"id": None, "kind": ProtocolError.kind, "error": str(exc)}))
            wfile.flush()
            return served
        if msg_type == MSG_HANDSHAKE:
            reply = encode_frame(MSG_HANDSHAKE, {"classes": scorer.classes, "name": scorer.name})
        elif msg_type == MSG_INFER:
            rid = header.get("id")
            clip = decode_clip(header, payload)
            shape = getattr(scorer, "input_shape", None)
            if shape is not None and tuple(clip.shape) != tuple(shape):
                reply = encode_frame(
                    MSG_ERROR,
                    {"id": rid, "kind": DimensionMismatch.kind, "error": f"dims {list(clip.shape)} != {list(shape)}"},
                )
            else:
                scores = [float(s) for s in scorer.score(clip)]
                reply = encode_frame(MSG_SCORES, {"id": rid, "scores": scores})
                served += 1
        else:
            reply = encode_frame(MSG_ERROR, {"id": header.get("id"), "kind": "malformed", "error": "unexpected type"})
        wfile.write(reply)
        wfile.flush()


def serve_tcp(scorer, host: str = "127.0.0.1", port: int = 0):
    """Build a threaded TCP server; call ``serve_forever`` on the result."""

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            serve(scorer, self.rfile, self.wfile)

    socketserver.ThreadingTCPServer.allow_reuse_address = True
    server = socketserver.ThreadingTCPServer((host, port), Handler)
    server.daemon_threads = True
    return server
