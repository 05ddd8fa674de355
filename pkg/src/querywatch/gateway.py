"""Account-oriented query service: the classifier behind the stateful monitor,
a newline-delimited JSON wire protocol, and TCP / in-process transports."""

from __future__ import annotations

import base64
import json
import logging
import os
import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .detector import AccountBanned, Monitor, UnknownAccount

log = logging.getLogger(__name__)

MODES = ("hard", "soft")
PORT_ENV = "QW_PORT"


class RequestError(ValueError):
    """Malformed request (bad payload, unknown mode, disabled soft labels)."""


@dataclass
class QueryRequest:
    account_id: int
    payload: np.ndarray
    mode: str = "hard"


@dataclass
class QueryResponse:
    status: str  # "ok" | "banned"
    label: int | None = None
    probs: np.ndarray | None = None


class Gateway:
    """Create accounts and answer queries through the monitor.

    A flagged query is still answered; refusal starts at the ban index the
    monitor scheduled.  Responses never reveal flags, distances, the
    threshold or the encoder.
    """

    def __init__(self, classifier: nx.NetModel, monitor: Monitor, soft_enabled: bool = False):
        self.classifier = classifier
        self.monitor = monitor
        self.soft_enabled = soft_enabled
        self.dim = classifier.in_dim

    @property
    def account_count(self) -> int:
        return len(self.monitor.accounts)

    def create_account(self) -> int:
        return self.monitor.create_account()

    def _validate(self, images, mode: str) -> np.ndarray:
        if mode not in MODES:
            raise RequestError(f"unknown mode {mode!r}")
        if mode == "soft" and not self.soft_enabled:
            raise RequestError("soft-label queries are not enabled")
        x = np.atleast_2d(np.asarray(images, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise RequestError(f"payload has {x.shape[1]} values, expected {self.dim}")
        if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
            raise RequestError("payload values must lie in [0, 1]")
        # everything is answered on the float32 grid, whatever the transport
        return x.astype(np.float32).astype(np.float64)

    def handle_query(self, request: QueryRequest) -> QueryResponse:
        return self.handle_batch(request.account_id, request.payload, request.mode)[0]

    def handle_batch(self, account_id: int, images, mode: str = "hard") -> list[QueryResponse]:
        """Answer queries in order for one account; once the ban fires every
        remaining query gets ``banned``."""
        self.monitor.account(account_id)
        x = self._validate(images, mode)
        vecs = np.asarray(self.monitor.embed(x))
        logits = nx.predict(self.classifier, x)
        out: list[QueryResponse] = []
        for i in range(len(x)):
            try:
                self.monitor.process_vector(account_id, vecs[i])
            except AccountBanned:
                out.extend(QueryResponse("banned") for _ in range(len(x) - i))
                break
            if mode == "hard":
                out.append(QueryResponse("ok", label=int(np.argmax(logits[i]))))
            else:
                p = nx.softmax(logits[i])
                out.append(QueryResponse("ok", label=int(np.argmax(p)), probs=p))
        return out

    # --- wire ---

    def handle_line(self, line: str) -> str:
        rec = None
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise RequestError("record is not an object")
            kind = rec.get("type")
            if kind == "create":
                return encode_response(self.create_account(), QueryResponse("ok"))
            if kind != "query":
                raise RequestError(f"unknown record type {kind!r}")
            aid = int(rec["account-id"])
            payload = decode_payload(rec["payload"])
            resp = self.handle_query(QueryRequest(aid, payload, rec.get("mode", "hard")))
            return encode_response(aid, resp)
        except UnknownAccount:
            return encode_response(rec["account-id"], QueryResponse("unknown-account"))
        except (RequestError, ValueError, KeyError, TypeError) as exc:
            log.debug("rejected request: %s", exc)
            aid = rec.get("account-id") if isinstance(rec, dict) else None
            return encode_response(aid, QueryResponse("error"))

    def snapshot(self, path) -> None:
        self.monitor.snapshot(path)

    @classmethod
    def restore(cls, path, classifier: nx.NetModel, embed: Callable, soft_enabled: bool = False,
                **kw) -> "Gateway":
        return cls(classifier, Monitor.restore(path, embed, **kw), soft_enabled)


# --- protocol ---------------------------------------------------------------------

def encode_payload(x) -> str:
    return base64.b64encode(np.asarray(x, dtype="<f4").tobytes()).decode("ascii")


def decode_payload(text: str) -> np.ndarray:
    raw = base64.b64decode(text, validate=True)
    if len(raw) % 4:
        raise RequestError("payload is not a whole number of float32 values")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def _dump(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


def create_line() -> str:
    return _dump({"type": "create"})


def query_line(account_id: int, image, mode: str = "hard") -> str:
    return _dump({"type": "query", "account-id": str(account_id), "mode": mode,
                  "payload": encode_payload(image)})


def encode_response(account_id, resp: QueryResponse) -> str:
    rec = {"type": "response", "account-id": None if account_id is None else str(account_id),
           "status": resp.status}
    if resp.label is not None:
        rec["label"] = str(resp.label)
    if resp.probs is not None:
        rec["probs"] = encode_payload(resp.probs)
    return _dump(rec)


def decode_response(line: str) -> tuple[int | None, QueryResponse]:
    rec = json.loads(line)
    aid = rec.get("account-id")
    label = rec.get("label")
    probs = rec.get("probs")
    return (None if aid is None else int(aid),
            QueryResponse(rec["status"], None if label is None else int(label),
                          None if probs is None else decode_payload(probs)))


# --- transports -------------------------------------------------------------------

class InProcessTransport:
    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def request(self, line: str) -> str:
        return self.gateway.handle_line(line)

    def close(self) -> None:
        pass


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8").rstrip("\n")
            if not line:
                continue
            reply = self.server.gateway.handle_line(line)
            self.wfile.write(reply.encode("utf-8") + b"\n")
            self.wfile.flush()


class GatewayServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, gateway: Gateway, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.gateway = gateway

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def default_port() -> int:
    return int(os.environ.get(PORT_ENV, "8707"))


class WireTransport:
    def __init__(self, host: str = "127.0.0.1", port: int | None = None, timeout: float = 30.0):
        self.sock = socket.create_connection((host, default_port() if port is None else port), timeout)
        self.reader = self.sock.makefile("rb")

    def request(self, line: str) -> str:
        self.sock.sendall(line.encode("utf-8") + b"\n")
        reply = self.reader.readline()
        if not reply:
            raise ConnectionError("gateway closed the connection")
        return reply.decode("utf-8").rstrip("\n")

    def close(self) -> None:
        self.reader.close()
        self.sock.close()


class GatewayClient:
    """Typed client over any transport."""

    def __init__(self, transport):
        self.transport = transport

    def create_account(self) -> int:
        aid, resp = decode_response(self.transport.request(create_line()))
        if resp.status != "ok" or aid is None:
            raise RuntimeError(f"account creation failed: {resp.status}")
        return aid

    def query(self, account_id: int, image, mode: str = "hard") -> QueryResponse:
        return decode_response(self.transport.request(query_line(account_id, image, mode)))[1]
