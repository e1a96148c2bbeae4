"""Network access to a state repository.

Agents talk to the repository over TCP with length-prefixed text frames. A
frame is a 4-byte big-endian body length followed by a UTF-8 body::

    stateadapt-rpc/1
    kind=request
    method=TransformState
    request_id=7
    agent_id=a1
    samples=<base64 of little-endian float64>
    samples_shape=377,5

Values are percent-encoded so that a body is always one ``key=value`` per
line; binary payloads (model blobs, transforms, arrays) travel as base64.
Keys a receiver does not know are ignored.

The server fits transforms next to the stored samples and returns only the
fitted transform, the matched model and the caller's own projected samples,
so projection of further inputs happens on the client.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import socket
import socketserver
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
from urllib.parse import quote, unquote

import numpy as np

from . import transformer
from .errors import BackPressureError, FitError, InputError, NotFoundError
from .state_math import StateSet, subsample
from .store import PUBLIC_TAG, StateEntry, StateStore

log = logging.getLogger(__name__)

PROTOCOL = "stateadapt-rpc/1"
MAX_FRAME = 64 << 20
METHODS = ("Health", "InitService", "CreateAgent", "TransformState", "LabelSelection",
           "Register")
_SAFE_CHARS = "/+=:,@._-"
_HEADER_KEYS = ("kind", "method", "request_id")


class ProtocolError(InputError):
    """A frame or body that does not follow the wire format."""


class RemoteError(RuntimeError):
    """Error reported by the server; ``code`` names the failure class."""

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


# -- messages -------------------------------------------------------------------

@dataclass
class RpcMessage:
    method: str
    request_id: int = 0
    kind: str = "request"
    fields: Dict[str, str] = field(default_factory=dict)

    def get(self, key, default=None):
        return self.fields.get(key, default)

    def require(self, key):
        if key not in self.fields:
            raise InputError(f"missing field {key!r}")
        return self.fields[key]


def encode_body(msg: RpcMessage) -> bytes:
    if msg.kind not in ("request", "response"):
        raise ProtocolError(f"bad message kind {msg.kind!r}")
    lines = [PROTOCOL, f"kind={msg.kind}", f"method={quote(msg.method, safe=_SAFE_CHARS)}",
             f"request_id={int(msg.request_id)}"]
    for key in sorted(msg.fields):
        if not key or key in _HEADER_KEYS or "=" in key or "\n" in key:
            raise ProtocolError(f"bad field name {key!r}")
        lines.append(f"{quote(key, safe=_SAFE_CHARS)}={quote(str(msg.fields[key]), safe=_SAFE_CHARS)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_body(body: bytes) -> RpcMessage:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError("body is not UTF-8") from exc
    lines = text.split("\n")
    if not lines or lines[0] != PROTOCOL:
        raise ProtocolError(f"expected {PROTOCOL!r} header")
    kv = {}
    for line in lines[1:]:
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ProtocolError(f"malformed line {line!r}")
        kv[unquote(key)] = unquote(value)
    try:
        rid = int(kv.pop("request_id", "0"))
    except ValueError as exc:
        raise ProtocolError("request_id must be an integer") from exc
    kind = kv.pop("kind", "request")
    method = kv.pop("method", "")
    return RpcMessage(method, rid, kind, kv)


def encode(msg: RpcMessage) -> bytes:
    body = encode_body(msg)
    if len(body) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return struct.pack(">I", len(body)) + body


def decode(frame: bytes) -> RpcMessage:
    if len(frame) < 4:
        raise ProtocolError("short frame")
    (n,) = struct.unpack(">I", frame[:4])
    if n != len(frame) - 4:
        raise ProtocolError(f"frame length {n} does not match body of {len(frame) - 4} bytes")
    return decode_body(frame[4:])


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock) -> Optional[RpcMessage]:
    """Next message from ``sock``; None on a clean end of stream."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = struct.unpack(">I", head)
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds {MAX_FRAME}")
    body = _recv_exact(sock, n)
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    return decode_body(body)


# -- field codecs ------------------------------------------------------------------

def b64(blob: bytes) -> str:
    return base64.b64encode(bytes(blob)).decode("ascii")


def unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise InputError("invalid base64 payload") from exc


def put_array(fields, name, a):
    a = np.asarray(a, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    fields[name] = b64(a.tobytes(order="C"))
    fields[name + "_shape"] = ",".join(str(s) for s in a.shape)


def get_array(msg: RpcMessage, name) -> np.ndarray:
    raw = unb64(msg.require(name))
    try:
        text = msg.require(name + "_shape")
        shape = tuple(int(s) for s in text.split(",")) if text else ()
    except ValueError as exc:
        raise InputError(f"bad shape for {name}") from exc
    if any(s < 0 for s in shape) or 8 * int(np.prod(shape)) != len(raw):
        raise InputError(f"shape of {name} does not match its payload")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)


def array_digest(X) -> str:
    return hashlib.sha256(np.ascontiguousarray(X, dtype="<f8").tobytes()).hexdigest()


# -- server -------------------------------------------------------------------------

@dataclass
class ServiceConfig:
    """Server settings.

    ``tokens`` maps bearer tokens to org tags; a token absent from the map is
    used as the org tag itself. ``max_inflight`` bounds concurrently handled
    requests; excess requests are refused with a back-pressure error.
    """

    host: str = "127.0.0.1"
    port: int = 0
    tokens: Dict[str, str] = field(default_factory=dict)
    max_inflight: int = 64
    regimes: int = 2
    neighbors: int = 5
    digest_cache: int = 128
    clock: Optional[object] = None  # callable returning days; defaults to wall time


class RepositoryService:
    """Endpoint logic, independent of the transport."""

    def __init__(self, store: StateStore, config: Optional[ServiceConfig] = None):
        self.store = store
        self.config = config or ServiceConfig()
        self._agents: Dict[str, str] = {}
        self._labels: Dict[Tuple[str, str, int], Tuple[int, float]] = {}
        self._digests: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(self.config.max_inflight)
        self.started = time.time()

    @property
    def sample_limit(self):
        return self.store.policy.sample_limit

    def now(self):
        clock = self.config.clock
        return float(clock()) if clock is not None else time.time() / 86400.0

    def handle(self, msg: RpcMessage) -> RpcMessage:
        """Dispatch one request and build its response (errors included)."""
        out = RpcMessage(msg.method, msg.request_id, "response")
        if not self._slots.acquire(blocking=False):
            out.fields.update(status="error", code="busy",
                              error=f"more than {self.config.max_inflight} requests in flight")
            return out
        try:
            if msg.kind != "request" or msg.method not in METHODS:
                raise InputError(f"unknown method {msg.method!r}")
            out.fields.update(getattr(self, "_" + msg.method)(msg))
            out.fields["status"] = "ok"
        except NotFoundError as exc:
            out.fields.update(status="error", code="not_found", error=str(exc))
        except BackPressureError as exc:
            out.fields.update(status="error", code="busy", error=str(exc))
        except PermissionError as exc:
            out.fields.update(status="error", code="forbidden", error=str(exc))
        except (InputError, FitError) as exc:
            out.fields.update(status="error", code="bad_request", error=str(exc))
        except Exception as exc:  # noqa: BLE001 - a handler bug must not kill the connection
            log.exception("request %s failed", msg.request_id)
            out.fields.update(status="error", code="internal", error=repr(exc))
        finally:
            self._slots.release()
        return out

    # -- endpoints ---------------------------------------------------------------

    def _Health(self, msg):
        return dict(entries=str(len(self.store)), store_bytes=str(self.store.store_bytes()))

    def _InitService(self, msg):
        pol = self.store.policy
        noise = pol.noise
        return dict(protocol=PROTOCOL, entries=str(len(self.store)),
                    store_bytes=str(self.store.store_bytes()), capacity=str(pol.capacity),
                    sample_limit=str(pol.sample_limit), decay_factor=repr(pol.decay_factor),
                    noise_sigma=repr(noise.sigma if noise else 0.0),
                    noise_clamp=repr(noise.clamp if noise else 0.0),
                    regimes=str(self.config.regimes))

    def _org_of(self, msg):
        agent = msg.require("agent_id")
        with self._lock:
            tag = self._agents.get(agent)
        if tag is None:
            raise PermissionError(f"unknown agent {agent!r}; call CreateAgent first")
        return agent, tag

    def _CreateAgent(self, msg):
        agent = msg.require("agent_id")
        token = msg.get("token", PUBLIC_TAG)
        tag = self.config.tokens.get(token, token)
        with self._lock:
            prev = self._agents.get(agent)
            if prev is not None and prev != tag:
                raise PermissionError(f"agent {agent!r} already bound to another tag")
            self._agents[agent] = tag
        return dict(agent_id=agent, org_tag=tag)

    def _target(self, msg):
        if "samples" in msg.fields:
            X = get_array(msg, "samples")
            if X.ndim != 2 or len(X) == 0:
                raise InputError("samples must be a nonempty (n, d) array")
            if len(X) > self.sample_limit:
                raise InputError(f"target of {len(X)} samples exceeds the limit of "
                                 f"{self.sample_limit}")
            key = array_digest(X)
            with self._lock:
                self._digests[key] = X
                self._digests.move_to_end(key)
                while len(self._digests) > self.config.digest_cache:
                    self._digests.popitem(last=False)
            return X
        digest = msg.require("target_digest")
        with self._lock:
            X = self._digests.get(digest)
        if X is None:
            raise NotFoundError(f"no samples cached under digest {digest}")
        return X

    def _TransformState(self, msg):
        _, tag = self._org_of(msg)
        X = self._target(msg)
        seed = int(msg.get("seed", "0"))
        regimes = int(msg.get("regimes", str(self.config.regimes)))
        target = StateSet(X)
        match = self.store.match(target, tag, seed=seed)
        entry = self.store.get(match.source_env_id)
        self.store.touch(entry.env_id, self.now())
        src = subsample(entry.samples, len(X), seed)
        model = transformer.fit_regime_aware(src, target, R=regimes, seed=seed)
        out = dict(env_id=entry.env_id, version=str(entry.version), mmd=repr(match.mmd_distance),
                   comparisons=str(match.comparisons), transform=b64(transformer.to_bytes(model)),
                   model=b64(entry.model_blob), target_digest=array_digest(X))
        put_array(out, "projected", transformer.apply_regime_aware(model, X))
        return out

    def _LabelSelection(self, msg):
        # selection runs in the agent; the server only keeps the tally
        agent, _ = self._org_of(msg)
        env = msg.require("env_id")
        rnd = int(msg.require("round"))
        n = int(msg.require("n_labeled"))
        cost = float(msg.require("cost"))
        if n < 0 or not cost >= 0:
            raise InputError("n_labeled and cost must be nonnegative")
        with self._lock:
            self._labels[(agent, env, rnd)] = (n, cost)
            rows = [v for k, v in self._labels.items() if k[0] == agent and k[1] == env]
        return dict(env_id=env, rounds=str(len(rows)), total_labeled=str(sum(r[0] for r in rows)),
                    total_cost=repr(float(sum(r[1] for r in rows))))

    def _Register(self, msg):
        _, tag = self._org_of(msg)
        env = msg.require("env_id")
        blob = unb64(msg.require("model"))
        if not blob:
            raise InputError("empty model blob")
        X = get_array(msg, "samples")
        if X.ndim != 2 or len(X) == 0:
            raise InputError("samples must be a nonempty (n, d) array")
        meta = {k[5:]: v for k, v in msg.fields.items() if k.startswith("meta.")}
        entry = StateEntry(env_id=env, model_blob=blob, samples=StateSet(X, env_id=env),
                           accuracy=float(msg.get("accuracy", "0")), org_tag=tag, meta=meta)
        self.store.register(entry, now=self.now())
        stored = self.store.get(env)
        return dict(env_id=env, version=str(stored.version),
                    medoid_cluster=str(stored.medoid_cluster))


class _Handler(socketserver.BaseRequestHandler):
    def setup(self):
        with self.server.conn_lock:
            self.server.conns.add(self.request)

    def finish(self):
        with self.server.conn_lock:
            self.server.conns.discard(self.request)

    def handle(self):
        service: RepositoryService = self.server.service
        sock = self.request
        while not self.server.closing.is_set():
            try:
                msg = read_frame(sock)
            except ProtocolError as exc:
                err = RpcMessage("", 0, "response",
                                 dict(status="error", code="bad_frame", error=str(exc)))
                sock.sendall(encode(err))
                return
            except OSError:
                return
            if msg is None:
                return
            sock.sendall(encode(service.handle(msg)))


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, address, service):
        super().__init__(address, _Handler)
        self.service = service
        self.closing = threading.Event()
        self.conns = set()
        self.conn_lock = threading.Lock()


class ServiceHandle:
    """A running server. ``close()`` stops accepting and waits for in-flight requests."""

    def __init__(self, server: _Server, thread: threading.Thread):
        self._server = server
        self._thread = thread

    @property
    def address(self):
        return self._server.server_address[:2]

    @property
    def service(self) -> RepositoryService:
        return self._server.service

    def close(self):
        srv = self._server
        srv.closing.set()
        srv.shutdown()
        # idle connections wake up with end-of-stream; a request being handled
        # still gets its response written before the handler exits
        with srv.conn_lock:
            conns = list(srv.conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RD)
            except OSError:
                pass
        srv.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(store: StateStore, config: Optional[ServiceConfig] = None) -> ServiceHandle:
    """Start serving ``store`` in a background thread.

    Raises ``OSError`` when the address cannot be bound.
    """
    config = config or ServiceConfig()
    server = _Server((config.host, config.port), RepositoryService(store, config))
    thread = threading.Thread(target=server.serve_forever, kwargs=dict(poll_interval=0.05),
                              name="stateadapt-service", daemon=True)
    thread.start()
    return ServiceHandle(server, thread)


# -- client -------------------------------------------------------------------------

class ServiceClient:
    """Blocking client; one connection, safe to share between threads."""

    def __init__(self, host, port, agent_id=None, token=PUBLIC_TAG, timeout=60.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.agent_id = agent_id
        self.token = token
        self._lock = threading.Lock()
        self._next = 0

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def call(self, method, **fields) -> RpcMessage:
        """Send one request and return the response; raises RemoteError on failure."""
        with self._lock:
            self._next += 1
            req = RpcMessage(method, self._next, "request",
                             {k: str(v) for k, v in fields.items() if v is not None})
            self.sock.sendall(encode(req))
            resp = read_frame(self.sock)
        if resp is None:
            raise ConnectionError("server closed the connection")
        if resp.request_id != req.request_id:
            raise ProtocolError(f"response {resp.request_id} for request {req.request_id}")
        if resp.get("status") != "ok":
            raise RemoteError(resp.get("code", "unknown"), resp.get("error", ""))
        return resp

    def health(self):
        r = self.call("Health")
        return int(r.get("entries")), int(r.get("store_bytes"))

    def init_service(self) -> Dict[str, str]:
        return dict(self.call("InitService").fields)

    def create_agent(self, agent_id=None, token=None):
        self.agent_id = agent_id or self.agent_id
        if self.agent_id is None:
            raise InputError("an agent_id is required")
        r = self.call("CreateAgent", agent_id=self.agent_id, token=token or self.token)
        return r.get("org_tag")

    def transform_state(self, samples=None, digest=None, seed=0, regimes=None):
        """Match ``samples`` (or a digest of samples sent before) on the server.

        Returns a dict with ``env_id``, ``mmd``, ``transform`` (a fitted
        regime model), ``model_blob`` and ``projected`` (the server-side
        projection of the submitted samples).
        """
        fields = dict(agent_id=self.agent_id, seed=seed, regimes=regimes)
        if samples is not None:
            put_array(fields, "samples", np.asarray(samples, dtype=float))
        elif digest is not None:
            fields["target_digest"] = digest
        else:
            raise InputError("pass samples or a digest")
        r = self.call("TransformState", **fields)
        return dict(env_id=r.get("env_id"), version=int(r.get("version")),
                    mmd=float(r.get("mmd")), comparisons=int(r.get("comparisons")),
                    transform=transformer.from_bytes(unb64(r.get("transform"))),
                    transform_blob=unb64(r.get("transform")), model_blob=unb64(r.get("model")),
                    projected=get_array(r, "projected"), target_digest=r.get("target_digest"))

    def label_selection(self, env_id, round_index, n_labeled, cost):
        r = self.call("LabelSelection", agent_id=self.agent_id, env_id=env_id,
                      round=int(round_index), n_labeled=int(n_labeled), cost=repr(float(cost)))
        return int(r.get("total_labeled")), float(r.get("total_cost"))

    def register(self, env_id, model_blob, samples, accuracy=0.0, meta=None):
        fields = dict(agent_id=self.agent_id, env_id=env_id, model=b64(model_blob),
                      accuracy=repr(float(accuracy)))
        put_array(fields, "samples", np.asarray(samples, dtype=float))
        for k, v in (meta or {}).items():
            fields["meta." + k] = v
        r = self.call("Register", **fields)
        return r.get("env_id"), int(r.get("version"))
