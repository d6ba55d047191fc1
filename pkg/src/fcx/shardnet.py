"""Networked data workers and the client pool that assembles training batches.

Wire format: every frame is a 4-byte big-endian payload length, a 1-byte
message type and the payload. SAMPLE payloads carry a 4-byte big-endian
header length, a UTF-8 JSON header and the little-endian float32 body
(input state first, then the K targets in time order).

Samples are identified by their RNG counter, never by the worker that made
them, so the batch stream is independent of worker count and failures.
"""

from __future__ import annotations

import io
import json
import logging
import socket
import socketserver
import struct
import threading
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import NormStats, RngStream
from .sampler import CropSpec, TrainExample, sample_example
from .synthdata import Dataset

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024

HELLO = 0x01
HELLO_ACK = 0x02
SAMPLE_REQ = 0x03
SAMPLE = 0x04
ERR = 0x05
PING = 0x06
DONE = 0x07
MSG_TYPES = {HELLO, HELLO_ACK, SAMPLE_REQ, SAMPLE, ERR, PING, DONE}

_HEADER = struct.Struct(">IB")


class ProtocolError(ValueError):
    pass


class PoolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes

    @property
    def length(self) -> int:
        return len(self.payload)


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    if msg_type not in MSG_TYPES:
        raise ProtocolError(f"unknown msg_type 0x{msg_type:02x}")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return _HEADER.pack(len(payload), msg_type) + bytes(payload)


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def decode_frame(stream) -> Frame:
    """Read exactly one frame from a bytes object or binary stream.

    Raises ProtocolError on truncation, oversize length or unknown type;
    EOFError if the stream ends cleanly before a frame starts.
    """
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = io.BytesIO(bytes(stream))
    head = _read_exact(stream, _HEADER.size)
    if not head:
        raise EOFError("stream closed")
    if len(head) < _HEADER.size:
        raise ProtocolError("truncated frame header")
    length, msg_type = _HEADER.unpack(head)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds {MAX_PAYLOAD}")
    if msg_type not in MSG_TYPES:
        raise ProtocolError(f"unknown msg_type 0x{msg_type:02x}")
    payload = _read_exact(stream, length)
    if len(payload) < length:
        raise ProtocolError(f"truncated payload: got {len(payload)} of {length} bytes")
    return Frame(msg_type, payload)


def encode_json(msg_type: int, obj) -> bytes:
    return encode_frame(msg_type, json.dumps(obj, sort_keys=True).encode("utf-8"))


def decode_json(frame: Frame) -> dict:
    try:
        obj = json.loads(frame.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed JSON payload: {e}") from e
    if not isinstance(obj, dict):
        raise ProtocolError("JSON payload must be an object")
    return obj


# -- SAMPLE messages -----------------------------------------------------------

def encode_sample(ex: TrainExample, dataset_digest: str, crop: tuple[int, int]) -> bytes:
    states = ex.states().astype("<f4", copy=False)
    header = {
        "dataset_digest": dataset_digest, "t0": ex.t0, "origin": list(ex.origin),
        "crop": list(crop), "horizon": ex.horizon, "channels": int(states.shape[1]),
        "dtype": "f32", "seed": ex.rng["seed"], "stream_id": ex.rng["stream_id"],
        "counter": ex.rng["counter"],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return encode_frame(SAMPLE, struct.pack(">I", len(hb)) + hb + states.tobytes())


def decode_sample(frame: Frame) -> tuple[dict, np.ndarray]:
    """Header dict and states array (1 + K, C, h, w)."""
    if frame.msg_type != SAMPLE:
        raise ProtocolError(f"expected SAMPLE, got 0x{frame.msg_type:02x}")
    p = frame.payload
    if len(p) < 4:
        raise ProtocolError("SAMPLE payload too short")
    (hlen,) = struct.unpack(">I", p[:4])
    if 4 + hlen > len(p):
        raise ProtocolError("SAMPLE header overruns payload")
    try:
        header = json.loads(p[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed SAMPLE header: {e}") from e
    body = p[4 + hlen:]
    try:
        K, C = int(header["horizon"]), int(header["channels"])
        h, w = (int(v) for v in header["crop"])
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolError(f"incomplete SAMPLE header: {e}") from e
    expected = (1 + K) * C * h * w * 4
    if len(body) != expected:
        raise ProtocolError(f"SAMPLE body has {len(body)} bytes, header implies {expected}")
    return header, np.frombuffer(body, dtype="<f4").reshape(1 + K, C, h, w)


# -- worker ----------------------------------------------------------------------

class _WorkerHandler(socketserver.StreamRequestHandler):
    def handle(self):
        srv: WorkerServer = self.server  # type: ignore[assignment]
        srv.track(self.connection)
        try:
            self._session(srv)
        except (ConnectionError, OSError):
            pass
        finally:
            srv.untrack(self.connection)

    def _error(self, msg: str):
        try:
            self.wfile.write(encode_frame(ERR, msg.encode("utf-8")))
            self.wfile.flush()
        except OSError:
            pass

    def _session(self, srv: "WorkerServer"):
        try:
            hello = decode_frame(self.rfile)
            if hello.msg_type != HELLO:
                return self._error("expected HELLO")
            req = decode_json(hello)
        except EOFError:
            return
        except ProtocolError as e:
            return self._error(str(e))
        if req.get("protocol_version") != PROTOCOL_VERSION:
            return self._error(f"protocol version {req.get('protocol_version')} unsupported")
        if req.get("dataset_digest") != srv.dataset.digest:
            return self._error("dataset digest mismatch")
        self.wfile.write(encode_json(HELLO_ACK, {"protocol_version": PROTOCOL_VERSION,
                                                 "crop": list(srv.crop.crop)}))
        self.wfile.flush()
        while True:
            try:
                frame = decode_frame(self.rfile)
            except EOFError:
                return
            except ProtocolError as e:
                return self._error(str(e))
            if frame.msg_type == PING:
                self.wfile.write(encode_frame(PING))
                self.wfile.flush()
                continue
            if frame.msg_type != SAMPLE_REQ:
                return self._error(f"unexpected msg_type 0x{frame.msg_type:02x}")
            try:
                req = decode_json(frame)
                count, horizon = int(req["count"]), int(req["horizon"])
                seed, stream_id, base = int(req["seed"]), int(req["stream_id"]), int(req["counter_base"])
                if count < 0:
                    raise ValueError("negative count")
            except (ProtocolError, KeyError, TypeError, ValueError) as e:
                return self._error(f"malformed SAMPLE_REQ: {e}")
            for k in range(count):
                try:
                    ex = sample_example(RngStream(seed, stream_id, base + k), srv.dataset, srv.stats,
                                        srv.crop, horizon)
                except ValueError as e:
                    return self._error(str(e))
                self.wfile.write(encode_sample(ex, srv.dataset.digest, srv.crop.crop))
            self.wfile.write(encode_frame(DONE))
            self.wfile.flush()


class WorkerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, dataset_dir, listen_addr: tuple[str, int], crop: CropSpec | tuple[int, int] | None = None,
                 stats: NormStats | None = None):
        self.dataset = Dataset(dataset_dir)
        grid = tuple(self.dataset.meta.grid)
        if crop is None:
            crop = grid
        self.crop = crop if isinstance(crop, CropSpec) else CropSpec(grid, tuple(crop))
        self.stats = stats or self.dataset.stats()
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        super().__init__(listen_addr, _WorkerHandler)

    def track(self, conn):
        with self._lock:
            self._conns.add(conn)

    def untrack(self, conn):
        with self._lock:
            self._conns.discard(conn)

    def kill(self):
        """Stop serving and drop every open session abruptly."""
        self.shutdown()
        self.server_close()
        with self._lock:
            for c in list(self._conns):
                try:
                    c.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                c.close()
            self._conns.clear()

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {addr!r}")
    return host, int(port)


def worker_serve(dataset_dir, listen_addr: str, crop=None, stats: NormStats | None = None,
                 ready=None) -> None:
    """Serve samples until interrupted."""
    with WorkerServer(dataset_dir, parse_addr(listen_addr), crop, stats) as srv:
        log.info("worker listening on %s", srv.address)
        if ready is not None:
            ready(srv.address)
        srv.serve_forever()


def serve_in_thread(dataset_dir, crop=None, host: str = "127.0.0.1", port: int = 0,
                    stats: NormStats | None = None) -> WorkerServer:
    srv = WorkerServer(dataset_dir, (host, port), crop, stats)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv


# -- client pool ----------------------------------------------------------------------

class _Conn:
    def __init__(self, addr: str, digest: str, timeout: float, crop=None):
        self.addr = addr
        self.digest = digest
        self.crop = list(crop) if crop is not None else None
        self.timeout = timeout
        self.sock = None
        self.rfile = None
        self.alive = False

    def connect(self) -> bool:
        try:
            sock = socket.create_connection(parse_addr(self.addr), timeout=self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            rfile = sock.makefile("rb")
            sock.sendall(encode_json(HELLO, {"dataset_digest": self.digest,
                                             "protocol_version": PROTOCOL_VERSION}))
            reply = decode_frame(rfile)
        except (OSError, EOFError, ProtocolError):
            return False
        if reply.msg_type != HELLO_ACK:
            sock.close()
            msg = reply.payload.decode("utf-8", "replace") if reply.msg_type == ERR else "bad reply"
            raise PoolError(f"worker {self.addr} refused handshake: {msg}")
        served = decode_json(reply).get("crop")
        if self.crop is not None and served != self.crop:
            sock.close()
            raise PoolError(f"worker {self.addr} serves crop {served}, expected {self.crop}")
        self.sock, self.rfile, self.alive = sock, rfile, True
        return True

    def close(self):
        self.alive = False
        for f in (self.rfile, self.sock):
            try:
                if f is not None:
                    f.close()
            except OSError:
                pass

    def request(self, base: int, count: int, horizon: int, seed: int, stream_id: int, out: dict) -> None:
        """Fetch counters [base, base+count) into ``out``; partial results stay on failure."""
        self.sock.sendall(encode_json(SAMPLE_REQ, {"count": count, "horizon": horizon, "seed": seed,
                                                   "stream_id": stream_id, "counter_base": base}))
        for k in range(count):
            frame = decode_frame(self.rfile)
            if frame.msg_type == ERR:
                raise PoolError(f"worker {self.addr}: {frame.payload.decode('utf-8', 'replace')}")
            header, states = decode_sample(frame)
            if header["counter"] != base + k or header["dataset_digest"] != self.digest:
                raise ProtocolError(f"worker {self.addr} sent unexpected sample {header}")
            out[base + k] = states
        done = decode_frame(self.rfile)
        if done.msg_type != DONE:
            raise ProtocolError(f"expected DONE from {self.addr}")


def _runs(counters: list[int]) -> list[tuple[int, int]]:
    """Contiguous (start, count) runs of a sorted counter list."""
    runs = []
    for c in counters:
        if runs and runs[-1][0] + runs[-1][1] == c:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((c, 1))
    return runs


class WorkerPool:
    """Deterministic batch stream served by a set of workers.

    Sample n of the stream uses RNG counter ``counter_base + n``; batches
    consume consecutive counters. Up to ``prefetch`` future batches (of the
    most recently requested size and horizon) are fetched in the background.
    """

    def __init__(self, addresses, dataset_digest: str, *, seed: int, stream_id: int = 0,
                 counter_base: int = 0, crop=None, prefetch: int = 4, timeout: float = 30.0,
                 retry_interval: float = 0.2):
        if not addresses:
            raise PoolError("no worker addresses")
        self.seed, self.stream_id = seed, stream_id
        self.counter = counter_base
        self.prefetch = prefetch
        self.timeout = timeout
        self.retry_interval = retry_interval
        self.conns = [_Conn(a, dataset_digest, timeout, crop) for a in addresses]
        for c in self.conns:
            c.connect()
        if not any(c.alive for c in self.conns):
            raise PoolError(f"no reachable workers among {list(addresses)}")
        self._io = ThreadPoolExecutor(max_workers=len(self.conns), thread_name_prefix="fcx-pool-io")
        self._jobs = ThreadPoolExecutor(max_workers=1, thread_name_prefix="fcx-pool")
        self._ahead: deque[tuple[tuple[int, int, int], Future]] = deque()
        self.fetched_counters = 0

    @property
    def live_workers(self) -> int:
        return sum(c.alive for c in self.conns)

    @property
    def outstanding(self) -> int:
        return len(self._ahead)

    def _fetch(self, start: int, n: int, horizon: int) -> list[np.ndarray]:
        results: dict[int, np.ndarray] = {}
        pending = list(range(start, start + n))
        deadline = None
        while pending:
            live = [c for c in self.conns if c.alive]
            if not live:
                deadline = deadline or time.monotonic() + self.timeout
                if time.monotonic() > deadline:
                    raise PoolError(f"all workers dead for {self.timeout}s")
                time.sleep(self.retry_interval)
                for c in self.conns:
                    if not c.alive:
                        c.connect()
                continue
            deadline = None
            runs = _runs(pending)
            # split long runs so every live worker gets a share
            per = -(-len(pending) // len(live))
            chunks = [(s + i, min(per, k - i)) for s, k in runs for i in range(0, k, per)]
            assigned: dict[_Conn, list[tuple[int, int]]] = {c: [] for c in live}
            for i, ch in enumerate(chunks):
                assigned[live[i % len(live)]].append(ch)

            def work(conn, chs):
                for base, count in chs:
                    conn.request(base, count, horizon, self.seed, self.stream_id, results)

            futures = {c: self._io.submit(work, c, chs) for c, chs in assigned.items() if chs}
            for conn, fut in futures.items():
                try:
                    fut.result()
                except PoolError:
                    raise
                except (OSError, EOFError, ProtocolError) as e:
                    log.warning("worker %s failed (%s); reassigning its counters", conn.addr, e)
                    conn.close()
            pending = [c for c in pending if c not in results]
        self.fetched_counters += n
        return [results[c] for c in range(start, start + n)]

    def _submit(self, key):
        return self._jobs.submit(self._fetch, *key)

    def take_states(self, batch_size: int, horizon: int) -> list[np.ndarray]:
        key = (self.counter, batch_size, horizon)
        if self._ahead and self._ahead[0][0] == key:
            fut = self._ahead.popleft()[1]
        else:
            for _, f in self._ahead:
                f.cancel()
            self._ahead.clear()
            fut = self._submit(key)
        states = fut.result()
        self.counter += batch_size
        nxt = self.counter + sum(k[1] for k, _ in self._ahead)
        while len(self._ahead) < self.prefetch:
            k = (nxt, batch_size, horizon)
            self._ahead.append((k, self._submit(k)))
            nxt += batch_size
        return states

    def next_batch(self, batch_size: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        """Inputs (B, C, h, w) and targets (B, K, C, h, w), in counter order."""
        states = np.stack(self.take_states(batch_size, horizon))
        return states[:, 0].copy(), states[:, 1:].copy()

    def close(self):
        for _, f in self._ahead:
            f.cancel()
        self._ahead.clear()
        self._jobs.shutdown(wait=True, cancel_futures=True)
        self._io.shutdown(wait=True)
        for c in self.conns:
            c.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def dataset_digest(dataset_dir) -> str:
    return (Path(dataset_dir) / "digest").read_text().strip()
