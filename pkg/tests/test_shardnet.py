import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcx.core import RngStream
from fcx.sampler import CropSpec, LocalSource, sample_example
from fcx.shardnet import (DONE, ERR, HELLO, HELLO_ACK, MAX_PAYLOAD, MSG_TYPES, PING, PROTOCOL_VERSION, SAMPLE,
                          SAMPLE_REQ, PoolError, ProtocolError, WorkerPool, decode_frame, decode_json,
                          decode_sample, encode_frame, encode_json, encode_sample, parse_addr, serve_in_thread)

CROP = (8, 16)


@given(st.sampled_from(sorted(MSG_TYPES)), st.binary(max_size=300))
@settings(max_examples=50, deadline=None)
def test_frame_round_trip(msg_type, payload):
    raw = encode_frame(msg_type, payload)
    assert raw[:5] == struct.pack(">IB", len(payload), msg_type)
    f = decode_frame(raw)
    assert (f.msg_type, f.payload, f.length) == (msg_type, payload, len(payload))


def test_ping_frame_is_five_bytes():
    assert encode_frame(PING) == b"\x00\x00\x00\x00\x06"


@given(st.binary(min_size=1, max_size=50), st.data())
@settings(max_examples=40, deadline=None)
def test_truncated_frames_are_rejected(payload, data):
    raw = encode_frame(SAMPLE_REQ, payload)
    cut = data.draw(st.integers(1, len(raw) - 1))
    with pytest.raises(ProtocolError):
        decode_frame(raw[:cut])


def test_frame_errors():
    with pytest.raises(EOFError):
        decode_frame(b"")
    with pytest.raises(ProtocolError, match="unknown"):
        decode_frame(struct.pack(">IB", 0, 0x09))
    with pytest.raises(ProtocolError, match="exceeds"):
        decode_frame(struct.pack(">IB", MAX_PAYLOAD + 1, PING))
    with pytest.raises(ProtocolError):
        encode_frame(0x42)
    with pytest.raises(ProtocolError):
        decode_json(decode_frame(encode_frame(HELLO, b"[1, 2]")))
    with pytest.raises(ValueError):
        parse_addr("localhost")


def test_sample_round_trip(small_data):
    crop = CropSpec((16, 32), CROP)
    ex = sample_example(RngStream(1, 2, 3), small_data, small_data.stats(), crop, 2)
    header, states = decode_sample(decode_frame(encode_sample(ex, small_data.digest, CROP)))
    np.testing.assert_array_equal(states, ex.states())
    assert header["counter"] == 3 and header["t0"] == ex.t0 and header["origin"] == list(ex.origin)
    raw = bytearray(encode_sample(ex, small_data.digest, CROP))
    bad = encode_frame(SAMPLE, bytes(raw[5:-4]))
    with pytest.raises(ProtocolError, match="body"):
        decode_sample(decode_frame(bad))


@pytest.fixture
def worker(small_data):
    srv = serve_in_thread(small_data.root, CROP)
    yield srv
    srv.kill()


class Client:
    def __init__(self, addr):
        self.sock = socket.create_connection(parse_addr(addr), timeout=10)
        self.rfile = self.sock.makefile("rb")

    def send(self, raw):
        self.sock.sendall(raw)

    def recv(self):
        return decode_frame(self.rfile)

    def close(self):
        self.rfile.close()
        self.sock.close()


def _hello(c, digest, version=PROTOCOL_VERSION):
    c.send(encode_json(HELLO, {"dataset_digest": digest, "protocol_version": version}))
    return c.recv()


def test_handshake_ping_and_requests(worker, small_data):
    c = Client(worker.address)
    ack = _hello(c, small_data.digest)
    assert ack.msg_type == HELLO_ACK
    assert decode_json(ack) == {"protocol_version": 1, "crop": list(CROP)}
    c.send(encode_frame(PING))
    assert c.recv().msg_type == PING
    c.send(encode_json(SAMPLE_REQ, {"count": 0, "horizon": 1, "seed": 0, "stream_id": 1, "counter_base": 0}))
    assert c.recv().msg_type == DONE
    c.send(encode_json(SAMPLE_REQ, {"count": 2, "horizon": 1, "seed": 5, "stream_id": 1, "counter_base": 40}))
    crop = CropSpec((16, 32), CROP)
    for k in range(2):
        header, states = decode_sample(c.recv())
        ref = sample_example(RngStream(5, 1, 40 + k), small_data, small_data.stats(), crop, 1)
        np.testing.assert_array_equal(states, ref.states())
    assert c.recv().msg_type == DONE
    c.close()


def test_worker_rejects_wrong_digest(worker):
    c = Client(worker.address)
    reply = _hello(c, "0" * 64)
    assert reply.msg_type == ERR and b"digest" in reply.payload
    c.close()


def test_worker_rejects_wrong_version(worker, small_data):
    c = Client(worker.address)
    assert _hello(c, small_data.digest, version=99).msg_type == ERR
    c.close()


def test_worker_rejects_malformed_request(worker, small_data):
    c = Client(worker.address)
    _hello(c, small_data.digest)
    c.send(encode_json(SAMPLE_REQ, {"count": "many"}))
    assert c.recv().msg_type == ERR
    c.close()


def _reference_batches(small_data, seed, sizes, horizon):
    src = LocalSource(small_data, small_data.stats(), CropSpec((16, 32), CROP), seed, stream_id=1)
    return [src.next_batch(bs, horizon) for bs in sizes]


@pytest.mark.parametrize("n_workers", [1, 2, 3])
def test_pool_matches_local_sampler(small_data, n_workers):
    servers = [serve_in_thread(small_data.root, CROP) for _ in range(n_workers)]
    sizes = [4, 3, 5, 4]
    ref = _reference_batches(small_data, 9, sizes, 2)
    try:
        with WorkerPool([s.address for s in servers], small_data.digest, seed=9, stream_id=1,
                        crop=CROP) as pool:
            for bs, (rx, ry) in zip(sizes, ref):
                x, y = pool.next_batch(bs, 2)
                assert x.tobytes() == rx.tobytes() and y.tobytes() == ry.tobytes()
    finally:
        for s in servers:
            s.kill()


@pytest.mark.parametrize("prefetch", [0, 4])
def test_pool_survives_worker_kill(small_data, prefetch):
    servers = [serve_in_thread(small_data.root, CROP) for _ in range(3)]
    sizes = [4] * 8
    ref = _reference_batches(small_data, 2, sizes, 1)
    try:
        with WorkerPool([s.address for s in servers], small_data.digest, seed=2, stream_id=1,
                        crop=CROP, prefetch=prefetch) as pool:
            for i, (rx, ry) in enumerate(ref):
                if i == 2:
                    servers[0].kill()
                x, y = pool.next_batch(4, 1)
                assert x.tobytes() == rx.tobytes() and y.tobytes() == ry.tobytes()
            if prefetch == 0:  # every fetch after the kill touched the dead worker
                assert pool.live_workers == 2
    finally:
        for s in servers[1:]:
            s.kill()


def test_pool_refuses_mismatched_crop(small_data, worker):
    with pytest.raises(PoolError, match="crop"):
        WorkerPool([worker.address], small_data.digest, seed=0, crop=(16, 32)).next_batch(1, 1)


def test_pool_times_out_without_workers(small_data):
    srv = serve_in_thread(small_data.root, CROP)
    addr = srv.address
    srv.kill()
    with pytest.raises(PoolError):
        with WorkerPool([addr], small_data.digest, seed=0, timeout=0.5, retry_interval=0.05) as pool:
            pool.next_batch(1, 1)
