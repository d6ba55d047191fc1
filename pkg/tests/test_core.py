import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcx.afno import ArchConfig, build_model
from fcx.core import (CheckpointError, FieldBatch, ModelParams, NormStats, RngStream,
                      checkpoint_digest, load_checkpoint, rng_stream, save_checkpoint)

# Philox(key=42 | 3 << 64, counter=[0, 0, 0, 0]), first four uniforms, computed
# independently with numpy.random.Philox and frozen here.
GOLDEN_42_3 = [0.7122142960324449, 0.07050661802753055, 0.3939777489962194, 0.1263812763223061]


def test_rng_golden_values():
    np.testing.assert_array_equal(RngStream(42, 3).generator().random(4), GOLDEN_42_3)


def test_rng_matches_raw_philox():
    key = 7 | (2 << 64)
    ref = np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, 11])).random(5)
    np.testing.assert_array_equal(RngStream(7, 2, 11).generator().random(5), ref)


@given(st.integers(0, 2**32), st.integers(0, 50), st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_rng_depends_only_on_coordinates(seed, stream_id, counter):
    a = RngStream(seed, stream_id, counter).generator().random(3)
    b = rng_stream(seed, stream_id).at(counter).generator().random(3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, RngStream(seed, stream_id, counter + 1).generator().random(3))
    assert not np.array_equal(a, RngStream(seed, stream_id + 1, counter).generator().random(3))


def test_rng_advance_and_split():
    r = RngStream(1, 0, 5)
    assert r.advance(3) == RngStream(1, 0, 8)
    assert r.split(9) == RngStream(1, 9, 0)
    with pytest.raises(ValueError):
        RngStream(-1)


def test_field_batch_validation():
    fb = FieldBatch(np.zeros((1, 2, 4, 6)), ("a", "b"))
    assert fb.shape == (1, 2, 4, 6)
    with pytest.raises(ValueError):
        fb.data[0, 0, 0, 0] = 1.0
    with pytest.raises(ValueError, match="even"):
        FieldBatch(np.zeros((1, 1, 3, 4)), ("a",))
    with pytest.raises(ValueError, match="4 dims"):
        FieldBatch(np.zeros((2, 4, 4)), ("a",))
    with pytest.raises(ValueError, match="channel names"):
        FieldBatch(np.zeros((1, 2, 4, 4)), ("a",))
    bad = np.zeros((1, 1, 2, 2))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        FieldBatch(bad, ("a",))


def test_norm_stats():
    s = NormStats([1.0, 2.0], [0.5, 3.0])
    assert NormStats.from_json(s.to_json()).to_json() == s.to_json()
    with pytest.raises(ValueError):
        NormStats([0.0], [0.0])
    with pytest.raises(ValueError):
        NormStats([0.0, 1.0], [1.0])


def _params(gen, shapes):
    return ModelParams(arch={"kind": "test"},
                       tensors={f"t{i}": gen.normal(size=s).astype(np.float32) for i, s in enumerate(shapes)},
                       extra={"note": "x"})


@given(st.lists(st.lists(st.integers(1, 4), min_size=1, max_size=3), min_size=1, max_size=4),
       st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_checkpoint_round_trip(tmp_path_factory, shapes, seed):
    p = _params(np.random.default_rng(seed), [tuple(s) for s in shapes])
    path = tmp_path_factory.mktemp("ckpt")
    digest = save_checkpoint(p, path)
    assert digest == checkpoint_digest(path)
    q = load_checkpoint(path)
    assert p.equals(q)
    assert q.extra == {"note": "x"}
    assert save_checkpoint(q, path) == digest


def test_checkpoint_layout_digest(tmp_path):
    p = _params(np.random.default_rng(0), [(2, 3)])
    digest = save_checkpoint(p, tmp_path)
    raw = (tmp_path / "manifest.json").read_bytes() + (tmp_path / "weights.bin").read_bytes()
    assert hashlib.sha256(raw).hexdigest() == digest
    manifest = json.loads((tmp_path / "manifest.json").read_bytes())
    assert manifest["tensors"] == [{"name": "t0", "shape": [2, 3], "dtype": "f32", "offset": 0, "len": 24}]
    w = np.frombuffer((tmp_path / "weights.bin").read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(w, p.tensors["t0"].ravel())


def test_checkpoint_corruption_detected(tmp_path):
    save_checkpoint(_params(np.random.default_rng(1), [(4, 4)]), tmp_path)
    raw = bytearray((tmp_path / "weights.bin").read_bytes())
    raw[5] ^= 0x01
    (tmp_path / "weights.bin").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(tmp_path)


def test_checkpoint_truncation_detected(tmp_path):
    save_checkpoint(_params(np.random.default_rng(1), [(4, 4)]), tmp_path)
    raw = (tmp_path / "weights.bin").read_bytes()
    (tmp_path / "weights.bin").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_checkpoint_version_mismatch(tmp_path):
    save_checkpoint(_params(np.random.default_rng(1), [(2,)]), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_bytes())
    m["version"] = 99
    mb = json.dumps(m).encode()
    (tmp_path / "manifest.json").write_bytes(mb)
    w = (tmp_path / "weights.bin").read_bytes()
    (tmp_path / "digest").write_text(hashlib.sha256(mb + w).hexdigest())
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope")


def test_model_checkpoint_round_trip_depth4(tmp_path):
    model = build_model(ArchConfig(grid=(8, 16), embed_dim=16, depth=4), seed=3)
    p = model.to_params()
    save_checkpoint(p, tmp_path)
    q = load_checkpoint(tmp_path)
    assert p.equals(q) and p.digest() == q.digest()


def test_non_finite_params_rejected():
    with pytest.raises(ValueError):
        ModelParams(arch={}, tensors={"w": np.array([np.inf], dtype=np.float32)})
