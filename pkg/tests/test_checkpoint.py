import struct

import numpy as np
import pytest

from halftune.checkpoint import (ALIGN, ChecksumError, CheckpointError, DtypeMismatchError, TruncatedError,
                                 VersionError, decode, encode, load_checkpoint, read_header, save_checkpoint)
from halftune.model import ModelConfig, build_model
from halftune.selection import SelectionHistory, plan_category

from conftest import perturbed


def _model(dtype):
    m = build_model(ModelConfig(64, 16, 2, 2, 32, 16, dtype), 0)
    m.registry = perturbed(m)
    return m


def _history(reg):
    h = SelectionHistory()
    for r in (1, 2):
        h.append(plan_category(reg, r, 0))
    return h


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_roundtrip_is_bit_exact(tmp_path, dtype):
    m = _model(dtype)
    hist = _history(m.registry)
    path = tmp_path / "m.ckpt"
    n = save_checkpoint(m, hist, {"round": 2}, path)
    assert path.stat().st_size == n
    ck = load_checkpoint(path)
    assert ck.config == m.config and ck.metadata == {"round": 2}
    assert ck.history.plans == hist.plans
    assert ck.registry.names() == m.registry.names()
    for name in m.registry.names():
        assert ck.registry.array(name).tobytes() == m.registry.array(name).tobytes()
        assert ck.registry[name].category == m.registry[name].category


def test_encoding_is_deterministic_and_aligned():
    m = _model("f32")
    data = encode(m.registry, m.config)
    assert data == encode(m.registry, m.config)
    (n,) = struct.unpack_from("<Q", data)
    assert (8 + n) % ALIGN == 0
    header = decode(data)
    assert header.registry.equals(m.registry)


def test_every_single_byte_flip_in_payload_is_caught(tmp_path):
    m = _model("f32")
    data = encode(m.registry, m.config)
    (n,) = struct.unpack_from("<Q", data)
    rng = np.random.default_rng(0)
    # pick positions inside tensor buffers, not alignment padding
    spans = []
    hdr = read_header_bytes(data)
    for meta in hdr["tensors"].values():
        spans.append((8 + n + meta["byte_offset"], meta["byte_length"]))
    for start, length in spans:
        pos = start + int(rng.integers(length))
        bad = bytearray(data)
        bad[pos] ^= 1 << int(rng.integers(8))
        with pytest.raises(ChecksumError):
            decode(bytes(bad))


def read_header_bytes(data):
    import json
    (n,) = struct.unpack_from("<Q", data)
    return json.loads(data[8:8 + n])


def test_truncation_and_version(tmp_path):
    m = _model("f32")
    data = encode(m.registry, m.config)
    for cut in (4, 40, len(data) - 1):
        with pytest.raises(TruncatedError):
            decode(data[:cut])
    hdr = read_header_bytes(data)
    hdr["format_version"] = 99
    import json
    body = json.dumps(hdr, sort_keys=True).encode()
    with pytest.raises(VersionError):
        decode(struct.pack("<Q", len(body)) + body)


def test_dtype_policy(tmp_path):
    m = _model("f32")
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, None, None, path)
    with pytest.raises(DtypeMismatchError):
        load_checkpoint(path, dtype="f64")
    ck = load_checkpoint(path, dtype="f64", convert=True)
    assert ck.config.dtype == "f64"
    assert np.array_equal(ck.registry.array("lm_head"), m.registry.array("lm_head").astype(np.float64))


def test_non_finite_and_missing_files(tmp_path):
    m = _model("f64")
    m.registry.set("lm_head", np.full_like(m.registry.array("lm_head"), np.nan))
    with pytest.raises(CheckpointError):
        save_checkpoint(m, None, None, tmp_path / "x.ckpt")
    assert not (tmp_path / "x.ckpt").exists()
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_read_header_only(tmp_path):
    m = _model("f32")
    save_checkpoint(m, _history(m.registry), {}, tmp_path / "m.ckpt")
    hdr = read_header(tmp_path / "m.ckpt")
    assert hdr["tensor_order"] == m.registry.names()
    assert len(hdr["selection_history"]) == 2
    assert all(t["byte_offset"] % ALIGN == 0 for t in hdr["tensors"].values())
