import os
import struct

import numpy as np
import pytest

from kgalign.alignment import AlignmentParams
from kgalign.checkpoint import (Checkpoint, load_checkpoint, load_embeddings, read_matrices,
                                save_checkpoint, save_embeddings, vocab_digest, write_matrices)
from kgalign.discriminator import init_discriminator
from kgalign.embedding import EmbeddingTable, ModelKind
from kgalign.errors import FormatError, ShapeError
from kgalign.mi import init_mi_estimator


def _ckpt(rng, d=4, hidden=6):
    align = AlignmentParams(rng.normal(size=(d, d)), rng.normal(size=(d, d)), 2.5)
    return Checkpoint(align, init_discriminator(d, hidden, rng), init_mi_estimator(d, d, hidden, rng),
                      step=40, config_digest="abc123", meta={"note": "x y"})


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ck = _ckpt(rng)
    path = tmp_path / "a.kga"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert np.array_equal(back.align.theta_e, _f32(ck.align.theta_e))
    assert np.array_equal(back.align.theta_r, _f32(ck.align.theta_r))
    assert back.align.eta == 2.5 and back.step == 40
    assert back.config_digest == "abc123" and back.meta == {"note": "x y"}
    for a, b in ((ck.disc.f, back.disc.f), (ck.disc.g, back.disc.g), (ck.mi.t, back.mi.t)):
        assert np.array_equal(b.w1, _f32(a.w1)) and np.array_equal(b.b2, _f32(a.b2))
        assert b.slope == pytest.approx(a.slope, rel=1e-7)
    save_checkpoint(back, tmp_path / "b.kga")
    assert (tmp_path / "a.kga").read_bytes() == (tmp_path / "b.kga").read_bytes()


def test_float32_values_round_trip_bit_identically(tmp_path):
    rng = np.random.default_rng(6)
    ck = _ckpt(rng)
    f32 = AlignmentParams(_f32(ck.align.theta_e), _f32(ck.align.theta_r), 0.5)
    save_checkpoint(Checkpoint(f32, ck.disc, ck.mi), tmp_path / "a.kga")
    back = load_checkpoint(tmp_path / "a.kga")
    assert back.align.theta_e.tobytes() == f32.theta_e.tobytes()
    assert back.align.theta_r.tobytes() == f32.theta_r.tobytes()


@pytest.mark.parametrize("kind", list(ModelKind))
def test_embedding_round_trip_and_kind_byte(tmp_path, kind):
    rng = np.random.default_rng(1)
    normal = rng.normal(size=(3, 5)) if kind == ModelKind.TRANSH else None
    table = EmbeddingTable(rng.normal(size=(7, 5)), rng.normal(size=(3, 5)), kind, normal)
    path = tmp_path / "e.kga"
    save_embeddings(table, path, {"vocab": "deadbeef"})
    raw = path.read_bytes()
    assert raw[:4] == b"KGA1" and struct.unpack("<H", raw[4:6])[0] == 1 and raw[6] == int(kind)
    back, meta = load_embeddings(path)
    assert back.kind == kind and meta == {"vocab": "deadbeef"}
    assert np.array_equal(back.entity, _f32(table.entity))
    save_embeddings(back, tmp_path / "f.kga", meta)
    assert (tmp_path / "f.kga").read_bytes() == raw


def test_layout_bytes(tmp_path):
    path = tmp_path / "m.kga"
    write_matrices(path, 3, [("ab", np.array([[1.0, 2.0]]))])
    want = (b"KGA1" + struct.pack("<HB", 1, 3) + struct.pack("<H", 2) + b"ab"
            + struct.pack("<II", 1, 2) + struct.pack("<2f", 1.0, 2.0))
    assert path.read_bytes() == want


def test_bad_magic_version_and_truncation(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "a.kga"
    save_checkpoint(_ckpt(rng), path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.kga"
    bad.write_bytes(b"KGA2" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_matrices(bad)
    bad.write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
    with pytest.raises(FormatError, match="version"):
        read_matrices(bad)
    for cut in (3, 8, len(raw) - 1):
        bad.write_bytes(raw[:cut])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(bad)


def test_missing_matrix_and_wrong_kind(tmp_path):
    path = tmp_path / "x.kga"
    write_matrices(path, 16, [("theta_e", np.eye(2))])
    with pytest.raises(FormatError, match="missing"):
        load_checkpoint(path)
    table = EmbeddingTable(np.eye(2), np.eye(2))
    save_embeddings(table, path)
    with pytest.raises(FormatError):
        load_checkpoint(path)
    save_checkpoint(_ckpt(np.random.default_rng(0)), path)
    with pytest.raises(FormatError):
        load_embeddings(path)


def test_expected_dimension(tmp_path):
    path = tmp_path / "a.kga"
    save_checkpoint(_ckpt(np.random.default_rng(3), d=4), path)
    assert load_checkpoint(path, expect_dim=4).align.theta_e.shape == (4, 4)
    with pytest.raises(ShapeError, match="expects 8"):
        load_checkpoint(path, expect_dim=8)


def test_write_is_atomic(tmp_path, monkeypatch):
    path = tmp_path / "a.kga"
    save_checkpoint(_ckpt(np.random.default_rng(4)), path)
    before = path.read_bytes()

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        save_checkpoint(_ckpt(np.random.default_rng(5)), path)
    # the old file is untouched and no temporary file is left behind
    assert path.read_bytes() == before
    assert sorted(os.listdir(tmp_path)) == ["a.kga"]


def test_vocab_digest():
    assert vocab_digest(["a", "b"]) == vocab_digest(("a", "b"))
    assert vocab_digest(["a", "b"]) != vocab_digest(["b", "a"])
    assert vocab_digest(["ab"]) != vocab_digest(["a", "b"])
