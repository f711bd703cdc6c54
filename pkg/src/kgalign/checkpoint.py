"""Binary checkpoint format shared by embeddings and alignment runs.

Layout (little-endian)::

    b"KGA1" | version u16 | model_kind u8 |
    repeated until EOF: name_len u16 | name utf-8 | rows u32 | cols u32 | rows*cols f32

Values are stored as 32-bit floats, so a float64 array survives a round trip
as its float32 rounding; a loaded checkpoint re-saves byte-identically.
Metadata strings travel as empty (0 x 0) matrices named ``meta.<key>=<value>``.
Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .alignment import AlignmentParams
from .discriminator import DiscriminatorParams
from .embedding import EmbeddingTable, ModelKind
from .errors import FormatError, ShapeError
from .mi import MiEstimatorParams
from .nn import MlpParams

MAGIC = b"KGA1"
VERSION = 1
KIND_ALIGNMENT = 16
_HEADER = struct.Struct("<4sHB")
_NAME_LEN = struct.Struct("<H")
_DIMS = struct.Struct("<II")


def write_matrices(path, kind: int, matrices: Iterable[tuple[str, np.ndarray]],
                   meta: dict | None = None) -> None:
    chunks = [_HEADER.pack(MAGIC, VERSION, kind)]
    items = [(f"meta.{k}={v}", np.zeros((0, 0))) for k, v in (meta or {}).items()]
    items += list(matrices)
    for name, m in items:
        m = np.asarray(m)
        if m.ndim == 1:
            m = m[None, :]
        elif m.ndim == 0:
            m = m.reshape(1, 1)
        raw = name.encode("utf-8")
        chunks += [_NAME_LEN.pack(len(raw)), raw, _DIMS.pack(*m.shape),
                   np.ascontiguousarray(m, dtype="<f4").tobytes()]
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".kga-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_matrices(path):
    """Return ``(kind, {name: float64 matrix}, meta)``; raises FormatError on bad bytes."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, kind = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    pos = _HEADER.size
    mats, meta = {}, {}
    while pos < len(buf):
        if pos + _NAME_LEN.size > len(buf):
            raise FormatError(f"{path}: truncated matrix name")
        (n,) = _NAME_LEN.unpack_from(buf, pos)
        pos += _NAME_LEN.size
        if pos + n + _DIMS.size > len(buf):
            raise FormatError(f"{path}: truncated matrix header")
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: matrix name is not UTF-8") from exc
        pos += n
        rows, cols = _DIMS.unpack_from(buf, pos)
        pos += _DIMS.size
        nbytes = 4 * rows * cols
        if pos + nbytes > len(buf):
            raise FormatError(f"{path}: truncated data for matrix {name!r}")
        data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=pos)
        pos += nbytes
        if name.startswith("meta.") and "=" in name:
            key, value = name[5:].split("=", 1)
            meta[key] = value
        else:
            mats[name] = data.astype(np.float64).reshape(rows, cols)
    return kind, mats, meta


def _take(mats, name, path):
    try:
        return mats[name]
    except KeyError:
        raise FormatError(f"{path}: missing matrix {name!r}") from None


def vocab_digest(symbols) -> str:
    h = hashlib.sha256()
    for s in symbols:
        h.update(s.encode("utf-8") + b"\x00")
    return h.hexdigest()[:16]


def save_embeddings(table: EmbeddingTable, path, meta: dict | None = None) -> None:
    mats = [("entity", table.entity), ("relation", table.relation)]
    if table.normal is not None:
        mats.append(("normal", table.normal))
    write_matrices(path, int(table.kind), mats, meta)


def load_embeddings(path):
    """Return ``(EmbeddingTable, meta)``."""
    kind, mats, meta = read_matrices(path)
    try:
        kind = ModelKind(kind)
    except ValueError:
        raise FormatError(f"{path}: model kind {kind} is not an embedding table") from None
    normal = mats.get("normal")
    if kind == ModelKind.TRANSH and normal is None:
        raise FormatError(f"{path}: TransH checkpoint lacks normal vectors")
    return EmbeddingTable(_take(mats, "entity", path), _take(mats, "relation", path), kind,
                          normal), meta


@dataclass(frozen=True, eq=False)
class Checkpoint:
    align: AlignmentParams
    disc: DiscriminatorParams
    mi: MiEstimatorParams
    step: int = 0
    config_digest: str = ""
    meta: dict = field(default_factory=dict)


def _mlp_mats(prefix, p: MlpParams):
    return [(prefix + "w1", p.w1), (prefix + "b1", p.b1), (prefix + "w2", p.w2),
            (prefix + "b2", p.b2), (prefix + "slope", np.array([[p.slope]]))]


def _mlp_from(mats, prefix, path):
    return MlpParams(_take(mats, prefix + "w1", path), _take(mats, prefix + "b1", path)[0],
                     _take(mats, prefix + "w2", path), _take(mats, prefix + "b2", path)[0],
                     float(_take(mats, prefix + "slope", path)[0, 0]))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    mats = [("theta_e", ckpt.align.theta_e), ("theta_r", ckpt.align.theta_r),
            ("eta", np.array([[ckpt.align.eta]])), ("step", np.array([[ckpt.step]]))]
    mats += _mlp_mats("disc.f.", ckpt.disc.f) + _mlp_mats("disc.g.", ckpt.disc.g)
    mats += _mlp_mats("mi.t.", ckpt.mi.t)
    meta = {"config": ckpt.config_digest, **ckpt.meta}
    write_matrices(path, KIND_ALIGNMENT, mats, meta)


def load_checkpoint(path, expect_dim: int | None = None) -> Checkpoint:
    """Load an alignment checkpoint; ``expect_dim`` rejects runs of another dimension."""
    kind, mats, meta = read_matrices(path)
    if kind != KIND_ALIGNMENT:
        raise FormatError(f"{path}: model kind {kind} is not an alignment checkpoint")
    try:
        align = AlignmentParams(_take(mats, "theta_e", path), _take(mats, "theta_r", path),
                                float(_take(mats, "eta", path)[0, 0]))
        disc = DiscriminatorParams(_mlp_from(mats, "disc.f.", path), _mlp_from(mats, "disc.g.", path))
        mi = MiEstimatorParams(_mlp_from(mats, "mi.t.", path))
    except ShapeError as exc:
        raise FormatError(f"{path}: inconsistent matrix shapes: {exc}") from exc
    if expect_dim is not None and align.theta_e.shape != (expect_dim, expect_dim):
        raise ShapeError(f"{path}: checkpoint maps dim {align.theta_e.shape[1]} -> "
                         f"{align.theta_e.shape[0]}, configuration expects {expect_dim}")
    digest = meta.pop("config", "")
    return Checkpoint(align, disc, mi, int(_take(mats, "step", path)[0, 0]), digest, meta)
