"""Versioned binary container for trained weights.

Layout (all little-endian)::

    magic      4s   b"SMLP"
    version    u16
    flags      u16  bit 0 set: sigmoid output head (clear: softmax)
    kind       8s   ASCII, NUL padded ("deepmil", "varmil", "tilesup", "enc")
    nu         u32  hidden width
    H          u32  feature dimension
    count      u32  number of matrices
    then per matrix, in declaration order:
        rows u32, cols u32, rows*cols float64
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

MAGIC = b"SMLP"
VERSION = 1
KINDS = ("deepmil", "varmil", "tilesup", "enc")

_HEADER = struct.Struct("<4sHH8sIII")
FLAG_SIGMOID = 1
_SHAPE = struct.Struct("<II")


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, kind: str, nu: int, dim: int, matrices: Sequence[np.ndarray], flags: int = 0) -> None:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    chunks = [_HEADER.pack(MAGIC, VERSION, flags, kind.encode("ascii"), nu, dim, len(matrices))]
    for m in matrices:
        m2 = np.atleast_2d(np.asarray(m, dtype=np.float64))
        if m2.ndim != 2:
            raise CheckpointError("only vectors and matrices can be stored")
        chunks.append(_SHAPE.pack(*m2.shape))
        chunks.append(m2.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path, with_flags: bool = False):
    """Return ``(kind, nu, H, matrices)``; 1-row matrices come back as 2-D.

    With ``with_flags`` the header flags are appended as a fifth element.
    """
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, flags, kind, nu, dim, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = kind.rstrip(b"\0").decode("ascii")
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    off = _HEADER.size
    mats = []
    for _ in range(count):
        if off + _SHAPE.size > len(buf):
            raise CheckpointError("truncated checkpoint")
        rows, cols = _SHAPE.unpack_from(buf, off)
        off += _SHAPE.size
        nbytes = rows * cols * 8
        if off + nbytes > len(buf):
            raise CheckpointError("truncated checkpoint")
        mats.append(np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64))
        off += nbytes
    if off != len(buf):
        raise CheckpointError("trailing bytes after last matrix")
    if with_flags:
        return kind, nu, dim, mats, flags
    return kind, nu, dim, mats


def _flags(output: str) -> int:
    return FLAG_SIGMOID if output == "sigmoid" else 0


def _output(flags: int) -> str:
    return "sigmoid" if flags & FLAG_SIGMOID else "softmax"


def save_mil(path, model) -> None:
    write_checkpoint(path, model.kind, model.attention.nu, model.attention.dim,
                     [p.value for p in model.params()], _flags(model.head.output))


def load_mil(path):
    from .core import Param
    from .mil import AttentionParams, HeadParams, MILModel

    kind, nu, dim, mats, flags = read_checkpoint(path, with_flags=True)
    if kind not in ("deepmil", "varmil") or len(mats) != 6:
        raise CheckpointError(f"{path} does not hold a MIL model (kind {kind!r})")
    W1, b1, W2, b2, W, b = mats
    att = AttentionParams(Param(W1, "W1"), Param(b1[0], "b1"), Param(W2, "W2"), Param(b2[0], "b2"))
    if att.nu != nu or att.dim != dim:
        raise CheckpointError("matrix shapes disagree with header")
    return MILModel(att, HeadParams(Param(W, "W"), Param(b[0], "b"), kind, _output(flags)))


def save_tilesup(path, params) -> None:
    write_checkpoint(path, "tilesup", params.nu, params.dim, [p.value for p in params.params()],
                     _flags(params.output))


def load_tilesup(path):
    from .baseline import TileClassifierParams
    from .core import Param

    kind, nu, dim, mats, flags = read_checkpoint(path, with_flags=True)
    if kind != "tilesup" or len(mats) != 4:
        raise CheckpointError(f"{path} does not hold a tile classifier (kind {kind!r})")
    W1, b1, W2, b2 = mats
    params = TileClassifierParams(Param(W1, "W1"), Param(b1[0], "b1"), Param(W2, "W2"), Param(b2[0], "b2"),
                                  _output(flags))
    if params.nu != nu or params.dim != dim:
        raise CheckpointError("matrix shapes disagree with header")
    return params


def save_model(path, model) -> None:
    if getattr(model, "kind", None) == "tilesup":
        save_tilesup(path, model)
    else:
        save_mil(path, model)


def load_model(path):
    """Load a MIL model or tile classifier, dispatching on the kind tag."""
    kind = read_checkpoint(path)[0]
    if kind == "tilesup":
        return load_tilesup(path)
    if kind == "enc":
        raise CheckpointError(f"{path} is an encoder checkpoint, not a classifier")
    return load_mil(path)
