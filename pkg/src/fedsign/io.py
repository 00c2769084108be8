"""Binary artifact containers: checkpoints, key files, datasets, trigger sets.

All artifacts share one envelope: an 8-byte magic, a 4-byte artifact tag
and a little-endian u32 format version, followed by tag-specific fields.
Integers are little-endian; float payloads are little-endian IEEE-754
float64.  The exact byte layout is documented in docs/FORMATS.md and
round-trips bit-exactly.
"""

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"FEDSIGN\x00"
FORMAT_VERSION = 1

TAG_CHECKPOINT = b"CKPT"
TAG_KEYFILE = b"KEYF"
TAG_DATASET = b"DSET"
TAG_TRIGGERS = b"TRIG"


# ---------------------------------------------------------------------------
# primitives

def _w_u32(f, v):
    f.write(struct.pack("<I", v))


def _w_i64(f, v):
    f.write(struct.pack("<q", v))


def _w_f64(f, v):
    f.write(struct.pack("<d", v))


def _w_str(f, s):
    data = s.encode("utf-8")
    _w_u32(f, len(data))
    f.write(data)


def _w_arr(f, arr, dtype):
    arr = np.asarray(arr)
    _w_u32(f, arr.ndim)
    for d in arr.shape:
        _w_i64(f, d)
    f.write(arr.astype(dtype).tobytes(order="C"))


def _take(f, n):
    data = f.read(n)
    if len(data) != n:
        raise FormatError("truncated artifact file")
    return data


def _r_u32(f):
    return struct.unpack("<I", _take(f, 4))[0]


def _r_i64(f):
    return struct.unpack("<q", _take(f, 8))[0]


def _r_f64(f):
    return struct.unpack("<d", _take(f, 8))[0]


def _r_str(f):
    return _take(f, _r_u32(f)).decode("utf-8")


def _r_arr(f, dtype):
    ndim = _r_u32(f)
    shape = tuple(_r_i64(f) for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    itemsize = np.dtype(dtype).itemsize
    flat = np.frombuffer(_take(f, count * itemsize), dtype=dtype)
    return flat.reshape(shape).copy()


def _open_envelope(f, expect_tag):
    if _take(f, 8) != MAGIC:
        raise FormatError("bad magic: not an artifact file")
    tag = _take(f, 4)
    if tag != expect_tag:
        raise FormatError(f"artifact tag {tag!r} does not match expected {expect_tag!r}")
    version = _r_u32(f)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")


def _write_envelope(f, tag):
    f.write(MAGIC)
    f.write(tag)
    _w_u32(f, FORMAT_VERSION)


def _check_eof(f):
    if f.read(1):
        raise FormatError("trailing bytes after artifact payload")


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, descriptor, seed, entries):
    """entries: dict mapping (layer_index, role) -> float array."""
    with open(path, "wb") as f:
        _write_envelope(f, TAG_CHECKPOINT)
        _w_str(f, descriptor)
        _w_i64(f, seed)
        keys = sorted(entries)
        _w_u32(f, len(keys))
        for idx, role in keys:
            _w_u32(f, idx)
            _w_str(f, role)
            _w_arr(f, entries[(idx, role)], "<f8")


def load_checkpoint(path):
    """Returns (descriptor, seed, entries)."""
    with open(path, "rb") as f:
        _open_envelope(f, TAG_CHECKPOINT)
        descriptor = _r_str(f)
        seed = _r_i64(f)
        entries = {}
        for _ in range(_r_u32(f)):
            idx = _r_u32(f)
            role = _r_str(f)
            entries[(idx, role)] = _r_arr(f, "<f8")
        _check_eof(f)
    return descriptor, seed, entries


# ---------------------------------------------------------------------------
# key files (per-client verification secrets)

def save_keyfile(path, *, client_id, mode, seed, bits, selector, pool_size,
                 coords=None, matrix=None, trigger_ref="", margin=0.1):
    if (coords is None) == (matrix is None):
        raise FormatError("exactly one of coords/matrix must be given")
    with open(path, "wb") as f:
        _write_envelope(f, TAG_KEYFILE)
        _w_u32(f, client_id)
        _w_str(f, mode)
        _w_i64(f, seed)
        _w_arr(f, np.asarray(bits), "<i1")
        _w_u32(f, len(selector))
        for idx, role in selector:
            _w_u32(f, idx)
            _w_str(f, role)
        _w_u32(f, pool_size)
        if coords is not None:
            f.write(b"\x00")
            _w_arr(f, np.asarray(coords), "<i8")
        else:
            f.write(b"\x01")
            _w_arr(f, np.asarray(matrix), "<f8")
        _w_str(f, trigger_ref)
        _w_f64(f, margin)
    os.chmod(path, 0o600)


def load_keyfile(path):
    with open(path, "rb") as f:
        _open_envelope(f, TAG_KEYFILE)
        out = {
            "client_id": _r_u32(f),
            "mode": _r_str(f),
            "seed": _r_i64(f),
            "bits": _r_arr(f, "<i1"),
        }
        out["selector"] = tuple((_r_u32(f), _r_str(f)) for _ in range(_r_u32(f)))
        out["pool_size"] = _r_u32(f)
        kind = _take(f, 1)
        if kind == b"\x00":
            out["coords"] = _r_arr(f, "<i8")
            out["matrix"] = None
        elif kind == b"\x01":
            out["coords"] = None
            out["matrix"] = _r_arr(f, "<f8")
        else:
            raise FormatError("bad extractor kind byte")
        out["trigger_ref"] = _r_str(f)
        out["margin"] = _r_f64(f)
        _check_eof(f)
    return out


# ---------------------------------------------------------------------------
# datasets and trigger sets

def _save_samples(path, tag, inputs, labels, class_count, meta):
    with open(path, "wb") as f:
        _write_envelope(f, tag)
        _w_u32(f, class_count)
        _w_arr(f, np.asarray(inputs), "<f8")
        _w_arr(f, np.asarray(labels), "<i8")
        meta = dict(meta or {})
        _w_u32(f, len(meta))
        for k in sorted(meta):
            _w_str(f, k)
            _w_str(f, str(meta[k]))


def _load_samples(path, tag):
    with open(path, "rb") as f:
        _open_envelope(f, tag)
        class_count = _r_u32(f)
        inputs = _r_arr(f, "<f8")
        labels = _r_arr(f, "<i8")
        meta = {}
        for _ in range(_r_u32(f)):
            k = _r_str(f)
            meta[k] = _r_str(f)
        _check_eof(f)
    return inputs, labels, class_count, meta


def save_dataset(path, inputs, labels, class_count, meta=None):
    _save_samples(path, TAG_DATASET, inputs, labels, class_count, meta)


def load_dataset(path):
    return _load_samples(path, TAG_DATASET)


def save_triggers(path, samples, target_labels, class_count, meta=None):
    _save_samples(path, TAG_TRIGGERS, samples, target_labels, class_count, meta)


def load_triggers(path):
    return _load_samples(path, TAG_TRIGGERS)
