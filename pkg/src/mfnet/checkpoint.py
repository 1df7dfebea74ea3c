"""Binary checkpoints: config text, named tensors, optimizer state.

All floats are stored little-endian; load(save(x)) is bitwise identical.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MFNC"
VERSION = 1

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(RuntimeError):
    pass


def _write_array_map(fh, arrays):
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode()
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        code = _DTYPE_CODES[np.dtype(arr.dtype)]
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype(_CODE_DTYPES[code], copy=False).tobytes())


def _read_array_map(fh):
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fh.read(2))
        name = fh.read(nlen).decode()
        code, ndim = struct.unpack("<BB", fh.read(2))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        dtype = _CODE_DTYPES[code]
        raw = fh.read(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        out[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return out


def save_checkpoint(path, config_text, epoch, registry, buffers, velocity):
    params = {name: t.data for name, t, _ in registry.items()}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        cb = config_text.encode()
        fh.write(struct.pack("<I", len(cb)))
        fh.write(cb)
        fh.write(struct.pack("<I", epoch))
        _write_array_map(fh, params)
        _write_array_map(fh, buffers)
        _write_array_map(fh, velocity)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (clen,) = struct.unpack("<I", fh.read(4))
        config_text = fh.read(clen).decode()
        (epoch,) = struct.unpack("<I", fh.read(4))
        return {
            "config_text": config_text,
            "epoch": epoch,
            "params": _read_array_map(fh),
            "buffers": _read_array_map(fh),
            "velocity": _read_array_map(fh),
        }


def _diff(expected, got, kind):
    lines = []
    for name in sorted(set(expected) | set(got)):
        if name not in got:
            lines.append(f"  missing {kind}: {name} {tuple(expected[name])}")
        elif name not in expected:
            lines.append(f"  unexpected {kind}: {name} {tuple(got[name].shape)}")
        elif tuple(expected[name]) != tuple(got[name].shape):
            lines.append(
                f"  shape mismatch {kind} {name}: model {tuple(expected[name])}"
                f" vs checkpoint {tuple(got[name].shape)}"
            )
    return lines


def restore_model(model, ck, state=None):
    """Copy checkpoint tensors into the model in place; itemize mismatches."""
    expected_p = {name: t.data.shape for name, t, _ in model.registry.items()}
    expected_b = {name: arr.shape for name, arr in model.buffers.items()}
    problems = _diff(expected_p, ck["params"], "param") + _diff(
        expected_b, ck["buffers"], "buffer"
    )
    if problems:
        raise CheckpointError(
            "architecture/checkpoint mismatch:\n" + "\n".join(problems)
        )
    for name, t, _ in model.registry.items():
        t.data[...] = ck["params"][name].astype(t.data.dtype, copy=False)
    for name, arr in model.buffers.items():
        arr[...] = ck["buffers"][name].astype(arr.dtype, copy=False)
    if state is not None:
        state.velocity = {k: v.copy() for k, v in ck["velocity"].items()}
