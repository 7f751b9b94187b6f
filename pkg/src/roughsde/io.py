"""Binary persistence of grids and sampled arrays, CSV export, atomic writes.

Binary layout (all integers and floats little-endian)::

    b"RSDEBIN1"                      magic
    uint32  record count
    per record:
        uint16  name length, name (utf-8)
        uint8   ndim, uint64 x ndim shape
        float64 data, C order

The grid is the mandatory record ``"t"``.
"""
from __future__ import annotations

import csv
import io as _io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .timegrid import TimeGrid

MAGIC = b"RSDEBIN1"


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_arrays(grid: TimeGrid, **arrays) -> bytes:
    records = {"t": grid.t, **arrays}
    out = [MAGIC, struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.array(arr, dtype="<f8", order="C")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads_arrays(blob: bytes) -> tuple[TimeGrid, dict[str, np.ndarray]]:
    buf = _io.BytesIO(blob)

    def read(n):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise FormatError("truncated file")
        return chunk

    if read(len(MAGIC)) != MAGIC:
        raise FormatError("not a roughsde binary file")
    (count,) = struct.unpack("<I", read(4))
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", read(2))
        name = read(klen).decode("utf-8")
        (ndim,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{ndim}Q", read(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if "t" not in arrays:
        raise FormatError("missing grid record 't'")
    return TimeGrid(arrays.pop("t")), arrays


def save_arrays(path, grid: TimeGrid, **arrays) -> None:
    atomic_write_bytes(path, dumps_arrays(grid, **arrays))


def load_arrays(path) -> tuple[TimeGrid, dict[str, np.ndarray]]:
    return loads_arrays(Path(path).read_bytes())


def path_to_csv(grid: TimeGrid, values: np.ndarray, value_ndim: int = 1) -> str:
    """CSV with columns ``sample, t, v0, v1, ...`` (one row per sample and time)."""
    values = np.asarray(values, dtype=np.float64)
    axis = values.ndim - value_ndim - 1
    flat = values.reshape((-1, grid.N + 1, int(np.prod(values.shape[axis + 1:], dtype=np.int64))))
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample", "t"] + [f"v{k}" for k in range(flat.shape[2])])
    for m, sample in enumerate(flat):
        for k, row in enumerate(sample):
            writer.writerow([m, repr(float(grid.t[k]))] + [repr(float(x)) for x in row])
    return buf.getvalue()
