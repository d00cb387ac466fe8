"""Flat binary format for nodal values.

Layout: the 8-byte magic ``HMGLAB01``, a little-endian ``uint32`` header
length, a UTF-8 JSON header, then every sector's values as little-endian
``float64`` in sector order (rows are exterior states).  The header carries
enough grid geometry to rebuild the :class:`SectorGrid` objects.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .configspace import SectorField, TriadicCube, build_sector_grid

__all__ = ["MAGIC", "FormatError", "write_arrays", "read_arrays", "write_field", "read_field"]

MAGIC = b"HMGLAB01"
_LEN = struct.Struct("<I")
_DTYPE = np.dtype("<f8")

PathLike = Union[str, Path]


class FormatError(ValueError):
    """The file is not a valid HMGLAB01 container."""


def write_arrays(path: PathLike, arrays: list[np.ndarray], meta: dict) -> None:
    """Write ``arrays`` (any shapes) with a JSON ``meta`` header."""
    header = dict(meta)
    header["shapes"] = [list(np.shape(a)) for a in arrays]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=_DTYPE).tobytes())


def read_arrays(path: PathLike) -> tuple[list[np.ndarray], dict]:
    """Inverse of :func:`write_arrays`; returns ``(arrays, header)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = _LEN.unpack_from(data, 8)
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    offset = 12 + hlen
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * _DTYPE.itemsize
        if end > len(data):
            raise FormatError(f"{path}: payload shorter than header promises")
        arrays.append(np.frombuffer(data, dtype=_DTYPE, count=count, offset=offset).reshape(shape).copy())
        offset = end
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return arrays, header


def write_field(path: PathLike, field: SectorField) -> None:
    """Serialize a :class:`SectorField` together with its grid geometry."""
    g0 = field.grids[0]
    meta = {
        "format": "sector-field",
        "cube": g0.cube.to_dict(),
        "h": g0.h,
        "collar_width": g0.collar_width,
        "n_max": field.n_max,
        "kind": field.kind,
        "slope": None if field.slope is None else list(field.slope),
        "normalization": field.normalization,
    }
    arrays = list(field.values) + [np.asarray(p) for p in field.state_probs]
    write_arrays(path, arrays, meta)


def read_field(path: PathLike) -> SectorField:
    """Rebuild a :class:`SectorField` written by :func:`write_field`."""
    arrays, meta = read_arrays(path)
    if meta.get("format") != "sector-field":
        raise FormatError(f"{path}: not a sector field")
    c = meta["cube"]
    box = TriadicCube(int(c["d"]), float(c["side"]), tuple(c["center"]), c.get("level"))
    n_max = int(meta["n_max"])
    grids = tuple(build_sector_grid(box, n, meta["h"], meta["collar_width"]) for n in range(n_max + 1))
    values = tuple(arrays[: n_max + 1])
    probs = tuple(arrays[n_max + 1 :])
    slope = None if meta["slope"] is None else tuple(meta["slope"])
    return SectorField(grids, values, meta["kind"], slope, probs, meta["normalization"])
