"""Minimal binary-little-endian PLY reader/writer for vertex-only clouds."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_PLY_TO_NP = {
    "char": "i1",
    "uchar": "u1",
    "short": "i2",
    "ushort": "u2",
    "int": "i4",
    "uint": "u4",
    "float": "f4",
    "double": "f8",
}
_NP_TO_PLY = {v: k for k, v in _PLY_TO_NP.items()}


def write_ply(path, vertices: np.ndarray) -> None:
    """Write a structured array of vertex properties as binary_little_endian."""
    vertices = np.ascontiguousarray(vertices)
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(vertices)}"]
    for name in vertices.dtype.names:
        dt = vertices.dtype[name]
        key = dt.str.lstrip("<>|=")
        lines.append(f"property {_NP_TO_PLY[key]} {name}")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vertices.tobytes())


def read_ply(path) -> np.ndarray:
    """Read a vertex-only binary_little_endian PLY into a structured array."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    if header[1].split()[1] != "binary_little_endian":
        raise ValueError(f"{path}: only binary_little_endian is supported")
    count = 0
    fields: list[tuple[str, str]] = []
    for line in header[2:]:
        parts = line.split()
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise ValueError(f"{path}: unsupported element {parts[1]}")
            count = int(parts[2])
        elif parts[0] == "property":
            fields.append((parts[2], "<" + _PLY_TO_NP[parts[1]]))
    dtype = np.dtype(fields)
    return np.frombuffer(data, dtype=dtype, count=count, offset=end).copy()
