"""File formats: .xyzn / ASCII PLY clouds, .labels files, embedding matrices."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud


class ParseError(ValueError):
    """Malformed input file; carries a 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def read_xyzn(text: str) -> PointCloud:
    """Parse "x y z nx ny nz" records, one point per line."""
    pos, nrm = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ParseError(f"expected 6 fields, got {len(fields)}", lineno)
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from exc
        pos.append(vals[:3])
        nrm.append(vals[3:])
    if not pos:
        raise ParseError("no points")
    return PointCloud(np.array(pos), np.array(nrm))


def write_xyzn(cloud: PointCloud) -> str:
    rows = np.hstack([cloud.positions, cloud.normals])
    return "\n".join(" ".join(f"{v:.9g}" for v in row) for row in rows) + "\n"


def read_ply(text: str) -> PointCloud:
    """Parse an ASCII PLY with vertex properties x y z nx ny nz."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("not a PLY file", 1)
    n_vertex = None
    props: list[str] = []
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ParseError("only ascii PLY supported", lineno)
        elif tok[0] == "element":
            if tok[1] == "vertex":
                n_vertex = int(tok[2])
            elif n_vertex is None:
                raise ParseError("vertex element must come first", lineno)
        elif tok[0] == "property" and n_vertex is not None and body_start is None:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = lineno
            break
    if n_vertex is None or body_start is None:
        raise ParseError("missing vertex element or end_header")
    required = ["x", "y", "z", "nx", "ny", "nz"]
    if any(p not in props for p in required):
        raise ParseError(f"vertex properties must include {required}, got {props}")
    cols = [props.index(p) for p in required]
    rows = []
    for lineno in range(body_start, body_start + n_vertex):
        if lineno >= len(lines):
            raise ParseError("truncated vertex list", lineno + 1)
        fields = lines[lineno].split()
        if len(fields) < len(props):
            raise ParseError(f"expected {len(props)} fields", lineno + 1)
        try:
            rows.append([float(fields[c]) for c in cols])
        except ValueError as exc:
            raise ParseError(str(exc), lineno + 1) from exc
    arr = np.array(rows)
    return PointCloud(arr[:, :3], arr[:, 3:])


def write_ply(cloud: PointCloud) -> str:
    header = "\n".join(
        [
            "ply",
            "format ascii 1.0",
            f"element vertex {cloud.n}",
            "property float x",
            "property float y",
            "property float z",
            "property float nx",
            "property float ny",
            "property float nz",
            "end_header",
        ]
    )
    rows = np.hstack([cloud.positions, cloud.normals])
    body = "\n".join(" ".join(f"{v:.9g}" for v in row) for row in rows)
    return header + "\n" + body + "\n"


def read_cloud_file(path: str | Path) -> PointCloud:
    path = Path(path)
    text = path.read_text()
    return parse_cloud(text, path.suffix)


def parse_cloud(text: str, suffix_hint: str = "") -> PointCloud:
    if suffix_hint == ".ply" or text.lstrip().startswith("ply"):
        return read_ply(text)
    return read_xyzn(text)


def read_labels(path: str | Path) -> np.ndarray:
    vals = [int(line) for line in Path(path).read_text().split()]
    return np.array(vals, dtype=np.int64)


def write_labels(labels: np.ndarray, path: str | Path) -> None:
    Path(path).write_text("\n".join(str(int(v)) for v in labels) + "\n")


_EMBED_MAGIC = b"EMB1"


def write_embedding(matrix: np.ndarray, path: str | Path) -> None:
    """Binary matrix file: magic, (N, d) uint32 header, row-major f32 LE."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_EMBED_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_embedding(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _EMBED_MAGIC:
        raise ParseError("bad embedding file magic")
    n, d = struct.unpack_from("<II", raw, 4)
    body = np.frombuffer(raw, dtype="<f4", offset=12)
    if body.size != n * d:
        raise ParseError(f"embedding payload size mismatch: {body.size} != {n}*{d}")
    return body.reshape(n, d).astype(np.float64)
