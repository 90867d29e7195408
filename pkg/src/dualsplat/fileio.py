"""Image, float-map and PLY file formats."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

FMAP_MAGIC = b"FMAP"
_FMAP_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


def write_png(path, img) -> None:
    """Write a float image in [0, 1] (H, W), (H, W, 3) as 8-bit PNG."""
    arr = np.asarray(img, dtype=np.float64)
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def read_png(path) -> np.ndarray:
    """8-bit PNG as float64 in [0, 1]; RGBA/palette images are converted to RGB."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def quantize(img) -> np.ndarray:
    """Round-trip through 8 bits, i.e. exactly what ``write_png`` + ``read_png`` return."""
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8) / 255.0


def write_fmap(path, arr) -> None:
    """Float32 map with a 16-byte header {magic "FMAP", u32 H, u32 W, u32 C}."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError("float map must be (H, W) or (H, W, C)")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_FMAP_HEADER.pack(FMAP_MAGIC, h, w, c))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_fmap(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _FMAP_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, h, w, c = _FMAP_HEADER.unpack_from(data)
    if magic != FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = data[_FMAP_HEADER.size :]
    if len(body) != 4 * h * w * c:
        raise FormatError(f"{path}: expected {h}x{w}x{c} floats, got {len(body) // 4}")
    arr = np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)
    return arr[..., 0] if c == 1 else arr


# --- PLY ---------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4",
    "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
    "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}  # fmt: skip


def write_ply(path, vertices, faces=None, colors=None, normals=None, binary: bool = False) -> None:
    """Vertices (N, 3) with optional uint8 colours (N, 3), normals and triangle faces (M, 3)."""
    v = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    cols = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    fields = [v[:, 0], v[:, 1], v[:, 2]]
    if normals is not None:
        nrm = np.asarray(normals, dtype=np.float32).reshape(-1, 3)
        cols += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
        fields += [nrm[:, 0], nrm[:, 1], nrm[:, 2]]
    if colors is not None:
        c = np.asarray(colors)
        if c.dtype != np.uint8:
            c = np.clip(np.round(c * 255.0), 0, 255).astype(np.uint8)
        cols += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        fields += [c[:, 0], c[:, 1], c[:, 2]]
    f_arr = None if faces is None else np.asarray(faces, dtype=np.int32).reshape(-1, 3)

    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(v)}"]
    names = {"<f4": "float", "u1": "uchar"}
    header += [f"property {names[t]} {n}" for n, t in cols]
    if f_arr is not None:
        header += [f"element face {len(f_arr)}", "property list uchar int vertex_indices"]
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        if binary:
            rec = np.empty(len(v), dtype=cols)
            for (n, _), col in zip(cols, fields):
                rec[n] = col
            fh.write(rec.tobytes())
            if f_arr is not None:
                frec = np.empty(len(f_arr), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                frec["n"] = 3
                frec["i"] = f_arr
                fh.write(frec.tobytes())
        else:
            lines = []
            for i in range(len(v)):
                parts = []
                for (_, t), col in zip(cols, fields):
                    parts.append(f"{col[i]:.9g}" if t == "<f4" else str(int(col[i])))
                lines.append(" ".join(parts))
            if f_arr is not None:
                lines += [f"3 {a} {b} {c}" for a, b, c in f_arr]
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode())


def read_ply(path) -> dict[str, np.ndarray]:
    """Read vertex properties and triangle faces; returns a dict with ``vertices`` and optional
    ``colors`` (uint8), ``normals``, ``faces``."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode().splitlines()
    fmt = None
    elements = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt}")

    out: dict[str, np.ndarray] = {}
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
        for name, count, props in elements:
            if name == "vertex":
                k = len(props)
                vals = np.array([t.decode() for t in tokens[pos : pos + k * count]]).reshape(count, k)
                pos += k * count
                # parse through the declared type so float32 text round-trips exactly
                table = {p[0]: vals[:, i].astype(p[1]).astype(np.float64) for i, p in enumerate(props)}
                _collect_vertex(out, table)
            elif name == "face":
                faces = []
                for _ in range(count):
                    n = int(tokens[pos])
                    faces.append([int(t) for t in tokens[pos + 1 : pos + 1 + n]])
                    pos += 1 + n
                out["faces"] = _triangulate(faces)
            else:
                raise FormatError(f"{path}: unsupported element {name}")
    else:
        off = body_start
        for name, count, props in elements:
            if name == "vertex":
                dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                rec = np.frombuffer(data, dtype=dt, count=count, offset=off)
                off += dt.itemsize * count
                _collect_vertex(out, {n: rec[n].astype(np.float64) for n in rec.dtype.names})
            elif name == "face":
                _, _, ct, it = props[0]
                ct, it = np.dtype("<" + ct), np.dtype("<" + it)
                faces = []
                for _ in range(count):
                    n = int(np.frombuffer(data, ct, 1, off)[0])
                    off += ct.itemsize
                    faces.append(np.frombuffer(data, it, n, off).tolist())
                    off += it.itemsize * n
                out["faces"] = _triangulate(faces)
            else:
                raise FormatError(f"{path}: unsupported element {name}")
    return out


def _collect_vertex(out, table):
    out["vertices"] = np.stack([table["x"], table["y"], table["z"]], 1)
    if "nx" in table:
        out["normals"] = np.stack([table["nx"], table["ny"], table["nz"]], 1)
    if "red" in table:
        out["colors"] = np.stack([table["red"], table["green"], table["blue"]], 1).astype(np.uint8)


def _triangulate(faces) -> np.ndarray:
    tris = []
    for f in faces:
        for i in range(1, len(f) - 1):
            tris.append((f[0], f[i], f[i + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)
