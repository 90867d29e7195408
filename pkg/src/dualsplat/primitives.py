"""Parameter stores for the Gaussian and surfel branches.

Parameters live in unconstrained "raw" space (logits, log-scales, free
quaternions) so the optimizer never has to project; :func:`activate` maps them
to model space.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import SH_C0, num_sh_coeffs


class ParameterCorruptionError(ValueError):
    def __init__(self, name: str, index: int):
        super().__init__(f"non-finite value in '{name}' of primitive {index}")
        self.name = name
        self.index = index


class EmptyInputError(ValueError):
    pass


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian3D:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    logit_opacity_tran: float
    sh_tran: np.ndarray  # (3, K)
    logit_opacity_ref: float
    logit_beta: float
    sh_ref: np.ndarray  # (3, K)


@dataclass
class Surfel2D:
    center: np.ndarray
    log_scale: np.ndarray  # (u, v)
    rotation: np.ndarray  # tangent_u, tangent_v, normal are its columns
    logit_opacity: float
    sh: np.ndarray  # (3, K)


class PrimitiveSet:
    """Column store of raw parameters plus gradient and Adam buffers.

    Subclasses declare ``fields`` (name -> trailing shape) and ``record``
    (the single-primitive dataclass).
    """

    kind: str = ""
    kind_id: int = -1
    fields: tuple[str, ...] = ()
    record: type = object

    def __init__(self, params: dict[str, torch.Tensor]):
        missing = set(self.fields) - set(params)
        if missing:
            raise ValueError(f"missing parameter columns: {sorted(missing)}")
        n = {int(params[k].shape[0]) for k in self.fields}
        if len(n) != 1:
            raise ValueError("parameter columns have different lengths")
        self.params = {k: torch.as_tensor(params[k]).detach().clone() for k in self.fields}
        self.grads = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.exp_avg = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.step = 0

    def __len__(self) -> int:
        return int(self.params[self.fields[0]].shape[0])

    def __getitem__(self, i: int):
        return self.record(
            **{
                k: (v[i].item() if v.dim() == 1 else v[i].numpy().copy())
                for k, v in self.params.items()
            }
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.params[self.fields[0]].dtype

    @classmethod
    def from_records(cls, records):
        if not records:
            raise EmptyInputError("no primitives")
        cols = {k: [] for k in cls.fields}
        for r in records:
            for k in cls.fields:
                cols[k].append(np.asarray(getattr(r, k), dtype=np.float64))
        return cls({k: torch.as_tensor(np.stack(v)) for k, v in cols.items()})

    def to(self, dtype: torch.dtype) -> "PrimitiveSet":
        out = type(self)({k: v.to(dtype) for k, v in self.params.items()})
        for src, dst in ((self.grads, out.grads), (self.exp_avg, out.exp_avg), (self.exp_avg_sq, out.exp_avg_sq)):
            for k in self.fields:
                dst[k] = src[k].to(dtype)
        out.step = self.step
        return out

    def copy(self) -> "PrimitiveSet":
        return self.to(self.dtype)

    def select(self, index) -> "PrimitiveSet":
        """Subset (or reorder) by boolean mask or integer index; carries optimizer state."""
        index = torch.as_tensor(index)
        out = type(self)({k: v[index] for k, v in self.params.items()})
        for src, dst in ((self.grads, out.grads), (self.exp_avg, out.exp_avg), (self.exp_avg_sq, out.exp_avg_sq)):
            for k in self.fields:
                dst[k] = src[k][index].clone()
        out.step = self.step
        return out

    def append(self, params: dict[str, torch.Tensor]) -> "PrimitiveSet":
        """New set with extra primitives; their gradient and moment buffers start at zero."""
        merged = {k: torch.cat([self.params[k], params[k].to(self.dtype)]) for k in self.fields}
        out = type(self)(merged)
        n_old = len(self)
        for src, dst in ((self.grads, out.grads), (self.exp_avg, out.exp_avg), (self.exp_avg_sq, out.exp_avg_sq)):
            for k in self.fields:
                dst[k][:n_old] = src[k]
        out.step = self.step
        return out

    def zero_grad(self):
        for g in self.grads.values():
            g.zero_()

    def check_finite(self):
        for k, v in self.params.items():
            bad = ~torch.isfinite(v.reshape(len(self), -1)).all(dim=1)
            if bad.any():
                raise ParameterCorruptionError(k, int(torch.nonzero(bad)[0]))

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in self.fields:
            h.update(k.encode())
            h.update(self.params[k].contiguous().numpy().tobytes())
        return h.hexdigest()

    def activate(self) -> dict[str, torch.Tensor]:
        return activate(self.params, type(self))


class GaussianSet(PrimitiveSet):
    kind = "gaussian3d"
    kind_id = 0
    fields = (
        "mean",
        "log_scale",
        "rotation",
        "logit_opacity_tran",
        "sh_tran",
        "logit_opacity_ref",
        "logit_beta",
        "sh_ref",
    )
    record = Gaussian3D


class SurfelSet(PrimitiveSet):
    kind = "surfel2d"
    kind_id = 1
    fields = ("center", "log_scale", "rotation", "logit_opacity", "sh")
    record = Surfel2D


_SIGMOID = {
    "logit_opacity_tran": "opacity_tran",
    "logit_opacity_ref": "opacity_ref",
    "logit_beta": "beta",
    "logit_opacity": "opacity",
}


def activate(raw: dict[str, torch.Tensor], set_type=None) -> dict[str, torch.Tensor]:
    """Map raw parameters to model space.

    Sigmoid on logits, exp on log-scales, unit-normalised quaternions; other
    columns pass through. Raises :class:`ParameterCorruptionError` on any
    non-finite entry.
    """
    out = {}
    for k, v in raw.items():
        flat = v.reshape(v.shape[0], v[:1].numel()) if v.dim() > 0 else v.reshape(1, 1)
        bad = ~torch.isfinite(flat).all(dim=1)
        if bad.any():
            raise ParameterCorruptionError(k, int(torch.nonzero(bad)[0]))
        if k in _SIGMOID:
            out[_SIGMOID[k]] = torch.sigmoid(v)
        elif k == "log_scale":
            out["scale"] = torch.exp(v)
        elif k == "rotation":
            out["rotation"] = v / torch.linalg.norm(v, dim=-1, keepdim=True)
        else:
            out[k] = v
    return out


def inverse_activate(model: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    inv = {v: k for k, v in _SIGMOID.items()}
    out = {}
    for k, v in model.items():
        if k in inv:
            out[inv[k]] = torch.log(v) - torch.log1p(-v)
        elif k == "scale":
            out["log_scale"] = torch.log(v)
        else:
            out[k] = v
    return out


def _knn_scale(points: np.ndarray, k: int = 3, extent: float | None = None) -> np.ndarray:
    n = len(points)
    if extent is None:
        extent = float(np.linalg.norm(points.max(0) - points.min(0))) or 1.0
    if n == 1:
        return np.full(1, 0.01 * extent)
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    scale = dist[:, 1:].mean(axis=1)
    return np.maximum(scale, 1e-7)


def _local_normals(points: np.ndarray, k: int = 8) -> np.ndarray:
    """PCA normals pointing away from the cloud centroid; +z where undetermined."""
    n = len(points)
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    if n < 3:
        return normals
    _, idx = cKDTree(points).query(points, k=min(k, n))
    nb = points[idx] - points[idx].mean(axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(nb, full_matrices=False)
    normals = vt[:, -1, :]
    outward = points - points.mean(axis=0)
    flip = (normals * outward).sum(1) < 0
    normals[flip] *= -1
    return normals


def _quat_from_normal(normals: np.ndarray) -> np.ndarray:
    """Quaternions (w, x, y, z) rotating +z onto each normal."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, normals)
    cos = normals @ z
    q = np.concatenate([(1.0 + cos)[:, None], axis], axis=1)
    anti = (1.0 + cos) < 1e-9
    q[anti] = [0.0, 1.0, 0.0, 0.0]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def init_from_points(
    points,
    colors,
    kind: str = "gaussian3d",
    sh_degree: int = 3,
    sh_degree_ref: int = 3,
    extent: float | None = None,
    opacity: float = 0.1,
    beta: float = 0.01,
    opacity_ref: float = 0.1,
) -> PrimitiveSet:
    """One primitive per point, scaled to the mean distance of its 3 nearest neighbours.

    The reflected channel of Gaussians starts almost inert (small beta) so the
    first iterations behave like plain view-dependent splatting.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise EmptyInputError("init_from_points needs at least one point")
    if len(colors) != n:
        raise ValueError("points and colors differ in length")
    scale = _knn_scale(points, 3, extent)
    sh = np.zeros((n, 3, num_sh_coeffs(sh_degree)))
    sh[:, :, 0] = (colors - 0.5) / SH_C0
    t = torch.as_tensor
    if kind == "gaussian3d":
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return GaussianSet(
            {
                "mean": t(points),
                "log_scale": t(np.log(np.repeat(scale[:, None], 3, axis=1))),
                "rotation": t(rot),
                "logit_opacity_tran": t(np.full(n, logit(opacity))),
                "sh_tran": t(sh),
                "logit_opacity_ref": t(np.full(n, logit(opacity_ref))),
                "logit_beta": t(np.full(n, logit(beta))),
                "sh_ref": t(np.zeros((n, 3, num_sh_coeffs(sh_degree_ref)))),
            }
        )
    if kind == "surfel2d":
        return SurfelSet(
            {
                "center": t(points),
                "log_scale": t(np.log(np.repeat(scale[:, None], 2, axis=1))),
                "rotation": t(_quat_from_normal(_local_normals(points))),
                "logit_opacity": t(np.full(n, logit(opacity))),
                "sh": t(sh),
            }
        )
    raise ValueError(f"unknown primitive kind {kind!r}")


# --- checkpoint format -------------------------------------------------------
#
# header: magic b"DSPLCKPT", u32 version, u32 kind id, u64 count, u32 n_blocks, u64 step
# block:  u16 name length, name (utf-8), u32 column count, u8 dtype code,
#         float data in column-major (Fortran) order of the (count, columns) matrix

CKPT_MAGIC = b"DSPLCKPT"
CKPT_VERSION = 1
_DTYPES = {0: np.float64, 1: np.float32}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_SET_TYPES = {GaussianSet.kind_id: GaussianSet, SurfelSet.kind_id: SurfelSet}


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(pset: PrimitiveSet, path) -> None:
    n = len(pset)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IIQIQ", CKPT_VERSION, pset.kind_id, n, len(pset.fields), pset.step))
        for name in pset.fields:
            arr = pset.params[name].detach().numpy()
            mat = arr.reshape(n, -1)
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<IB", mat.shape[1], _DTYPE_CODES[mat.dtype]))
            f.write(np.asfortranarray(mat).tobytes(order="F"))
            # trailing shape so SH blocks reload as (n, 3, K)
            f.write(struct.pack("<B", arr.ndim - 1))
            f.write(struct.pack(f"<{arr.ndim - 1}I", *arr.shape[1:]))


def load_checkpoint(path) -> PrimitiveSet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version, kind_id, n, n_blocks, step = struct.unpack_from("<IIQIQ", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    if kind_id not in _SET_TYPES:
        raise CheckpointFormatError(f"{path}: unknown primitive kind {kind_id}")
    off = 8 + struct.calcsize("<IIQIQ")
    params = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode()
        off += name_len
        ncols, code = struct.unpack_from("<IB", data, off)
        off += 5
        dtype = np.dtype(_DTYPES[code])
        nbytes = n * ncols * dtype.itemsize
        mat = np.frombuffer(data[off : off + nbytes], dtype=dtype).reshape((n, ncols), order="F")
        off += nbytes
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        params[name] = torch.from_numpy(np.array(mat, order="C").reshape((n, *shape)))
    pset = _SET_TYPES[kind_id](params)
    pset.step = step
    return pset


def export_ply(pset: PrimitiveSet, path) -> None:
    """ASCII PLY of primitive centers with their DC colour, for inspection."""
    if isinstance(pset, GaussianSet):
        xyz, sh = pset.params["mean"], pset.params["sh_tran"]
    else:
        xyz, sh = pset.params["center"], pset.params["sh"]
    rgb = np.clip((sh[:, :, 0].numpy() * SH_C0 + 0.5) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    xyz = xyz.numpy()
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(xyz)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
        for p, c in zip(xyz, rgb):
            f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
