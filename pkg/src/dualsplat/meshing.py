"""TSDF fusion, mesh extraction and surface-reconstruction metrics."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .fileio import read_ply, write_ply
from .geometry import Camera

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 256
DEFAULT_TRUNC_VOXELS = 4.0


class EmptyMeshError(ValueError):
    pass


class FrustumMissWarning(UserWarning):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_normals(self, unit: bool = True) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if unit:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        acc = np.zeros_like(self.vertices)
        fn = self.face_normals(unit=False)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], fn)
        return acc / np.maximum(np.linalg.norm(acc, axis=1, keepdims=True), 1e-300)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset), self.faces.copy(), self.colors)

    def sample(self, n: int, seed: int = 0):
        """Area-uniform surface samples and the unit normal of the face each lies on."""
        if self.is_empty:
            raise EmptyMeshError("cannot sample an empty mesh")
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        face = rng.choice(len(self.faces), size=n, p=areas / areas.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        w = np.stack([1 - s, s * (1 - r2), s * r2], 1)
        pts = (self.vertices[self.faces[face]] * w[:, :, None]).sum(1)
        return pts, self.face_normals()[face]

    def save_ply(self, path, binary: bool = False) -> None:
        write_ply(path, self.vertices, self.faces, colors=self.colors, binary=binary)

    @classmethod
    def load_ply(cls, path) -> "TriangleMesh":
        d = read_ply(path)
        colors = d.get("colors")
        return cls(d["vertices"], d.get("faces", np.zeros((0, 3))), None if colors is None else colors / 255.0)


def icosphere(radius: float = 1.0, subdivisions: int = 4, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
        (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]  # fmt: skip
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
        (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
        (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]  # fmt: skip
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(v) * radius + np.asarray(center), np.array(faces))


def box_mesh(half_size, center=(0.0, 0.0, 0.0), divisions: int = 16) -> TriangleMesh:
    """Axis-aligned box surface, each face split into ``divisions^2`` quads."""
    half = np.broadcast_to(np.asarray(half_size, dtype=np.float64), (3,))
    g = np.linspace(-1.0, 1.0, divisions + 1)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    verts, faces = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a, b = [i for i in range(3) if i != axis]
            p = np.zeros((divisions + 1, divisions + 1, 3))
            p[..., axis] = sign
            p[..., a], p[..., b] = uu, vv
            base = sum(len(x) for x in verts)
            verts.append(p.reshape(-1, 3))
            idx = np.arange((divisions + 1) ** 2).reshape(divisions + 1, divisions + 1) + base
            q = np.stack([idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]], -1).reshape(-1, 4)
            tri = np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])
            if (sign > 0) != (axis == 1):
                tri = tri[:, ::-1]
            faces.append(tri)
    v = np.concatenate(verts) * half + np.asarray(center)
    return TriangleMesh(v, np.concatenate(faces))


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    trunc: float = 0.0
    tsdf: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)
    color: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if min(self.dims) < 2:
            raise ValueError("every volume dimension must be >= 2")
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        if self.trunc <= 0:
            self.trunc = DEFAULT_TRUNC_VOXELS * self.voxel_size
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float32)
            self.weight = np.zeros(self.dims, dtype=np.float32)
            self.color = np.zeros(self.dims + (3,), dtype=np.float32)

    @classmethod
    def around(cls, center, extent: float, resolution: int = DEFAULT_RESOLUTION, trunc_voxels=DEFAULT_TRUNC_VOXELS):
        """Cube of side ``extent`` centred at ``center`` with ``resolution`` voxels per side."""
        voxel = extent / resolution
        origin = np.asarray(center, dtype=np.float64) - extent / 2.0 + voxel / 2.0
        return cls(origin, voxel, (resolution,) * 3, trunc_voxels * voxel)

    def voxel_centers(self, i: slice = slice(None)) -> np.ndarray:
        axes = [np.arange(d)[s] for d, s in zip(self.dims, (i, slice(None), slice(None)))]
        gi, gj, gk = np.meshgrid(*axes, indexing="ij")
        return self.origin + self.voxel_size * np.stack([gi, gj, gk], -1)


def _sample_depth(depth_map, u, v, row, col):
    """Bilinear depth between pixel centres; nearest pixel where a neighbour is empty or off-image."""
    h, w = depth_map.shape
    x, y = u - 0.5, v - 0.5
    c0, r0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    fx, fy = x - c0, y - r0
    ok = (c0 >= 0) & (c0 + 1 < w) & (r0 >= 0) & (r0 + 1 < h)
    out = depth_map[row, col].copy()
    c0, r0, fx, fy = c0[ok], r0[ok], fx[ok], fy[ok]
    q = [depth_map[r0, c0], depth_map[r0, c0 + 1], depth_map[r0 + 1, c0], depth_map[r0 + 1, c0 + 1]]
    full = (q[0] > 0) & (q[1] > 0) & (q[2] > 0) & (q[3] > 0)
    bil = (q[0] * (1 - fx) + q[1] * fx) * (1 - fy) + (q[2] * (1 - fx) + q[3] * fx) * fy
    idx = np.flatnonzero(ok)[full]
    out[idx] = bil[full]
    return out


def tsdf_integrate(vol: TsdfVolume, depth_map, color_map, cam: Camera, slab: int = 16) -> TsdfVolume:
    """Fuse one depth view (empty pixels are 0) into ``vol`` in place.

    Each voxel projecting to a pixel with depth ``d`` receives
    ``sdf = d - z_voxel``; voxels with ``sdf > -trunc`` get their tsdf,
    weight and colour updated by a unit-weight running average of
    ``clip(sdf / trunc, -1, 1)``.
    """
    depth_map = np.asarray(depth_map, dtype=np.float64)
    color_map = np.asarray(color_map, dtype=np.float64)
    h, w = depth_map.shape
    rot, t = cam.rotation, cam.translation
    touched = 0
    for i0 in range(0, vol.dims[0], slab):
        sl = slice(i0, min(i0 + slab, vol.dims[0]))
        p = vol.voxel_centers(sl) @ rot.T + t
        z = p[..., 2]
        front = z > cam.near
        zs = np.where(front, z, 1.0)
        u = cam.fx * p[..., 0] / zs + cam.cx
        v = cam.fy * p[..., 1] / zs + cam.cy
        col = np.floor(u).astype(np.int64)
        row = np.floor(v).astype(np.int64)
        inside = front & (col >= 0) & (col < w) & (row >= 0) & (row < h)
        if not inside.any():
            continue
        touched += int(inside.sum())
        d = np.zeros_like(z)
        d[inside] = _sample_depth(depth_map, u[inside], v[inside], row[inside], col[inside])
        sdf = d - z
        upd = inside & (d > 0) & (sdf > -vol.trunc)
        if not upd.any():
            continue
        tv, wv, cv = vol.tsdf[sl], vol.weight[sl], vol.color[sl]
        new = np.clip(sdf[upd] / vol.trunc, -1.0, 1.0)
        w_old = wv[upd].astype(np.float64)
        tv[upd] = (tv[upd] * w_old + new) / (w_old + 1.0)
        rgb = color_map[row[upd], col[upd]]
        cv[upd] = (cv[upd] * w_old[:, None] + rgb) / (w_old[:, None] + 1.0)
        wv[upd] = w_old + 1.0
    if touched == 0:
        warnings.warn("volume does not intersect the camera frustum; nothing integrated", FrustumMissWarning, stacklevel=2)
    return vol


def extract_mesh(vol: TsdfVolume) -> TriangleMesh:
    """Zero level set of the TSDF with vertex colours sampled from the colour volume.

    Cells with any unobserved (zero-weight) corner produce no triangles.
    """
    observed = vol.weight > 0
    field_ = np.where(observed, vol.tsdf, 1.0).astype(np.float64)
    if not (observed.any() and (field_[observed] < 0).any() and (field_[observed] > 0).any()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    try:
        verts, faces, _, _ = marching_cubes(field_, level=0.0, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    cell_ok = observed.copy()
    for axis in range(3):
        shifted = np.ones_like(cell_ok)
        idx = [slice(None)] * 3
        idx[axis] = slice(0, -1)
        src = [slice(None)] * 3
        src[axis] = slice(1, None)
        shifted[tuple(idx)] = cell_ok[tuple(src)]
        idx[axis] = slice(-1, None)
        shifted[tuple(idx)] = False
        cell_ok &= shifted
    cent = verts[faces].mean(1)
    cell = np.clip(np.floor(cent).astype(np.int64), 0, np.array(vol.dims) - 2)
    keep = cell_ok[cell[:, 0], cell[:, 1], cell[:, 2]]
    faces = faces[keep]
    used, inverse = np.unique(faces, return_inverse=True)
    verts = verts[used]
    faces = inverse.reshape(-1, 3)
    colors = np.stack([map_coordinates(vol.color[..., c], verts.T, order=1, mode="nearest") for c in range(3)], 1)
    mesh = TriangleMesh(vol.origin + verts * vol.voxel_size, faces, np.clip(colors, 0.0, 1.0))
    area = mesh.face_areas()
    if (area <= 0).any():
        mesh = TriangleMesh(mesh.vertices, mesh.faces[area > 0], mesh.colors)
    return mesh


def _check_meshes(a: TriangleMesh, b: TriangleMesh):
    if a.is_empty or b.is_empty:
        raise EmptyMeshError("metric undefined for an empty mesh")


def nearest(query: np.ndarray, ref: np.ndarray):
    """Nearest neighbour distance and index of each query point among ``ref``."""
    return cKDTree(ref).query(query, k=1)


def chamfer_distance(mesh_a: TriangleMesh, mesh_b: TriangleMesh, n_samples: int = 10000, seed: int = 0) -> float:
    """Mean of the two directed mean nearest-sample distances between surface samples."""
    _check_meshes(mesh_a, mesh_b)
    pa, _ = mesh_a.sample(n_samples, seed)
    pb, _ = mesh_b.sample(n_samples, seed)
    da, _ = nearest(pa, pb)
    db, _ = nearest(pb, pa)
    return float(0.5 * (da.mean() + db.mean()))


def normal_consistency(mesh_a: TriangleMesh, mesh_b: TriangleMesh, n_samples: int = 10000, seed: int = 0) -> float:
    """Mean absolute cosine between each sample's normal and its nearest sample's normal, both ways."""
    _check_meshes(mesh_a, mesh_b)
    pa, na = mesh_a.sample(n_samples, seed)
    pb, nb = mesh_b.sample(n_samples, seed)
    _, ia = nearest(pa, pb)
    _, ib = nearest(pb, pa)
    ca = np.abs((na * nb[ia]).sum(1))
    cb = np.abs((nb * na[ib]).sum(1))
    return float(0.5 * (ca.mean() + cb.mean()))


def mesh_metrics(mesh: TriangleMesh, reference: TriangleMesh, n_samples: int = 10000, seed: int = 0) -> dict:
    cd = chamfer_distance(mesh, reference, n_samples, seed)
    nc = normal_consistency(mesh, reference, n_samples, seed)
    return {"cd": cd, "cd_x1e3": cd * 1e3, "nc": nc, "nc_x1e2": nc * 1e2, "n_samples": n_samples, "seed": seed}


def write_metrics(path, metrics: dict) -> None:
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
