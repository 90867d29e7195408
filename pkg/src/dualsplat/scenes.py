"""Datasets on disk, analytic synthetic scenes and image-quality metrics.

Dataset directory layout::

    images/<name>.png          8-bit colour
    masks/<name>.png           optional foreground masks
    cameras.json               {"views": [{file, fx, fy, cx, cy, w, h, world_to_camera[16], ...}]}
    points.ply                 optional initial point cloud (with colours)
    gt/mesh.ply                optional ground-truth mesh
    gt/transmitted/<name>.fmap optional reflection-free images (float32)
    gt/depth/<name>.fmap       optional z-depth maps, 0 = background
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .fileio import quantize, read_fmap, read_ply, read_png, write_fmap, write_ply, write_png
from .geometry import Camera
from .meshing import TriangleMesh, box_mesh, icosphere

PSNR_CAP = 99.0


class DatasetError(ValueError):
    pass


@dataclass
class View:
    name: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    camera: Camera
    mask: np.ndarray | None = None  # (H, W) bool
    split: str = "train"


@dataclass
class Dataset:
    views: list[View]
    points: np.ndarray | None = None
    point_colors: np.ndarray | None = None
    gt_mesh: TriangleMesh | None = None
    gt_transmitted: dict[str, np.ndarray] = field(default_factory=dict)
    gt_depth: dict[str, np.ndarray] = field(default_factory=dict)
    extent: float | None = None

    def __post_init__(self):
        if not self.views:
            raise DatasetError("dataset has no views")
        shapes = {v.image.shape for v in self.views}
        if len(shapes) != 1:
            raise DatasetError(f"views differ in resolution: {sorted(shapes)}")
        names = [v.name for v in self.views]
        if len(set(names)) != len(names):
            raise DatasetError("duplicate view names")

    @property
    def train(self) -> list[View]:
        return [v for v in self.views if v.split == "train"]

    @property
    def test(self) -> list[View]:
        return [v for v in self.views if v.split == "test"]

    def scene_extent(self) -> float:
        if self.extent:
            return float(self.extent)
        if self.points is not None and len(self.points) > 1:
            return float(np.linalg.norm(self.points.max(0) - self.points.min(0)))
        centers = np.stack([v.camera.center for v in self.views])
        return float(np.linalg.norm(centers.max(0) - centers.min(0))) or 1.0


# --- loading ---------------------------------------------------------------

_CAM_KEYS = ("file", "fx", "fy", "cx", "cy", "w", "h", "world_to_camera")


def _camera_from_json(entry: dict, where: str) -> Camera:
    missing = [k for k in _CAM_KEYS if k not in entry]
    if missing:
        raise DatasetError(f"{where}: missing keys {missing}")
    mat = entry["world_to_camera"]
    if not isinstance(mat, list) or len(mat) != 16:
        n = len(mat) if isinstance(mat, list) else type(mat).__name__
        raise DatasetError(f"{where}: world_to_camera must have 16 floats, got {n}")
    try:
        return Camera(
            float(entry["fx"]), float(entry["fy"]), float(entry["cx"]), float(entry["cy"]),
            int(entry["w"]), int(entry["h"]), np.array(mat, dtype=np.float64).reshape(4, 4),
            float(entry.get("near", 0.01)), float(entry.get("far", 100.0)),
        )  # fmt: skip
    except (TypeError, ValueError) as e:
        raise DatasetError(f"{where}: {e}") from None


def camera_to_json(name: str, cam: Camera, split: str = "train") -> dict:
    return {
        "file": name, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "w": cam.width, "h": cam.height,
        "world_to_camera": [float(x) for x in cam.world_to_camera.reshape(-1)],
        "near": cam.near, "far": cam.far, "split": split,
    }  # fmt: skip


def load_cameras(path) -> list[tuple[str, Camera, str]]:
    try:
        meta = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed JSON ({e})") from None
    entries = meta.get("views") if isinstance(meta, dict) else meta
    if not isinstance(entries, list):
        raise DatasetError(f"{path}: expected a list of views")
    out = []
    for i, e in enumerate(entries):
        where = f"{path} view {i} ({e.get('file', '?') if isinstance(e, dict) else '?'})"
        if not isinstance(e, dict):
            raise DatasetError(f"{where}: not an object")
        out.append((e["file"] if "file" in e else "", _camera_from_json(e, where), e.get("split", "train")))
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise DatasetError(f"{root}: missing cameras.json")
    cams = load_cameras(cam_file)
    listed = {f for f, _, _ in cams}
    img_dir = root / "images"
    for p in sorted(img_dir.glob("*.png")) if img_dir.exists() else []:
        if p.name not in listed:
            raise DatasetError(f"image {p.name} has no camera in cameras.json")
    meta = json.loads(cam_file.read_text())
    extent = meta.get("extent") if isinstance(meta, dict) else None

    views, gt_tran, gt_depth = [], {}, {}
    for file, cam, split in cams:
        img_path = img_dir / file
        if not img_path.exists():
            raise DatasetError(f"camera entry references missing image {file}")
        img = read_png(img_path)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"{file}: image is {img.shape[1]}x{img.shape[0]} but camera says {cam.width}x{cam.height}")
        stem = Path(file).stem
        mask = None
        mpath = root / "masks" / f"{stem}.png"
        if mpath.exists():
            m = read_png(mpath)
            mask = (m if m.ndim == 2 else m[..., 0]) > 0.5
        views.append(View(stem, img, cam, mask, split))
        for sub, store in (("transmitted", gt_tran), ("depth", gt_depth)):
            fp = root / "gt" / sub / f"{stem}.fmap"
            if fp.exists():
                store[stem] = read_fmap(fp)

    points = colors = None
    if (root / "points.ply").exists():
        ply = read_ply(root / "points.ply")
        points = ply["vertices"]
        colors = ply["colors"] / 255.0 if "colors" in ply else np.full_like(points, 0.5)
    mesh = TriangleMesh.load_ply(root / "gt" / "mesh.ply") if (root / "gt" / "mesh.ply").exists() else None
    return Dataset(views, points, colors, mesh, gt_tran, gt_depth, extent)


def save_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    for sub in ("images", "masks", "gt/transmitted", "gt/depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for v in ds.views:
        write_png(root / "images" / f"{v.name}.png", v.image)
        if v.mask is not None:
            write_png(root / "masks" / f"{v.name}.png", v.mask.astype(np.float64))
        entries.append(camera_to_json(f"{v.name}.png", v.camera, v.split))
        if v.name in ds.gt_transmitted:
            write_fmap(root / "gt" / "transmitted" / f"{v.name}.fmap", ds.gt_transmitted[v.name])
        if v.name in ds.gt_depth:
            write_fmap(root / "gt" / "depth" / f"{v.name}.fmap", ds.gt_depth[v.name])
    meta = {"views": entries}
    if ds.extent:
        meta["extent"] = ds.extent
    (root / "cameras.json").write_text(json.dumps(meta, indent=1))
    if ds.points is not None:
        write_ply(root / "points.ply", ds.points, colors=ds.point_colors)
    if ds.gt_mesh is not None:
        ds.gt_mesh.save_ply(root / "gt" / "mesh.ply", binary=True)


# --- synthetic scenes ------------------------------------------------------


@dataclass
class SyntheticSceneSpec:
    shape: str = "sphere"  # sphere | box | composite
    texture: str = "smooth"  # smooth | checker | constant
    lobe_direction: tuple[float, float, float] = (0.4, -0.7, -0.6)
    sharpness: float = 30.0
    strength: float = 0.0
    views: int = 32
    resolution: int = 64
    seed: int = 0
    n_points: int = 2000
    camera_distance: float = 4.0
    fov_deg: float = 40.0
    test_every: int = 8

    def __post_init__(self):
        if self.shape not in ("sphere", "box", "composite"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.texture not in ("smooth", "checker", "constant"):
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.strength < 0 or self.sharpness <= 0:
            raise ValueError("specular strength must be >= 0 and sharpness > 0")
        if self.views < 1 or self.resolution < 1 or self.n_points < 1:
            raise ValueError("views, resolution and n_points must be positive")
        if self.camera_distance <= self.bounding_radius:
            raise ValueError("cameras must sit outside the object")

    @property
    def bounding_radius(self) -> float:
        return {"sphere": 1.0, "box": 0.75 * 3**0.5, "composite": 1.0}[self.shape]

    @property
    def extent(self) -> float:
        return 2.0 * self.bounding_radius


PRESETS = {
    "sphere_default": SyntheticSceneSpec(),
    "sphere_specular": SyntheticSceneSpec(strength=0.5),
    "sphere_small": SyntheticSceneSpec(views=12, resolution=32, n_points=600),
    "box_default": SyntheticSceneSpec(shape="box"),
    "composite_default": SyntheticSceneSpec(shape="composite", strength=0.3),
}

_DIFFUSE_LIGHT = np.array([0.3, -0.8, -0.5]) / np.linalg.norm([0.3, -0.8, -0.5])
_BOX_HALF = 0.75
_COMPOSITE_PARTS = ((np.array([-0.35, 0.0, 0.0]), 0.6), (np.array([0.45, 0.0, 0.0]), 0.4))


def _intersect_sphere(o, d, c, r):
    oc = o - c
    b = (oc * d).sum(-1)
    disc = b * b - ((oc * oc).sum(-1) - r * r)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    hit = (disc >= 0) & (t > 1e-9)
    p = o + t[..., None] * d
    n = (p - c) / r
    return np.where(hit, t, np.inf), n


def _intersect_box(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (-half - o) * inv
        tb = (half - o) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    t_near = tmin.max(-1)
    t_far = tmax.min(-1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    axis = tmin.argmax(-1)
    p = o + t_near[..., None] * d
    n = np.zeros_like(p)
    np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(p, axis[..., None], -1)), -1)
    return np.where(hit, t_near, np.inf), n


def trace(spec: SyntheticSceneSpec, origins, dirs):
    """Nearest analytic hit along rays; returns (t, points, normals, hit)."""
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
    d = np.asarray(dirs, dtype=np.float64)
    if spec.shape == "sphere":
        t, n = _intersect_sphere(o, d, np.zeros(3), 1.0)
    elif spec.shape == "box":
        t, n = _intersect_box(o, d, _BOX_HALF)
    else:
        t, n = np.full(d.shape[:-1], np.inf), np.zeros(d.shape)
        for c, r in _COMPOSITE_PARTS:
            ti, ni = _intersect_sphere(o, d, c, r)
            closer = ti < t
            t = np.where(closer, ti, t)
            n = np.where(closer[..., None], ni, n)
    hit = np.isfinite(t)
    p = o + np.where(hit, t, 0.0)[..., None] * d
    return t, p, n, hit


def albedo(spec: SyntheticSceneSpec, p: np.ndarray) -> np.ndarray:
    if spec.texture == "constant":
        return np.broadcast_to(np.array([0.7, 0.5, 0.3]), p.shape).copy()
    if spec.texture == "checker":
        k = np.floor(p * 4.0).sum(-1).astype(np.int64) % 2
        return np.where(k[..., None] == 0, np.array([0.8, 0.3, 0.2]), np.array([0.2, 0.5, 0.8]))
    return np.stack(
        [
            0.55 + 0.25 * np.sin(2.0 * p[..., 0] + 0.5),
            0.5 + 0.25 * np.sin(2.5 * p[..., 1] + 1.0),
            0.45 + 0.25 * np.cos(1.8 * p[..., 2] - 0.3),
        ],
        -1,
    )


def shade(spec: SyntheticSceneSpec, p, n, d):
    """(full, transmitted) colours at hit points ``p`` with normals ``n`` seen along ``d``."""
    lam = np.clip((n * _DIFFUSE_LIGHT).sum(-1), 0.0, None)
    transmitted = albedo(spec, p) * (0.45 + 0.55 * lam)[..., None]
    lobe = np.asarray(spec.lobe_direction, dtype=np.float64)
    lobe = lobe / np.linalg.norm(lobe)
    r = d - 2.0 * (d * n).sum(-1, keepdims=True) * n
    spec_term = spec.strength * np.clip((r * lobe).sum(-1), 0.0, None) ** spec.sharpness
    full = np.clip(transmitted + spec_term[..., None], 0.0, 1.0)
    return full, transmitted


def view_cameras(spec: SyntheticSceneSpec) -> list[Camera]:
    """Cameras on a Fibonacci sphere looking at the origin."""
    n = spec.views
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azim = np.pi * (1 + 5**0.5) * i
    rng = np.random.default_rng(spec.seed)
    azim = azim + rng.uniform(0, 2 * np.pi)
    eyes = spec.camera_distance * np.stack(
        [np.sin(polar) * np.cos(azim), np.sin(polar) * np.sin(azim), np.cos(polar)], 1
    )
    f = spec.resolution / (2.0 * np.tan(np.radians(spec.fov_deg) / 2.0))
    near = 0.05
    far = spec.camera_distance + 2.0 * spec.bounding_radius + 1.0
    return [
        Camera.look_at(e, [0, 0, 0], [0, 0, 1], f, f, spec.resolution, spec.resolution, near, far)
        for e in eyes
    ]


def render_view(spec: SyntheticSceneSpec, cam: Camera):
    """Analytic (full, transmitted, depth, mask) for one camera; depth is camera z, 0 off-object."""
    dirs = cam.pixel_rays().numpy()
    t, p, n, hit = trace(spec, cam.center, dirs)
    full, tran = shade(spec, p, n, dirs)
    full = np.where(hit[..., None], full, 0.0)
    tran = np.where(hit[..., None], tran, 0.0)
    depth = np.where(hit, (p - cam.center) @ cam.rotation[2], 0.0)
    return full, tran, depth, hit


def gt_mesh(spec: SyntheticSceneSpec) -> TriangleMesh:
    if spec.shape == "sphere":
        return icosphere(1.0, 5)
    if spec.shape == "box":
        return box_mesh(_BOX_HALF, divisions=32)
    parts = [icosphere(r, 5, c) for c, r in _COMPOSITE_PARTS]
    # keep only the outer surface: drop triangles inside the other sphere
    keep_v, keep_f = [], []
    offset = 0
    for k, m in enumerate(parts):
        oc, orad = _COMPOSITE_PARTS[1 - k]
        cent = m.vertices[m.faces].mean(1)
        outside = np.linalg.norm(cent - oc, axis=1) > orad
        keep_v.append(m.vertices)
        keep_f.append(m.faces[outside] + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(keep_v), np.concatenate(keep_f))


def sample_surface_points(spec: SyntheticSceneSpec, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    mesh = gt_mesh(spec)
    pts, nrm = mesh.sample(n, int(rng.integers(2**31)))
    if spec.shape in ("sphere",):
        nrm = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    _, tran = shade(spec, pts, nrm, -nrm)
    pts = pts + rng.normal(scale=0.01 * spec.extent, size=pts.shape)
    return pts, tran


def build_synthetic(spec: SyntheticSceneSpec) -> Dataset:
    """In-memory synthetic dataset, already quantised exactly as it is stored on disk."""
    rng = np.random.default_rng(spec.seed)
    views, tran_gt, depth_gt = [], {}, {}
    for i, cam in enumerate(view_cameras(spec)):
        full, tran, depth, mask = render_view(spec, cam)
        name = f"view_{i:03d}"
        split = "test" if spec.test_every and i % spec.test_every == spec.test_every - 1 else "train"
        views.append(View(name, quantize(full), cam, mask, split))
        tran_gt[name] = tran.astype(np.float32)
        depth_gt[name] = depth.astype(np.float32)
    pts, cols = sample_surface_points(spec, spec.n_points, rng)
    pts = pts.astype(np.float32).astype(np.float64)
    cols = np.clip(np.round(cols * 255.0), 0, 255) / 255.0
    mesh = gt_mesh(spec)
    mesh = TriangleMesh(mesh.vertices.astype(np.float32).astype(np.float64), mesh.faces)
    return Dataset(views, pts, cols, mesh, tran_gt, depth_gt, spec.extent)


def generate_synthetic(spec: SyntheticSceneSpec, out_dir) -> Dataset:
    """Write a synthetic dataset to ``out_dir`` and return it."""
    ds = build_synthetic(spec)
    save_dataset(ds, out_dir)
    (Path(out_dir) / "scene.json").write_text(json.dumps(asdict(spec), indent=1))
    return ds


# --- image metrics ---------------------------------------------------------


def _pair(img, ref):
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(img, ref) -> float:
    """PSNR in dB for images in [0, 1]; identical images give ``PSNR_CAP``."""
    a, b = _pair(img, ref)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(img, ref) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), same kernel as the training loss."""
    a, b = _pair(img, ref)
    with torch.no_grad():
        return float(losses.ssim(torch.as_tensor(a), torch.as_tensor(b)))
