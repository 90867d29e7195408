"""Held-out image metrics and mesh extraction for trained branches."""

from __future__ import annotations

import numpy as np
import torch

from .geometry import Camera
from .meshing import DEFAULT_RESOLUTION, DEFAULT_TRUNC_VOXELS, TriangleMesh, TsdfVolume, extract_mesh, mesh_metrics, tsdf_integrate
from .primitives import GaussianSet, SurfelSet
from .scenes import Dataset, View, psnr, ssim
from .splatting import render_2d, render_3d


def scene_bounds(ds: Dataset, margin: float = 1.1) -> tuple[np.ndarray, float]:
    """Centre and cube side enclosing the initial points (or the unit-extent cube at the origin)."""
    if ds.points is not None and len(ds.points):
        lo, hi = ds.points.min(0), ds.points.max(0)
        return (lo + hi) / 2.0, float((hi - lo).max()) * margin
    return np.zeros(3), ds.scene_extent() * margin


def fuse_mesh(
    set_2d: SurfelSet,
    set_3d: GaussianSet | None,
    cameras: list[Camera],
    center,
    side: float,
    resolution: int = DEFAULT_RESOLUTION,
    trunc_voxels: float = DEFAULT_TRUNC_VOXELS,
) -> TriangleMesh:
    """TSDF-fuse surfel median depth, coloured by the Gaussian transmitted colour, and extract a mesh."""
    vol = TsdfVolume.around(center, side, resolution, trunc_voxels)
    with torch.no_grad():
        for cam in cameras:
            r2 = render_2d(set_2d, cam)
            color = render_3d(set_3d, cam).color_tran if set_3d is not None else r2.color
            tsdf_integrate(vol, r2.median_depth.double().numpy(), color.double().numpy(), cam)
    return extract_mesh(vol)


def image_metrics(set_3d: GaussianSet, ds: Dataset, views: list[View] | None = None, reflect_mode: str = "beta") -> dict:
    """Mean PSNR/SSIM of full renders on ``views`` (default: the test split).

    When reflection-free ground truth exists, also reports how close the
    transmitted render and the full render each come to it.
    """
    views = ds.test if views is None else views
    if not views:
        raise ValueError("no views to evaluate")
    out = {"psnr": [], "ssim": []}
    tran_keys = ("psnr_tran", "l1_tran", "l1_full_vs_tran")
    has_tran = all(v.name in ds.gt_transmitted for v in views)
    if has_tran:
        out.update({k: [] for k in tran_keys})
    with torch.no_grad():
        for v in views:
            r = render_3d(set_3d, v.camera, reflect_mode=reflect_mode)
            full = r.color.double().clamp(0, 1).numpy()
            out["psnr"].append(psnr(full, v.image))
            out["ssim"].append(ssim(full, v.image))
            if has_tran:
                gt_t = np.asarray(ds.gt_transmitted[v.name], dtype=np.float64)
                tran = r.color_tran.double().clamp(0, 1).numpy()
                out["psnr_tran"].append(psnr(tran, gt_t))
                out["l1_tran"].append(float(np.abs(tran - gt_t).mean()))
                out["l1_full_vs_tran"].append(float(np.abs(full - gt_t).mean()))
    report = {k: float(np.mean(v)) for k, v in out.items()}
    report["n_views"] = len(views)
    return report


def evaluate(
    set_2d: SurfelSet,
    set_3d: GaussianSet,
    ds: Dataset,
    resolution: int = DEFAULT_RESOLUTION,
    trunc_voxels: float = DEFAULT_TRUNC_VOXELS,
    n_samples: int = 10000,
    seed: int = 0,
    reflect_mode: str = "beta",
) -> tuple[dict, TriangleMesh]:
    """Image metrics on the test split plus, if a reference mesh exists, CD and NC of the fused mesh."""
    report = {"images": image_metrics(set_3d, ds, reflect_mode=reflect_mode)}
    center, side = scene_bounds(ds)
    mesh = fuse_mesh(set_2d, set_3d, [v.camera for v in ds.train], center, side, resolution, trunc_voxels)
    report["mesh"] = {"n_vertices": len(mesh.vertices), "n_faces": len(mesh.faces)}
    if ds.gt_mesh is not None and not mesh.is_empty:
        report["mesh"].update(mesh_metrics(mesh, ds.gt_mesh, n_samples, seed))
    return report, mesh
