"""Training objectives for both branches and their mutual supervision."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import Camera

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class EmptyNormalWarning(UserWarning):
    pass


@dataclass
class LossWeights:
    l1: float = 0.8  # L1 vs D-SSIM balance
    trans_tv: float = 0.1
    normal: float = 0.05
    normal_tv: float = 0.05
    depth_tv: float = 0.05
    mutual: float = 0.8  # transmitted-image vs GT balance for the surfel branch
    gamma_fg: float = 1.0
    gamma_bg: float = 0.1
    w_2d: float = 0.5
    w_3d: float = 0.5
    w_depth_mutual: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")
        for k in ("l1", "mutual"):
            if getattr(self, k) > 1:
                raise ValueError(f"loss weight {k} must lie in [0, 1]")


@dataclass
class LossReport:
    terms: dict[str, float] = field(default_factory=dict)
    L_2D: float = 0.0
    L_3D: float = 0.0
    L_Z: float = 0.0
    L_total: float = 0.0
    iteration: int = 0
    active: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _symmetric_index(n: int, pad: int) -> torch.Tensor:
    idx = np.arange(-pad, n + pad)
    period = 2 * n
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - 1 - idx, idx)
    return torch.as_tensor(idx)


def _blur(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    """Separable blur of (C, H, W) with symmetric (edge-repeating) padding."""
    c, h, w = x.shape
    pad = len(window) // 2
    x = x.index_select(1, _symmetric_index(h, pad)).index_select(2, _symmetric_index(w, pad))
    k = window.to(x.dtype)
    x = F.conv2d(x[:, None], k.view(1, 1, -1, 1))
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    return x[:, 0]


def ssim_map(img: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM of (H, W) or (H, W, C) images in [0, 1]."""
    _check_pair(img, ref)
    if img.shape[0] < SSIM_WINDOW or img.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {tuple(img.shape[:2])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if img.dim() == 2:
        img, ref = img[..., None], ref[..., None]
    x = img.permute(2, 0, 1)
    y = ref.permute(2, 0, 1)
    win = gaussian_window(dtype=img.dtype)
    mu_x, mu_y = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mu_x**2
    syy = _blur(y * y, win) - mu_y**2
    sxy = _blur(x * y, win) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return (num / den).permute(1, 2, 0)


def ssim(img: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return ssim_map(img, ref).mean()


def render_loss(img: torch.Tensor, target: torch.Tensor, l1_weight: float = 0.8) -> torch.Tensor:
    """``l1_weight * L1 + (1 - l1_weight) * (1 - SSIM) / 2``."""
    _check_pair(img, target)
    loss = l1_weight * (img - target).abs().mean()
    if l1_weight < 1.0:
        loss = loss + (1.0 - l1_weight) * (1.0 - ssim(img, target)) / 2.0
    return loss


def tv_loss(x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Anisotropic total variation of an (H, W) or (H, W, C) map.

    Mean absolute forward difference along each image axis, summed over the
    two axes. With ``valid`` (H, W) only differences between two valid pixels
    count. Axes of length 1 contribute nothing.
    """
    if x.dim() == 2:
        x = x[..., None]
    total = x.new_zeros(())
    for axis in (1, 0):
        if x.shape[axis] < 2:
            continue
        diff = (x.narrow(axis, 1, x.shape[axis] - 1) - x.narrow(axis, 0, x.shape[axis] - 1)).abs()
        if valid is None:
            total = total + diff.mean()
        else:
            v = (valid.narrow(axis, 1, x.shape[axis] - 1) & valid.narrow(axis, 0, x.shape[axis] - 1)).to(x.dtype)
            count = v.sum() * x.shape[2]
            if count > 0:
                total = total + (diff * v[..., None]).sum() / count
    return total


def depth_to_points(depth: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Camera-frame points (H, W, 3) for a z-depth map."""
    h, w = depth.shape
    cols = torch.arange(w, dtype=depth.dtype) + 0.5
    rows = torch.arange(h, dtype=depth.dtype) + 0.5
    yy, xx = torch.meshgrid(rows, cols, indexing="ij")
    rays = torch.stack([(xx - cam.cx) / cam.fx, (yy - cam.cy) / cam.fy, torch.ones_like(xx)], -1)
    return rays * depth[..., None]


def _axis_gradient(p: torch.Tensor, axis: int) -> torch.Tensor:
    """Central differences inside, one-sided at the two borders."""
    n = p.shape[axis]
    if n < 2:
        return torch.zeros_like(p)
    fwd = p.narrow(axis, 1, n - 1) - p.narrow(axis, 0, n - 1)
    first = fwd.narrow(axis, 0, 1)
    last = fwd.narrow(axis, n - 2, 1)
    if n == 2:
        return torch.cat([first, last], axis)
    central = (p.narrow(axis, 2, n - 2) - p.narrow(axis, 0, n - 2)) / 2
    return torch.cat([first, central, last], axis)


def depth_normals(depth: torch.Tensor, cam: Camera, valid: torch.Tensor | None = None):
    """Normals from a depth map as the normalised cross product of its point-map gradients.

    Returns ``(normals, valid)`` in camera coordinates, oriented towards the
    camera. A pixel is valid when it and every neighbour entering its
    differences carry depth and the cross product is non-degenerate.
    """
    if valid is None:
        valid = depth > 0
    pts = depth_to_points(depth, cam)
    dx = _axis_gradient(pts, 1)
    dy = _axis_gradient(pts, 0)
    n = torch.linalg.cross(dx, dy, dim=-1)
    norm = torch.linalg.norm(n, dim=-1, keepdim=True)
    with torch.no_grad():
        ok = valid.clone()
        pv = F.pad(valid[None, None].float(), (1, 1, 1, 1), value=1.0)[0, 0] > 0
        for dr, dc in ((0, 1), (2, 1), (1, 0), (1, 2)):
            ok &= pv[dr : dr + valid.shape[0], dc : dc + valid.shape[1]]
        ok &= norm[..., 0] > 1e-12
    n = n / torch.where(ok[..., None], norm, torch.ones_like(norm))
    facing = torch.where((n * pts).sum(-1, keepdim=True) > 0, -1.0, 1.0).to(n.dtype)
    n = torch.where(ok[..., None], n * facing, torch.zeros_like(n))
    return n, ok


def gamma_map(mask: torch.Tensor | None, shape, weights: LossWeights, dtype=torch.float64) -> torch.Tensor:
    if mask is None:
        return torch.full(shape, weights.gamma_fg, dtype=dtype)
    mask = torch.as_tensor(mask).to(torch.bool)
    return torch.where(mask, weights.gamma_fg, weights.gamma_bg).to(dtype)


def normal_loss(
    accum: torch.Tensor,
    normal_weighted: torch.Tensor,
    depth_normal: torch.Tensor,
    valid: torch.Tensor,
    gamma: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over valid pixels of ``gamma * sum_i w_i (1 - n_i . N)``.

    The per-fragment sum is evaluated from the per-pixel totals
    ``sum_i w_i`` (``accum``) and ``sum_i w_i n_i`` (``normal_weighted``).
    """
    count = valid.sum()
    if count == 0:
        warnings.warn("no pixel has a defined depth normal; normal loss is 0", EmptyNormalWarning, stacklevel=2)
        return accum.new_zeros(())
    per_pixel = accum - (normal_weighted * depth_normal).sum(-1)
    if gamma is not None:
        per_pixel = per_pixel * gamma
    return (per_pixel * valid.to(per_pixel.dtype)).sum() / count


def loss_3d(render, gt_img: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    return render_loss(render.color, gt_img, weights.l1) + weights.trans_tv * tv_loss(render.color_tran)


def _surfel_geometry_terms(render, cam, mask, weights, tv_valid=None):
    dn, valid = depth_normals(render.depth, cam, render.accum_alpha > 0)
    gamma = gamma_map(mask, render.depth.shape, weights, render.depth.dtype)
    ln = normal_loss(render.accum_alpha, render.normal_weighted, dn, valid, gamma)
    return ln, tv_loss(render.normal, tv_valid), tv_loss(render.depth, tv_valid)


def loss_2d_warmup(render, gt_img, mask, cam: Camera, weights: LossWeights, parts: dict | None = None):
    """Surfel warm-up objective: render + normal(gamma-weighted, TV) + depth TV."""
    lr = render_loss(render.color, gt_img, weights.l1)
    ln, lntv, ldtv = _surfel_geometry_terms(render, cam, mask, weights)
    if parts is not None:
        parts.update(render_2d=lr, normal=ln, normal_tv=lntv, depth_tv=ldtv)
    return lr + weights.normal * (ln + weights.normal_tv * lntv) + weights.depth_tv * ldtv


def mutual_render_loss(img, transmitted, gt_img, weights: LossWeights, detach: bool = True):
    """``mutual * L(img, transmitted) + (1 - mutual) * L(img, gt)``; ``transmitted`` is a fixed target by default."""
    if detach:
        transmitted = transmitted.detach()
    loss = weights.mutual * render_loss(img, transmitted, weights.l1)
    if weights.mutual < 1.0:
        loss = loss + (1.0 - weights.mutual) * render_loss(img, gt_img, weights.l1)
    return loss


def loss_2d_mutual(
    render,
    transmitted,
    coverage,
    gt_img,
    mask,
    cam: Camera,
    weights: LossWeights,
    detach: bool = True,
    parts: dict | None = None,
):
    """Surfel objective during the mutual stage.

    Rendering supervision mixes the Gaussian branch's transmitted image with
    GT; depth and normal TV are restricted to pixels the transmitted image
    covers (``coverage``).
    """
    lr = mutual_render_loss(render.color, transmitted, gt_img, weights, detach)
    ln, lntv, ldtv = _surfel_geometry_terms(render, cam, mask, weights, coverage)
    if parts is not None:
        parts.update(render_m=lr, normal=ln, normal_tv_m=lntv, depth_tv_m=ldtv)
    return lr + weights.normal * (ln + weights.normal_tv * lntv) + weights.depth_tv * ldtv


def depth_mutual_loss(z_target, z_pred, valid, gamma=None, detach: bool = True):
    """Gamma-weighted mean squared depth difference over ``valid`` pixels."""
    _check_pair(z_target, z_pred)
    if detach:
        z_target = z_target.detach()
    count = valid.sum()
    if count == 0:
        return z_pred.new_zeros(())
    sq = (z_pred - z_target) ** 2
    if gamma is not None:
        sq = sq * gamma
    return (sq * valid.to(sq.dtype)).sum() / count


def total_mutual_loss(l_2d, l_3d, l_z, weights: LossWeights):
    return weights.w_2d * l_2d + weights.w_3d * l_3d + weights.w_depth_mutual * l_z
