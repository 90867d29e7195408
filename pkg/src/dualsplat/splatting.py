"""Differentiable rasterisation of Gaussians (with reflection layer) and surfels.

Both renderers build an explicit fragment list: every (primitive, pixel) pair
whose pixel center lies within the primitive's 3-sigma footprint. Candidate
pairs come from a screen-space bounding box per primitive and are then tested
exactly, so the result is identical to evaluating every primitive at every
pixel. Fragments are sorted front to back per pixel and blended in a padded
``(pixels, max_fragments)`` layout where ``cumprod`` yields the transmittance.

Gradients come from torch autograd over that forward graph; see
:func:`backward_3d` / :func:`backward_2d`.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import (
    CUTOFF_SIGMA,
    Camera,
    eval_sh,
    intersect_surfel,
    project_gaussian,
    quat_to_rotmat,
)
from .primitives import GaussianSet, PrimitiveSet, SurfelSet, activate

DEPTH_EPS = 1e-8
ALPHA_MAX = 0.999
EMPTY_DEPTH = 0.0  # median-depth sentinel; never a valid depth since near > 0
_CUTOFF_POWER = -0.5 * CUTOFF_SIGMA**2

REFLECT_BETA = "beta"  # W uses prod_j (1 - beta_j)
REFLECT_BETA_ALPHA = "beta_alpha"  # W uses prod_j (1 - beta_j * alpha_ref_j)


class UsageError(RuntimeError):
    pass


@dataclass
class SortedFragmentList:
    pixel: torch.Tensor  # (F,) flat pixel index, nondecreasing
    prim: torch.Tensor  # (F,) primitive index
    slot: torch.Tensor  # (F,) position within its pixel's list
    depth: torch.Tensor  # (F,) camera z used for sorting
    alpha: torch.Tensor  # (F,) blending alpha (transmitted alpha for Gaussians)
    counts: torch.Tensor  # (H*W,) fragments per pixel
    max_len: int

    def __len__(self):
        return int(self.pixel.shape[0])


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    color_tran: torch.Tensor  # (H, W, 3)
    color_ref: torch.Tensor  # (H, W, 3)
    confidence: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W) expected depth, 0 on empty pixels
    median_depth: torch.Tensor  # (H, W), EMPTY_DEPTH on pixels never reaching 0.5
    normal: torch.Tensor  # (H, W, 3) camera frame, unit or zero
    accum_alpha: torch.Tensor  # (H, W)
    normal_weighted: torch.Tensor  # (H, W, 3) sum_i w_i n_i before renormalising
    fragments: SortedFragmentList | None = None
    means2d: torch.Tensor | None = None  # (N, 2) screen positions, grad retained
    leaves: dict[str, torch.Tensor] | None = field(default=None, repr=False)

    MAPS = ("color", "color_tran", "color_ref", "confidence", "depth", "normal", "accum_alpha")

    @property
    def shape(self):
        return tuple(self.accum_alpha.shape)

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).detach().cpu().numpy() for k in self.MAPS + ("median_depth", "normal_weighted")}


def _pixel_centers(cam: Camera, dtype):
    cols = torch.arange(cam.width, dtype=dtype) + 0.5
    rows = torch.arange(cam.height, dtype=dtype) + 0.5
    yy, xx = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


def _bbox_pairs(lo: np.ndarray, hi: np.ndarray, cam: Camera, keep: np.ndarray, order: np.ndarray | None = None):
    """All (prim, pixel) pairs whose pixel center lies in [lo, hi] (image coords).

    Pairs are grouped by primitive, visiting primitives in ``order`` (default: index order).
    """
    x0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, cam.width).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0] - 0.5) + 1, 0, cam.width).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, cam.height).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1] - 0.5) + 1, 0, cam.height).astype(np.int64)
    w = np.where(keep, np.maximum(x1 - x0, 0), 0)
    h = np.where(keep, np.maximum(y1 - y0, 0), 0)
    ids = np.arange(len(w)) if order is None else order
    n = (w * h)[ids]
    total = int(n.sum())
    prim = np.repeat(ids, n)
    local = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    ww = np.maximum(w[prim], 1)
    px = x0[prim] + local % ww
    py = y0[prim] + local // ww
    return torch.as_tensor(prim), torch.as_tensor(py * cam.width + px)


def _sort_fragments(pixel, n_pix, key=None):
    """Stable order by (pixel, key); without ``key`` the incoming order is the secondary key."""
    pix = pixel.numpy()
    order = None
    if key is not None:
        order = np.argsort(key, kind="stable")
        pix = pix[order]
    # stable sort on 16-bit keys is a radix sort in numpy
    sub = np.argsort(pix.astype(np.uint16 if n_pix <= 1 << 16 else np.int64), kind="stable")
    order = torch.as_tensor(sub if order is None else order[sub])
    pixel = pixel[order]
    counts = torch.bincount(pixel, minlength=n_pix)
    starts = torch.cumsum(counts, 0) - counts
    slot = torch.arange(len(pixel)) - starts[pixel]
    max_len = int(counts.max()) if len(pixel) else 1
    return order, pixel, slot, counts, max(max_len, 1)


def _transmittance(alpha, pixel, counts):
    """Per-pixel products of ``1 - alpha`` for every column of ``alpha`` (F, k).

    Fragments are sorted by pixel, so each pixel is a contiguous segment and the
    products are differences of one global log-space cumsum (float64).
    Returns exclusive and inclusive log transmittance, both (F, k) float64.
    """
    la = torch.log1p(-alpha.to(torch.float64))
    csum = torch.cumsum(la, 0)
    excl = torch.cat([torch.zeros_like(csum[:1]), csum[:-1]])
    first = (torch.cumsum(counts, 0) - counts).index_select(0, pixel)
    base = excl.index_select(0, first)
    return excl - base, csum - base


def _median_depth(log_excl, log_incl, depth, pixel, n_pix):
    """Depth of the first fragment whose inclusive transmittance drops to 0.5 or below."""
    with torch.no_grad():
        half = math.log(0.5)
        first = (log_incl <= half) & (log_excl > half)
        med = torch.full((n_pix,), EMPTY_DEPTH, dtype=depth.dtype)
        med[pixel[first]] = depth.detach()[first]
        return med


def _scatter(values, pixel, n_pix):
    shape = (n_pix,) + tuple(values.shape[1:])
    return torch.zeros(shape, dtype=values.dtype).index_add(0, pixel, values)


def _leaves(pset: PrimitiveSet, requires_grad: bool) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone().requires_grad_(requires_grad) for k, v in pset.params.items()}


def _empty_output(cam: Camera, dtype, leaves=None, means2d=None) -> RenderOutput:
    h, w = cam.height, cam.width
    z = lambda *s: torch.zeros((h, w) + s, dtype=dtype)  # noqa: E731
    return RenderOutput(
        color=z(3), color_tran=z(3), color_ref=z(3), confidence=z(), depth=z(),
        median_depth=torch.full((h, w), EMPTY_DEPTH, dtype=dtype), normal=z(3),
        accum_alpha=z(), normal_weighted=z(3), means2d=means2d, leaves=leaves,
    )  # fmt: skip


def _gaussian_power(mean2d, conic, pix_xy):
    d = pix_xy - mean2d
    return -0.5 * (conic[:, 0] * d[:, 0] ** 2 + 2 * conic[:, 1] * d[:, 0] * d[:, 1] + conic[:, 2] * d[:, 1] ** 2)


def render_3d(
    gset: GaussianSet,
    cam: Camera,
    requires_grad: bool = False,
    reflect_mode: str = REFLECT_BETA,
) -> RenderOutput:
    """Render transmitted, reflected and combined colour plus depth for Gaussians.

    Per pixel, with fragments sorted front to back by the camera depth of their
    means (ties by primitive index)::

        C_tran = sum_i c_tran_i a_tran_i prod_{j<i} (1 - a_tran_j)
        C_ref  = sum_i c_ref_i  a_ref_i  prod_{j<i} (1 - a_ref_j)
        W      = sum_i beta_i a_ref_i prod_{j<i} (1 - beta_j)
        C      = C_tran + W * C_ref

    With ``reflect_mode="beta_alpha"`` the product in ``W`` runs over
    ``1 - beta_j a_ref_j`` instead. Depth is the transmitted-alpha weighted
    mean of fragment depths.
    """
    if reflect_mode not in (REFLECT_BETA, REFLECT_BETA_ALPHA):
        raise ValueError(f"unknown reflect_mode {reflect_mode!r}")
    leaves = _leaves(gset, requires_grad)
    act = activate(leaves)
    dtype = gset.dtype
    n_pix = cam.width * cam.height
    kept_leaves = leaves if requires_grad else None
    if len(gset) == 0:
        return _empty_output(cam, dtype, kept_leaves)

    proj = project_gaussian(act["mean"], act["scale"], act["rotation"], cam)
    if requires_grad:
        proj.mean2d.retain_grad()
    cam_center = torch.as_tensor(cam.center, dtype=dtype)
    dirs = act["mean"] - cam_center
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    c_tran = eval_sh(act["sh_tran"], dirs)
    c_ref = eval_sh(act["sh_ref"], dirs)
    cov = proj.cov2d
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = torch.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], -1)
    pix_xy = _pixel_centers(cam, dtype)

    with torch.no_grad():
        depth_np = proj.depth.numpy()
        keep = proj.visible.numpy() & (depth_np < cam.far)
        radius = CUTOFF_SIGMA * torch.sqrt(torch.stack([cov[:, 0, 0], cov[:, 1, 1]], -1)).numpy()
        m2d = proj.mean2d.numpy()
        by_depth = np.lexsort((np.arange(len(depth_np)), depth_np))
        prim, pixel = _bbox_pairs(m2d - radius, m2d + radius, cam, keep, by_depth)
        power = _gaussian_power(proj.mean2d[prim], conic[prim], pix_xy[pixel])
        inside = power >= _CUTOFF_POWER
        prim, pixel = prim[inside], pixel[inside]
    if len(prim) == 0:
        return _empty_output(cam, dtype, kept_leaves, proj.mean2d)

    order, pixel, slot, counts, max_len = _sort_fragments(pixel, n_pix)
    prim = prim[order]

    # one gather of everything a fragment needs from its primitive
    feats = torch.cat(
        [
            proj.mean2d, conic,
            torch.stack([act["opacity_tran"], act["opacity_ref"], act["beta"], proj.depth], -1),
            c_tran, c_ref,
        ],
        dim=1,
    ).index_select(0, prim)  # fmt: skip
    f_mean2d, f_conic, f_op_tran, f_op_ref, beta, frag_depth, f_ctran, f_cref = feats.split(
        [2, 3, 1, 1, 1, 1, 3, 3], dim=1
    )
    beta, frag_depth = beta[:, 0], frag_depth[:, 0]
    g = torch.exp(_gaussian_power(f_mean2d, f_conic, pix_xy.index_select(0, pixel)))
    a_tran = torch.clamp_max(f_op_tran[:, 0] * g, ALPHA_MAX)
    a_ref = torch.clamp_max(f_op_ref[:, 0] * g, ALPHA_MAX)
    beta_term = beta if reflect_mode == REFLECT_BETA else beta * a_ref

    log_t, log_incl = _transmittance(torch.stack([a_tran, a_ref, beta_term], 1), pixel, counts)
    t_tran, t_ref, t_beta = torch.exp(log_t).to(dtype).unbind(1)
    w_tran = t_tran * a_tran
    w_ref = t_ref * a_ref
    w_conf = t_beta * beta * a_ref
    sums = _scatter(
        torch.cat(
            [w_tran[:, None] * f_ctran, w_ref[:, None] * f_cref, torch.stack([w_conf, w_tran, w_tran * frag_depth], 1)],
            dim=1,
        ),
        pixel,
        n_pix,
    )
    color_tran, color_ref, conf, accum, depth_sum = sums.split([3, 3, 1, 1, 1], dim=1)
    conf, accum = conf[:, 0], accum[:, 0]
    depth = depth_sum[:, 0] / (accum + DEPTH_EPS)
    color = color_tran + conf[:, None] * color_ref
    median = _median_depth(log_t[:, 0], log_incl[:, 0], frag_depth, pixel, n_pix)

    h, w = cam.height, cam.width
    zeros3 = torch.zeros(h, w, 3, dtype=dtype)
    return RenderOutput(
        color=color.view(h, w, 3),
        color_tran=color_tran.view(h, w, 3),
        color_ref=color_ref.view(h, w, 3),
        confidence=conf.view(h, w),
        depth=depth.view(h, w),
        median_depth=median.view(h, w),
        normal=zeros3,
        accum_alpha=accum.view(h, w),
        normal_weighted=zeros3,
        fragments=SortedFragmentList(pixel, prim, slot, frag_depth.detach(), a_tran.detach(), counts, max_len),
        means2d=proj.mean2d,
        leaves=kept_leaves,
    )


def surfel_screen_bounds(center, tu, tv, scale, cam: Camera):
    """Screen bounding boxes of the 3-sigma rectangles around surfels.

    Returns ``(lo, hi, keep)``. Surfels with a corner at or behind the near
    plane get the full image as their box (still tested exactly per pixel);
    surfels entirely behind it are dropped.
    """
    with torch.no_grad():
        r = CUTOFF_SIGMA * scale
        corners = torch.stack(
            [
                center + sa * r[:, :1] * tu + sb * r[:, 1:] * tv
                for sa in (-1.0, 1.0)
                for sb in (-1.0, 1.0)
            ],
            dim=1,
        ).numpy()
        p = corners @ cam.rotation.T + cam.translation
        z = p[..., 2]
        front = z > cam.near
        zs = np.where(front, z, 1.0)
        sx = cam.fx * p[..., 0] / zs + cam.cx
        sy = cam.fy * p[..., 1] / zs + cam.cy
        lo = np.stack([sx.min(1), sy.min(1)], -1)
        hi = np.stack([sx.max(1), sy.max(1)], -1)
        partial = ~front.all(1)
        lo[partial] = [0.0, 0.0]
        hi[partial] = [cam.width, cam.height]
        keep = front.any(1) & (z.min(1) < cam.far)
        return lo, hi, keep


def render_2d(gset: SurfelSet, cam: Camera, requires_grad: bool = False) -> RenderOutput:
    """Render colour, depth, median depth and normals for surfels.

    Fragments are ray/disk intersections sorted by intersection depth. With
    ``w_i = T_i a_i``::

        Z = sum_i w_i z_i / (sum_i w_i + eps)
        N = normalize(sum_i w_i n_i)

    where ``n_i`` is the surfel normal in camera coordinates, flipped to face
    the camera. Median depth is the depth of the first fragment at which the
    accumulated opacity reaches 0.5.
    """
    leaves = _leaves(gset, requires_grad)
    act = activate(leaves)
    dtype = gset.dtype
    n_pix = cam.width * cam.height
    kept_leaves = leaves if requires_grad else None
    if len(gset) == 0:
        return _empty_output(cam, dtype, kept_leaves)

    rot = quat_to_rotmat(act["rotation"])
    tu, tv, normal = rot[..., 0], rot[..., 1], rot[..., 2]
    center, scale = act["center"], act["scale"]
    cam_center = torch.as_tensor(cam.center, dtype=dtype)
    view = center - cam_center
    dirs = view / torch.linalg.norm(view, dim=-1, keepdim=True)
    color = eval_sh(act["sh"], dirs)
    with torch.no_grad():
        facing = torch.where((normal * view).sum(-1) > 0, -1.0, 1.0).to(dtype)
    rot_w2c = torch.as_tensor(cam.rotation, dtype=dtype)
    normal_cam = (normal * facing[:, None]) @ rot_w2c.T

    p_cam = center @ rot_w2c.T + torch.as_tensor(cam.translation, dtype=dtype)
    zc = torch.clamp_min(p_cam[:, 2], cam.near)
    means2d = torch.stack([cam.fx * p_cam[:, 0] / zc + cam.cx, cam.fy * p_cam[:, 1] / zc + cam.cy], -1)
    if requires_grad:
        # Surfels are rasterised from world-space centres, so the screen position is not on the render path.
        # A zero-valued in-plane offset driven by a leaf copy of it exposes d(loss)/d(screen position)
        # for density control without touching the value or any parameter gradient.
        means2d = means2d.detach().clone().requires_grad_(True)
        delta = means2d - means2d.detach()
        z_over_f = zc.detach()[:, None] / torch.tensor([cam.fx, cam.fy], dtype=dtype)
        offset_cam = torch.cat([delta * z_over_f, torch.zeros_like(delta[:, :1])], 1)
        center = center + offset_cam @ rot_w2c
    rays = cam.pixel_rays(dtype).reshape(-1, 3)

    with torch.no_grad():
        lo, hi, keep = surfel_screen_bounds(center, tu, tv, scale, cam)
        prim, pixel = _bbox_pairs(lo, hi, cam, keep)
        hit = intersect_surfel(
            cam_center, rays[pixel], center[prim], tu[prim], tv[prim],
            scale[prim, 0], scale[prim, 1], cam,
        )  # fmt: skip
        inside = hit.hit & (hit.u**2 + hit.v**2 <= CUTOFF_SIGMA**2) & (hit.depth < cam.far)
        prim, pixel = prim[inside], pixel[inside]
        sort_depth = hit.depth[inside]
    if len(prim) == 0:
        return _empty_output(cam, dtype, kept_leaves, means2d)

    order, pixel, slot, counts, max_len = _sort_fragments(pixel, n_pix, sort_depth.numpy())
    prim = prim[order]

    feats = torch.cat(
        [center, tu, tv, scale, act["opacity"][:, None], color, normal_cam], dim=1
    ).index_select(0, prim)
    f_center, f_tu, f_tv, f_su, f_sv, f_op, f_color, f_normal = feats.split([3, 3, 3, 1, 1, 1, 3, 3], dim=1)
    hit = intersect_surfel(
        cam_center, rays.index_select(0, pixel), f_center, f_tu, f_tv, f_su[:, 0], f_sv[:, 0], cam
    )
    frag_depth = hit.depth
    alpha = torch.clamp_max(f_op[:, 0] * hit.gauss, ALPHA_MAX)
    log_t, log_incl = _transmittance(alpha[:, None], pixel, counts)
    w = torch.exp(log_t[:, 0]).to(dtype) * alpha
    sums = _scatter(
        torch.cat([w[:, None] * f_color, w[:, None] * f_normal, torch.stack([w, w * frag_depth], 1)], 1),
        pixel,
        n_pix,
    )
    rgb, nsum, accum, depth_sum = sums.split([3, 3, 1, 1], dim=1)
    accum = accum[:, 0]
    depth = depth_sum[:, 0] / (accum + DEPTH_EPS)
    norm = torch.linalg.norm(nsum, dim=-1, keepdim=True)
    nonzero = norm > 0
    nmap = torch.where(nonzero, nsum / torch.where(nonzero, norm, torch.ones_like(norm)), nsum)
    median = _median_depth(log_t[:, 0], log_incl[:, 0], frag_depth, pixel, n_pix)

    h, wd = cam.height, cam.width
    zeros3 = torch.zeros(h, wd, 3, dtype=dtype)
    return RenderOutput(
        color=rgb.view(h, wd, 3),
        color_tran=rgb.view(h, wd, 3),
        color_ref=zeros3,
        confidence=torch.zeros(h, wd, dtype=dtype),
        depth=depth.view(h, wd),
        median_depth=median.view(h, wd),
        normal=nmap.view(h, wd, 3),
        accum_alpha=accum.view(h, wd),
        normal_weighted=nsum.view(h, wd, 3),
        fragments=SortedFragmentList(pixel, prim, slot, frag_depth.detach(), alpha.detach(), counts, max_len),
        means2d=means2d,
        leaves=kept_leaves,
    )


def _backward(out: RenderOutput, grad_maps: dict) -> dict[str, torch.Tensor]:
    if out.leaves is None:
        raise UsageError("render was not run with requires_grad=True; no forward cache to differentiate")
    outputs, grads = [], []
    for name, g in grad_maps.items():
        if name == "median_depth":
            continue  # treated as non-differentiable
        t = getattr(out, name)
        if t.requires_grad:
            outputs.append(t)
            grads.append(torch.as_tensor(g, dtype=t.dtype).reshape(t.shape))
    leaves = list(out.leaves.values())
    if not outputs:
        return {k: torch.zeros_like(v) for k, v in out.leaves.items()}
    res = torch.autograd.grad(outputs, leaves, grads, retain_graph=True, allow_unused=True)
    return {k: (torch.zeros_like(v) if r is None else r) for (k, v), r in zip(out.leaves.items(), res)}


def backward_3d(gset: GaussianSet, cam: Camera, out: RenderOutput, grad_maps: dict) -> dict[str, torch.Tensor]:
    """Raw-parameter gradients of ``sum(grad_maps[k] * out.k)`` for a Gaussian render."""
    return _backward(out, grad_maps)


def backward_2d(gset: SurfelSet, cam: Camera, out: RenderOutput, grad_maps: dict) -> dict[str, torch.Tensor]:
    """Raw-parameter gradients for a surfel render; ``median_depth`` contributes nothing."""
    return _backward(out, grad_maps)


def render(pset: PrimitiveSet, cam: Camera, requires_grad: bool = False, **kw) -> RenderOutput:
    if isinstance(pset, GaussianSet):
        return render_3d(pset, cam, requires_grad, **kw)
    return render_2d(pset, cam, requires_grad)
