"""Math kernels shared by the Gaussian and surfel branches.

Everything here is a pure function on torch tensors. Functions accept any
array-like and broadcast over leading batch dimensions, so they are usable
both inside the renderer (batched, differentiable) and from tests on single
primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

# Real SH normalisation constants, 3DGS sign convention.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_SH_DEGREE = 3

COV_DILATION = 0.3  # px^2 added to every projected covariance
CUTOFF_SIGMA = 3.0
PARALLEL_EPS = 1e-8


class UnsupportedDegreeError(ValueError):
    pass


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if num_sh_coeffs(degree) != count:
        raise ValueError(f"{count} is not a valid SH coefficient count")
    return degree


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with pixel-unit intrinsics.

    Pixel ``(row, col)`` has its center at image coordinate ``(col + 0.5, row + 0.5)``.
    ``world_to_camera`` maps world points into an OpenCV-style frame (x right,
    y down, z forward).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "world_to_camera", w2c)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        rot = w2c[:3, :3]
        if (
            not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6)
            or abs(np.linalg.det(rot) - 1.0) > 1e-6
        ):
            raise ValueError("world_to_camera rotation block is not a proper rotation")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def intrinsics_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def pixel_rays(self, dtype=torch.float64):
        """World-space unit ray directions for every pixel center, shape (H, W, 3)."""
        cols = torch.arange(self.width, dtype=dtype) + 0.5
        rows = torch.arange(self.height, dtype=dtype) + 0.5
        yy, xx = torch.meshgrid(rows, cols, indexing="ij")
        d_cam = torch.stack(
            [(xx - self.cx) / self.fx, (yy - self.cy) / self.fy, torch.ones_like(xx)], dim=-1
        )
        d_cam = d_cam / torch.linalg.norm(d_cam, dim=-1, keepdim=True)
        rot = torch.as_tensor(self.rotation, dtype=dtype)
        return d_cam @ rot  # R^T d for row vectors

    @staticmethod
    def look_at(eye, target, up, fx, fy, width, height, near=0.01, far=100.0) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        return Camera(fx, fy, width / 2.0, height / 2.0, width, height, w2c, near, far)


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Real SH basis values ``(..., (degree+1)^2)`` for unit directions ``(..., 3)``."""
    if degree < 0 or degree > MAX_SH_DEGREE:
        raise UnsupportedDegreeError(f"SH degree {degree} not in [0, {MAX_SH_DEGREE}]")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, SH_C0)]
    if degree > 0:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree > 2:
        out += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return torch.stack(out, dim=-1)


def eval_sh_raw(coeffs, view_dir) -> torch.Tensor:
    """Linear part of :func:`eval_sh` (no offset, no clamp)."""
    coeffs = _as_tensor(coeffs)
    view_dir = _as_tensor(view_dir, coeffs.dtype)
    degree = sh_degree_from_count(coeffs.shape[-1])
    basis = sh_basis(view_dir, degree)
    return (coeffs * basis.unsqueeze(-2)).sum(-1)


def eval_sh(coeffs, view_dir) -> torch.Tensor:
    """RGB from SH coefficients of shape ``(..., 3, K)`` along ``view_dir`` ``(..., 3)``.

    Returns ``max(sum_k c_k Y_k(dir) + 0.5, 0)`` per channel.
    """
    return torch.clamp_min(eval_sh_raw(coeffs, view_dir) + 0.5, 0.0)


def rgb_to_sh_dc(rgb):
    """DC coefficient that reproduces ``rgb`` under :func:`eval_sh`."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def quat_to_rotmat(quat) -> torch.Tensor:
    """Rotation matrices from ``(w, x, y, z)`` quaternions; renormalises first."""
    q = _as_tensor(quat)
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]  # fmt: skip
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def covariance_3d(scale, quat) -> torch.Tensor:
    scale = _as_tensor(scale)
    rot = quat_to_rotmat(_as_tensor(quat, scale.dtype))
    m = rot * scale.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


@dataclass
class Projection:
    mean2d: torch.Tensor  # (..., 2) pixels
    cov2d: torch.Tensor  # (..., 2, 2)
    depth: torch.Tensor  # (...,) camera z
    visible: torch.Tensor  # (...,) bool, False = culled behind near plane


def project_gaussian(mean, scale, quat, cam: Camera, dilation: float = COV_DILATION) -> Projection:
    """EWA projection of 3D Gaussians to screen space.

    Gaussians whose mean is not beyond ``cam.near`` are flagged in ``visible``
    rather than raising; their ``cov2d`` is still finite (depth is clamped).
    """
    mean = _as_tensor(mean)
    dtype = mean.dtype
    rot_w2c = torch.as_tensor(cam.rotation, dtype=dtype)
    t_w2c = torch.as_tensor(cam.translation, dtype=dtype)
    p = mean @ rot_w2c.T + t_w2c
    depth = p[..., 2]
    visible = depth > cam.near
    z = torch.where(visible, depth, torch.full_like(depth, cam.near))
    x, y = p[..., 0], p[..., 1]
    mean2d = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], dim=-1)
    zeros = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([cam.fx / z, zeros, -cam.fx * x / (z * z)], -1),
            torch.stack([zeros, cam.fy / z, -cam.fy * y / (z * z)], -1),
        ],
        dim=-2,
    )
    cov3d = covariance_3d(_as_tensor(scale, dtype), _as_tensor(quat, dtype))
    jw = jac @ rot_w2c
    cov2d = jw @ cov3d @ jw.transpose(-1, -2)
    cov2d = cov2d + dilation * torch.eye(2, dtype=dtype)
    return Projection(mean2d, cov2d, depth, visible)


@dataclass
class SurfelHit:
    u: torch.Tensor
    v: torch.Tensor
    depth: torch.Tensor
    gauss: torch.Tensor
    hit: torch.Tensor  # bool


def surfel_frame(quat):
    """Tangent axes and normal (columns of the rotation) for surfel quaternions."""
    rot = quat_to_rotmat(quat)
    return rot[..., :, 0], rot[..., :, 1], rot[..., :, 2]


def intersect_surfel(origin, direction, center, tangent_u, tangent_v, scale_u, scale_v, cam: Camera):
    """Ray/surfel-plane intersection.

    ``(u, v)`` are tangent-plane coordinates divided by the surfel scales, so
    ``gauss = exp(-(u^2 + v^2) / 2)``. ``hit`` is False for rays parallel to
    the plane, hits behind the origin, or hits closer than ``cam.near``.
    """
    origin = _as_tensor(origin)
    dtype = origin.dtype
    direction, center, tangent_u, tangent_v = (
        _as_tensor(a, dtype) for a in (direction, center, tangent_u, tangent_v)
    )
    scale_u, scale_v = _as_tensor(scale_u, dtype), _as_tensor(scale_v, dtype)
    normal = torch.linalg.cross(tangent_u, tangent_v, dim=-1)
    denom = (normal * direction).sum(-1)
    parallel = denom.abs() < PARALLEL_EPS
    safe = torch.where(parallel, torch.ones_like(denom), denom)
    t = (normal * (center - origin)).sum(-1) / safe
    point = origin + t.unsqueeze(-1) * direction
    offset = point - center
    u = (offset * tangent_u).sum(-1) / scale_u
    v = (offset * tangent_v).sum(-1) / scale_v
    rot = torch.as_tensor(cam.rotation, dtype=dtype)
    depth = point @ rot[2] + float(cam.translation[2])
    gauss = torch.exp(-0.5 * (u * u + v * v))
    hit = ~parallel & (t > 0) & (depth > cam.near)
    return SurfelHit(u, v, depth, gauss, hit)
