import numpy as np
import pytest
import torch

from dualsplat.geometry import Camera, num_sh_coeffs
from dualsplat.primitives import GaussianSet, SurfelSet

torch.set_num_threads(1)


def camera(size=16, eye=(0.0, 0.0, -4.0), target=(0.0, 0.0, 0.0), fov_deg=40.0, width=None, height=None):
    w = width or size
    h = height or size
    f = 0.5 * w / np.tan(np.radians(fov_deg) / 2)
    return Camera.look_at(eye, target, (0.0, -1.0, 0.0), f, f, w, h)


def random_quat(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_gaussians(rng, n, sh_degree=3, spread=0.8, scale=(0.08, 0.3), beta=None, dtype=torch.float64):
    k = num_sh_coeffs(sh_degree)
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=dtype)  # noqa: E731
    return GaussianSet(
        {
            "mean": t(rng.uniform(-spread, spread, (n, 3))),
            "log_scale": t(np.log(rng.uniform(*scale, (n, 3)))),
            "rotation": t(random_quat(rng, n)),
            "logit_opacity_tran": t(rng.uniform(-1.5, 2.0, n)),
            "sh_tran": t(rng.normal(0, 0.25, (n, 3, k))),
            "logit_opacity_ref": t(rng.uniform(-1.5, 2.0, n)),
            "logit_beta": t(rng.uniform(-2.0, 2.0, n) if beta is None else np.full(n, beta)),
            "sh_ref": t(rng.normal(0, 0.25, (n, 3, k))),
        }
    )


def random_surfels(rng, n, sh_degree=3, spread=0.8, scale=(0.15, 0.4), facing=0.4, dtype=torch.float64):
    """Surfels whose normals lie within ``facing`` radians-ish of the -z axis (towards a camera at -z)."""
    k = num_sh_coeffs(sh_degree)
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=dtype)  # noqa: E731
    tilt = rng.normal(0, facing, (n, 4))
    tilt[:, 0] = 1.0
    q = tilt / np.linalg.norm(tilt, axis=1, keepdims=True)
    return SurfelSet(
        {
            "center": t(rng.uniform(-spread, spread, (n, 3))),
            "log_scale": t(np.log(rng.uniform(*scale, (n, 2)))),
            "rotation": t(q),
            "logit_opacity": t(rng.uniform(-1.5, 2.0, n)),
            "sh": t(rng.normal(0, 0.25, (n, 3, k))),
        }
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
