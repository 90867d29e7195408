import numpy as np
import pytest
import torch
from conftest import camera, random_gaussians, random_surfels
from gradcheck import NonSmooth, finite_difference_check
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import naive_render_2d, naive_render_3d

from dualsplat.fileio import read_fmap, write_fmap
from dualsplat.geometry import SH_C0
from dualsplat.primitives import GaussianSet, ParameterCorruptionError, SurfelSet
from dualsplat.splatting import (
    ALPHA_MAX,
    EMPTY_DEPTH,
    REFLECT_BETA_ALPHA,
    UsageError,
    backward_2d,
    backward_3d,
    render,
    render_2d,
    render_3d,
)

T = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))  # noqa: E731


def gaussians(means, colors, opacity, beta=-200.0, scale=0.2):
    n = len(means)
    sh = np.zeros((n, 3, 1))
    sh[:, :, 0] = (np.asarray(colors) - 0.5) / SH_C0
    op = np.log(np.asarray(opacity)) - np.log1p(-np.asarray(opacity))
    return GaussianSet(
        {
            "mean": T(means),
            "log_scale": T(np.full((n, 3), np.log(scale))),
            "rotation": T(np.tile([1.0, 0, 0, 0], (n, 1))),
            "logit_opacity_tran": T(op),
            "sh_tran": T(sh),
            "logit_opacity_ref": T(np.zeros(n)),
            "logit_beta": T(np.full(n, beta)),
            "sh_ref": T(np.zeros((n, 3, 1))),
        }
    )


def surfels(centers, opacity, scale=0.3, color=(0.5, 0.5, 0.5)):
    n = len(centers)
    sh = np.zeros((n, 3, 1))
    sh[:, :, 0] = (np.asarray(color) - 0.5) / SH_C0
    op = np.log(np.asarray(opacity)) - np.log1p(-np.asarray(opacity))
    return SurfelSet(
        {
            "center": T(centers),
            "log_scale": T(np.full((n, 2), np.log(scale))),
            "rotation": T(np.tile([1.0, 0, 0, 0], (n, 1))),
            "logit_opacity": T(op),
            "sh": T(sh),
        }
    )


def on_pixel_center(cam, z_world):
    """World point at camera depth ``z`` that projects exactly onto the centre of pixel (8, 8)."""
    depth = z_world - cam.center[2]
    return [0.5 * depth / cam.fx, 0.5 * depth / cam.fy, z_world]


class TestRender3D:
    cam = camera(16)

    def test_single_opaque_gaussian(self):
        c = np.array([0.9, 0.2, 0.4])
        g = gaussians([on_pixel_center(self.cam, 0.0)], [c], [1 - 1e-13])
        out = render_3d(g, self.cam)
        np.testing.assert_allclose(out.color[8, 8].numpy(), ALPHA_MAX * c, atol=1e-9)
        assert float(out.confidence[8, 8]) < 1e-80

    def test_two_half_transparent_gaussians(self):
        a, b = np.array([0.8, 0.1, 0.3]), np.array([0.2, 0.6, 1.0])
        g = gaussians([on_pixel_center(self.cam, 0.5), on_pixel_center(self.cam, -0.5)], [b, a], [0.5, 0.5])
        out = render_3d(g, self.cam)
        np.testing.assert_allclose(out.color_tran[8, 8].numpy(), 0.5 * a + 0.25 * b, atol=1e-12)

    def test_matches_naive_blender(self, rng):
        cam = camera(8)
        for _ in range(5):
            g = random_gaussians(rng, 5)
            fast = render_3d(g, cam).numpy()
            slow = naive_render_3d(g, cam)
            for k, v in slow.items():
                assert np.abs(fast[k] - v).max() <= 1e-6, k

    def test_beta_alpha_mode_matches_naive(self, rng):
        cam = camera(8)
        g = random_gaussians(rng, 6)
        fast = render_3d(g, cam, reflect_mode=REFLECT_BETA_ALPHA).numpy()
        slow = naive_render_3d(g, cam, reflect_mode="beta_alpha")
        assert np.abs(fast["confidence"] - slow["confidence"]).max() <= 1e-6
        assert np.abs(fast["color"] - slow["color"]).max() <= 1e-6

    def test_empty_set_renders_background(self):
        g = random_gaussians(np.random.default_rng(0), 3).select(torch.zeros(0, dtype=torch.long))
        out = render_3d(g, self.cam)
        assert float(out.color.abs().sum()) == 0.0
        assert torch.all(out.median_depth == EMPTY_DEPTH)

    def test_everything_behind_camera(self):
        g = gaussians([[0.0, 0.0, -10.0]], [[1.0, 1.0, 1.0]], [0.9])
        out = render_3d(g, self.cam)
        assert float(out.accum_alpha.sum()) == 0.0

    def test_non_finite_parameter_aborts(self, rng):
        g = random_gaussians(rng, 4)
        g.params["sh_ref"][2, 0, 0] = float("inf")
        with pytest.raises(ParameterCorruptionError) as e:
            render_3d(g, self.cam)
        assert e.value.index == 2

    def test_unknown_reflect_mode(self, rng):
        with pytest.raises(ValueError):
            render_3d(random_gaussians(rng, 2), self.cam, reflect_mode="nope")


class TestRender2D:
    cam = camera(16)

    def test_single_fronto_parallel_surfel(self):
        s = surfels([on_pixel_center(self.cam, 0.0)], [1 - 1e-13])
        out = render_2d(s, self.cam)
        assert float(out.depth[8, 8]) == pytest.approx(4.0, abs=1e-6)
        assert float(out.median_depth[8, 8]) == pytest.approx(4.0, abs=1e-6)
        np.testing.assert_allclose(out.normal[8, 8].numpy(), [0, 0, -1.0], atol=1e-12)

    def test_empty_pixel(self):
        s = surfels([[0.0, 0.0, 0.0]], [0.9], scale=0.05)
        out = render_2d(s, self.cam)
        assert float(out.accum_alpha[0, 0]) == 0.0
        assert float(out.median_depth[0, 0]) == EMPTY_DEPTH
        assert float(out.depth[0, 0]) == 0.0

    def test_matches_naive_blender(self, rng):
        cam = camera(8)
        for _ in range(5):
            s = random_surfels(rng, 5)
            fast = render_2d(s, cam).numpy()
            slow = naive_render_2d(s, cam)
            for k, v in slow.items():
                assert np.abs(fast[k] - v).max() <= 1e-6, k

    def test_normals_face_the_camera(self, rng):
        s = random_surfels(rng, 8, facing=3.0)
        out = render_2d(s, self.cam)
        rays_cam = torch.as_tensor(self.cam.rotation) @ self.cam.pixel_rays().reshape(-1, 3).T
        facing = (out.normal.reshape(-1, 3) * rays_cam.T).sum(-1)
        covered = out.accum_alpha.reshape(-1) > 0
        # each surfel normal faces its own centre; blended normals can only be back-facing at grazing pixels
        assert (facing[covered] <= 0.2).float().mean() > 0.95

    def test_surfel_straddling_near_plane(self):
        cam = camera(16, eye=(0.0, 0.0, -1.0))
        s = surfels([[0.0, 0.0, -0.99]], [0.9], scale=1.0)
        s.params["rotation"] = T([[np.cos(0.6), np.sin(0.6), 0.0, 0.0]])
        fast = render_2d(s, cam).numpy()
        slow = naive_render_2d(s, cam)
        for k, v in slow.items():
            assert np.abs(fast[k] - v).max() <= 1e-6, k


class TestBackward:
    cam = camera(16)

    def test_zero_upstream_gives_zero_gradients(self, rng):
        g = random_gaussians(rng, 5)
        out = render_3d(g, self.cam, requires_grad=True)
        grads = backward_3d(g, self.cam, out, {"color": torch.zeros(16, 16, 3, dtype=torch.float64)})
        assert all(float(v.abs().max()) == 0.0 for v in grads.values())
        s = random_surfels(rng, 5)
        out = render_2d(s, self.cam, requires_grad=True)
        zero = {"color": torch.zeros(16, 16, 3), "depth": torch.zeros(16, 16)}
        grads = backward_2d(s, self.cam, out, zero)
        assert all(float(v.abs().max()) == 0.0 for v in grads.values())

    def test_dead_reflection_channel(self, rng):
        g = random_gaussians(rng, 5, beta=-200.0)
        out = render_3d(g, self.cam, requires_grad=True)
        grads = backward_3d(g, self.cam, out, {"color": torch.ones(16, 16, 3, dtype=torch.float64)})
        assert float(grads["sh_ref"].abs().max()) < 1e-60
        assert float(grads["sh_tran"].abs().max()) > 0

    def test_missing_forward_cache(self, rng):
        g = random_gaussians(rng, 3)
        out = render_3d(g, self.cam)
        with pytest.raises(UsageError):
            backward_3d(g, self.cam, out, {"color": torch.ones(16, 16, 3)})

    def test_median_depth_is_not_differentiated(self, rng):
        s = random_surfels(rng, 4)
        out = render_2d(s, self.cam, requires_grad=True)
        grads = backward_2d(s, self.cam, out, {"median_depth": torch.ones(16, 16)})
        assert all(float(v.abs().max()) == 0.0 for v in grads.values())

    def test_fronto_parallel_depth_gradient(self):
        s = surfels([on_pixel_center(self.cam, 0.0)], [0.7], scale=0.2)
        out = render_2d(s, self.cam, requires_grad=True)
        grads = backward_2d(s, self.cam, out, {"depth": torch.ones(16, 16, dtype=torch.float64)})
        # camera looks along +z: to first order each covered pixel's depth moves by
        # sum(w) / (sum(w) + 1e-8) per unit z; the weights themselves shift only at faint edges
        acc = out.accum_alpha.detach()
        expected = float((acc / (acc + 1e-8)).sum())
        assert float(grads["center"][0, 2]) == pytest.approx(expected, rel=1e-5)
        assert float(grads["center"][0, :2].abs().max()) < 1e-3
        res = finite_difference_check(s, self.cam, np.random.default_rng(0))
        assert not res["failures"]

    def test_finite_differences_small_scenes(self, rng):
        cam = camera(12)
        done = {"3d": 0, "2d": 0}
        for _ in range(30):
            if min(done.values()) >= 2:
                break
            for key, make in (("3d", lambda: random_gaussians(rng, 3, sh_degree=1)), ("2d", lambda: random_surfels(rng, 3, sh_degree=1))):
                if done[key] >= 2:
                    continue
                try:
                    res = finite_difference_check(make(), cam, rng)
                except NonSmooth:
                    continue
                assert not res["failures"], res["failures"][:5]
                done[key] += 1
        assert min(done.values()) >= 2


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_composition_identities(self, seed):
        rng = np.random.default_rng(seed)
        cam = camera(12)
        g = random_gaussians(rng, int(rng.integers(1, 9)), sh_degree=1)
        out = render_3d(g, cam)
        lhs = out.color
        rhs = out.color_tran + out.confidence[..., None] * out.color_ref
        assert float((lhs - rhs).abs().max()) <= 1e-6
        assert float(out.confidence.min()) >= 0.0 and float(out.confidence.max()) <= 1.0
        assert float(out.accum_alpha.min()) >= 0.0 and float(out.accum_alpha.max()) <= 1.0
        f = out.fragments
        if f is not None and len(f.prim):
            prod = np.ones(cam.height * cam.width)
            np.multiply.at(prod, f.pixel.numpy(), 1.0 - f.alpha.numpy())
            assert float(np.abs(1.0 - out.accum_alpha.reshape(-1).numpy() - prod).max()) <= 1e-6
            # fragments come front to back inside every pixel
            same = f.pixel[1:] == f.pixel[:-1]
            assert bool((f.depth[1:][same] >= f.depth[:-1][same]).all())

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_confidence_monotone_in_beta_with_alpha_product(self, seed):
        rng = np.random.default_rng(seed)
        cam = camera(10)
        g = random_gaussians(rng, 6, sh_degree=0)
        w0 = render_3d(g, cam, reflect_mode=REFLECT_BETA_ALPHA).confidence
        i = int(rng.integers(0, 6))
        g.params["logit_beta"][i] += float(rng.uniform(0.1, 3.0))
        w1 = render_3d(g, cam, reflect_mode=REFLECT_BETA_ALPHA).confidence
        assert float((w1 - w0).min()) >= -1e-12

    def test_confidence_not_monotone_in_beta_under_literal_product(self):
        # front Gaussian is faint in alpha_ref, back one is strong: raising the front
        # beta shrinks prod(1 - beta_j) for the back one faster than it adds
        cam = camera(16)
        g = gaussians([on_pixel_center(cam, -0.5), on_pixel_center(cam, 0.5)], [[0.5] * 3] * 2, [0.5, 0.5])
        g.params["logit_opacity_ref"] = T([-3.0, 3.0])
        g.params["logit_beta"] = T([-2.0, 2.0])
        w0 = float(render_3d(g, cam).confidence[8, 8])
        g.params["logit_beta"][0] += 2.0
        w1 = float(render_3d(g, cam).confidence[8, 8])
        assert w1 < w0
        g.params["logit_beta"][0] -= 2.0
        v0 = float(render_3d(g, cam, reflect_mode=REFLECT_BETA_ALPHA).confidence[8, 8])
        g.params["logit_beta"][0] += 2.0
        v1 = float(render_3d(g, cam, reflect_mode=REFLECT_BETA_ALPHA).confidence[8, 8])
        assert v1 >= v0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_storage_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        cam = camera(12)
        for pset in (random_gaussians(rng, 7, sh_degree=1), random_surfels(rng, 7, sh_degree=1)):
            perm = torch.as_tensor(rng.permutation(len(pset)))
            a = render(pset, cam).numpy()
            b = render(pset.select(perm), cam).numpy()
            for k in a:
                assert np.abs(a[k] - b[k]).max() <= 1e-6, k

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_depth_is_a_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        cam = camera(12)
        s = random_surfels(rng, 6, sh_degree=0)
        out = render_2d(s, cam)
        f = out.fragments
        if f is None or not len(f.prim):
            return
        n = cam.width * cam.height
        zmin, zmax = np.full(n, np.inf), np.full(n, -np.inf)
        np.minimum.at(zmin, f.pixel.numpy(), f.depth.numpy())
        np.maximum.at(zmax, f.pixel.numpy(), f.depth.numpy())
        ok = out.accum_alpha.reshape(-1).numpy() >= 1e-2
        z = out.depth.reshape(-1).numpy()
        assert np.all(z[ok] <= zmax[ok] + 1e-12)
        assert np.all(z[ok] >= zmin[ok] * (1 - 1e-6))
        med = out.median_depth.reshape(-1)
        valid = med != EMPTY_DEPTH
        assert bool(((med[valid] >= cam.near) & (med[valid] <= cam.far)).all())


def test_float_map_export(tmp_path, rng):
    out = render_2d(random_surfels(rng, 5), camera(16)).numpy()
    write_fmap(tmp_path / "d.fmap", out["depth"])
    write_fmap(tmp_path / "n.fmap", out["normal"])
    assert np.array_equal(read_fmap(tmp_path / "d.fmap"), out["depth"].astype(np.float32))
    assert read_fmap(tmp_path / "n.fmap").shape == (16, 16, 3)
    raw = (tmp_path / "n.fmap").read_bytes()
    assert raw[:4] == b"FMAP" and len(raw) == 16 + 16 * 16 * 3 * 4
