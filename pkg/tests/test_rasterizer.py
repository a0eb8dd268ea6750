import numpy as np
import pytest

from conftest import rel_err
from splatfit.rasterizer import (ALPHA_MAX, Camera, Splats, T_MIN,
                                 load_image_npy, load_image_png, project,
                                 project_backward, render, render_backward,
                                 render_naive, render_throughput_bench,
                                 save_image_npy, save_image_png)


def _identity_camera(fx=100.0, W=128, H=128):
    return Camera(fx, fx, W // 2, H // 2, W, H, np.eye(3), np.zeros(3))


def _random_scene(seed, n, W=64, H=64, sigma_range=(0.7, 2.5)):
    rng = np.random.default_rng(seed)
    return Splats(
        mean=rng.uniform([-3.0, -3.0], [W + 3.0, H + 3.0], size=(n, 2)),
        sigma=rng.uniform(*sigma_range, size=n),
        depth=rng.uniform(0.5, 5.0, size=n),
        color=rng.random((n, 3)),
        point_index=np.arange(n, dtype=np.int64),
        n_points=n,
    )


def _shuffled(splats, seed):
    perm = np.random.default_rng(seed).permutation(len(splats))
    return Splats(splats.mean[perm], splats.sigma[perm], splats.depth[perm],
                  splats.color[perm], splats.point_index[perm], splats.n_points)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_project_on_axis_sigma():
    cam = _identity_camera()
    s = project(np.array([[0.0, 0.0, 2.0]]), np.array([0.02]),
                np.array([[1.0, 0.0, 0.0]]), cam)
    assert len(s) == 1
    assert np.allclose(s.mean[0], [64.0, 64.0])
    assert np.isclose(s.sigma[0], 1.0)  # s * f / z = 0.02 * 100 / 2
    assert np.isclose(s.depth[0], 2.0)


def test_project_drops_points_behind_camera():
    cam = _identity_camera()
    s = project(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 2.0], [0.0, 0.0, 0.0]]),
                np.full(3, 0.02), np.ones((3, 3)) * 0.5, cam)
    assert len(s) == 1
    assert s.point_index[0] == 1


def test_project_depth_scaling_oracle():
    # doubling depth halves sigma and the perspective offset from the center
    cam = _identity_camera()
    pts = np.array([[0.3, 0.2, 2.0], [0.3, 0.2, 4.0]])
    s = project(pts, np.full(2, 0.02), np.ones((2, 3)) * 0.5, cam)
    # direct formula evaluation
    for i, z in enumerate([2.0, 4.0]):
        assert np.isclose(s.mean[i, 0], 100.0 * 0.3 / z + 64.0)
        assert np.isclose(s.mean[i, 1], 100.0 * 0.2 / z + 64.0)
        assert np.isclose(s.sigma[i], 0.02 * 100.0 / z)
    assert np.isclose(s.sigma[0], 2 * s.sigma[1])
    off0 = s.mean[0] - [64.0, 64.0]
    off1 = s.mean[1] - [64.0, 64.0]
    assert np.allclose(off0, 2 * off1)


def test_camera_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(100, 100, 32, 32, 64, 64, np.eye(3) * 1.01, np.zeros(3))
    with pytest.raises(ValueError, match="focal"):
        Camera(-1, 100, 32, 32, 64, 64, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError, match="near"):
        Camera(100, 100, 32, 32, 64, 64, np.eye(3), np.zeros(3), near=5, far=1)


# ---------------------------------------------------------------------------
# forward rendering
# ---------------------------------------------------------------------------

def test_render_zero_splats_is_background():
    s = _random_scene(0, 0)
    out = render(s, (32, 24), background=(0.2, 0.4, 0.6))
    assert np.allclose(out.rgb, [0.2, 0.4, 0.6])
    assert not out.alpha.any()


def test_render_single_splat_at_pixel_center():
    s = Splats(mean=np.array([[20.0, 11.0]]), sigma=np.array([2.0]),
               depth=np.array([1.0]), color=np.array([[0.3, 0.6, 0.9]]),
               point_index=np.array([0]), n_points=1)
    out = render(s, (40, 30), background=(0.0, 0.0, 0.0))
    # d = 0 -> a = min(0.99, 1) = 0.99
    assert np.allclose(out.rgb[11, 20], 0.99 * np.array([0.3, 0.6, 0.9]))
    assert np.isclose(out.alpha[11, 20], 0.99)


def test_render_two_overlapping_splats_hand_series():
    # front red and back blue, both alpha 0.5 at the probe pixel:
    # C = 0.5 red + 0.5 * 0.25 * 2 blue... composited by hand:
    # C = a1 c1 + a2 (1 - a1) c2 = 0.5 red + 0.25 blue
    sigma = 1.5
    d = sigma * np.sqrt(2.0 * np.log(2.0))  # exp(-d^2 / 2 sigma^2) = 0.5
    px, py = 16.0, 16.0
    s = Splats(mean=np.array([[px + d, py], [px + d, py]]),
               sigma=np.array([sigma, sigma]),
               depth=np.array([1.0, 2.0]),
               color=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
               point_index=np.array([0, 1]), n_points=2)
    out = render(s, (32, 32), background=(0.0, 0.0, 0.0))
    assert np.allclose(out.rgb[16, 16], [0.5, 0.0, 0.25], atol=1e-12)


def test_tiled_matches_naive_reference():
    for seed in range(6):
        s = _random_scene(seed, 40 + 60 * seed)
        out = render(s, (64, 64), background=(0.1, 0.2, 0.3), record=False)
        img, alpha = render_naive(s, (64, 64), background=(0.1, 0.2, 0.3))
        assert np.abs(out.rgb - img).max() <= 1e-6
        assert np.abs(out.alpha - alpha).max() <= 1e-6


def test_render_order_invariance_bitwise():
    s = _random_scene(7, 150)
    out1 = render(s, (64, 64), record=False)
    out2 = render(_shuffled(s, 3), (64, 64), record=False)
    assert np.array_equal(out1.rgb, out2.rgb)
    assert np.array_equal(out1.alpha, out2.alpha)


def test_alpha_bounds_and_energy():
    s = _random_scene(8, 300)
    out = render(s, (64, 64), background=(0.0, 0.0, 0.0), record=False)
    assert (out.alpha >= 0).all() and (out.alpha <= 1).all()
    assert out.rgb.max() <= 1.0 + 1e-12  # energy bound on black background


def test_adding_splat_does_not_decrease_alpha():
    s = _random_scene(9, 60)
    out1 = render(s, (64, 64), record=False)
    extra = Splats(
        mean=np.vstack([s.mean, [[32.0, 32.0]]]),
        sigma=np.append(s.sigma, 2.0),
        depth=np.append(s.depth, 0.4),
        color=np.vstack([s.color, [[1.0, 1.0, 1.0]]]),
        point_index=np.arange(len(s) + 1, dtype=np.int64),
        n_points=len(s) + 1,
    )
    out2 = render(extra, (64, 64), record=False)
    # slack of T_MIN: the early exit may freeze transmittance a step earlier
    assert (out2.alpha >= out1.alpha - T_MIN).all()


def test_contributor_records_transmittance_decreasing():
    s = _random_scene(10, 120)
    out = render(s, (48, 48))
    for p in range(0, 48 * 48, 97):
        lo, hi = out.rec_ptr[p], out.rec_ptr[p + 1]
        T = out.rec_T[lo:hi]
        if len(T) > 1:
            assert (np.diff(T) < 0).all()
        if len(T):
            assert T[0] == 1.0


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_zero_gradient():
    s = _random_scene(11, 30)
    out = render(s, (32, 32))
    g = render_backward(out, s, np.zeros((32, 32, 3)))
    assert not g["mean"].any() and not g["sigma"].any() and not g["color"].any()


def test_backward_single_splat_color_is_alpha_times_T():
    s = Splats(mean=np.array([[10.0, 12.0]]), sigma=np.array([1.5]),
               depth=np.array([1.0]), color=np.array([[0.2, 0.5, 0.7]]),
               point_index=np.array([0]), n_points=1)
    out = render(s, (24, 24))
    dL = np.zeros((24, 24, 3))
    dL[12, 10, 0] = 1.0  # L = red channel at the mean pixel
    g = render_backward(out, s, dL)
    assert np.isclose(g["color"][0, 0], 0.99)  # a * T with T = 1
    assert g["color"][0, 1] == 0.0

    def loss(color_red):
        s2 = Splats(s.mean, s.sigma, s.depth,
                    np.array([[color_red, 0.5, 0.7]]), s.point_index, 1)
        return render(s2, (24, 24), record=False).rgb[12, 10, 0]

    h = 1e-5
    fd = (loss(0.2 + h) - loss(0.2 - h)) / (2 * h)
    assert rel_err(g["color"][0, 0], fd) < 1e-6


def test_backward_matches_finite_differences_random_scene():
    # 50-splat random scene; every gradient entry within 1e-4 relative
    s = _random_scene(12, 50, W=32, H=32)
    W = H = 32
    rng = np.random.default_rng(13)
    dL_img = rng.normal(size=(H, W, 3))
    dL_alpha = rng.normal(size=(H, W))

    out = render(s, (W, H), background=(0.1, 0.0, 0.2))
    g = render_backward(out, s, dL_img, dL_alpha)

    def loss(splats):
        o = render(splats, (W, H), background=(0.1, 0.0, 0.2), record=False)
        return float((o.rgb * dL_img).sum() + (o.alpha * dL_alpha).sum())

    h = 1e-5
    probes = [(arr, idx) for arr in ("mean", "sigma", "color")
              for idx in range(0, 50, 7)]
    for arr, i in probes:
        base = getattr(s, arr)
        it = np.ndindex(base[i].shape) if base.ndim > 1 else [()]
        for sub in it:
            pert = base.copy()
            pert[(i, *sub)] += h
            sp = Splats(**{**s.__dict__, arr: pert, "dmean_dp": None,
                           "dsigma_dp": None, "dsigma_ds": None})
            fp = loss(sp)
            pert2 = base.copy()
            pert2[(i, *sub)] -= h
            sm = Splats(**{**s.__dict__, arr: pert2, "dmean_dp": None,
                           "dsigma_dp": None, "dsigma_ds": None})
            fm = loss(sm)
            fd = (fp - fm) / (2 * h)
            an = g[arr][(i, *sub)]
            if abs(an - fd) > 1e-7:  # both zero: point culled or clamped
                assert rel_err(an, fd, floor=1e-4 * max(abs(fd), 1e-6)) < 1e-4, \
                    f"{arr}[{i},{sub}]: analytic {an} vs fd {fd}"


def test_backward_requires_records_and_fresh_splats():
    s = _random_scene(14, 20)
    out = render(s, (32, 32), record=False)
    with pytest.raises(ValueError, match="record"):
        render_backward(out, s, np.zeros((32, 32, 3)))
    out = render(s, (32, 32))
    s.color[0, 0] += 0.5
    with pytest.raises(ValueError, match="stale"):
        render_backward(out, s, np.zeros((32, 32, 3)))


def test_project_backward_chains_jacobians():
    cam = _identity_camera(W=64, H=64)
    rng = np.random.default_rng(15)
    pts = rng.normal(size=(12, 3)) * 0.2 + [0, 0, 2.5]
    scales = rng.uniform(0.01, 0.03, size=12)
    colors = rng.random((12, 3))
    s = project(pts, scales, colors, cam)
    dL_img = rng.normal(size=(64, 64, 3))

    out = render(s, (64, 64))
    g = render_backward(out, s, dL_img)
    g_pts, g_scales, g_colors = project_backward(s, g["mean"], g["sigma"],
                                                 g["color"])

    def loss(pts_, scales_):
        sp = project(pts_, scales_, colors, cam)
        o = render(sp, (64, 64), record=False)
        return float((o.rgb * dL_img).sum())

    h = 1e-6
    for i in range(0, 12, 3):
        for a in range(3):
            pp = pts.copy(); pp[i, a] += h
            pm = pts.copy(); pm[i, a] -= h
            fd = (loss(pp, scales) - loss(pm, scales)) / (2 * h)
            assert rel_err(g_pts[i, a], fd, floor=1e-3 * max(abs(fd), 1e-4)) < 1e-4
        sp_ = scales.copy(); sp_[i] += h
        sm_ = scales.copy(); sm_[i] -= h
        fd = (loss(pts, sp_) - loss(pts, sm_)) / (2 * h)
        assert rel_err(g_scales[i], fd, floor=1e-3 * max(abs(fd), 1e-4)) < 1e-4


# ---------------------------------------------------------------------------
# bench + image io
# ---------------------------------------------------------------------------

def test_bench_structural():
    rep = render_throughput_bench(500, (96, 96), repeats=2, seed=0)
    assert rep["max_abs_diff"] <= 1e-6
    assert rep["tiled_fps_mean"] > 0 and rep["naive_fps_mean"] > 0
    assert rep["n_splats"] == 500


def test_bench_zero_splats():
    rep = render_throughput_bench(0, (64, 64), repeats=1, seed=0)
    assert rep["max_abs_diff"] == 0.0
    assert np.isfinite(rep["tiled_fps_mean"])


def test_image_io_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    img = rng.random((20, 30, 3))
    p_npy = tmp_path / "img.npy"
    save_image_npy(img, p_npy)
    assert np.array_equal(load_image_npy(p_npy), img)
    p_png = tmp_path / "img.png"
    save_image_png(img, p_png)
    back = load_image_png(p_png)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9  # quantized path
