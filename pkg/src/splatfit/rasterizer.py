"""Differentiable tile-based splatting of isotropic Gaussians.

Projection uses the isotropic footprint sigma_2d = s * f / z (exact for
isotropic Gaussians under the local affine approximation), a pinhole camera,
and front-to-back alpha compositing with the fixed opacity of 1. Compositing
conventions (all configurable module constants):

  * per-splat alpha  a = min(ALPHA_MAX, exp(-d^2 / (2 sigma^2)))
  * splats cut off beyond CUTOFF_SIGMA * sigma from their mean
  * per-pixel compositing stops once transmittance < T_MIN

Splats are depth-sorted globally per frame with ties broken by source point
index, so output is deterministic and independent of input order. Pixel (i, j)
has its center at continuous coordinates (x=j, y=i).
"""

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import _kernels

ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF_SIGMA = 3.0
TILE_SIZE = 16


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # [3, 3] world-to-camera rotation
    t: np.ndarray  # [3] world-to-camera translation
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def size(self):
        return (self.width, self.height)

    def world_to_cam(self, points):
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), fx=None, fy=None,
                width=128, height=128, near=0.05, far=100.0):
        """Camera at ``eye`` looking toward ``target``; +z is the view direction."""
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=float))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        # re-orthonormalize to meet the 1e-9 invariant exactly
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        fx = float(fx if fx is not None else 1.1 * width)
        fy = float(fy if fy is not None else fx)
        return Camera(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0,
                      width, height, R, -R @ eye, near, far)


@dataclass
class Splats:
    """Screen-space splats (struct-of-arrays) with projection Jacobians."""
    mean: np.ndarray         # [M, 2] pixel coordinates
    sigma: np.ndarray        # [M] screen-space stddev, pixels
    depth: np.ndarray        # [M] camera-space depth, meters
    color: np.ndarray        # [M, 3]
    point_index: np.ndarray  # [M] source point index
    n_points: int            # size of the source point array
    dmean_dp: np.ndarray | None = None   # [M, 2, 3]
    dsigma_dp: np.ndarray | None = None  # [M, 3]
    dsigma_ds: np.ndarray | None = None  # [M]

    def __len__(self):
        return self.mean.shape[0]

    def fingerprint(self):
        h = zlib.crc32(np.ascontiguousarray(self.mean).tobytes())
        h = zlib.crc32(np.ascontiguousarray(self.sigma).tobytes(), h)
        h = zlib.crc32(np.ascontiguousarray(self.color).tobytes(), h)
        return (len(self), h)


@dataclass
class RenderOutput:
    rgb: np.ndarray         # [H, W, 3] in [0, 1]
    alpha: np.ndarray       # [H, W] in [0, 1]
    background: np.ndarray  # [3]
    # ordered per-pixel contributor records (CSR over row-major pixels);
    # indices refer to the depth-sorted order, _order maps back to splats
    rec_ptr: np.ndarray | None = None
    rec_point: np.ndarray | None = None
    rec_alpha: np.ndarray | None = None
    rec_T: np.ndarray | None = None
    _order: np.ndarray | None = None
    _fingerprint: tuple | None = None

    @property
    def size(self):
        return (self.rgb.shape[1], self.rgb.shape[0])


def project(posed_points, scales, colors, cam: Camera) -> Splats:
    """Pinhole projection of isotropic Gaussians to screen-space splats.

    Points behind the near plane, beyond far, non-finite, or whose
    CUTOFF_SIGMA disc misses the image are dropped; ``point_index`` keeps the
    link to the source array. Jacobians of (mean, sigma) with respect to
    world position and scale are recorded for the backward pass.
    """
    posed_points = np.asarray(posed_points, dtype=float)
    scales = np.asarray(scales, dtype=float).reshape(-1)
    colors = np.asarray(colors, dtype=float)
    n = posed_points.shape[0]
    cam_pts = cam.world_to_cam(posed_points) if n else posed_points.reshape(0, 3)
    f = 0.5 * (cam.fx + cam.fy)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = cam_pts[:, 2]
        u = cam.fx * cam_pts[:, 0] / z + cam.cx
        v = cam.fy * cam_pts[:, 1] / z + cam.cy
        sigma = scales * f / z
    keep = np.isfinite(posed_points).all(axis=1) & np.isfinite(scales) \
        & (scales > 0) & (z > cam.near) & (z < cam.far)
    r = CUTOFF_SIGMA * sigma
    keep &= (u + r >= -0.5) & (u - r <= cam.width - 0.5) \
        & (v + r >= -0.5) & (v - r <= cam.height - 0.5)
    idx = np.nonzero(keep)[0]
    zk = z[idx]
    xk = cam_pts[idx, 0]
    yk = cam_pts[idx, 1]
    sk = scales[idx]
    dmean_dp = np.empty((len(idx), 2, 3))
    dmean_dp[:, 0, :] = cam.fx * (cam.R[0][None, :] - (xk / zk)[:, None] * cam.R[2][None, :]) / zk[:, None]
    dmean_dp[:, 1, :] = cam.fy * (cam.R[1][None, :] - (yk / zk)[:, None] * cam.R[2][None, :]) / zk[:, None]
    dsigma_dp = -(sk * f / zk ** 2)[:, None] * cam.R[2][None, :]
    dsigma_ds = f / zk
    return Splats(
        mean=np.stack([u[idx], v[idx]], axis=1),
        sigma=sigma[idx].copy(),
        depth=zk.copy(),
        color=colors[idx].copy(),
        point_index=idx.astype(np.int64),
        n_points=n,
        dmean_dp=dmean_dp,
        dsigma_dp=dsigma_dp,
        dsigma_ds=dsigma_ds,
    )


def _depth_order(splats: Splats):
    return np.lexsort((splats.point_index, splats.depth))


def render(splats: Splats, size, background=(0.0, 0.0, 0.0),
           record=True, tile=TILE_SIZE) -> RenderOutput:
    """Composite splats front to back into an image.

    ``record=True`` retains per-pixel ordered contributor records for
    render_backward; rendering without records is cheaper (benchmark mode).
    """
    W, H = int(size[0]), int(size[1])
    bg = np.asarray(background, dtype=float).reshape(3)
    order = _depth_order(splats)
    means = np.ascontiguousarray(splats.mean[order])
    sigmas = np.ascontiguousarray(splats.sigma[order])
    colors = np.ascontiguousarray(splats.color[order])
    img = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    ncontrib = np.zeros((H, W), dtype=np.int64)
    tile_ptr, tile_ids = _kernels.tile_bins(means, sigmas, CUTOFF_SIGMA, W, H, tile)
    _kernels.composite_tiled(means, sigmas, colors, tile_ptr, tile_ids, W, H,
                             tile, bg, ALPHA_MAX, T_MIN, CUTOFF_SIGMA,
                             img, alpha, ncontrib)
    out = RenderOutput(rgb=img, alpha=alpha, background=bg)
    if record:
        rec_ptr = np.zeros(H * W + 1, dtype=np.int64)
        np.cumsum(ncontrib.ravel(), out=rec_ptr[1:])
        total = int(rec_ptr[-1])
        rec_point = np.empty(total, dtype=np.int64)
        rec_alpha = np.empty(total)
        rec_T = np.empty(total)
        _kernels.fill_records(means, sigmas, tile_ptr, tile_ids, W, H, tile,
                              ALPHA_MAX, T_MIN, CUTOFF_SIGMA, rec_ptr,
                              rec_point, rec_alpha, rec_T)
        out.rec_ptr = rec_ptr
        out.rec_point = rec_point
        out.rec_alpha = rec_alpha
        out.rec_T = rec_T
        out._order = order
        out._fingerprint = splats.fingerprint()
    return out


def render_naive(splats: Splats, size, background=(0.0, 0.0, 0.0)):
    """Brute-force reference: every pixel visits every splat. Same compositing
    rules as ``render``; used as the independent oracle and benchmark baseline.
    """
    W, H = int(size[0]), int(size[1])
    bg = np.asarray(background, dtype=float).reshape(3)
    order = _depth_order(splats)
    means = np.ascontiguousarray(splats.mean[order])
    sigmas = np.ascontiguousarray(splats.sigma[order])
    colors = np.ascontiguousarray(splats.color[order])
    img = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    _kernels.composite_naive(means, sigmas, colors, W, H, bg,
                             ALPHA_MAX, T_MIN, CUTOFF_SIGMA, img, alpha)
    return img, alpha


def render_backward(out: RenderOutput, splats: Splats, dL_dimage,
                    dL_dalpha=None):
    """Gradients of a scalar loss with respect to splat mean, sigma and color.

    Requires the contributor records produced by ``render(..., record=True)``
    on the same splats (stale records are rejected via a pass fingerprint).
    """
    if out.rec_ptr is None:
        raise ValueError("render output carries no contributor records "
                         "(rendered with record=False)")
    if out._fingerprint != splats.fingerprint():
        raise ValueError("stale render output: splats changed since this "
                         "render pass")
    W, H = out.size
    dL_dimage = np.ascontiguousarray(dL_dimage, dtype=float)
    if dL_dimage.shape != (H, W, 3):
        raise ValueError(f"dL_dimage shape {dL_dimage.shape} != {(H, W, 3)}")
    if dL_dalpha is None:
        dL_dalpha = np.zeros((H, W))
    dL_dalpha = np.ascontiguousarray(dL_dalpha, dtype=float)
    order = out._order
    means = np.ascontiguousarray(splats.mean[order])
    sigmas = np.ascontiguousarray(splats.sigma[order])
    colors = np.ascontiguousarray(splats.color[order])
    g_mean_s = np.zeros((len(splats), 2))
    g_sigma_s = np.zeros(len(splats))
    g_color_s = np.zeros((len(splats), 3))
    _kernels.composite_backward(means, sigmas, colors, out.background,
                                out.rec_ptr, out.rec_point, out.rec_alpha,
                                out.rec_T, dL_dimage, dL_dalpha, W, H,
                                ALPHA_MAX, g_mean_s, g_sigma_s, g_color_s)
    g_mean = np.zeros_like(g_mean_s)
    g_sigma = np.zeros_like(g_sigma_s)
    g_color = np.zeros_like(g_color_s)
    g_mean[order] = g_mean_s
    g_sigma[order] = g_sigma_s
    g_color[order] = g_color_s
    return {"mean": g_mean, "sigma": g_sigma, "color": g_color}


def project_backward(splats: Splats, g_mean, g_sigma, g_color):
    """Chain splat gradients through the projection Jacobians.

    Returns gradients aligned with the original point arrays handed to
    ``project``: positions [N, 3], scales [N], colors [N, 3].
    """
    n = splats.n_points
    g_points = np.zeros((n, 3))
    g_scales = np.zeros(n)
    g_colors = np.zeros((n, 3))
    idx = splats.point_index
    g_points[idx] = np.einsum("mr,mrc->mc", g_mean, splats.dmean_dp) \
        + g_sigma[:, None] * splats.dsigma_dp
    g_scales[idx] = g_sigma * splats.dsigma_ds
    g_colors[idx] = g_color
    return g_points, g_scales, g_colors


def render_throughput_bench(n_splats, size, repeats, seed=0, tile=TILE_SIZE):
    """Time the tiled renderer against the naive reference on one random scene.

    Returns a report dict with mean/std FPS for both paths and the maximum
    per-channel image difference (the two must agree within 1e-6).
    """
    W, H = int(size[0]), int(size[1])
    rng = np.random.default_rng(seed)
    n = int(n_splats)
    splats = Splats(
        mean=rng.uniform([-2.0, -2.0], [W + 2.0, H + 2.0], size=(n, 2)),
        sigma=rng.uniform(0.6, 2.5, size=n),
        depth=rng.uniform(1.0, 10.0, size=n),
        color=rng.uniform(0.0, 1.0, size=(n, 3)),
        point_index=np.arange(n, dtype=np.int64),
        n_points=n,
    )
    bg = np.array([0.0, 0.0, 0.0])

    def timed(fn):
        fn()  # warm-up: JIT compilation and caches stay out of the timings
        times = []
        result = None
        for _ in range(int(repeats)):
            t0 = time.perf_counter()
            result = fn()
            times.append(time.perf_counter() - t0)
        times = np.array(times)
        return result, float(times.mean()), float(times.std())

    out_tiled, mean_t, std_t = timed(
        lambda: render(splats, (W, H), bg, record=False, tile=tile))
    out_naive, mean_n, std_n = timed(lambda: render_naive(splats, (W, H), bg))
    diff = float(np.abs(out_tiled.rgb - out_naive[0]).max()) if n else \
        float(np.abs(out_tiled.rgb - out_naive[0]).max())
    return {
        "n_splats": n,
        "width": W,
        "height": H,
        "repeats": int(repeats),
        "tiled_fps_mean": 1.0 / mean_t,
        "tiled_fps_std": std_t / mean_t ** 2 if mean_t > 0 else 0.0,
        "tiled_seconds_mean": mean_t,
        "naive_fps_mean": 1.0 / mean_n,
        "naive_fps_std": std_n / mean_n ** 2 if mean_n > 0 else 0.0,
        "naive_seconds_mean": mean_n,
        "speedup": mean_n / mean_t,
        "max_abs_diff": diff,
    }


# ---------------------------------------------------------------------------
# image output
# ---------------------------------------------------------------------------

def save_image_png(image, path):
    """8-bit PNG: linear values scaled by 255 and rounded half-up."""
    from PIL import Image
    arr = np.asarray(image, dtype=float)
    q = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if q.ndim == 2:
        Image.fromarray(q, mode="L").save(path)
    else:
        Image.fromarray(q, mode="RGB").save(path)


def load_image_png(path):
    """Inverse of save_image_png up to the 8-bit quantization: values / 255."""
    from PIL import Image
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 255.0


def save_image_npy(image, path):
    np.save(path, np.asarray(image, dtype=np.float64))


def load_image_npy(path):
    return np.load(path)
