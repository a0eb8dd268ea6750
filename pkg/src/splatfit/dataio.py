"""Dataset ingestion and synthetic dataset generation.

A dataset directory holds:

    manifest.json     template path, frame count, splits, generation metadata
    template.tmpl     the skinned template (binary format)
    frames/NNNN.png   8-bit preview (quantized)
    frames/NNNN.npy   lossless float image, the authoritative payload
    masks/NNNN.png    binary foreground mask (optional per frame)
    cameras.txt       one line per frame: fx fy cx cy W H near far R(9) t(3)
    poses_init.txt    one line per frame: J axis-angle triples + translation
    poses_gt.txt      synthetic only: the ground truth the noise was added to
    gt/               synthetic only: generating cloud + appearance rule

All images are linear in [0,1]; 8-bit PNGs are value/255 with no gamma.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianCloud, init_cloud, load_cloud, save_cloud
from .rasterizer import Camera, project, render, save_image_png, save_image_npy
from .template import (Pose, SkinnedTemplate, forward_kinematics, lbs,
                       load_template, sample_surface, save_template)

MANIFEST_VERSION = 1


class DataError(ValueError):
    """Missing files or inconsistent dataset content."""


@dataclass
class Frame:
    image: np.ndarray        # [H, W, 3] linear in [0,1]
    mask: np.ndarray | None  # [H, W] bool
    camera: Camera
    pose: Pose               # initial pose estimate
    index: int


@dataclass
class Dataset:
    frames: list
    template: SkinnedTemplate
    template_path: str
    splits: dict             # name -> list of frame indices
    gt_poses: list | None    # synthetic only
    root: str
    meta: dict

    def __len__(self):
        return len(self.frames)

    @property
    def n_joints(self):
        return self.template.n_joints

    def split_indices(self, name):
        return list(self.splits[name])


def default_splits(n_frames):
    """Interleaved 80/10/10 split: every 10th frame to val/test."""
    train, val, test = [], [], []
    for i in range(n_frames):
        if i % 10 == 4:
            val.append(i)
        elif i % 10 == 9:
            test.append(i)
        else:
            train.append(i)
    if not train:
        train, val, test = list(range(n_frames)), [], []
    return {"train": train, "val": val, "test": test}


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------

def _write_cameras(path, cams):
    with open(path, "w") as f:
        f.write("# fx fy cx cy width height near far R(row-major 9) t(3)\n")
        for c in cams:
            vals = ([c.fx, c.fy, c.cx, c.cy, float(c.width), float(c.height),
                     c.near, c.far] + list(c.R.ravel()) + list(c.t))
            f.write(" ".join(repr(float(v)) for v in vals) + "\n")


def _read_cameras(path):
    cams = []
    with open(path) as f:
        for ln in f:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            v = [float(x) for x in ln.split()]
            if len(v) != 20:
                raise DataError(f"camera line has {len(v)} fields, expected 20")
            cams.append(Camera(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]),
                               np.array(v[8:17]).reshape(3, 3),
                               np.array(v[17:20]), near=v[6], far=v[7]))
    return cams


def write_pose_file(path, poses):
    with open(path, "w") as f:
        J = poses[0].theta.shape[0]
        f.write(f"# joints {J}; per line: {J} axis-angle triples then translation\n")
        for p in poses:
            vals = list(p.theta.ravel()) + list(p.trans)
            f.write(" ".join(repr(float(v)) for v in vals) + "\n")


def read_pose_file(path, n_joints=None):
    poses = []
    with open(path) as f:
        for ln in f:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            v = np.array([float(x) for x in ln.split()])
            if (v.size - 3) % 3:
                raise DataError(f"pose line has {v.size} fields")
            J = (v.size - 3) // 3
            if n_joints is not None and J != n_joints:
                raise DataError(f"pose has {J} joints, template has {n_joints}")
            poses.append(Pose(v[:-3].reshape(J, 3), v[-3:]))
    return poses


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_dataset(root) -> Dataset:
    root = str(root)
    man_path = os.path.join(root, "manifest.json")
    if not os.path.exists(man_path):
        raise DataError(f"no manifest.json in {root}")
    with open(man_path) as f:
        meta = json.load(f)
    template_path = os.path.join(root, meta["template"])
    template = load_template(template_path)
    cams = _read_cameras(os.path.join(root, "cameras.txt"))
    poses = read_pose_file(os.path.join(root, "poses_init.txt"), template.n_joints)
    n = int(meta["n_frames"])
    if len(cams) != n or len(poses) != n:
        raise DataError(f"manifest says {n} frames but found {len(cams)} cameras"
                        f" and {len(poses)} poses")
    gt_path = os.path.join(root, "poses_gt.txt")
    gt_poses = read_pose_file(gt_path, template.n_joints) \
        if os.path.exists(gt_path) else None

    frames = []
    for i in range(n):
        npy = os.path.join(root, "frames", f"{i:04d}.npy")
        png = os.path.join(root, "frames", f"{i:04d}.png")
        if os.path.exists(npy):
            image = np.load(npy)
        elif os.path.exists(png):
            from .rasterizer import load_image_png
            image = load_image_png(png)
        else:
            raise DataError(f"frame {i}: no image file")
        cam = cams[i]
        if image.shape[:2] != (cam.height, cam.width):
            raise DataError(f"frame {i}: image {image.shape[:2]} does not match "
                            f"camera size {(cam.height, cam.width)}")
        mask_path = os.path.join(root, "masks", f"{i:04d}.png")
        mask = None
        if os.path.exists(mask_path):
            from .rasterizer import load_image_png
            m = load_image_png(mask_path)
            mask = (m if m.ndim == 2 else m[..., 0]) > 0.5
            if mask.shape != image.shape[:2]:
                raise DataError(f"frame {i}: mask {mask.shape} does not match image")
        frames.append(Frame(image, mask, cam, poses[i], i))

    splits = meta.get("splits") or default_splits(n)
    if sorted(sum((list(v) for v in splits.values()), [])) != list(range(n)):
        raise DataError("splits do not partition the frame list")
    if not splits.get("train"):
        raise DataError("dataset has no training frames")
    return Dataset(frames, template, template_path, splits, gt_poses, root, meta)


# ---------------------------------------------------------------------------
# synthetic ground truth
# ---------------------------------------------------------------------------

@dataclass
class AppearanceRule:
    """Pose-dependent per-point coloring/offset rule for synthetic avatars.

    The driver signal is one axis-angle component of one joint, normalized by
    ``driver_scale``; colors are base + g * color_delta (clipped to [0,1]),
    offsets are g * offset_amp * offset_dir. A zero delta/amp rule is static.
    """
    base_color: np.ndarray   # [N, 3]
    color_delta: np.ndarray  # [N, 3]
    offset_dir: np.ndarray   # [N, 3]
    offset_amp: float
    driver_joint: int
    driver_axis: int
    driver_scale: float

    def driver(self, pose: Pose):
        return float(pose.theta[self.driver_joint, self.driver_axis]
                     / self.driver_scale)

    def colors(self, pose: Pose):
        g = self.driver(pose)
        return np.clip(self.base_color + g * self.color_delta, 0.0, 1.0)

    def offsets(self, pose: Pose):
        return self.driver(pose) * self.offset_amp * self.offset_dir

    def save(self, path):
        np.savez(path, base_color=self.base_color, color_delta=self.color_delta,
                 offset_dir=self.offset_dir,
                 offset_amp=np.float64(self.offset_amp),
                 driver_joint=np.int64(self.driver_joint),
                 driver_axis=np.int64(self.driver_axis),
                 driver_scale=np.float64(self.driver_scale))

    @staticmethod
    def load(path):
        with np.load(path) as z:
            return AppearanceRule(z["base_color"], z["color_delta"],
                                  z["offset_dir"], float(z["offset_amp"]),
                                  int(z["driver_joint"]), int(z["driver_axis"]),
                                  float(z["driver_scale"]))


def _base_colors(positions):
    """Smooth position-keyed gradient with rings: distinctive, alignment-friendly."""
    lo = positions.min(axis=0)
    span = np.maximum(positions.max(axis=0) - lo, 1e-9)
    c = 0.2 + 0.6 * (positions - lo) / span
    c[:, 0] = np.clip(c[:, 0] + 0.18 * np.sin(14.0 * positions[:, 1]), 0.02, 0.98)
    c[:, 1] = np.clip(c[:, 1] + 0.12 * np.cos(9.0 * positions[:, 0] * 4.0), 0.02, 0.98)
    return np.clip(c, 0.02, 0.98)


def make_static_rule(cloud: GaussianCloud) -> AppearanceRule:
    n = len(cloud)
    return AppearanceRule(_base_colors(cloud.base_pos), np.zeros((n, 3)),
                          np.zeros((n, 3)), 0.0, 0, 0, 1.0)


def make_dynamic_rule(cloud: GaussianCloud, template: SkinnedTemplate,
                      driver_joint=None, driver_axis=2,
                      driver_scale=0.4, color_swing=0.45,
                      offset_amp=0.004) -> AppearanceRule:
    """Body color varies with a limb joint's angle (and the surface breathes
    slightly): appearance is a function of pose, not of any single frame."""
    if driver_joint is None:
        driver_joint = template.n_joints - 1  # a limb joint when limbs exist
    base = _base_colors(cloud.base_pos)
    # recolor the points that do NOT follow the driver joint, so the signal
    # is non-local: the network has to read the driving limb's position
    w_driver = cloud.skin_weights[:, driver_joint]
    region = (w_driver < 0.1).astype(float)[:, None]
    delta = region * np.array([color_swing, -0.5 * color_swing, -0.3 * color_swing])
    radial = cloud.base_pos.copy()
    radial[:, 1] = 0.0
    norm = np.linalg.norm(radial, axis=1, keepdims=True)
    radial = np.where(norm > 1e-9, radial / np.maximum(norm, 1e-9), 0.0)
    return AppearanceRule(base, delta, radial * region, offset_amp,
                          driver_joint, driver_axis, driver_scale)


def make_pose_sequence(template: SkinnedTemplate, n_frames, seed,
                       spin=True, limb_amplitude=0.3):
    """Smooth deterministic pose trajectory: the root spins about the vertical
    axis across the sequence while the other joints swing sinusoidally."""
    rng = np.random.default_rng(seed)
    J = template.n_joints
    amps = rng.uniform(0.1, 0.35, size=J)
    amps[-2:] = limb_amplitude  # limbs move the most
    phases = rng.uniform(0, 2 * np.pi, size=J)
    freqs = rng.choice([1.0, 2.0], size=J)
    poses = []
    for t in range(n_frames):
        u = t / max(n_frames, 1)
        theta = np.zeros((J, 3))
        if spin:
            theta[0, 1] = 2.0 * np.pi * u
        for j in range(1, J):
            theta[j, 2] = amps[j] * np.sin(2 * np.pi * freqs[j] * u + phases[j])
        trans = np.array([0.02 * np.sin(2 * np.pi * u), 0.0,
                          0.015 * np.cos(2 * np.pi * u)])
        poses.append(Pose(theta, trans))
    return poses


def default_camera(template: SkinnedTemplate, width=128, height=128):
    """Camera at 1.25x the body height from the center: a wide-ish view where
    the avatar spans most of the frame and depth is perspectively observable
    (a distant narrow view leaves per-frame depth as an unconstrained drift
    direction during motion optimization)."""
    center = template.vertices.mean(axis=0)
    size = float(np.ptp(template.vertices[:, 1]))
    eye = center + np.array([0.0, 0.0, 1.25 * size])
    return Camera.look_at(eye, center, fx=1.0 * height, width=width,
                          height=height)


def render_ground_truth(template, cloud: GaussianCloud, rule: AppearanceRule,
                        pose: Pose, cam: Camera, background=(0.0, 0.0, 0.0)):
    jt = forward_kinematics(template, pose)
    pts = cloud.base_pos + rule.offsets(pose)
    posed = lbs(pts, cloud.skin_weights, jt)
    splats = project(posed, cloud.scale, rule.colors(pose), cam)
    return render(splats, (cam.width, cam.height), background, record=False)


def generate_synthetic(template: SkinnedTemplate, gt_cloud: GaussianCloud,
                       rule: AppearanceRule, poses, cam: Camera,
                       noise, seed, out_dir, splits=None, meta_extra=None):
    """Render ground-truth frames with the artifact's own renderer and write a
    dataset directory with exact masks and noisy initial poses.

    ``noise`` is (sigma_rot radians, sigma_trans meters); initial poses are
    ground truth plus zero-mean Gaussian noise per component. Returns the
    rendered ground-truth images (the on-disk .npy payloads are bit-identical).
    """
    sigma_rot, sigma_trans = noise
    if sigma_rot < 0 or sigma_trans < 0:
        raise ValueError("noise sigmas must be nonnegative")
    rng = np.random.default_rng(seed)
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)

    images = []
    noisy = []
    for i, pose in enumerate(poses):
        out = render_ground_truth(template, gt_cloud, rule, pose, cam)
        images.append(out.rgb)
        save_image_npy(out.rgb, os.path.join(out_dir, "frames", f"{i:04d}.npy"))
        save_image_png(out.rgb, os.path.join(out_dir, "frames", f"{i:04d}.png"))
        save_image_png((out.alpha > 0.5).astype(float),
                       os.path.join(out_dir, "masks", f"{i:04d}.png"))
        noisy.append(Pose(pose.theta + sigma_rot * rng.standard_normal(pose.theta.shape),
                          pose.trans + sigma_trans * rng.standard_normal(3)))

    save_template(template, os.path.join(out_dir, "template.tmpl"))
    _write_cameras(os.path.join(out_dir, "cameras.txt"), [cam] * len(poses))
    write_pose_file(os.path.join(out_dir, "poses_init.txt"), noisy)
    write_pose_file(os.path.join(out_dir, "poses_gt.txt"), poses)
    save_cloud(gt_cloud, os.path.join(out_dir, "gt", "cloud.npz"))
    rule.save(os.path.join(out_dir, "gt", "rule.npz"))

    meta = {"format_version": MANIFEST_VERSION,
            "template": "template.tmpl",
            "n_frames": len(poses),
            "splits": splits or default_splits(len(poses)),
            "noise": [sigma_rot, sigma_trans],
            "seed": seed}
    meta.update(meta_extra or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(meta, f, indent=1)
    return images


def synth_preset(preset, template=None, n_frames=30, noise=(0.1, 0.05),
                 seed=0, out_dir=None, image_size=128, n_points=1500,
                 segments=12, joints=5):
    """The two canned synthetic datasets: 'static-avatar' (fixed colors) and
    'dynamic-avatar' (joint-angle-dependent color/offset rule)."""
    if preset not in ("static-avatar", "dynamic-avatar"):
        raise ValueError(f"unknown preset '{preset}'")
    if template is None:
        template = make_test_template_cached(segments, joints, seed)
    samples = sample_surface(template, n_points, seed=seed + 1)
    cloud = init_cloud(samples)
    rule = make_static_rule(cloud) if preset == "static-avatar" \
        else make_dynamic_rule(cloud, template)
    poses = make_pose_sequence(template, n_frames, seed + 2)
    cam = default_camera(template, image_size, image_size)
    images = generate_synthetic(template, cloud, rule, poses, cam, noise,
                                seed + 3, out_dir,
                                meta_extra={"preset": preset,
                                            "driver_joint": rule.driver_joint,
                                            "driver_axis": rule.driver_axis})
    return images


def make_test_template_cached(segments, joints, seed):
    from .template import make_test_template
    return make_test_template(segments, joints, seed)
