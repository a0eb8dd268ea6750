"""Skinned body template: loading, forward kinematics, LBS, surface sampling,
and UV positional map construction.

Geometry conventions: positions in meters, canonical (rest) pose; joints form a
single rooted tree; skin-weight rows are convex combinations over joints; uv
coordinates live in [0,1]^2 with u along image columns and v along rows.
"""

import io
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .rotations import axis_angle_to_matrix, axis_angle_jacobian


class TemplateError(ValueError):
    """Malformed template file or invariant violation."""


_BIN_MAGIC = b"SFTMPL01"
_TEXT_HEADER = "splatfit-template v1"


@dataclass
class SkinnedTemplate:
    vertices: np.ndarray      # [V, 3] rest-pose positions
    triangles: np.ndarray     # [T, 3] int vertex indices
    uv: np.ndarray            # [V, 2] texture coordinates in [0,1]^2
    joints: np.ndarray        # [J, 3] rest-pose joint positions
    parents: np.ndarray       # [J] parent index, -1 for the root
    skin_weights: np.ndarray  # [V, J] rows nonnegative, sum to 1
    shape_dirs: np.ndarray | None = None  # [B, V, 3] optional blendshape basis

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_joints(self):
        return self.joints.shape[0]

    def children(self):
        """Per-joint list of child joint indices."""
        out = [[] for _ in range(self.n_joints)]
        for j, p in enumerate(self.parents):
            if p >= 0:
                out[p].append(j)
        return out

    def joint_order(self):
        """Joint indices in parent-before-child order, root first."""
        children = self.children()
        root = int(np.nonzero(self.parents < 0)[0][0])
        order, stack = [], [root]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children[j]))
        return order

    def triangle_areas(self):
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class Pose:
    theta: np.ndarray  # [J, 3] per-joint axis-angle, radians
    trans: np.ndarray  # [3] root translation, meters

    @staticmethod
    def identity(n_joints):
        return Pose(np.zeros((n_joints, 3)), np.zeros(3))

    def copy(self):
        return Pose(self.theta.copy(), self.trans.copy())


@dataclass
class JointTransforms:
    """Per-joint rigid world transforms relative to the rest pose.

    ``world[j]`` is the 4x4 transform that carries rest-pose points rigidly
    attached to joint j into the posed frame. ``d_theta[j, k, a]`` is the
    derivative of ``world[j]`` with respect to axis-angle component a of
    joint k (zero unless k is an ancestor of j or j itself).
    """
    world: np.ndarray    # [J, 4, 4]
    d_theta: np.ndarray  # [J, J, 3, 4, 4]

    @property
    def n_joints(self):
        return self.world.shape[0]


@dataclass
class SurfaceSamples:
    """Points sampled on the template surface (struct-of-arrays)."""
    tri: np.ndarray       # [N] source triangle index
    bary: np.ndarray      # [N, 3] barycentric coordinates, nonnegative, sum 1
    uv: np.ndarray        # [N, 2] interpolated texture coordinates
    weights: np.ndarray   # [N, J] interpolated skin weights
    position: np.ndarray  # [N, 3] canonical position

    def __len__(self):
        return self.tri.shape[0]


@dataclass
class UvPositionalMap:
    """Grid over the uv atlas; each valid pixel stores one posed surface point.

    Invalid pixels hold an all-zero sentinel. ``sample_index`` maps a valid
    pixel back to the sample (and hence Gaussian) that owns it; -1 elsewhere.
    """
    positions: np.ndarray     # [H, W, 3]
    mask: np.ndarray          # [H, W] bool
    sample_index: np.ndarray  # [H, W] int32, -1 where invalid

    @property
    def resolution(self):
        return self.mask.shape


def validate_template(t: SkinnedTemplate):
    """Raise TemplateError (naming the field and index) on any invariant violation."""
    V, J = t.n_vertices, t.n_joints
    if t.triangles.size and (t.triangles.min() < 0 or t.triangles.max() >= V):
        bad = int(np.nonzero((t.triangles < 0) | (t.triangles >= V))[0][0])
        raise TemplateError(f"triangles: index out of range in triangle {bad}")
    if t.uv.shape != (V, 2):
        raise TemplateError(f"uv: expected shape ({V}, 2), got {t.uv.shape}")
    if (t.uv < 0).any() or (t.uv > 1).any():
        bad = int(np.nonzero(((t.uv < 0) | (t.uv > 1)).any(axis=1))[0][0])
        raise TemplateError(f"uv: coordinate outside [0,1]^2 at vertex {bad}")
    if t.skin_weights.shape != (V, J):
        raise TemplateError(
            f"skin_weights: expected shape ({V}, {J}), got {t.skin_weights.shape}")
    if (t.skin_weights < 0).any():
        bad = int(np.nonzero((t.skin_weights < 0).any(axis=1))[0][0])
        raise TemplateError(f"skin_weights: negative weight at vertex {bad}")
    sums = t.skin_weights.sum(axis=1)
    off = np.abs(sums - 1.0) > 1e-6
    if off.any():
        bad = int(np.nonzero(off)[0][0])
        raise TemplateError(
            f"skin_weights: row {bad} sums to {sums[bad]:.8f}, expected 1")
    if t.parents.shape != (J,):
        raise TemplateError(f"parents: expected shape ({J},), got {t.parents.shape}")
    roots = np.nonzero(t.parents < 0)[0]
    if len(roots) != 1:
        raise TemplateError(f"parents: expected exactly one root, found {len(roots)}")
    # walk up from every joint; a cycle never reaches the root within J steps
    for j in range(J):
        k, steps = j, 0
        while t.parents[k] >= 0:
            k = int(t.parents[k])
            steps += 1
            if steps > J:
                raise TemplateError(f"parents: cycle detected at joint {j}")
    if t.shape_dirs is not None:
        if t.shape_dirs.ndim != 3 or t.shape_dirs.shape[1:] != (V, 3):
            raise TemplateError(
                f"shape_dirs: expected shape (B, {V}, 3), got {t.shape_dirs.shape}")
    for name in ("vertices", "uv", "joints", "skin_weights"):
        arr = getattr(t, name)
        if not np.isfinite(arr).all():
            raise TemplateError(f"{name}: non-finite value")


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def save_template(t: SkinnedTemplate, path, text=False):
    """Write a template file; binary by default, text when ``text`` is set.

    See docs/formats.md for the byte-exact layout of both variants.
    """
    path = str(path)
    if text:
        with open(path, "w") as f:
            f.write(_TEXT_HEADER + "\n")
            f.write(f"vertices {t.n_vertices}\n")
            for v in t.vertices:
                f.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
            f.write(f"triangles {t.triangles.shape[0]}\n")
            for tr in t.triangles:
                f.write(f"{tr[0]} {tr[1]} {tr[2]}\n")
            f.write(f"uv {t.n_vertices}\n")
            for u in t.uv:
                f.write(f"{float(u[0])!r} {float(u[1])!r}\n")
            f.write(f"joints {t.n_joints}\n")
            for j in t.joints:
                f.write(f"{float(j[0])!r} {float(j[1])!r} {float(j[2])!r}\n")
            f.write(f"parents {t.n_joints}\n")
            for p in t.parents:
                f.write(f"{int(p)}\n")
            f.write(f"skin_weights {t.n_vertices} {t.n_joints}\n")
            for row in t.skin_weights:
                f.write(" ".join(repr(float(w)) for w in row) + "\n")
            if t.shape_dirs is not None:
                B = t.shape_dirs.shape[0]
                f.write(f"shape_dirs {B} {t.n_vertices}\n")
                for b in range(B):
                    for d in t.shape_dirs[b]:
                        f.write(f"{float(d[0])!r} {float(d[1])!r} {float(d[2])!r}\n")
        return
    with open(path, "wb") as f:
        nb = 0 if t.shape_dirs is None else t.shape_dirs.shape[0]
        f.write(_BIN_MAGIC)
        f.write(struct.pack("<4I", t.n_vertices, t.triangles.shape[0],
                            t.n_joints, nb))
        f.write(np.ascontiguousarray(t.vertices, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(t.triangles, dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(t.uv, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(t.joints, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(t.parents, dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(t.skin_weights, dtype="<f8").tobytes())
        if nb:
            f.write(np.ascontiguousarray(t.shape_dirs, dtype="<f8").tobytes())


def _parse_text_template(text):
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _TEXT_HEADER:
        raise TemplateError(f"unrecognized header (expected '{_TEXT_HEADER}')")
    pos = 1

    def section(name, n_fields):
        nonlocal pos
        if pos >= len(lines):
            raise TemplateError(f"missing section '{name}'")
        head = lines[pos].split()
        if head[0] != name or len(head) != 1 + n_fields:
            raise TemplateError(f"expected '{name}' section header, got '{lines[pos]}'")
        pos += 1
        return [int(x) for x in head[1:]]

    def rows(n, width, conv=float, name=""):
        nonlocal pos
        if pos + n > len(lines):
            raise TemplateError(f"section '{name}': expected {n} rows")
        out = np.empty((n, width))
        for i in range(n):
            parts = lines[pos + i].split()
            if len(parts) != width:
                raise TemplateError(f"section '{name}': row {i} has {len(parts)} fields,"
                                    f" expected {width}")
            out[i] = [conv(x) for x in parts]
        pos += n
        return out

    (nv,) = section("vertices", 1)
    vertices = rows(nv, 3, name="vertices")
    (nt,) = section("triangles", 1)
    triangles = rows(nt, 3, name="triangles").astype(np.int32)
    (nu,) = section("uv", 1)
    if nu != nv:
        raise TemplateError(f"uv count {nu} != vertex count {nv}")
    uv = rows(nu, 2, name="uv")
    (nj,) = section("joints", 1)
    joints = rows(nj, 3, name="joints")
    (npar,) = section("parents", 1)
    if npar != nj:
        raise TemplateError(f"parents count {npar} != joint count {nj}")
    parents = rows(npar, 1, name="parents").astype(np.int32).ravel()
    nw, nwj = section("skin_weights", 2)
    if nw != nv or nwj != nj:
        raise TemplateError("skin_weights counts do not match vertices/joints")
    weights = rows(nw, nj, name="skin_weights")
    shape_dirs = None
    if pos < len(lines):
        nb, nbv = section("shape_dirs", 2)
        if nbv != nv:
            raise TemplateError("shape_dirs vertex count does not match vertices")
        shape_dirs = rows(nb * nv, 3, name="shape_dirs").reshape(nb, nv, 3)
    if pos != len(lines):
        raise TemplateError(f"trailing content after line {pos}")
    return SkinnedTemplate(vertices, triangles, uv, joints, parents, weights,
                           shape_dirs)


def _parse_binary_template(buf):
    f = io.BytesIO(buf)
    if f.read(8) != _BIN_MAGIC:
        raise TemplateError("bad binary magic")
    nv, nt, nj, nb = struct.unpack("<4I", f.read(16))

    def arr(dtype, shape):
        count = int(np.prod(shape))
        raw = f.read(count * np.dtype(dtype).itemsize)
        if len(raw) != count * np.dtype(dtype).itemsize:
            raise TemplateError("truncated binary template")
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    vertices = arr("<f8", (nv, 3))
    triangles = arr("<i4", (nt, 3))
    uv = arr("<f8", (nv, 2))
    joints = arr("<f8", (nj, 3))
    parents = arr("<i4", (nj,))
    weights = arr("<f8", (nv, nj))
    shape_dirs = arr("<f8", (nb, nv, 3)) if nb else None
    if f.read(1):
        raise TemplateError("trailing bytes in binary template")
    return SkinnedTemplate(vertices, triangles, uv, joints, parents, weights,
                           shape_dirs)


def load_template(path) -> SkinnedTemplate:
    """Load and validate a template file (binary or text variant)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] == _BIN_MAGIC:
        t = _parse_binary_template(buf)
    else:
        try:
            text = buf.decode("utf-8")
        except UnicodeDecodeError as e:
            raise TemplateError(f"{path}: neither binary nor text template") from e
        t = _parse_text_template(text)
    validate_template(t)
    return t


# ---------------------------------------------------------------------------
# procedural test template
# ---------------------------------------------------------------------------

def _tube(center_fn, radius_fn, length, n_rings, n_cols, uv_rect, axis_u,
          axis_v, ellipse=(1.0, 1.0)):
    """Open tube mesh along a parametric centerline with a duplicated uv seam.

    ``ellipse`` scales the two cross-section axes: non-circular sections make
    rotation about the centerline visible in the silhouette, which keeps
    axial twist observable for pose optimization.
    """
    u0, v0, u1, v1 = uv_rect
    ea, eb = ellipse
    verts, uvs = [], []
    ts = np.linspace(0.0, 1.0, n_rings)
    angs = np.linspace(0.0, 2.0 * np.pi, n_cols)  # first/last column coincide
    for ri, t in enumerate(ts):
        c = center_fn(t)
        r = radius_fn(t)
        for ci, a in enumerate(angs):
            p = c + r * (ea * np.cos(a) * axis_u + eb * np.sin(a) * axis_v)
            verts.append(p)
            uvs.append([u0 + (u1 - u0) * ci / (n_cols - 1),
                        v0 + (v1 - v0) * ri / (n_rings - 1)])
    tris = []
    for ri in range(n_rings - 1):
        for ci in range(n_cols - 1):
            a = ri * n_cols + ci
            b = a + 1
            c = a + n_cols
            d = c + 1
            tris.append([a, c, b])
            tris.append([b, c, d])
    return np.array(verts), np.array(uvs), np.array(tris, dtype=np.int32)


def make_test_template(segments: int, joints: int, seed: int,
                       n_shapes: int = 0) -> SkinnedTemplate:
    """Procedural articulated capsule body (torso plus two limbs for >=5 joints).

    Deterministic for a given seed. Parameters below the minimums (segments 4,
    joints 2) are clamped with a warning.
    """
    if segments < 4:
        warnings.warn(f"segments={segments} below minimum, clamped to 4")
        segments = 4
    if joints < 2:
        warnings.warn(f"joints={joints} below minimum, clamped to 2")
        joints = 2
    rng = np.random.default_rng(seed)

    height = 1.6
    torso_r = 0.16 * (1.0 + 0.05 * rng.standard_normal())
    n_limbs = 2 if joints >= 5 else 0
    n_spine = joints - n_limbs

    spine_y = np.linspace(0.12 * height, 0.95 * height, n_spine)
    joint_pos = [np.array([0.0, y, 0.0]) for y in spine_y]
    parents = [-1] + list(range(n_spine - 1))

    def torso_center(t):
        return np.array([0.0, t * height, 0.0])

    def torso_radius(t):
        # capsule-like taper toward both ends
        return torso_r * np.sqrt(np.clip(1.0 - ((t - 0.5) / 0.58) ** 2, 0.04, 1.0))

    n_rings = max(2 * segments, 8)
    ex, ey, ez = np.eye(3)
    verts, uvs, tris = _tube(torso_center, torso_radius, height, n_rings,
                             segments + 1, (0.01, 0.02, 0.61, 0.98), ex, ez,
                             ellipse=(1.15, 0.82))
    parts = [(verts, uvs, tris)]

    limb_info = []
    if n_limbs:
        shoulder_j = n_spine - 1
        shoulder_y = spine_y[shoulder_j] * 0.98
        # stubby limbs: wide enough that a ~0.1 rad pose error still leaves
        # the rendered limb overlapping its target, so image gradients reach it
        limb_len = 0.28 * height
        limb_r = torso_r * 0.62
        for side, urect in ((+1.0, (0.66, 0.02, 0.80, 0.98)),
                            (-1.0, (0.84, 0.02, 0.98, 0.98))):
            root = np.array([side * torso_r * 0.9, shoulder_y, 0.0])
            tip_dir = np.array([side, -0.25, 0.0])
            tip_dir /= np.linalg.norm(tip_dir)
            joint_pos.append(root)
            parents.append(shoulder_j)

            def limb_center(t, root=root, tip_dir=tip_dir):
                return root + t * limb_len * tip_dir

            def limb_radius(t):
                return limb_r * np.sqrt(np.clip(1.0 - ((t - 0.5) / 0.6) ** 2, 0.06, 1.0))

            axis_u = np.array([0.0, 0.0, 1.0])
            axis_v = np.cross(tip_dir, axis_u)
            lv, lu, lt = _tube(limb_center, limb_radius, limb_len,
                               max(segments, 6), max(segments // 2, 4) + 1,
                               urect, axis_u, axis_v, ellipse=(1.3, 0.72))
            parts.append((lv, lu, lt))
            limb_info.append((len(joint_pos) - 1, root, tip_dir, limb_len))

    offset = 0
    all_v, all_uv, all_t = [], [], []
    part_id = []
    for pid, (v, u, t) in enumerate(parts):
        all_v.append(v)
        all_uv.append(u)
        all_t.append(t + offset)
        part_id.extend([pid] * len(v))
        offset += len(v)
    vertices = np.concatenate(all_v)
    uv = np.concatenate(all_uv)
    triangles = np.concatenate(all_t)
    part_id = np.array(part_id)
    joints_arr = np.array(joint_pos)
    parents_arr = np.array(parents, dtype=np.int32)
    J = len(joint_pos)

    # smooth skinning: torso vertices blend spine joints by height, limb
    # vertices blend between the limb joint and its shoulder along the limb
    weights = np.zeros((len(vertices), J))
    sigma = (spine_y[-1] - spine_y[0]) / max(n_spine - 1, 1) * 0.7 if n_spine > 1 else 1.0
    torso_mask = part_id == 0
    d = vertices[torso_mask, 1:2] - spine_y[None, :]
    w = np.exp(-0.5 * (d / sigma) ** 2)
    weights[np.nonzero(torso_mask)[0][:, None], np.arange(n_spine)[None, :]] = w
    for li, (jidx, root, tip_dir, limb_len) in enumerate(limb_info):
        mask = part_id == 1 + li
        idx = np.nonzero(mask)[0]
        s = np.clip((vertices[mask] - root) @ tip_dir / limb_len, 0.0, 1.0)
        blend = np.clip(s * 3.0, 0.0, 1.0)  # rigidly limb past 1/3 of its length
        weights[idx, jidx] = blend
        weights[idx, parents_arr[jidx]] = 1.0 - blend
    weights /= weights.sum(axis=1, keepdims=True)

    shape_dirs = None
    if n_shapes > 0:
        shape_dirs = np.zeros((n_shapes, len(vertices), 3))
        radial = vertices.copy()
        radial[:, 1] = 0.0
        norms = np.linalg.norm(radial, axis=1, keepdims=True)
        radial = np.where(norms > 1e-9, radial / np.maximum(norms, 1e-9), 0.0)
        shape_dirs[0] = 0.03 * radial                       # girth
        if n_shapes > 1:
            shape_dirs[1, :, 1] = 0.1 * vertices[:, 1] / height  # stature
        for b in range(2, n_shapes):
            shape_dirs[b, :, b % 3] = 0.02 * np.sin((b + 1) * np.pi * vertices[:, 1] / height)

    t = SkinnedTemplate(vertices, triangles, uv, joints_arr, parents_arr, weights,
                        shape_dirs)
    validate_template(t)
    return t


# ---------------------------------------------------------------------------
# shape blendshapes
# ---------------------------------------------------------------------------

def apply_shape(template: SkinnedTemplate, beta) -> np.ndarray:
    """Rest vertices displaced by the linear blendshape basis: v + sum_b beta_b * dir_b."""
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.size == 0:
        return template.vertices.copy()
    if template.shape_dirs is None:
        raise ValueError("template has no shape_dirs but beta is nonempty")
    if beta.size != template.shape_dirs.shape[0]:
        raise ValueError(f"beta length {beta.size} != shape basis size "
                         f"{template.shape_dirs.shape[0]}")
    return template.vertices + np.einsum("b,bvc->vc", beta, template.shape_dirs)


# ---------------------------------------------------------------------------
# forward kinematics and LBS
# ---------------------------------------------------------------------------

def _rigid_about(R, center):
    """4x4 transform rotating by R about a fixed center point."""
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = center - R @ center
    return M


def forward_kinematics(template: SkinnedTemplate, pose: Pose) -> JointTransforms:
    """Root-to-leaf composition of per-joint rotations about rest joint
    positions, then the global root translation. Rest-relative: the identity
    pose yields identity transforms. Derivatives with respect to every
    axis-angle component are computed alongside.
    """
    J = template.n_joints
    theta = np.asarray(pose.theta, dtype=float)
    if theta.shape != (J, 3):
        raise ValueError(f"pose.theta shape {theta.shape} != ({J}, 3)")
    if not (np.isfinite(theta).all() and np.isfinite(pose.trans).all()):
        raise ValueError("pose contains non-finite values")
    world = np.zeros((J, 4, 4))
    d_theta = np.zeros((J, J, 3, 4, 4))

    T_root = np.eye(4)
    T_root[:3, 3] = np.asarray(pose.trans, dtype=float)

    local = np.zeros((J, 4, 4))
    d_local = np.zeros((J, 3, 4, 4))
    for j in range(J):
        R = axis_angle_to_matrix(theta[j])
        local[j] = _rigid_about(R, template.joints[j])
        dR = axis_angle_jacobian(theta[j])
        for a in range(3):
            D = np.zeros((4, 4))
            D[:3, :3] = dR[a]
            D[:3, 3] = -dR[a] @ template.joints[j]
            d_local[j, a] = D

    for j in template.joint_order():
        p = int(template.parents[j])
        parent_world = T_root if p < 0 else world[p]
        world[j] = parent_world @ local[j]
        if p >= 0:
            d_theta[j] = d_theta[p] @ local[j]
        for a in range(3):
            d_theta[j, j, a] = parent_world @ d_local[j, a]
    return JointTransforms(world, d_theta)


def identity_transforms(n_joints) -> JointTransforms:
    world = np.tile(np.eye(4), (n_joints, 1, 1))
    return JointTransforms(world, np.zeros((n_joints, n_joints, 3, 4, 4)))


def _check_weight_rows(weights):
    sums = weights.sum(axis=1)
    off = np.abs(sums - 1.0) > 1e-4
    if off.any():
        bad = int(np.nonzero(off)[0][0])
        raise ValueError(f"skin-weight row {bad} sums to {sums[bad]:.6f}")


def blend_transforms(weights, jt: JointTransforms) -> np.ndarray:
    """Per-point blended 4x4 matrices: M = I + sum_j w_j (G_j - I).

    Algebraically equal to sum_j w_j G_j for convex weights; written in
    deviation form so the identity pose maps points bitwise to themselves.
    """
    dev = jt.world - np.eye(4)
    M = np.einsum("nj,jrc->nrc", weights, dev)
    M += np.eye(4)
    return M


def lbs(points, weights, jt: JointTransforms) -> np.ndarray:
    """Linear blend skinning: apply weight-blended rigid transforms to points.

    points [N, 3], weights [N, J] -> posed [N, 3].
    """
    points = np.asarray(points, dtype=float)
    weights = np.asarray(weights, dtype=float)
    _check_weight_rows(weights)
    M = blend_transforms(weights, jt)
    return np.einsum("nrc,nc->nr", M[:, :3, :3], points) + M[:, :3, 3]


def lbs_jacobians(points, weights, jt: JointTransforms):
    """Analytic Jacobians of the posed positions.

    Returns a dict:
      'points' [N, 3, 3]   d posed / d input point (the blended linear block),
      'theta'  [N, 3, J, 3] d posed / d axis-angle component,
      'trans'  [3, 3]      d posed / d root translation (identity).
    """
    points = np.asarray(points, dtype=float)
    weights = np.asarray(weights, dtype=float)
    M = blend_transforms(weights, jt)
    # [N, J, 3, 4x4] blended transform derivative per pose component
    D = np.einsum("nj,jkarc->nkarc", weights, jt.d_theta)
    d_theta = np.einsum("nkarc,nc->nrka", D[..., :3, :3], points) \
        + D[..., :3, 3].transpose(0, 3, 1, 2)
    return {
        "points": M[:, :3, :3].copy(),
        "theta": d_theta,
        "trans": np.eye(3),
    }


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

def uv_to_pixel(uv, res):
    """Quantize uv coordinates to integer (row, col) pixels at resolution (H, W)."""
    H, W = res
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    col = np.minimum((uv[:, 0] * W).astype(np.int64), W - 1)
    row = np.minimum((uv[:, 1] * H).astype(np.int64), H - 1)
    return np.stack([row, col], axis=1)


def _draw_samples(template, n, rng, areas_cdf):
    r = rng.random(n)
    tri = np.searchsorted(areas_cdf, r, side="right")
    u1 = rng.random(n)
    u2 = rng.random(n)
    s = np.sqrt(u1)
    bary = np.stack([1.0 - s, s * (1.0 - u2), s * u2], axis=1)
    tv = template.triangles[tri]
    uv = np.einsum("nk,nkc->nc", bary, template.uv[tv])
    weights = np.einsum("nk,nkc->nc", bary, template.skin_weights[tv])
    pos = np.einsum("nk,nkc->nc", bary, template.vertices[tv])
    return tri.astype(np.int32), bary, uv, weights, pos


def sample_surface(template: SkinnedTemplate, n: int, seed: int,
                   uv_res=None) -> SurfaceSamples:
    """Area-weighted uniform surface samples, deterministic per seed.

    When ``uv_res`` is given, samples are rejection-resampled so that each one
    owns a distinct pixel of the uv grid at that resolution; the count is
    capped at 90% of the pixels the atlas actually covers (with a warning).
    """
    if n < 1:
        raise ValueError("need at least 1 sample")
    areas = template.triangle_areas()
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("degenerate mesh: zero total surface area")
    cdf = np.cumsum(areas / total)
    cdf[-1] = 1.0
    rng = np.random.default_rng(seed)

    if uv_res is None:
        tri, bary, uv, weights, pos = _draw_samples(template, n, rng, cdf)
        return SurfaceSamples(tri, bary, uv, weights, pos)

    H, W = uv_res
    # estimate how many distinct pixels the atlas can reach
    probe = _draw_samples(template, min(20 * H * W, 400_000), rng, cdf)[2]
    covered = len(np.unique(uv_to_pixel(probe, uv_res)[:, 0] * W
                            + uv_to_pixel(probe, uv_res)[:, 1]))
    cap = int(0.9 * covered)
    if n > cap:
        warnings.warn(f"requested {n} samples exceeds 90% of covered uv pixels "
                      f"({covered} covered at {H}x{W}); clamping to {cap}")
        n = cap

    taken = np.zeros(H * W, dtype=bool)
    chunks = []
    got = 0
    while got < n:
        tri, bary, uv, weights, pos = _draw_samples(template, max(4 * (n - got), 64),
                                                    rng, cdf)
        pix = uv_to_pixel(uv, uv_res)
        flat = pix[:, 0] * W + pix[:, 1]
        keep = np.zeros(len(flat), dtype=bool)
        for i, fp in enumerate(flat):  # first-come within the batch, in draw order
            if not taken[fp]:
                taken[fp] = True
                keep[i] = True
        idx = np.nonzero(keep)[0][: n - got]
        taken_extra = np.nonzero(keep)[0][n - got:]
        taken[flat[taken_extra]] = False  # release pixels beyond the quota
        chunks.append((tri[idx], bary[idx], uv[idx], weights[idx], pos[idx]))
        got += len(idx)
    tri = np.concatenate([c[0] for c in chunks])
    bary = np.concatenate([c[1] for c in chunks])
    uv = np.concatenate([c[2] for c in chunks])
    weights = np.concatenate([c[3] for c in chunks])
    pos = np.concatenate([c[4] for c in chunks])
    return SurfaceSamples(tri, bary, uv, weights, pos)


def build_uv_map(samples: SurfaceSamples, posed_points, res) -> UvPositionalMap:
    """Rasterize posed sample positions into the uv grid.

    Each sample's quantized uv pixel stores that sample's posed position; the
    mask marks exactly those pixels. Pixel collisions keep the first sample
    (and warn) -- the sampling stage is expected to have prevented them.
    """
    H, W = res
    posed_points = np.asarray(posed_points, dtype=float)
    if posed_points.shape != (len(samples), 3):
        raise ValueError(f"posed_points shape {posed_points.shape} != ({len(samples)}, 3)")
    pix = uv_to_pixel(samples.uv, res)
    positions = np.zeros((H, W, 3))
    mask = np.zeros((H, W), dtype=bool)
    sample_index = np.full((H, W), -1, dtype=np.int32)
    flat = pix[:, 0] * W + pix[:, 1]
    order = np.arange(len(flat))
    first = np.zeros(len(flat), dtype=bool)
    seen = np.zeros(H * W, dtype=bool)
    for i in order:
        if not seen[flat[i]]:
            seen[flat[i]] = True
            first[i] = True
    if not first.all():
        warnings.warn(f"{int((~first).sum())} uv pixel collisions; keeping first sample")
    idx = np.nonzero(first)[0]
    positions[pix[idx, 0], pix[idx, 1]] = posed_points[idx]
    mask[pix[idx, 0], pix[idx, 1]] = True
    sample_index[pix[idx, 0], pix[idx, 1]] = idx
    return UvPositionalMap(positions, mask, sample_index)
