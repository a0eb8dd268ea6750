"""Animatable isotropic Gaussian cloud living on the template surface.

Every point carries a canonical base position, a corrective offset, an RGB
color, a scalar scale and propagated skin weights. Rotation is the identity
quaternion and opacity is 1 for all points by construction: neither is stored
per point and no API mutates them.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .template import (JointTransforms, SkinnedTemplate, SurfaceSamples,
                       blend_transforms, lbs, lbs_jacobians)

FORMAT_VERSION = 1
SCALE_FLOOR = 1e-4  # meters; keeps splats renderable for any finite prediction

IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])
OPACITY = 1.0


@dataclass
class GaussianCloud:
    base_pos: np.ndarray      # [N, 3] canonical positions on the template surface
    offset: np.ndarray        # [N, 3] corrective displacement, canonical space
    color: np.ndarray         # [N, 3] RGB in [0,1]
    scale: np.ndarray         # [N] isotropic stddev, meters, > 0
    skin_weights: np.ndarray  # [N, J]
    base_scale: float         # scale produced by a zero prediction (activation anchor)

    def __len__(self):
        return self.base_pos.shape[0]

    @property
    def rotation(self):
        """Fixed identity quaternion, shared by every point."""
        return IDENTITY_QUATERNION.copy()

    @property
    def opacity(self):
        """Fixed opacity of 1 for every point."""
        return OPACITY

    def canonical_positions(self):
        return self.base_pos + self.offset


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def scale_activation(pred, base_scale, floor=SCALE_FLOOR):
    """Positive scale from a raw prediction: floor + gain * softplus(pred).

    The gain is chosen so a zero prediction reproduces ``base_scale``, which
    makes zero-initialized prediction heads render the freshly initialized
    cloud (the cold-start frame).
    """
    gain = (base_scale - floor) / np.log(2.0)
    return floor + gain * softplus(pred)


def scale_activation_grad(pred, base_scale, floor=SCALE_FLOOR):
    gain = (base_scale - floor) / np.log(2.0)
    return gain * sigmoid(pred)


def mean_nn_distance(points):
    """Mean distance to the nearest other point."""
    if len(points) < 2:
        raise ValueError("need at least 2 points for nearest-neighbor distance")
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].mean())


def init_cloud(samples: SurfaceSamples, init_scale=None) -> GaussianCloud:
    """Fresh cloud on the sampled surface: zero offsets, 0.5 gray, uniform scale.

    ``init_scale=None`` uses 0.6x the mean nearest-neighbor distance among the
    samples, which covers the surface without heavy overlap.
    """
    if len(samples) == 0:
        raise ValueError("empty sample array")
    n = len(samples)
    if init_scale is None:
        init_scale = 0.6 * mean_nn_distance(samples.position)
    return GaussianCloud(
        base_pos=samples.position.copy(),
        offset=np.zeros((n, 3)),
        color=np.full((n, 3), 0.5),
        scale=np.full(n, float(init_scale)),
        skin_weights=samples.weights.copy(),
        base_scale=float(init_scale),
    )


def _closest_point_weights(points, template: SkinnedTemplate, chunk=256):
    """Barycentric skin weights at the closest surface point of each query."""
    tv = template.vertices[template.triangles]  # [T, 3, 3]
    a, b, c = tv[:, 0], tv[:, 1], tv[:, 2]
    ab, ac = b - a, c - a
    out = np.empty((len(points), template.n_joints))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk][:, None, :]      # [n, 1, 3]
        ap = p - a[None]
        d1 = np.einsum("tc,ntc->nt", ab, ap)
        d2 = np.einsum("tc,ntc->nt", ac, ap)
        bp = p - b[None]
        d3 = np.einsum("tc,ntc->nt", ab, bp)
        d4 = np.einsum("tc,ntc->nt", ac, bp)
        cp = p - c[None]
        d5 = np.einsum("tc,ntc->nt", ab, cp)
        d6 = np.einsum("tc,ntc->nt", ac, cp)
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        # region cascade (Ericson): start from the interior solution and
        # overwrite with edge/vertex projections where they apply
        denom = va + vb + vc
        denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
        v = vb / denom
        w = vc / denom
        v_ab = d1 / np.where(d1 - d3 == 0.0, 1.0, d1 - d3)
        w_ac = d2 / np.where(d2 - d6 == 0.0, 1.0, d2 - d6)
        w_bc = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0.0, 1.0,
                                    (d4 - d3) + (d5 - d6))
        on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        v = np.where(on_bc, 1.0 - w_bc, v)
        w = np.where(on_bc, w_bc, w)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        v = np.where(on_ac, 0.0, v)
        w = np.where(on_ac, w_ac, w)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v = np.where(on_ab, v_ab, v)
        w = np.where(on_ab, 0.0, w)
        at_c = (d6 >= 0) & (d5 <= d6)
        v = np.where(at_c, 0.0, v)
        w = np.where(at_c, 1.0, w)
        at_b = (d3 >= 0) & (d4 <= d3)
        v = np.where(at_b, 1.0, v)
        w = np.where(at_b, 0.0, w)
        at_a = (d1 <= 0) & (d2 <= 0)
        v = np.where(at_a, 0.0, v)
        w = np.where(at_a, 0.0, w)
        u = 1.0 - v - w
        closest = u[..., None] * a[None] + v[..., None] * b[None] + w[..., None] * c[None]
        dist2 = np.sum((p - closest) ** 2, axis=2)
        best = np.argmin(dist2, axis=1)
        rows = np.arange(len(best))
        tidx = template.triangles[best]
        bary = np.stack([u[rows, best], v[rows, best], w[rows, best]], axis=1)
        out[s:s + chunk] = np.einsum("nk,nkj->nj", bary, template.skin_weights[tidx])
    return out


def propagate_weights(cloud: GaussianCloud, template: SkinnedTemplate,
                      mode: str = "barycentric") -> GaussianCloud:
    """Re-derive skin weights for the cloud from the template surface.

    'nearest' copies the closest vertex's weights; 'barycentric' interpolates
    inside the closest triangle (exact for points on the surface). Rows sum
    to 1 in both modes.
    """
    if template.n_vertices == 0:
        raise ValueError("empty template")
    pts = cloud.canonical_positions()
    if mode == "nearest":
        _, idx = cKDTree(template.vertices).query(pts, k=1)
        w = template.skin_weights[idx].copy()
    elif mode == "barycentric":
        w = _closest_point_weights(pts, template)
    else:
        raise ValueError(f"unknown propagation mode '{mode}'")
    return replace(cloud, skin_weights=w)


def apply_properties(cloud: GaussianCloud, pred_offset, pred_color,
                     pred_scale) -> GaussianCloud:
    """Install network predictions: raw offsets, sigmoid colors, softplus scales.

    Rotation and opacity are untouched by construction (they are not state).
    """
    n = len(cloud)
    pred_offset = np.asarray(pred_offset, dtype=float)
    pred_color = np.asarray(pred_color, dtype=float)
    pred_scale = np.asarray(pred_scale, dtype=float).reshape(-1)
    if pred_offset.shape != (n, 3) or pred_color.shape != (n, 3) \
            or pred_scale.shape != (n,):
        raise ValueError(
            f"prediction shapes {pred_offset.shape}/{pred_color.shape}/"
            f"{pred_scale.shape} do not match cloud of {n} points")
    return replace(
        cloud,
        offset=pred_offset.copy(),
        color=sigmoid(pred_color),
        scale=scale_activation(pred_scale, cloud.base_scale),
    )


def repose(cloud: GaussianCloud, jt: JointTransforms, with_jacobians=False):
    """Skin the cloud into the posed frame: lbs(base + offset, weights, jt).

    The isotropic scale is pose-invariant (rigid blends preserve the scalar).
    With ``with_jacobians`` also returns d posed / d {offset, theta, trans}.
    """
    if jt.n_joints != cloud.skin_weights.shape[1]:
        raise ValueError(f"transform joint count {jt.n_joints} != weight length "
                         f"{cloud.skin_weights.shape[1]}")
    pts = cloud.canonical_positions()
    posed = lbs(pts, cloud.skin_weights, jt)
    if not with_jacobians:
        return posed
    jac = lbs_jacobians(pts, cloud.skin_weights, jt)
    jac["offset"] = jac["points"]  # offsets enter before skinning
    return posed, jac


def save_cloud(cloud: GaussianCloud, path):
    """Versioned binary checkpoint; round-trips bitwise."""
    np.savez(path,
             format_version=np.int64(FORMAT_VERSION),
             base_pos=cloud.base_pos,
             offset=cloud.offset,
             color=cloud.color,
             scale=cloud.scale,
             skin_weights=cloud.skin_weights,
             base_scale=np.float64(cloud.base_scale))


def load_cloud(path) -> GaussianCloud:
    with np.load(path) as z:
        if int(z["format_version"]) != FORMAT_VERSION:
            raise ValueError(f"unsupported cloud format version {int(z['format_version'])}")
        return GaussianCloud(
            base_pos=z["base_pos"],
            offset=z["offset"],
            color=z["color"],
            scale=z["scale"],
            skin_weights=z["skin_weights"],
            base_scale=float(z["base_scale"]),
        )
