import numpy as np
import pytest

from splatfit.template import SkinnedTemplate, validate_template


def rel_err(analytic, fd, floor=None):
    """Worst relative disagreement.

    Entries far below the gradient's own magnitude are measured against
    0.1% of that magnitude, which keeps finite-difference cancellation noise
    on near-zero entries from dominating while still catching real errors.
    """
    analytic = np.asarray(analytic, dtype=float)
    fd = np.asarray(fd, dtype=float)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(fd).max(initial=0.0),
                1e-12)
    if floor is None:
        floor = 1e-3 * scale
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return float(np.max(np.abs(analytic - fd) / denom))


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar f over every entry of x."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


@pytest.fixture
def single_triangle_template():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    t = SkinnedTemplate(
        vertices=verts,
        triangles=np.array([[0, 1, 2]], dtype=np.int32),
        uv=np.array([[0.1, 0.1], [0.9, 0.1], [0.1, 0.9]]),
        joints=np.array([[0.0, 0.0, 0.0]]),
        parents=np.array([-1], dtype=np.int32),
        skin_weights=np.ones((3, 1)),
    )
    validate_template(t)
    return t


@pytest.fixture
def two_joint_chain():
    """Minimal 2-joint template with the root at the origin."""
    verts = np.array([[0.0, 0.0, 0.0], [0.1, 0.5, 0.0], [0.0, 1.0, 0.1],
                      [0.0, 1.5, 0.0]])
    t = SkinnedTemplate(
        vertices=verts,
        triangles=np.array([[0, 1, 2], [1, 2, 3]], dtype=np.int32),
        uv=np.array([[0.1, 0.1], [0.5, 0.2], [0.2, 0.6], [0.8, 0.8]]),
        joints=np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        parents=np.array([-1, 0], dtype=np.int32),
        skin_weights=np.array([[1.0, 0.0], [0.8, 0.2], [0.3, 0.7], [0.0, 1.0]]),
    )
    validate_template(t)
    return t
