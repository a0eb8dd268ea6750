"""Axis-angle rotation utilities (Rodrigues form) and their derivatives."""

import numpy as np

_EPS = 1e-12


def skew(v):
    """Cross-product matrix [v]x such that skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(theta):
    """Rodrigues: 3-vector axis-angle -> 3x3 rotation matrix."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    K = skew(theta)
    if angle < _EPS:
        # second-order Taylor keeps the result orthonormal to machine precision
        return np.eye(3) + K + 0.5 * (K @ K)
    s, c = np.sin(angle), np.cos(angle)
    K = K / angle
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def matrix_to_axis_angle(R):
    """Inverse Rodrigues. Valid for angles in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_a = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_a)
    if angle < 1e-10:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near pi the off-diagonal formula degenerates; use the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs from the off-diagonal entries
        if A[0, 1] < 0:
            axis[1] = -axis[1]
        if A[0, 2] < 0:
            axis[2] = -axis[2]
        if axis[0] == 0.0 and A[1, 2] < 0:
            axis[2] = -abs(axis[2])
        n = np.linalg.norm(axis)
        if n == 0.0:
            return np.zeros(3)
        return angle * axis / n
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return angle * axis / (2.0 * np.sin(angle))


def axis_angle_jacobian(theta):
    """dR/dtheta_i for R = Rodrigues(theta).

    Returns [3, 3, 3]: entry [i] is the 3x3 derivative of R with respect to
    component i of the axis-angle vector (Gallego & Yezzi closed form).
    """
    theta = np.asarray(theta, dtype=float)
    angle2 = float(theta @ theta)
    R = axis_angle_to_matrix(theta)
    out = np.empty((3, 3, 3))
    if angle2 < _EPS * _EPS:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out[i] = skew(e)
        return out
    K = skew(theta)
    ImR = np.eye(3) - R
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        out[i] = ((theta[i] * K + skew(np.cross(theta, ImR @ e))) / angle2) @ R
    return out


def geodesic_angle(Ra, Rb):
    """Angle of the relative rotation between two rotation matrices, radians."""
    cos_a = np.clip((np.trace(Ra.T @ Rb) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_a))


def compose_axis_angle(a, b):
    """Axis-angle of Rodrigues(a) @ Rodrigues(b)."""
    return matrix_to_axis_angle(axis_angle_to_matrix(a) @ axis_angle_to_matrix(b))
