"""Rotation helpers: axis-angle, 6D representation, log map and SO(3) distances.

All functions accept a single rotation or a batch along the leading axes.
Angles are radians; matrices act on column vectors.
"""

import numpy as np

_SMALL = 1e-8


def axis_angle_to_matrix(r):
    """Rodrigues formula. ``r`` has shape (..., 3); returns (..., 3, 3)."""
    r = np.asarray(r, dtype=np.float64)
    theta2 = np.sum(r * r, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < _SMALL
    safe = np.where(small, 1.0, theta)
    # series expansions keep the zero vector exact and avoid 0/0
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))

    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def matrix_to_quaternion(R):
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    trace = m00 + m11 + m22
    # Shepperd: pick the largest of 4w^2, 4x^2, 4y^2, 4z^2 for stability
    cands = np.stack([trace, m00, m11, m22], axis=-1)
    choice = np.argmax(cands, axis=-1)

    q = np.empty(R.shape[:-2] + (4,))
    s = np.sqrt(np.maximum(1.0 + trace, 0.0)) * 2.0
    qw = np.stack(
        [
            0.25 * s,
            (R[..., 2, 1] - R[..., 1, 2]) / np.where(s == 0, 1, s),
            (R[..., 0, 2] - R[..., 2, 0]) / np.where(s == 0, 1, s),
            (R[..., 1, 0] - R[..., 0, 1]) / np.where(s == 0, 1, s),
        ],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0)) * 2.0
    s = np.where(s == 0, 1, s)
    qx = np.stack(
        [
            (R[..., 2, 1] - R[..., 1, 2]) / s,
            0.25 * s,
            (R[..., 0, 1] + R[..., 1, 0]) / s,
            (R[..., 0, 2] + R[..., 2, 0]) / s,
        ],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 0.0)) * 2.0
    s = np.where(s == 0, 1, s)
    qy = np.stack(
        [
            (R[..., 0, 2] - R[..., 2, 0]) / s,
            (R[..., 0, 1] + R[..., 1, 0]) / s,
            0.25 * s,
            (R[..., 1, 2] + R[..., 2, 1]) / s,
        ],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 0.0)) * 2.0
    s = np.where(s == 0, 1, s)
    qz = np.stack(
        [
            (R[..., 1, 0] - R[..., 0, 1]) / s,
            (R[..., 0, 2] + R[..., 2, 0]) / s,
            (R[..., 1, 2] + R[..., 2, 1]) / s,
            0.25 * s,
        ],
        axis=-1,
    )
    all_q = np.stack([qw, qx, qy, qz], axis=-2)
    q = np.take_along_axis(all_q, choice[..., None, None], axis=-2)[..., 0, :]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def matrix_to_axis_angle(R):
    """Log map of SO(3). Output norms lie in [0, pi]."""
    q = matrix_to_quaternion(R)
    w = q[..., 0]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    small = s < _SMALL
    # angle / s -> 2 / w as s -> 0 (w ~ 1 there)
    factor = np.where(small, 2.0 / np.where(w == 0, 1.0, w), angle / np.where(small, 1.0, s))
    return v * factor[..., None]


def canonical_axis_angle(r):
    """Re-express an axis-angle vector with norm in [0, pi]."""
    return matrix_to_axis_angle(axis_angle_to_matrix(r))


def rot6d_from_matrix(R):
    """First two columns, concatenated: [c0, c1]."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot6d_from_axis_angle(r):
    return rot6d_from_matrix(axis_angle_to_matrix(r))


def rot6d_to_matrix(v6, eps=1e-9):
    """Gram-Schmidt on the two stored columns, third column by cross product.

    Raises ValueError for a zero or (near-)parallel pair of columns.
    """
    v6 = np.asarray(v6, dtype=np.float64)
    a1, a2 = v6[..., 0:3], v6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < eps):
        raise ValueError("degenerate 6D rotation: first column is zero")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < eps * np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), 1.0)):
        raise ValueError("degenerate 6D rotation: columns are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_to_axis_angle(v6):
    return matrix_to_axis_angle(rot6d_to_matrix(v6))


def geodesic_distance(R1, R2):
    """Angle of the relative rotation R1^T R2, in radians."""
    rel = np.swapaxes(np.asarray(R1), -1, -2) @ np.asarray(R2)
    return np.linalg.norm(matrix_to_axis_angle(rel), axis=-1)


def compose_axis_angle(a, b):
    """Axis-angle of R(a) @ R(b)."""
    return matrix_to_axis_angle(axis_angle_to_matrix(a) @ axis_angle_to_matrix(b))


def slerp_matrix(R0, R1, alpha):
    """Geodesic interpolation R0 exp(alpha log(R0^T R1))."""
    R0 = np.asarray(R0, dtype=np.float64)
    rel = matrix_to_axis_angle(np.swapaxes(R0, -1, -2) @ np.asarray(R1))
    alpha = np.asarray(alpha, dtype=np.float64)
    return R0 @ axis_angle_to_matrix(rel * alpha[..., None])
