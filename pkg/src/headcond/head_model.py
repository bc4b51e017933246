"""Parametric head model: blendshapes + linear blend skinning over four joints.

The skinning chain has five nodes: a global root pivoting at the model
origin, then neck, jaw and the two eyes.  ``skin_weights`` columns follow the
same order (global, neck, jaw, eye_l, eye_r).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rotations import axis_angle_to_matrix

JOINT_NAMES = ("neck", "jaw", "eye_l", "eye_r")
NODE_NAMES = ("global",) + JOINT_NAMES
ASSET_MAGIC = b"FLAPASSET"


@dataclass(frozen=True)
class ModelAsset:
    template: np.ndarray  # (N_v, 3)
    shape_basis: np.ndarray  # (N_v, 3, D_beta)
    expr_basis: np.ndarray  # (N_v, 3, D_psi)
    eyelid_basis: np.ndarray  # (N_v, 3, 2)
    joints_rest: np.ndarray  # (4, 3): neck, jaw, eye_l, eye_r
    parent: np.ndarray  # (4,) parent joint index, -1 = global root
    skin_weights: np.ndarray  # (N_v, 5)
    facets: np.ndarray  # (N_f, 3)
    landmark_idx: np.ndarray  # (K,)

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[2]

    @property
    def n_landmarks(self) -> int:
        return len(self.landmark_idx)

    def validate(self):
        nv = self.n_vertices
        if self.template.shape != (nv, 3):
            raise ValueError("template must be (N_v, 3)")
        for name in ("shape_basis", "expr_basis", "eyelid_basis"):
            b = getattr(self, name)
            if b.ndim != 3 or b.shape[:2] != (nv, 3):
                raise ValueError(f"{name} must be (N_v, 3, D)")
            if not np.all(np.isfinite(b)):
                raise ValueError(f"{name} has non-finite entries")
        if self.eyelid_basis.shape[2] != 2:
            raise ValueError("eyelid_basis must have 2 columns")
        if self.joints_rest.shape != (4, 3) or self.parent.shape != (4,):
            raise ValueError("expected 4 joints")
        for j, p in enumerate(self.parent):
            if not -1 <= p < j:
                raise ValueError("joint parents must precede their children")
        w = self.skin_weights
        if w.shape != (nv, 5) or np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("skin_weights rows must be non-negative and sum to 1")
        if self.facets.size and (self.facets.min() < 0 or self.facets.max() >= nv):
            raise ValueError("facet index out of range")
        if self.landmark_idx.min() < 0 or self.landmark_idx.max() >= nv:
            raise ValueError("landmark index out of range")
        return self

    def restricted(self, idx) -> "ModelAsset":
        """Asset reduced to the vertices ``idx``; skinning is per-vertex so
        evaluating the restriction equals slicing a full evaluation."""
        idx = np.asarray(idx)
        return replace(
            self,
            template=self.template[idx],
            shape_basis=self.shape_basis[idx],
            expr_basis=self.expr_basis[idx],
            eyelid_basis=self.eyelid_basis[idx],
            skin_weights=self.skin_weights[idx],
            facets=np.zeros((0, 3), dtype=np.int64),
            landmark_idx=np.arange(len(idx)),
        )


@dataclass
class HeadCoefficients:
    beta: np.ndarray
    psi_exp: np.ndarray
    psi_eyelids: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta_global: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_neck: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_jaw: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_eye_l: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_eye_r: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).copy())

    @classmethod
    def zeros(cls, n_shape: int, n_expr: int) -> "HeadCoefficients":
        return cls(beta=np.zeros(n_shape), psi_exp=np.zeros(n_expr))

    @classmethod
    def zeros_like_asset(cls, asset: ModelAsset) -> "HeadCoefficients":
        return cls.zeros(asset.n_shape, asset.n_expr)

    def pose(self) -> np.ndarray:
        """(5, 3) axis-angles in node order."""
        return np.stack(
            [self.theta_global, self.theta_neck, self.theta_jaw, self.theta_eye_l, self.theta_eye_r]
        )

    def copy(self, **changes) -> "HeadCoefficients":
        return replace(self, **changes)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, n))) for n in self.__dataclass_fields__)


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    facets: np.ndarray


@dataclass(frozen=True)
class Camera:
    """Weak perspective: drop z, scale uniformly, translate in the image."""

    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("camera scale must be positive")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))


def _check_dims(asset: ModelAsset, coeffs: HeadCoefficients):
    if coeffs.beta.shape != (asset.n_shape,):
        raise ValueError(f"beta has shape {coeffs.beta.shape}, asset expects ({asset.n_shape},)")
    if coeffs.psi_exp.shape != (asset.n_expr,):
        raise ValueError(f"psi_exp has shape {coeffs.psi_exp.shape}, asset expects ({asset.n_expr},)")
    if coeffs.psi_eyelids.shape != (2,):
        raise ValueError("psi_eyelids must have 2 entries")
    for name in ("theta_global", "theta_neck", "theta_jaw", "theta_eye_l", "theta_eye_r"):
        if getattr(coeffs, name).shape != (3,):
            raise ValueError(f"{name} must be an axis-angle 3-vector")


def shaped_vertices(asset, beta, psi, eyelids):
    """Rest-pose vertices after blendshapes; inputs batched (B, D)."""
    return (
        asset.template
        + np.einsum("nkd,bd->bnk", asset.shape_basis, beta)
        + np.einsum("nkd,bd->bnk", asset.expr_basis, psi)
        + np.einsum("nkd,bd->bnk", asset.eyelid_basis, eyelids)
    )


def node_transforms(asset, poses):
    """Skinning transforms for each node.

    poses: (B, 5, 3) axis-angles.  Returns rotations (B, 5, 3, 3) and
    translations (B, 5, 3) so that a vertex bound to node j maps to
    ``R[j] @ v + t[j]``.
    """
    rots = axis_angle_to_matrix(poses)
    B = poses.shape[0]
    joint_pos = np.vstack([np.zeros(3), asset.joints_rest])  # global pivots at origin
    parents = np.concatenate([[-1], np.asarray(asset.parent) + 1])

    # G_j(v) = G_parent(p_j + R_j (v - p_j)); a zero pose gives exactly (I, 0)
    skin_R = np.empty((B, 5, 3, 3))
    skin_t = np.empty((B, 5, 3))
    skin_R[:, 0] = rots[:, 0]
    skin_t[:, 0] = 0.0
    for j in range(1, 5):
        p = parents[j]
        local_t = joint_pos[j] - rots[:, j] @ joint_pos[j]
        skin_R[:, j] = skin_R[:, p] @ rots[:, j]
        skin_t[:, j] = np.einsum("bkl,bl->bk", skin_R[:, p], local_t) + skin_t[:, p]
    return skin_R, skin_t


def evaluate_batch(asset: ModelAsset, beta, psi, eyelids, poses) -> np.ndarray:
    """Vectorized evaluation over a batch of coefficient sets -> (B, N_v, 3)."""
    v = shaped_vertices(asset, beta, psi, eyelids)
    R, t = node_transforms(asset, poses)
    W = asset.skin_weights
    # blend (R - I) so that a zero pose returns the shaped vertices bit-exactly
    M = np.einsum("nj,bjkl->bnkl", W, R - np.eye(3))
    T = np.einsum("nj,bjk->bnk", W, t)
    return v + np.einsum("bnkl,bnl->bnk", M, v) + T


def evaluate(asset: ModelAsset, coeffs: HeadCoefficients) -> Mesh:
    _check_dims(asset, coeffs)
    verts = evaluate_batch(
        asset,
        coeffs.beta[None],
        coeffs.psi_exp[None],
        coeffs.psi_eyelids[None],
        coeffs.pose()[None],
    )[0]
    return Mesh(vertices=verts, facets=asset.facets)


def project_points(points, camera: Camera) -> np.ndarray:
    points = np.asarray(points)
    return camera.scale * points[..., :2] + camera.translation


def project(mesh: Mesh, camera: Camera, landmark_idx) -> np.ndarray:
    """(K, 2) image-space landmarks."""
    idx = np.asarray(landmark_idx)
    if idx.size and (idx.min() < 0 or idx.max() >= len(mesh.vertices)):
        raise IndexError("landmark index out of range")
    return project_points(mesh.vertices[idx], camera)


def render_landmarks(asset: ModelAsset, coeffs: HeadCoefficients, camera: Camera) -> np.ndarray:
    return project(evaluate(asset, coeffs), camera, asset.landmark_idx)


# ---------------------------------------------------------------------------
# procedural desk-scale asset


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    golden = np.pi * (1.0 + 5.0**0.5)
    theta = golden * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)


def _smoothstep(x, lo, hi):
    u = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def make_desk_asset(
    n_vertices: int = 300,
    n_landmarks: int = 68,
    n_shape: int = 10,
    n_expr: int = 20,
    seed: int = 0,
) -> ModelAsset:
    """Ellipsoidal head with a jaw region, two eye patches and random bases.

    The face points toward +z; y is up.  Deterministic for a given seed.
    """
    from scipy.spatial import ConvexHull

    rng = np.random.default_rng(seed)
    unit = _fibonacci_sphere(n_vertices)
    radii = np.array([0.78, 1.0, 0.88])
    verts = unit * radii

    hull = ConvexHull(unit)
    facets = hull.simplices.astype(np.int64)
    # orient outward
    a, b, c = (unit[facets[:, k]] for k in range(3))
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    facets[flip] = facets[flip][:, [0, 2, 1]]

    joints = np.array(
        [
            [0.0, -0.85, -0.15],  # neck
            [0.0, -0.30, 0.05],  # jaw
            [0.30, 0.28, 0.55],  # eye_l
            [-0.30, 0.28, 0.55],  # eye_r
        ]
    )
    parent = np.array([-1, 0, 1, 1])

    eye_surface = []
    for e in joints[2:]:
        d = e / np.linalg.norm(e / radii)  # ray from origin through the eye hits the ellipsoid
        eye_surface.append(d)
    eye_w = [np.exp(-((np.linalg.norm(verts - s, axis=1) / 0.24) ** 4)) for s in eye_surface]
    jaw_w = _smoothstep(-verts[:, 1], 0.25, 0.45) * _smoothstep(verts[:, 2], -0.35, 0.05)
    neck_w = _smoothstep(-verts[:, 1], 0.65, 0.90) * (1.0 - jaw_w)
    raw = np.stack([np.zeros(n_vertices), neck_w, jaw_w, eye_w[0], eye_w[1]], axis=1)
    raw = np.where(raw < 1e-3, 0.0, raw)
    raw[:, 0] = np.maximum(1.0 - raw[:, 1:].sum(axis=1), 0.0) + 0.05
    weights = raw / raw.sum(axis=1, keepdims=True)

    front = _smoothstep(verts[:, 2] / radii[2], -0.1, 0.5)
    shape_basis = 0.02 * rng.standard_normal((n_vertices, 3, n_shape))
    expr_basis = 0.03 * rng.standard_normal((n_vertices, 3, n_expr)) * front[:, None, None]
    eyelid_basis = np.zeros((n_vertices, 3, 2))
    for k, s in enumerate(eye_surface):
        region = np.exp(-((np.linalg.norm(verts - s, axis=1) / 0.25) ** 2))
        eyelid_basis[:, 1, k] = -0.04 * region * (0.5 + rng.uniform(size=n_vertices))
        eyelid_basis[:, 2, k] = 0.01 * region * rng.standard_normal(n_vertices)

    # landmarks: every eye-bound frontal vertex, a bounded share of the jaw, then the rest of the face
    frontal = np.flatnonzero(verts[:, 2] / radii[2] > 0.15)
    eyes = [i for i in frontal if weights[i, 3] > 0.3 or weights[i, 4] > 0.3]
    jaw = np.array([i for i in frontal if weights[i, 2] > 0.3 and i not in eyes], dtype=np.int64)
    jaw = rng.choice(jaw, size=min(len(jaw), n_landmarks // 4), replace=False) if len(jaw) else jaw
    must = np.concatenate([eyes, jaw]).astype(np.int64)[:n_landmarks]
    rest = np.setdiff1d(frontal, np.flatnonzero(weights[:, 2] > 0.3))
    rest = np.setdiff1d(rest, must)
    if len(must) + len(rest) < n_landmarks:
        rest = np.setdiff1d(np.arange(n_vertices), must)
    fill = rng.choice(rest, size=n_landmarks - len(must), replace=False)
    landmark_idx = np.sort(np.concatenate([must, fill]).astype(np.int64))

    return ModelAsset(
        template=verts,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        eyelid_basis=eyelid_basis,
        joints_rest=joints,
        parent=parent,
        skin_weights=weights,
        facets=facets,
        landmark_idx=landmark_idx,
    ).validate()


# ---------------------------------------------------------------------------
# asset container: magic, five uint64 dims, then arrays in declared order.
# floats are little-endian float64, indices little-endian int64.

_ASSET_LAYOUT = (
    ("template", "f8", lambda d: (d["N_v"], 3)),
    ("shape_basis", "f8", lambda d: (d["N_v"], 3, d["D_beta"])),
    ("expr_basis", "f8", lambda d: (d["N_v"], 3, d["D_psi"])),
    ("eyelid_basis", "f8", lambda d: (d["N_v"], 3, 2)),
    ("joints_rest", "f8", lambda d: (4, 3)),
    ("parent", "i8", lambda d: (4,)),
    ("skin_weights", "f8", lambda d: (d["N_v"], 5)),
    ("facets", "i8", lambda d: (d["N_f"], 3)),
    ("landmark_idx", "i8", lambda d: (d["K"],)),
)
_DIM_NAMES = ("N_v", "N_f", "K", "D_beta", "D_psi")


def save_asset(asset: ModelAsset, path) -> Path:
    path = Path(path)
    dims = {
        "N_v": asset.n_vertices,
        "N_f": len(asset.facets),
        "K": asset.n_landmarks,
        "D_beta": asset.n_shape,
        "D_psi": asset.n_expr,
    }
    with open(path, "wb") as f:
        f.write(ASSET_MAGIC)
        f.write(struct.pack("<5Q", *(dims[k] for k in _DIM_NAMES)))
        for name, dtype, _ in _ASSET_LAYOUT:
            f.write(np.ascontiguousarray(getattr(asset, name), dtype="<" + dtype).tobytes())

    lines = ["format: FLAPASSET v1", "byte_order: little", "float: float64", "index: int64"]
    lines += [f"{k}: {dims[k]}" for k in _DIM_NAMES]
    lines += [f"array: {name} {dtype} {shape(dims)}" for name, dtype, shape in _ASSET_LAYOUT]
    path.with_name(path.name + ".manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def load_asset(path) -> ModelAsset:
    data = Path(path).read_bytes()
    if not data.startswith(ASSET_MAGIC):
        raise ValueError(f"{path}: not a head-model asset (bad magic)")
    off = len(ASSET_MAGIC)
    dims = dict(zip(_DIM_NAMES, struct.unpack_from("<5Q", data, off)))
    off += 40
    arrays = {}
    for name, dtype, shape_fn in _ASSET_LAYOUT:
        shape = shape_fn(dims)
        n = int(np.prod(shape))
        nbytes = n * 8
        if off + nbytes > len(data):
            raise ValueError(f"{path}: truncated at array {name}")
        arr = np.frombuffer(data, dtype="<" + dtype, count=n, offset=off).reshape(shape)
        arrays[name] = arr.astype(np.float64 if dtype == "f8" else np.int64)
        off += nbytes
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return ModelAsset(**arrays).validate()
