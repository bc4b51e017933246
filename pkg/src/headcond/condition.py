"""The 120-dim per-frame head condition and the edits users can apply to it.

Layout (offsets into the flat vector)::

    [0:3]     global rotation, axis-angle
    [3:15]    eyes, two 6D rotations (left then right)
    [15:18]   jaw, axis-angle
    [18:20]   eyelids
    [20:120]  expression, zero-padded when the model has fewer than 100
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .files import fmt_float
from .head_model import HeadCoefficients
from .rotations import (
    axis_angle_to_matrix,
    matrix_to_axis_angle,
    rot6d_from_axis_angle,
    rot6d_from_matrix,
    rot6d_to_axis_angle,
    rot6d_to_matrix,
    slerp_matrix,
)

COND_DIM = 120
EXPR_WIDTH = 100
GLOBAL = slice(0, 3)
EYES = slice(3, 15)
EYE_L = slice(3, 9)
EYE_R = slice(9, 15)
JAW = slice(15, 18)
EYELIDS = slice(18, 20)
EXPR = slice(20, 120)
# everything the expression pathway consumes
EXPRESSION_PART = slice(3, 120)

LAYOUT = {
    "theta_globalR": [0, 3],
    "theta_eyes": [3, 15],
    "theta_jaw": [15, 18],
    "psi_eyelids": [18, 20],
    "psi_exp": [20, 120],
}
FORMAT_VERSION = 1
BINARY_MAGIC = b"HCONDCOND"

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def idle_vector() -> np.ndarray:
    """Neutral face, canonical pose: zeros except identity eye rotations."""
    v = np.zeros(COND_DIM)
    v[EYE_L] = IDENTITY_6D
    v[EYE_R] = IDENTITY_6D
    return v


@dataclass(frozen=True)
class HeadCondition:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (COND_DIM,):
            raise ValueError(f"head condition must have {COND_DIM} entries, got {v.shape}")
        object.__setattr__(self, "vector", v)

    @property
    def theta_globalR(self):
        return self.vector[GLOBAL]

    @property
    def theta_eyes(self):
        return self.vector[EYES]

    @property
    def theta_jaw(self):
        return self.vector[JAW]

    @property
    def psi_eyelids(self):
        return self.vector[EYELIDS]

    @property
    def psi_exp(self):
        return self.vector[EXPR]


@dataclass(frozen=True)
class ConditionSequence:
    """Per-frame conditions stacked as an (n, 120) array."""

    frames: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim == 1:
            f = f[None]
        if f.ndim != 2 or f.shape[1] != COND_DIM:
            raise ValueError(f"condition frames must be (n, {COND_DIM}), got {f.shape}")
        if len(f) == 0:
            raise ValueError("condition sequence is empty")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        object.__setattr__(self, "frames", f)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> HeadCondition:
        return HeadCondition(self.frames[i])

    @classmethod
    def from_conditions(cls, conds, fps=25.0):
        return cls(np.stack([c.vector for c in conds]), fps)

    @classmethod
    def idle(cls, n=1, fps=25.0):
        return cls(np.tile(idle_vector(), (n, 1)), fps)


@dataclass(frozen=True)
class PoseEdit:
    mode: str  # overlay | absolute | fixed
    angles: np.ndarray

    def __post_init__(self):
        if self.mode not in ("overlay", "absolute", "fixed"):
            raise ValueError(f"unknown pose edit mode {self.mode!r}")
        a = np.asarray(self.angles, dtype=np.float64)
        if self.mode == "fixed":
            if a.shape != (3,):
                raise ValueError("fixed pose edit takes a single 3-vector")
        elif a.ndim != 2 or a.shape[1] != 3:
            raise ValueError(f"{self.mode} pose edit takes per-frame 3-vectors")
        if not np.all(np.isfinite(a)):
            raise ValueError("pose edit angles must be finite")
        object.__setattr__(self, "angles", a)


# ---------------------------------------------------------------------------


def encode(coeffs: HeadCoefficients) -> HeadCondition:
    n_expr = len(coeffs.psi_exp)
    if n_expr > EXPR_WIDTH:
        raise ValueError(f"at most {EXPR_WIDTH} expression coefficients fit the condition")
    v = np.zeros(COND_DIM)
    v[GLOBAL] = coeffs.theta_global
    v[EYE_L] = rot6d_from_axis_angle(coeffs.theta_eye_l)
    v[EYE_R] = rot6d_from_axis_angle(coeffs.theta_eye_r)
    v[JAW] = coeffs.theta_jaw
    v[EYELIDS] = coeffs.psi_eyelids
    v[EXPR.start : EXPR.start + n_expr] = coeffs.psi_exp
    return HeadCondition(v)


def decode(cond: HeadCondition, beta, n_expr: int) -> HeadCoefficients:
    """Inverse of :func:`encode` on the fields the condition carries.

    The identity shape is not part of the condition and comes from the caller;
    the neck is held at rest.
    """
    v = cond.vector if isinstance(cond, HeadCondition) else HeadCondition(cond).vector
    return HeadCoefficients(
        beta=np.asarray(beta, dtype=np.float64),
        psi_exp=v[EXPR.start : EXPR.start + n_expr],
        psi_eyelids=v[EYELIDS],
        theta_global=v[GLOBAL],
        theta_jaw=v[JAW],
        theta_eye_l=rot6d_to_axis_angle(v[EYE_L]),
        theta_eye_r=rot6d_to_axis_angle(v[EYE_R]),
    )


def encode_sequence(coeff_seq, fps=25.0) -> ConditionSequence:
    return ConditionSequence(np.stack([encode(c).vector for c in coeff_seq]), fps)


def apply_pose_edit(seq: ConditionSequence, edit: PoseEdit) -> ConditionSequence:
    frames = seq.frames.copy()
    n = len(frames)
    if edit.mode == "fixed":
        frames[:, GLOBAL] = edit.angles
    else:
        if len(edit.angles) != n:
            raise ValueError(f"pose edit has {len(edit.angles)} frames, sequence has {n}")
        if edit.mode == "absolute":
            frames[:, GLOBAL] = edit.angles
        else:
            R = axis_angle_to_matrix(edit.angles) @ axis_angle_to_matrix(frames[:, GLOBAL])
            moved = np.any(edit.angles != 0.0, axis=1)
            frames[moved, GLOBAL] = matrix_to_axis_angle(R[moved])
    return ConditionSequence(frames, seq.fps)


def swap_expression(target: ConditionSequence, source="idle") -> ConditionSequence:
    """Replace everything but the global rotation with ``source``.

    ``source`` is another sequence (length 1 broadcasts) or the string "idle".
    """
    if isinstance(source, str):
        if source != "idle":
            raise ValueError(f"unknown expression source {source!r}")
        src = idle_vector()[None]
    else:
        src = source.frames
        if len(src) not in (1, len(target)):
            raise ValueError(f"expression source has {len(src)} frames, target has {len(target)}")
    frames = target.frames.copy()
    frames[:, EXPRESSION_PART] = np.broadcast_to(src[:, EXPRESSION_PART], frames[:, EXPRESSION_PART].shape)
    return ConditionSequence(frames, target.fps)


def resample(seq: ConditionSequence, target_fps: float) -> ConditionSequence:
    """Re-time a sequence: slerp on rotation slices, linear on the rest."""
    if not target_fps > 0:
        raise ValueError("target fps must be positive")
    if target_fps == seq.fps:
        return ConditionSequence(seq.frames.copy(), seq.fps)
    n = len(seq)
    duration = (n - 1) / seq.fps
    n_out = int(np.floor(duration * target_fps + 1e-9)) + 1
    pos = np.arange(n_out) * (seq.fps / target_fps)
    i0 = np.minimum(np.floor(pos).astype(int), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    a = pos - i0

    f0, f1 = seq.frames[i0], seq.frames[i1]
    out = (1.0 - a)[:, None] * f0 + a[:, None] * f1
    # exact copies where the sample lands on a source frame
    on_grid = a == 0.0
    out[on_grid] = f0[on_grid]

    mid = ~on_grid
    if np.any(mid):
        for sl in (GLOBAL, JAW):
            R = slerp_matrix(axis_angle_to_matrix(f0[mid, sl]), axis_angle_to_matrix(f1[mid, sl]), a[mid])
            out[mid, sl] = matrix_to_axis_angle(R)
        for sl in (EYE_L, EYE_R):
            R = slerp_matrix(rot6d_to_matrix(f0[mid, sl]), rot6d_to_matrix(f1[mid, sl]), a[mid])
            out[mid, sl] = rot6d_from_matrix(R)
    return ConditionSequence(out, float(target_fps))


# ---------------------------------------------------------------------------
# files


def _fmt(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError("cannot serialize non-finite condition values")
    return fmt_float(x)


def dumps(seq: ConditionSequence) -> str:
    """Text form with a canonical field order; 17 significant digits per float."""
    rows = ",\n    ".join("[" + ", ".join(_fmt(x) for x in row) + "]" for row in seq.frames)
    layout = ", ".join(f'"{k}": [{a}, {b}]' for k, (a, b) in LAYOUT.items())
    return (
        "{\n"
        f'  "version": {FORMAT_VERSION},\n'
        f'  "fps": {_fmt(float(seq.fps))},\n'
        f'  "layout": {{{layout}}},\n'
        f'  "frames": [\n    {rows}\n  ]\n'
        "}\n"
    )


def loads(text: str) -> ConditionSequence:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed condition file: {e}") from None
    if not isinstance(doc, dict) or not {"version", "fps", "frames"} <= doc.keys():
        raise ValueError("malformed condition file: missing version/fps/frames")
    if doc["version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported condition file version {doc['version']}")
    if "layout" in doc and {k: list(v) for k, v in doc["layout"].items()} != LAYOUT:
        raise ValueError("condition file layout does not match the 120-dim layout")
    frames = np.asarray(doc["frames"], dtype=np.float64)
    return ConditionSequence(frames, float(doc["fps"]))


def save(seq: ConditionSequence, path) -> Path:
    path = Path(path)
    if path.suffix == ".bin":
        save_binary(seq, path)
    else:
        path.write_text(dumps(seq))
    return path


def load(path) -> ConditionSequence:
    path = Path(path)
    if path.suffix == ".bin":
        return load_binary(path)
    return loads(path.read_text())


def save_binary(seq: ConditionSequence, path):
    with open(path, "wb") as f:
        f.write(BINARY_MAGIC)
        f.write(struct.pack("<QQd", len(seq), COND_DIM, float(seq.fps)))
        f.write(np.ascontiguousarray(seq.frames, dtype="<f8").tobytes())


def load_binary(path) -> ConditionSequence:
    data = Path(path).read_bytes()
    if not data.startswith(BINARY_MAGIC):
        raise ValueError(f"{path}: not a binary condition file")
    off = len(BINARY_MAGIC)
    n, dim, fps = struct.unpack_from("<QQd", data, off)
    off += 24
    if dim != COND_DIM or len(data) != off + n * dim * 8:
        raise ValueError(f"{path}: malformed binary condition file")
    frames = np.frombuffer(data, dtype="<f8", offset=off).reshape(n, dim).astype(np.float64)
    return ConditionSequence(frames, fps)
