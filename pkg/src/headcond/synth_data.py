"""Synthetic talking-head corpora with a controllable tracker bias.

Ground-truth coefficient trajectories are Ornstein-Uhlenbeck paths.  Landmark
"videos" are rendered from the clean coefficients, while the stored
conditions can carry a pose -> expression leak of the kind a monocular tracker
produces on profile views: beyond a yaw threshold the expression vector is
pushed along a fixed direction in proportion to the excess yaw.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import condition as cond_mod
from .condition import ConditionSequence, encode_sequence
from .files import load_landmarks, save_landmarks
from .head_model import Camera, HeadCoefficients, ModelAsset, evaluate_batch


@dataclass(frozen=True)
class TrajectoryConfig:
    n_frames: int = 64
    fps: float = 25.0
    pose_amplitude: float = 0.35  # stationary std of the yaw OU component, radians
    expr_amplitude: float = 0.5
    smoothness: float = 8.0  # OU time constant, frames
    yaw_drift: float | None = None  # sinusoid amplitude; defaults to pose_amplitude
    drift_period: float = 48.0  # frames
    identity_amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.pose_amplitude < 0 or self.expr_amplitude < 0 or self.identity_amplitude < 0:
            raise ValueError("amplitudes must be non-negative")
        if not self.smoothness > 0 or not self.drift_period > 0:
            raise ValueError("smoothness and drift_period must be positive")

    @property
    def drift(self) -> float:
        return self.pose_amplitude if self.yaw_drift is None else self.yaw_drift


@dataclass(frozen=True)
class LeakageConfig:
    yaw_threshold: float = 0.35
    gain: float = 0.5
    direction: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.gain < 0:
            raise ValueError("leak gain must be non-negative")
        if self.direction is not None:
            u = np.asarray(self.direction, dtype=np.float64)
            if abs(np.linalg.norm(u) - 1.0) > 1e-9:
                raise ValueError("leak direction must be a unit vector")
            object.__setattr__(self, "direction", u)

    def unit_direction(self, n_expr: int) -> np.ndarray:
        if self.direction is not None:
            if len(self.direction) != n_expr:
                raise ValueError(f"leak direction has {len(self.direction)} entries, expected {n_expr}")
            return self.direction
        u = np.random.default_rng(self.seed).standard_normal(n_expr)
        return u / np.linalg.norm(u)


@dataclass
class Sample:
    ref_frame: np.ndarray  # (K, 2)
    target_frames: np.ndarray  # (n, K, 2)
    conditions: ConditionSequence  # what the tracker reports (possibly leaked)
    clean_conditions: ConditionSequence  # ground truth
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ref_index: int = 0

    def __post_init__(self):
        n = len(self.target_frames)
        if len(self.conditions) != n or len(self.clean_conditions) != n:
            raise ValueError("sample frames and conditions disagree in length")


def _ou(rng, n, tau, sigma, size=()):
    """Stationary OU path: x_{t+1} = a x_t + sqrt(1 - a^2) sigma xi."""
    a = math.exp(-1.0 / tau)
    b = math.sqrt(1.0 - a * a)
    xi = rng.standard_normal((n,) + tuple(size))
    x = np.empty_like(xi)
    x[0] = sigma * xi[0]
    for t in range(1, n):
        x[t] = a * x[t - 1] + b * sigma * xi[t]
    return x


def yaw_stationary_variance(cfg: TrajectoryConfig) -> float:
    """OU variance plus the mean square of the drift sinusoid."""
    return cfg.pose_amplitude**2 + 0.5 * cfg.drift**2


def sample_trajectory(asset: ModelAsset, cfg: TrajectoryConfig, rng=None) -> list[HeadCoefficients]:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n, tau = cfg.n_frames, cfg.smoothness
    pa, ea = cfg.pose_amplitude, cfg.expr_amplitude

    beta = cfg.identity_amplitude * rng.standard_normal(asset.n_shape)
    glob = _ou(rng, n, tau, 1.0, (3,)) * np.array([0.4 * pa, pa, 0.3 * pa])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    glob[:, 1] += cfg.drift * np.sin(2.0 * np.pi * np.arange(n) / cfg.drift_period + phase)
    jaw_open = np.abs(_ou(rng, n, tau / 2.0, 0.3 * ea))
    gaze = _ou(rng, n, tau, 0.15 * ea, (3,))
    lids = _ou(rng, n, tau / 2.0, 0.5 * ea, (2,))
    psi = _ou(rng, n, tau, ea, (asset.n_expr,))

    seq = []
    for t in range(n):
        seq.append(
            HeadCoefficients(
                beta=beta,
                psi_exp=psi[t],
                psi_eyelids=lids[t],
                theta_global=glob[t],
                theta_jaw=np.array([jaw_open[t], 0.0, 0.0]),
                theta_eye_l=gaze[t],
                theta_eye_r=gaze[t],
            )
        )
    return seq


def apply_leakage(seq, leak: LeakageConfig) -> list[HeadCoefficients]:
    """psi' = psi + g * max(0, |yaw| - tau) * sign(yaw) * u; nothing else changes."""
    if not seq:
        return []
    u = leak.unit_direction(len(seq[0].psi_exp))
    out = []
    for c in seq:
        yaw = c.theta_global[1]
        excess = max(0.0, abs(yaw) - leak.yaw_threshold)
        out.append(c.copy(psi_exp=c.psi_exp + leak.gain * excess * np.sign(yaw) * u))
    return out


def _global_rotations(seq) -> np.ndarray:
    if isinstance(seq, Sample):
        seq = seq.conditions
    if isinstance(seq, ConditionSequence):
        return seq.frames[:, cond_mod.GLOBAL]
    return np.stack([c.theta_global for c in seq])


def motion_variance(seq) -> float:
    """Summed per-channel variance of the global rotation over time."""
    g = _global_rotations(seq)
    if len(g) == 0:
        raise ValueError("empty sequence")
    return float(np.var(g, axis=0).sum())


def top_variance_indices(dataset, fraction: float) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    n_keep = math.ceil(fraction * len(dataset) - 1e-9)
    var = np.array([motion_variance(s) for s in dataset])
    # descending variance, ties by ascending index (lexsort uses the last key first)
    order = np.lexsort((np.arange(len(var)), -var))
    return np.sort(order[:n_keep])


def select_top_variance(dataset, fraction: float):
    return [dataset[i] for i in top_variance_indices(dataset, fraction)]


def render_sequence(asset: ModelAsset, seq, camera: Camera) -> np.ndarray:
    """(n, K, 2) landmark frames for a coefficient sequence."""
    sub = asset.restricted(asset.landmark_idx)
    verts = evaluate_batch(
        sub,
        np.stack([c.beta for c in seq]),
        np.stack([c.psi_exp for c in seq]),
        np.stack([c.psi_eyelids for c in seq]),
        np.stack([c.pose() for c in seq]),
    )
    return camera.scale * verts[..., :2] + camera.translation


def sequence_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def build_dataset(
    asset: ModelAsset,
    n_seq: int,
    traj_cfg: TrajectoryConfig,
    leak_cfg: LeakageConfig | None,
    camera: Camera,
    seed: int | None = None,
) -> list[Sample]:
    if n_seq < 1:
        raise ValueError("n_seq must be >= 1")
    seed = traj_cfg.seed if seed is None else seed
    samples = []
    for i in range(n_seq):
        rng = np.random.default_rng(sequence_seed(seed, i))
        clean = sample_trajectory(asset, traj_cfg, rng)
        leaked = apply_leakage(clean, leak_cfg) if leak_cfg is not None else clean
        frames = render_sequence(asset, clean, camera)
        ref_index = int(rng.integers(len(frames)))
        samples.append(
            Sample(
                ref_frame=frames[ref_index].copy(),
                target_frames=frames,
                conditions=encode_sequence(leaked, traj_cfg.fps),
                clean_conditions=encode_sequence(clean, traj_cfg.fps),
                beta=clean[0].beta.copy(),
                ref_index=ref_index,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# dataset directory: manifest.json + one folder per sample


def save_dataset(samples, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        d = root / f"sample_{i:04d}"
        d.mkdir(exist_ok=True)
        fps = s.conditions.fps
        save_landmarks(d / "ref.json", s.ref_frame[None], fps)
        save_landmarks(d / "targets.json", s.target_frames, fps)
        cond_mod.save(s.conditions, d / "conditions.json")
        cond_mod.save(s.clean_conditions, d / "clean_conditions.json")
        entries.append(
            {
                "id": d.name,
                "ref": f"{d.name}/ref.json",
                "targets": f"{d.name}/targets.json",
                "conditions": f"{d.name}/conditions.json",
                "clean_conditions": f"{d.name}/clean_conditions.json",
                "ref_index": s.ref_index,
                "beta": [float(b) for b in s.beta],
            }
        )
    manifest = {"version": 1, "n_samples": len(entries), "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out = []
    for e in manifest["samples"]:
        ref, _ = load_landmarks(root / e["ref"])
        targets, _ = load_landmarks(root / e["targets"])
        out.append(
            Sample(
                ref_frame=ref[0],
                target_frames=targets,
                conditions=cond_mod.load(root / e["conditions"]),
                clean_conditions=cond_mod.load(root / e["clean_conditions"]),
                beta=np.asarray(e.get("beta", []), dtype=np.float64),
                ref_index=int(e.get("ref_index", 0)),
            )
        )
    return out
