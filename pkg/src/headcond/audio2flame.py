"""Toy audio -> head-condition regressor.

Synthetic "audio" is built from a coefficient sequence so the mapping has a
known answer: channel 0 follows the smoothed jaw opening, channel 1 the
eyelids, the rest is noise.  The regressor is ridge least squares over a
window of audio frames; it never sees a reference image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .condition import COND_DIM, EYELIDS, JAW, ConditionSequence
from .files import dumps_audio, fmt_float, loads_audio


@dataclass(frozen=True)
class AudioFeatureSequence:
    frames: np.ndarray  # (n, D_a)
    fps: float = 25.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or len(f) == 0 or f.shape[1] == 0:
            raise ValueError(f"audio features must be a non-empty (n, D_a) array, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("audio features contain non-finite values")
        object.__setattr__(self, "frames", f)

    def __len__(self):
        return len(self.frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def save_audio(audio: AudioFeatureSequence, path):
    Path(path).write_text(dumps_audio(audio.frames, audio.fps))


def load_audio(path) -> AudioFeatureSequence:
    frames, fps = loads_audio(Path(path).read_text())
    return AudioFeatureSequence(frames, fps)


def _conditions(seq) -> ConditionSequence:
    if isinstance(seq, ConditionSequence):
        return seq
    from .condition import encode_sequence

    return encode_sequence(seq)


def binomial_smooth(x, passes: int = 1) -> np.ndarray:
    """Repeated [1, 2, 1] / 4 filtering with edge-clamped padding."""
    x = np.asarray(x, dtype=np.float64)
    for _ in range(passes):
        p = np.pad(x, 1, mode="edge")
        x = 0.25 * p[:-2] + 0.5 * p[1:-1] + 0.25 * p[2:]
    return x.copy() if passes <= 0 else x


def audio_envelopes(seq, smooth: int = 1):
    """Noise-free channel-0 and channel-1 signals for a condition sequence."""
    c = _conditions(seq)
    jaw = binomial_smooth(np.linalg.norm(c.frames[:, JAW], axis=1), smooth)
    lids = c.frames[:, EYELIDS].mean(axis=1)
    return jaw, lids


def synth_audio(seq, seed: int = 0, dim: int = 16, noise: float = 0.02, smooth: int = 1) -> AudioFeatureSequence:
    if dim < 2:
        raise ValueError("synthetic audio needs at least 2 channels")
    c = _conditions(seq)
    rng = np.random.default_rng(seed)
    frames = noise * rng.standard_normal((len(c), dim))
    jaw, lids = audio_envelopes(c, smooth)
    frames[:, 0] += jaw
    frames[:, 1] += lids
    return AudioFeatureSequence(frames, c.fps)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class A2FConfig:
    context: int = 4  # audio frames on each side
    ridge: float = 1e-3

    def __post_init__(self):
        if self.context < 0 or self.ridge < 0:
            raise ValueError("context and ridge must be non-negative")


@dataclass
class A2FParams:
    weights: np.ndarray  # ((2 * context + 1) * D_a + 1, 120), last row is the bias
    context: int
    audio_dim: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != ((2 * self.context + 1) * self.audio_dim + 1, COND_DIM):
            raise ValueError(f"regressor weights have shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("regressor weights contain non-finite values")
        self.weights = w


def windowed_features(audio, context: int) -> np.ndarray:
    """(n, (2c+1) D_a + 1) design matrix; frames past either end are clamped."""
    f = audio.frames if isinstance(audio, AudioFeatureSequence) else np.asarray(audio, dtype=np.float64)
    n = len(f)
    idx = np.clip(np.arange(n)[:, None] + np.arange(-context, context + 1), 0, n - 1)
    return np.concatenate([f[idx].reshape(n, -1), np.ones((n, 1))], axis=1)


def train_a2f(pairs, cfg: A2FConfig = A2FConfig()) -> A2FParams:
    """Closed-form ridge regression from audio windows to 120-dim conditions.

    ``pairs`` is a list of (AudioFeatureSequence, ConditionSequence).
    """
    if not pairs:
        raise ValueError("no training pairs")
    dims = {a.dim for a, _ in pairs}
    if len(dims) != 1:
        raise ValueError("audio sequences disagree in feature dimension")
    X, Y = [], []
    for i, (audio, conds) in enumerate(pairs):
        if len(audio) != len(conds):
            raise ValueError(f"pair {i}: {len(audio)} audio frames but {len(conds)} conditions")
        X.append(windowed_features(audio, cfg.context))
        Y.append(conds.frames)
    X = np.concatenate(X)
    Y = np.concatenate(Y)
    reg = cfg.ridge * np.eye(X.shape[1])
    reg[-1, -1] = 0.0  # leave the bias unpenalised
    W = np.linalg.solve(X.T @ X + reg, X.T @ Y)
    return A2FParams(W, cfg.context, dims.pop())


def infer_a2f(params: A2FParams, audio: AudioFeatureSequence) -> ConditionSequence:
    if audio.dim != params.audio_dim:
        raise ValueError(f"regressor expects {params.audio_dim} audio channels, got {audio.dim}")
    return ConditionSequence(windowed_features(audio, params.context) @ params.weights, audio.fps)


def r_squared(pred, target) -> np.ndarray:
    """Per-column coefficient of determination; constant columns give nan."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    ss_res = np.sum((target - pred) ** 2, axis=0)
    ss_tot = np.sum((target - target.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, np.nan)


def save_a2f(params: A2FParams, path):
    rows = ",\n    ".join("[" + ", ".join(fmt_float(x) for x in r) + "]" for r in params.weights)
    Path(path).write_text(
        f'{{\n  "context": {params.context},\n  "D_a": {params.audio_dim},\n  "weights": [\n    {rows}\n  ]\n}}\n'
    )


def load_a2f(path) -> A2FParams:
    doc = json.loads(Path(path).read_text())
    return A2FParams(np.asarray(doc["weights"], dtype=np.float64), int(doc["context"]), int(doc["D_a"]))
