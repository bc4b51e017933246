"""Conditioned DDPM over flattened landmark frames.

The denoiser is a two-layer MLP trunk with four condition-injection blocks:

* motion_block      FiLM on the first trunk layer from cond[0:3]
* spatial_block     the trunk itself, plus the reference-feature mix-in
* expression_block  FiLM on the second trunk layer from cond[3:120]
* temporal_block    residual mixing towards the window mean (windowed batches)

``time_embed`` and ``ref_encoder`` feed the trunk.  ``time_embed`` also holds
two per-timestep gains so the output is ``skip[t] * x_t + gain[t] * trunk``.
They start at the posterior-mean noise estimate for a Gaussian prior centred
on the trunk output with std ``prior_std``: the trunk then predicts a clean
frame, and low-noise steps lean on x_t instead of demanding pixel-exact
guesses from the trunk.  Every block is the only
consumer of its inputs, so masking a condition slice or freezing a block has
an exact, testable effect.  Gradients are accumulated by hand in reverse
order over the cached forward activations.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .condition import COND_DIM, EXPRESSION_PART, GLOBAL
from .rotations import axis_angle_to_matrix

BLOCKS = ("time_embed", "ref_encoder", "motion_block", "spatial_block", "expression_block", "temporal_block")
CKPT_MAGIC = b"HCONDCKPT"


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def noise_floor(self) -> float:
        """Std of the noise injected by the last ancestral step."""
        return float(np.sqrt(self.betas[0]))


def make_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("schedule needs at least one step")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    return NoiseSchedule(np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min]))


def forward_noise(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with t broadcast over leading dims."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ValueError(f"timestep out of range [0, {schedule.T})")
    ab = schedule.alpha_bars[t]
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class DenoiserConfig:
    data_dim: int = 136
    hidden: int = 128
    ref_hidden: int = 64
    film_hidden: int = 64
    time_features: int = 16
    n_steps: int = 100
    window: int = 8  # frames per temporal window
    prior_std: float = 0.05  # model-space spread assumed around the trunk's clean-frame guess
    # landmark (image units) -> model space: (L - data_offset) / data_scale
    data_scale: float = 100.0
    data_offset: tuple = (256.0, 256.0)


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    blocks: dict  # block name -> {array name -> ndarray}
    cond_mask: np.ndarray = field(default_factory=lambda: np.ones(COND_DIM, dtype=bool))

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            self.config,
            {b: {k: v.copy() for k, v in arrs.items()} for b, arrs in self.blocks.items()},
            self.cond_mask.copy(),
        )

    def to_model_space(self, frames) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        x = (frames - np.asarray(self.config.data_offset)) / self.config.data_scale
        return x.reshape(frames.shape[:-2] + (-1,))

    def to_image_space(self, x) -> np.ndarray:
        x = np.asarray(x)
        pts = x.reshape(x.shape[:-1] + (-1, 2))
        return pts * self.config.data_scale + np.asarray(self.config.data_offset)


def _shapes(cfg: DenoiserConfig):
    D, H, R, M, E = cfg.data_dim, cfg.hidden, cfg.ref_hidden, cfg.film_hidden, cfg.time_features
    n_expr_in = EXPRESSION_PART.stop - EXPRESSION_PART.start
    return {
        "time_embed": {"W": (E, H), "b": (H,), "skip": (cfg.n_steps,), "gain": (cfg.n_steps,)},
        "ref_encoder": {"W": (D, R), "b": (R,)},
        "motion_block": {"W1": (MOTION_FEATURES, M), "b1": (M,), "W2": (M, 2 * H), "b2": (2 * H,)},
        "spatial_block": {
            "W_in": (D, H),
            "b_in": (H,),
            "W_ref": (R, H),
            "W_mid": (H, H),
            "b_mid": (H,),
            "W_out": (H, D),
            "b_out": (D,),
        },
        "expression_block": {"W1": (n_expr_in, M), "b1": (M,), "W2": (M, 2 * H), "b2": (2 * H,)},
        "temporal_block": {"U": (H, H)},
    }


def zero_params(cfg: DenoiserConfig = DenoiserConfig()) -> DenoiserParams:
    return DenoiserParams(cfg, {b: {k: np.zeros(s) for k, s in arrs.items()} for b, arrs in _shapes(cfg).items()})


def init_params(
    cfg: DenoiserConfig = DenoiserConfig(),
    seed: int = 0,
    film_scale=0.1,
    temporal_scale=0.0,
    schedule=None,
    data_mean=None,
):
    """Fan-in scaled normal weights, zero biases, clean-frame output gains.

    ``data_mean`` (model space) seeds the output bias so the first clean-frame
    guesses are not wildly off; low-noise steps weigh those errors heavily.

    FiLM output layers start small so the trunk begins close to unmodulated;
    the temporal mixer starts at zero (identity) unless ``temporal_scale`` > 0.
    """
    schedule = make_schedule(cfg.n_steps) if schedule is None else schedule
    if schedule.T != cfg.n_steps:
        raise ValueError("schedule length differs from config n_steps")
    rng = np.random.default_rng(seed)
    p = zero_params(cfg)
    s2 = schedule.alpha_bars
    n2 = 1.0 - s2
    denom = s2 * cfg.prior_std**2 + n2
    p.blocks["time_embed"]["skip"][:] = np.sqrt(n2) / denom
    p.blocks["time_embed"]["gain"][:] = -np.sqrt(s2 * n2) / denom
    for block, arrs in p.blocks.items():
        for name, a in arrs.items():
            if name.startswith("b") or a.ndim == 1:
                continue
            scale = 1.0 / np.sqrt(a.shape[0])
            if block in ("motion_block", "expression_block") and name == "W2":
                scale *= film_scale
            if block == "temporal_block":
                scale *= temporal_scale
            if scale:
                a[...] = scale * rng.standard_normal(a.shape)
    if data_mean is not None:
        p.blocks["spatial_block"]["b_out"][:] = data_mean
    return p


# ---------------------------------------------------------------------------
# forward / backward


def time_features(t, n_steps: int, n_features: int) -> np.ndarray:
    s = np.asarray(t, dtype=np.float64)[..., None] / n_steps
    freqs = np.pi * np.arange(1, n_features // 2 + 1)
    return np.concatenate([np.sin(freqs * s), np.cos(freqs * s)], axis=-1)


MOTION_FEATURES = 12


def motion_features(theta) -> np.ndarray:
    """Axis-angle plus its rotation matrix entries; projected landmarks are linear in the latter."""
    R = axis_angle_to_matrix(theta)
    return np.concatenate([theta, R.reshape(len(theta), 9)], axis=1)


def _silu(a):
    sig = expit(a)
    return a * sig, sig


def _film(block, c):
    u = c @ block["W1"] + block["b1"]
    h = np.tanh(u)
    f = h @ block["W2"] + block["b2"]
    H = f.shape[-1] // 2
    return h, f[:, :H], f[:, H:]


def mask_condition(cond, cond_mask):
    """Disabled slices become +0.0 regardless of their content."""
    return np.where(np.asarray(cond_mask, dtype=bool), cond, 0.0)


def _forward(params: DenoiserParams, x, t, ref, cond):
    """Returns (output with x's shape, cache).  x is (B, D) or (B, W, D)."""
    P = params.blocks
    cfg = params.config
    windowed = x.ndim == 3
    lead = x.shape[:-1]
    N = int(np.prod(lead))
    D = x.shape[-1]
    if D != cfg.data_dim:
        raise ValueError(f"expected data dim {cfg.data_dim}, got {D}")
    t = np.asarray(t)
    if t.shape != lead[:1] or not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"need one integer timestep per batch element, got shape {t.shape}")
    if np.any(t < 0) or np.any(t >= cfg.n_steps):
        raise ValueError(f"timestep out of range [0, {cfg.n_steps})")
    t = np.broadcast_to(t.reshape(lead[:1] + (1,) * (len(lead) - 1)), lead)
    if ref.shape[-1] != D or cond.shape[-1] != COND_DIM:
        raise ValueError("reference or condition has the wrong width")
    ref = np.broadcast_to(ref.reshape(lead[:1] + (1,) * (len(lead) - 1) + (D,)), lead + (D,))
    cond = np.broadcast_to(cond, lead + (COND_DIM,)) if cond.ndim < x.ndim else cond
    if cond.shape[:-1] != lead:
        raise ValueError("condition batch shape does not match x")

    xf = x.reshape(N, D)
    rf = ref.reshape(N, D)
    cf = cond.reshape(N, COND_DIM)

    emb = time_features(t.reshape(N), cfg.n_steps, cfg.time_features)
    te, sp = P["time_embed"], P["spatial_block"]
    r = np.tanh(rf @ P["ref_encoder"]["W"] + P["ref_encoder"]["b"])
    a1 = xf @ sp["W_in"] + sp["b_in"] + emb @ te["W"] + te["b"] + r @ sp["W_ref"]

    cm = motion_features(cf[:, GLOBAL])
    hm, gm, bm = _film(P["motion_block"], cm)
    a2 = a1 * (1.0 + gm) + bm
    h1, sig1 = _silu(a2)

    a3 = h1 @ sp["W_mid"] + sp["b_mid"]
    ce = cf[:, EXPRESSION_PART]
    he, ge, be = _film(P["expression_block"], ce)
    a4 = a3 * (1.0 + ge) + be
    h2, sig2 = _silu(a4)

    if windowed:
        H = h2.shape[-1]
        h2w = h2.reshape(lead + (H,))
        dev = h2w.mean(axis=1, keepdims=True) - h2w
        h3 = (h2w + dev @ P["temporal_block"]["U"]).reshape(N, H)
    else:
        dev = None
        h3 = h2

    tf = t.reshape(N)
    trunk = h3 @ sp["W_out"] + sp["b_out"]
    out = te["skip"][tf, None] * xf + te["gain"][tf, None] * trunk
    cache = dict(
        lead=lead, xf=xf, tf=tf, trunk=trunk, rf=rf, emb=emb, r=r, a1=a1, cm=cm, hm=hm, gm=gm, a2=a2, sig1=sig1, h1=h1,
        a3=a3, ce=ce, he=he, ge=ge, a4=a4, sig2=sig2, h2=h2, dev=dev, h3=h3,
    )  # fmt: skip
    return out.reshape(x.shape), cache


def predict_noise(params: DenoiserParams, x_t, t, ref, cond, condition_mask=None):
    mask = params.cond_mask if condition_mask is None else condition_mask
    x_t = np.asarray(x_t, dtype=np.float64)
    cond = mask_condition(np.asarray(cond, dtype=np.float64), mask)
    return _forward(params, x_t, t, np.asarray(ref, dtype=np.float64), cond)[0]


def _backward(params: DenoiserParams, cache, dout):
    P = params.blocks
    sp = P["spatial_block"]
    c = cache
    N = c["xf"].shape[0]
    dout = dout.reshape(N, -1)
    g = {b: {} for b in BLOCKS}

    T = P["time_embed"]["skip"].shape[0]
    g["time_embed"]["skip"] = np.bincount(c["tf"], np.sum(dout * c["xf"], axis=1), minlength=T)
    g["time_embed"]["gain"] = np.bincount(c["tf"], np.sum(dout * c["trunk"], axis=1), minlength=T)
    dout = P["time_embed"]["gain"][c["tf"], None] * dout
    g["spatial_block"]["W_out"] = c["h3"].T @ dout
    g["spatial_block"]["b_out"] = dout.sum(axis=0)
    dh3 = dout @ sp["W_out"].T

    if c["dev"] is not None:
        lead = c["lead"]
        H = dh3.shape[-1]
        dh3w = dh3.reshape(lead + (H,))
        U = P["temporal_block"]["U"]
        g["temporal_block"]["U"] = c["dev"].reshape(N, H).T @ dh3
        ddev = dh3w @ U.T
        dh2 = (dh3w - ddev + ddev.mean(axis=1, keepdims=True)).reshape(N, H)
    else:
        g["temporal_block"]["U"] = np.zeros_like(P["temporal_block"]["U"])
        dh2 = dh3

    sig2 = c["sig2"]
    da4 = dh2 * (sig2 * (1.0 + c["a4"] * (1.0 - sig2)))
    da3 = da4 * (1.0 + c["ge"])
    _film_backward(P["expression_block"], g["expression_block"], c["ce"], c["he"], da4 * c["a3"], da4)

    g["spatial_block"]["W_mid"] = c["h1"].T @ da3
    g["spatial_block"]["b_mid"] = da3.sum(axis=0)
    dh1 = da3 @ sp["W_mid"].T

    sig1 = c["sig1"]
    da2 = dh1 * (sig1 * (1.0 + c["a2"] * (1.0 - sig1)))
    da1 = da2 * (1.0 + c["gm"])
    _film_backward(P["motion_block"], g["motion_block"], c["cm"], c["hm"], da2 * c["a1"], da2)

    g["spatial_block"]["W_in"] = c["xf"].T @ da1
    g["spatial_block"]["b_in"] = da1.sum(axis=0)
    g["spatial_block"]["W_ref"] = c["r"].T @ da1
    g["time_embed"]["W"] = c["emb"].T @ da1
    g["time_embed"]["b"] = da1.sum(axis=0)
    dr = da1 @ sp["W_ref"].T
    dar = dr * (1.0 - c["r"] ** 2)
    g["ref_encoder"]["W"] = c["rf"].T @ dar
    g["ref_encoder"]["b"] = dar.sum(axis=0)
    return g


def _film_backward(block, grads, c_in, h, dgamma, dbeta):
    df = np.concatenate([dgamma, dbeta], axis=1)
    grads["W2"] = h.T @ df
    grads["b2"] = df.sum(axis=0)
    du = (df @ block["W2"].T) * (1.0 - h * h)
    grads["W1"] = c_in.T @ du
    grads["b1"] = du.sum(axis=0)


@dataclass
class Batch:
    x0: np.ndarray  # (B, D) or (B, W, D), model space
    t: np.ndarray  # (B,)
    ref: np.ndarray  # (B, D)
    cond: np.ndarray  # (B, 120) or (B, W, 120)
    eps: np.ndarray | None = None  # drawn from ``seed`` when absent
    seed: int = 0

    def __post_init__(self):
        B = len(self.x0)
        if B == 0:
            raise ValueError("empty batch")
        if len(self.t) != B or len(self.ref) != B or len(self.cond) != B:
            raise ValueError("batch fields disagree on batch size")


def loss_and_gradients(params, batch: Batch, schedule: NoiseSchedule, trainable_mask=BLOCKS, condition_mask=None):
    """Mean squared noise-prediction error (per coordinate) and its gradients.

    Blocks outside ``trainable_mask`` get exact zero gradients.
    """
    trainable = set(trainable_mask)
    unknown = trainable - set(BLOCKS)
    if unknown:
        raise ValueError(f"unknown blocks in trainable mask: {sorted(unknown)}")
    mask = params.cond_mask if condition_mask is None else np.asarray(condition_mask, dtype=bool)
    if mask.shape != (COND_DIM,):
        raise ValueError(f"condition mask must have {COND_DIM} entries")
    eps = batch.eps if batch.eps is not None else np.random.default_rng(batch.seed).standard_normal(batch.x0.shape)
    x_t = forward_noise(batch.x0, batch.t, eps, schedule)
    cond = mask_condition(batch.cond, mask)
    pred, cache = _forward(params, x_t, batch.t, batch.ref, cond)
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    grads = _backward(params, cache, 2.0 * diff / diff.size)
    for b in BLOCKS:
        if b not in trainable:
            grads[b] = {k: np.zeros_like(v) for k, v in params.blocks[b].items()}
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    trainable: tuple = BLOCKS
    condition_mask: np.ndarray | None = None  # None: all 120 entries active
    window: int | None = None  # frames per temporal window; None trains on single frames
    stage: str = "train"
    clip: float | None = None  # global gradient-norm cap; stateless, so still plain SGD


@dataclass
class TrainingSet:
    """Model-space arrays: targets (S, n, D), refs (S, D), conds (S, n, 120)."""

    targets: np.ndarray
    refs: np.ndarray
    conds: np.ndarray

    @classmethod
    def from_samples(cls, samples, params: DenoiserParams, clean=False):
        if not samples:
            raise ValueError("no samples")
        targets = np.stack([params.to_model_space(s.target_frames) for s in samples])
        refs = np.stack([params.to_model_space(s.ref_frame) for s in samples])
        conds = np.stack([(s.clean_conditions if clean else s.conditions).frames for s in samples])
        return cls(targets, refs, conds)

    def items(self, window=None):
        S, n = self.targets.shape[:2]
        if window is None:
            return [(s, f) for s in range(S) for f in range(n)]
        if window > n:
            raise ValueError(f"window {window} longer than the {n}-frame samples")
        return [(s, f) for s in range(S) for f in range(n - window + 1)]

    def batch(self, picks, t, eps, window=None) -> Batch:
        s = np.array([p[0] for p in picks])
        f = np.array([p[1] for p in picks])
        if window is None:
            return Batch(self.targets[s, f], t, self.refs[s], self.conds[s, f], eps)
        idx = f[:, None] + np.arange(window)
        return Batch(self.targets[s[:, None], idx], t, self.refs[s], self.conds[s[:, None], idx], eps)


def _as_training_set(dataset, params):
    return dataset if isinstance(dataset, TrainingSet) else TrainingSet.from_samples(dataset, params)


def train(params: DenoiserParams, dataset, cfg: TrainConfig, schedule: NoiseSchedule, log=None):
    """Plain SGD with a fixed step and seeded shuffling.

    Returns new parameters; ``params`` is not modified.  Frozen blocks are
    carried over untouched.  ``log`` (a list) receives {step, stage, loss}.
    """
    params = params.copy()
    if cfg.steps == 0:
        return params
    data = _as_training_set(dataset, params)
    mask = np.ones(COND_DIM, dtype=bool) if cfg.condition_mask is None else np.asarray(cfg.condition_mask, bool)
    params.cond_mask = mask.copy()
    trainable = tuple(b for b in BLOCKS if b in set(cfg.trainable))
    rng = np.random.default_rng(cfg.seed)
    items = data.items(cfg.window)
    order = rng.permutation(len(items))
    pos = 0
    D = data.targets.shape[-1]
    for step in range(cfg.steps):
        picks = []
        while len(picks) < cfg.batch_size:
            if pos == len(order):
                order, pos = rng.permutation(len(items)), 0
            picks.append(items[order[pos]])
            pos += 1
        t = rng.integers(0, schedule.T, size=cfg.batch_size)
        shape = (cfg.batch_size, D) if cfg.window is None else (cfg.batch_size, cfg.window, D)
        eps = rng.standard_normal(shape)
        batch = data.batch(picks, t, eps, cfg.window)
        # blow-ups surface as TrainingDiverged below, not as float warnings
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_gradients(params, batch, schedule, trainable, mask)
            norm = np.sqrt(sum(float(np.sum(gk * gk)) for b in trainable for gk in grads[b].values()))
        if not (np.isfinite(loss) and np.isfinite(norm)):
            raise TrainingDiverged(f"{cfg.stage}: non-finite loss or gradient at step {step} (lr={cfg.lr})")
        step_size = cfg.lr
        if cfg.clip is not None and norm > cfg.clip:
            step_size *= cfg.clip / norm
        for b in trainable:
            for k, gk in grads[b].items():
                params.blocks[b][k] -= step_size * gk
        if log is not None:
            log.append({"step": step, "stage": cfg.stage, "loss": loss})
    return params


def evaluation_loss(params, dataset, schedule, seed=0, n=256, window=None, condition_mask=None) -> float:
    """Loss on a fixed, seeded draw of (item, t, eps); comparable across checkpoints."""
    data = _as_training_set(dataset, params)
    rng = np.random.default_rng(seed)
    items = data.items(window)
    picks = [items[i] for i in rng.integers(len(items), size=n)]
    t = rng.integers(0, schedule.T, size=n)
    D = data.targets.shape[-1]
    eps = rng.standard_normal((n, D) if window is None else (n, window, D))
    loss, _ = loss_and_gradients(params, data.batch(picks, t, eps, window), schedule, (), condition_mask)
    return loss


# ---------------------------------------------------------------------------
# sampling


def ancestral_sample(eps_fn, shape, schedule: NoiseSchedule, rng):
    """x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sqrt(beta_t) z."""
    betas, alphas, abar = schedule.betas, schedule.alphas, schedule.alpha_bars
    x = rng.standard_normal(shape)
    for t in range(schedule.T - 1, -1, -1):
        eps_hat = eps_fn(x, t)
        z = rng.standard_normal(shape)
        x = (x - betas[t] / np.sqrt(1.0 - abar[t]) * eps_hat) / np.sqrt(alphas[t]) + np.sqrt(betas[t]) * z
    return x


def has_temporal(params: DenoiserParams) -> bool:
    return bool(np.any(params.blocks["temporal_block"]["U"]))


def sample(params: DenoiserParams, ref, cond_seq, schedule: NoiseSchedule, seed: int = 0, window="auto"):
    """Generate one landmark frame (K, 2) per condition frame, in image units.

    Frames are denoised jointly in consecutive windows when the temporal block
    is trained (or ``window`` is given explicitly), otherwise independently.
    """
    if window == "auto":
        window = params.config.window if has_temporal(params) else None
    conds = cond_seq.frames if hasattr(cond_seq, "frames") else np.atleast_2d(cond_seq)
    n = len(conds)
    ref_x = params.to_model_space(np.asarray(ref, dtype=np.float64))
    D = params.config.data_dim
    cond = mask_condition(conds, params.cond_mask)
    rng = np.random.default_rng(seed)

    if window is None or window <= 1:
        refs = np.broadcast_to(ref_x, (n, D))

        def eps_fn(x, t):
            return _forward(params, x, np.full(n, t), refs, cond)[0]

        x = ancestral_sample(eps_fn, (n, D), schedule, rng)
    else:
        # pad to whole windows; padded frames repeat the last condition and are dropped
        n_win = -(-n // window)
        pad = n_win * window - n
        cond_w = np.concatenate([cond, np.repeat(cond[-1:], pad, axis=0)]).reshape(n_win, window, COND_DIM)
        refs = np.broadcast_to(ref_x, (n_win, D))

        def eps_fn(x, t):
            return _forward(params, x, np.full(n_win, t), refs, cond_w)[0]

        x = ancestral_sample(eps_fn, (n_win, window, D), schedule, rng).reshape(-1, D)[:n]
    return list(params.to_image_space(x))


# ---------------------------------------------------------------------------
# checkpoints: magic, uint64 header length, JSON header, little-endian float64 arrays


def save_checkpoint(params: DenoiserParams, path, extra=None) -> Path:
    path = Path(path)
    index = []
    for b in BLOCKS:
        for k, v in params.blocks[b].items():
            index.append({"block": b, "name": k, "shape": list(v.shape)})
    cfg = asdict(params.config)
    cfg["data_offset"] = list(cfg["data_offset"])
    header = {
        "config": cfg,
        "cond_mask": [int(m) for m in params.cond_mask],
        "arrays": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in BLOCKS:
            for v in params.blocks[b].values():
                f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> DenoiserParams:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a denoiser checkpoint")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off : off + hlen])
    off += hlen
    cfgd = header["config"]
    cfgd["data_offset"] = tuple(cfgd["data_offset"])
    params = zero_params(DenoiserConfig(**cfgd))
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        params.blocks[entry["block"]][entry["name"]] = arr.astype(np.float64)
        off += n * 8
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    params.cond_mask = np.array(header["cond_mask"], dtype=bool)
    return params


def save_log(log, path):
    with open(path, "w") as f:
        for rec in log:
            f.write(json.dumps({"step": rec["step"], "stage": rec["stage"], "loss": rec["loss"]}) + "\n")
