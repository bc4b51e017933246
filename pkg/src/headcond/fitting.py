"""Recover head coefficients and a weak-perspective camera from 2D landmarks.

Damped Gauss-Newton (Levenberg-Marquardt) on the landmark reprojection error
with ridge penalties on expression and identity.  Jacobians are central
finite differences evaluated in one vectorized model call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .condition import ConditionSequence, encode
from .head_model import Camera, HeadCoefficients, ModelAsset, evaluate_batch
from .rotations import canonical_axis_angle


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 100
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    reg_psi: float = 1e-4
    reg_beta: float = 1e-4
    tol_step: float = 1e-10
    tol_residual: float = 1e-9
    fd_step: float = 1e-6

    def __post_init__(self):
        for name in ("max_iters", "lambda_init", "reg_psi", "reg_beta", "tol_step", "tol_residual", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"FitConfig.{name} must be positive")
        if not self.lambda_up > 1.0 > self.lambda_down > 0.0:
            raise ValueError("need lambda_up > 1 > lambda_down > 0")


@dataclass
class FitResult:
    coeffs: HeadCoefficients
    camera: Camera
    residual_rms: float = 0.0
    iterations: int = 0
    converged: bool = False
    objective: float = 0.0
    history: list = field(default_factory=list, repr=False)


def numeric_jacobian(f, x, h=1e-6, relative=True, vectorized=False):
    """Central-difference Jacobian of ``f`` at ``x``, one column per input.

    With ``vectorized=True`` ``f`` maps an (m, n) stack of points to (m, k)
    outputs and is called once.
    """
    x = np.asarray(x, dtype=np.float64)
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    n = x.size
    steps = h * np.maximum(1.0, np.abs(x)) if relative else np.full(n, float(h))
    E = np.diag(steps)
    if vectorized:
        vals = np.asarray(f(np.concatenate([x + E, x - E])))
        plus, minus = vals[:n], vals[n:]
        return ((plus - minus) / (2.0 * steps[:, None])).T
    cols = [(np.asarray(f(x + E[i])) - np.asarray(f(x - E[i]))).ravel() / (2.0 * steps[i]) for i in range(n)]
    return np.stack(cols, axis=1)


class _Problem:
    """Packs free variables into a flat vector and evaluates residuals."""

    def __init__(self, asset: ModelAsset, landmarks, cfg: FitConfig, fixed_beta=None):
        self.asset = asset.restricted(asset.landmark_idx)
        self.target = landmarks.ravel()
        self.cfg = cfg
        self.n_expr = asset.n_expr
        self.n_shape = asset.n_shape
        self.fixed_beta = None if fixed_beta is None else np.asarray(fixed_beta, dtype=np.float64)
        n_beta = 0 if self.fixed_beta is not None else self.n_shape
        # [global, jaw, eye_l, eye_r] | psi | eyelids | beta | log s, tx, ty
        self.o_psi = 12
        self.o_lid = self.o_psi + self.n_expr
        self.o_beta = self.o_lid + 2
        self.o_cam = self.o_beta + n_beta
        self.size = self.o_cam + 3

    def pack(self, coeffs: HeadCoefficients, camera: Camera):
        x = np.empty(self.size)
        x[0:3] = coeffs.theta_global
        x[3:6] = coeffs.theta_jaw
        x[6:9] = coeffs.theta_eye_l
        x[9:12] = coeffs.theta_eye_r
        x[self.o_psi : self.o_lid] = coeffs.psi_exp
        x[self.o_lid : self.o_beta] = coeffs.psi_eyelids
        if self.fixed_beta is None:
            x[self.o_beta : self.o_cam] = coeffs.beta
        x[self.o_cam] = np.log(camera.scale)
        x[self.o_cam + 1 : self.o_cam + 3] = camera.translation
        return x

    def beta_of(self, X):
        if self.fixed_beta is not None:
            return np.broadcast_to(self.fixed_beta, (X.shape[0], self.n_shape))
        return X[:, self.o_beta : self.o_cam]

    def unpack(self, x):
        coeffs = HeadCoefficients(
            beta=self.beta_of(x[None])[0],
            psi_exp=x[self.o_psi : self.o_lid],
            psi_eyelids=x[self.o_lid : self.o_beta],
            theta_global=canonical_axis_angle(x[0:3]),
            theta_jaw=canonical_axis_angle(x[3:6]),
            theta_eye_l=canonical_axis_angle(x[6:9]),
            theta_eye_r=canonical_axis_angle(x[9:12]),
        )
        camera = Camera(float(np.exp(x[self.o_cam])), x[self.o_cam + 1 : self.o_cam + 3])
        return coeffs, camera

    def landmarks(self, X):
        """(m, n) parameter stack -> (m, 2K) projected landmarks."""
        m = X.shape[0]
        poses = np.zeros((m, 5, 3))
        poses[:, 0] = X[:, 0:3]
        poses[:, 2] = X[:, 3:6]
        poses[:, 3] = X[:, 6:9]
        poses[:, 4] = X[:, 9:12]
        verts = evaluate_batch(
            self.asset, self.beta_of(X), X[:, self.o_psi : self.o_lid], X[:, self.o_lid : self.o_beta], poses
        )
        scale = np.exp(X[:, self.o_cam])
        xy = scale[:, None, None] * verts[:, :, :2] + X[:, None, self.o_cam + 1 : self.o_cam + 3]
        return xy.reshape(m, -1)

    def residuals(self, X):
        X = np.atleast_2d(X)
        parts = [self.landmarks(X) - self.target, np.sqrt(self.cfg.reg_psi) * X[:, self.o_psi : self.o_lid]]
        if self.fixed_beta is None:
            parts.append(np.sqrt(self.cfg.reg_beta) * X[:, self.o_beta : self.o_cam])
        return np.concatenate(parts, axis=1)

    def landmark_rms(self, x):
        r = self.landmarks(x[None])[0] - self.target
        return float(np.sqrt(np.mean(r * r)))


def _levenberg_marquardt(prob: _Problem, x, free, cfg: FitConfig, max_iters: int, history: list):
    """Minimize the problem's squared residuals over the variables ``free``.

    Steps are accepted only when they lower the objective, so the returned
    iterate is the best one seen.  Returns (x, iterations, converged).
    """
    x = x.copy()

    def res(Z):
        X = np.broadcast_to(x, (Z.shape[0], x.size)).copy()
        X[:, free] = Z
        return prob.residuals(X)

    z = x[free]
    r = res(z[None])[0]
    obj = float(r @ r)
    history.append(obj)
    lam = cfg.lambda_init
    converged = prob.landmark_rms(x) <= cfg.tol_residual
    it = 0
    while not converged and it < max_iters:
        it += 1
        J = numeric_jacobian(res, z, cfg.fd_step, vectorized=True)
        A = J.T @ J
        g = J.T @ r
        diag = np.maximum(np.diag(A), 1e-9 * max(np.diag(A).max(), 1.0))
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                continue
            z_new = z + step
            r_new = res(z_new[None])[0]
            obj_new = float(r_new @ r_new)
            if np.isfinite(obj_new) and obj_new < obj:
                accepted = True
                break
            lam *= cfg.lambda_up
        if not accepted:
            # no damping gives descent: stationary point
            converged = True
            break
        small_step = np.linalg.norm(step) <= cfg.tol_step * (np.linalg.norm(z) + cfg.tol_step)
        stalled = obj - obj_new <= 1e-14 * obj
        z, r, obj = z_new, r_new, obj_new
        x[free] = z
        history.append(obj)
        lam = max(lam * cfg.lambda_down, 1e-12)
        if small_step or stalled or prob.landmark_rms(x) <= cfg.tol_residual:
            converged = True
    return x, it, converged


def initial_camera(asset: ModelAsset, landmarks) -> Camera:
    """Scale and offset matching the landmark bounding box to the rest template's."""
    ref = asset.template[asset.landmark_idx, :2]
    lo, hi = landmarks.min(axis=0), landmarks.max(axis=0)
    rlo, rhi = ref.min(axis=0), ref.max(axis=0)
    scale = np.linalg.norm(hi - lo) / np.linalg.norm(rhi - rlo)
    if not scale > 0:
        scale = 1.0
    translation = 0.5 * (lo + hi) - scale * 0.5 * (rlo + rhi)
    return Camera(float(scale), translation)


def fit_frame(
    asset: ModelAsset,
    landmarks,
    init: FitResult | None = None,
    cfg: FitConfig = FitConfig(),
    fixed_beta=None,
) -> FitResult:
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape != (asset.n_landmarks, 2):
        raise ValueError(f"expected ({asset.n_landmarks}, 2) landmarks, got {landmarks.shape}")
    if not np.all(np.isfinite(landmarks)):
        raise ValueError("landmarks contain non-finite values")

    prob = _Problem(asset, landmarks, cfg, fixed_beta)
    if init is None:
        coeffs0 = HeadCoefficients.zeros_like_asset(asset)
        cam0 = initial_camera(asset, landmarks)
    else:
        coeffs0, cam0 = init.coeffs, init.camera
    x = prob.pack(coeffs0, cam0)
    history = []
    it = 0
    if init is None:
        # rigid pre-solve keeps eye/jaw joints from absorbing a wrong head pose
        rigid = np.r_[0:3, prob.o_cam : prob.o_cam + 3]
        x, n, _ = _levenberg_marquardt(prob, x, rigid, cfg, cfg.max_iters // 2, history)
        it += n
    x, n, converged = _levenberg_marquardt(prob, x, np.arange(prob.size), cfg, cfg.max_iters - it, history)
    it += n
    r = prob.residuals(x)[0]
    obj = float(r @ r)

    coeffs, camera = prob.unpack(x)
    return FitResult(
        coeffs=coeffs,
        camera=camera,
        residual_rms=prob.landmark_rms(x),
        iterations=it,
        converged=converged,
        objective=obj,
        history=history,
    )


def fit_sequence(asset: ModelAsset, frames, cfg: FitConfig = FitConfig(), fps: float = 25.0, warm_start=True):
    """Fit every frame; identity is solved on the first frame and then frozen.

    Returns the per-frame results and their encoded condition sequence.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to fit")
    results = []
    beta = None
    prev = None
    for t, lm in enumerate(frames):
        try:
            res = fit_frame(asset, lm, init=prev if warm_start else None, cfg=cfg, fixed_beta=beta)
        except (ValueError, FitError) as e:
            raise FitError(f"frame {t}: {e}") from e
        if beta is None:
            beta = res.coeffs.beta
        results.append(res)
        prev = res
    return results, ConditionSequence(np.stack([encode(r.coeffs).vector for r in results]), fps)
