"""Seeded problem generators shared by unit and acceptance tests."""

import numpy as np

from headcond.head_model import Camera, HeadCoefficients


def draw_fit_problem(asset, rng, max_yaw=np.pi / 3):
    c = HeadCoefficients.zeros_like_asset(asset)
    c.theta_global = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-max_yaw, max_yaw), rng.uniform(-0.2, 0.2)])
    c.theta_jaw = np.array([rng.uniform(0.0, 0.3), 0.0, 0.0])
    c.theta_eye_l = rng.uniform(-0.2, 0.2, 3)
    c.theta_eye_r = rng.uniform(-0.2, 0.2, 3)
    c.psi_exp = rng.normal(size=asset.n_expr)
    c.beta = rng.normal(size=asset.n_shape)
    c.psi_eyelids = rng.uniform(0.0, 1.0, 2)
    cam = Camera(rng.uniform(80, 120), rng.uniform(200, 300, 2))
    return c, cam
