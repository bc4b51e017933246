import numpy as np
import pytest
from scipy.special import expit

from headcond import diffusion as D
from headcond.condition import COND_DIM
from headcond.rotations import axis_angle_to_matrix

SMALL = D.DenoiserConfig(data_dim=12, hidden=8, ref_hidden=5, film_hidden=6, time_features=4, n_steps=10, window=3)


def busy_params(cfg=SMALL, seed=1):
    """Every weight and bias non-zero so no gradient path is trivially dead."""
    p = D.init_params(cfg, seed=seed, film_scale=1.0, temporal_scale=1.0, schedule=D.make_schedule(cfg.n_steps))
    rng = np.random.default_rng(seed + 100)
    for arrs in p.blocks.values():
        for k, v in arrs.items():
            if k.startswith("b"):
                v[...] = 0.1 * rng.standard_normal(v.shape)
    return p


def random_batch(rng, cfg, B=4, window=None):
    xs = (B, cfg.data_dim) if window is None else (B, window, cfg.data_dim)
    cs = (B, COND_DIM) if window is None else (B, window, COND_DIM)
    return D.Batch(
        rng.standard_normal(xs),
        rng.integers(0, cfg.n_steps, B),
        rng.standard_normal((B, cfg.data_dim)),
        rng.standard_normal(cs),
        rng.standard_normal(xs),
    )


def gradient_check(params, batch, schedule, rng, per_block=20, h=1e-5):
    """Worst relative error of the analytic gradient per block."""
    _, grads = D.loss_and_gradients(params, batch, schedule)
    worst = {}
    for b in D.BLOCKS:
        names = list(params.blocks[b])
        sizes = np.array([params.blocks[b][k].size for k in names])
        errs = []
        for _ in range(per_block):
            k = names[rng.choice(len(names), p=sizes / sizes.sum())]
            arr = params.blocks[b][k]
            i = np.unravel_index(rng.integers(arr.size), arr.shape)
            old = arr[i]
            arr[i] = old + h
            lp, _ = D.loss_and_gradients(params, batch, schedule, ())
            arr[i] = old - h
            lm, _ = D.loss_and_gradients(params, batch, schedule, ())
            arr[i] = old
            fd = (lp - lm) / (2 * h)
            an = grads[b][k][i]
            errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-7))
        worst[b] = max(errs)
    return worst


@pytest.mark.parametrize("window", [None, 3])
def test_gradients_match_finite_differences(window):
    rng = np.random.default_rng(0)
    p = busy_params()
    worst = gradient_check(p, random_batch(rng, SMALL, window=window), D.make_schedule(10), rng)
    assert max(worst.values()) < 1e-4, worst


def test_frozen_blocks_get_exact_zero_gradients():
    rng = np.random.default_rng(1)
    _, g = D.loss_and_gradients(busy_params(), random_batch(rng, SMALL), D.make_schedule(10), ("spatial_block",))
    for b in D.BLOCKS:
        assert any(np.any(v) for v in g[b].values()) == (b == "spatial_block")
    with pytest.raises(ValueError):
        D.loss_and_gradients(busy_params(), random_batch(rng, SMALL), D.make_schedule(10), ("trunk",))


def _film(block, c):
    h = np.tanh(c @ block["W1"] + block["b1"])
    f = h @ block["W2"] + block["b2"]
    return f[: len(f) // 2], f[len(f) // 2 :]


def forward_reference(p, x, t, ref, cond):
    """One frame at a time with the layer equations written out."""
    cfg, P = p.config, p.blocks
    te, sp = P["time_embed"], P["spatial_block"]
    freqs = np.pi * np.arange(1, cfg.time_features // 2 + 1) * t / cfg.n_steps
    emb = np.concatenate([np.sin(freqs), np.cos(freqs)])
    r = np.tanh(ref @ P["ref_encoder"]["W"] + P["ref_encoder"]["b"])
    a1 = x @ sp["W_in"] + sp["b_in"] + emb @ te["W"] + te["b"] + r @ sp["W_ref"]
    theta = cond[:3]
    gm, bm = _film(P["motion_block"], np.concatenate([theta, axis_angle_to_matrix(theta).ravel()]))
    a2 = a1 * (1 + gm) + bm
    h1 = a2 * expit(a2)
    a3 = h1 @ sp["W_mid"] + sp["b_mid"]
    ge, be = _film(P["expression_block"], cond[3:])
    a4 = a3 * (1 + ge) + be
    h2 = a4 * expit(a4)
    trunk = h2 @ sp["W_out"] + sp["b_out"]
    return te["skip"][t] * x + te["gain"][t] * trunk


def test_forward_matches_reference():
    rng = np.random.default_rng(2)
    p = busy_params()
    b = random_batch(rng, SMALL, B=5)
    got = D.predict_noise(p, D.forward_noise(b.x0, b.t, b.eps, D.make_schedule(10)), b.t, b.ref, b.cond)
    xt = D.forward_noise(b.x0, b.t, b.eps, D.make_schedule(10))
    for i in range(5):
        assert np.allclose(got[i], forward_reference(p, xt[i], b.t[i], b.ref[i], b.cond[i]), rtol=1e-12, atol=1e-12)


def test_windowed_forward_without_mixing_equals_per_frame():
    rng = np.random.default_rng(3)
    p = busy_params()
    p.blocks["temporal_block"]["U"][:] = 0.0
    b = random_batch(rng, SMALL, B=2, window=3)
    out = D.predict_noise(p, b.x0, b.t, b.ref, b.cond)
    for i in range(2):
        per = D.predict_noise(p, b.x0[i], np.full(3, b.t[i]), np.tile(b.ref[i], (3, 1)), b.cond[i])
        assert np.allclose(out[i], per, atol=1e-14)


def test_forward_noise_moments_monte_carlo():
    sch = D.make_schedule(100)
    rng = np.random.default_rng(4)
    x0 = np.array([1.5, -2.0])
    t = 40
    eps = rng.standard_normal((200000, 2))
    xt = D.forward_noise(np.broadcast_to(x0, eps.shape), np.full(len(eps), t), eps, sch)
    ab = sch.alpha_bars[t]
    se = np.sqrt((1 - ab) / len(eps))
    assert np.all(np.abs(xt.mean(axis=0) - np.sqrt(ab) * x0) < 5 * se)
    assert np.allclose(xt.var(axis=0), 1 - ab, rtol=0.02)


def test_forward_noise_validation():
    sch = D.make_schedule(10)
    with pytest.raises(ValueError):
        D.forward_noise(np.zeros(3), 10, np.zeros(3), sch)
    with pytest.raises(ValueError):
        D.forward_noise(np.zeros(3), 0, np.zeros(2), sch)


def test_schedule_properties():
    sch = D.make_schedule(100)
    assert np.all(np.diff(sch.alpha_bars) < 0)
    assert sch.noise_floor == pytest.approx(0.01)
    with pytest.raises(ValueError):
        D.make_schedule(0)


@pytest.mark.parametrize("masked,changed", [(slice(0, 3), slice(0, 3)), (slice(3, 120), slice(20, 40))])
def test_masked_slices_do_not_reach_the_output(masked, changed):
    rng = np.random.default_rng(5)
    p = busy_params()
    b = random_batch(rng, SMALL)
    mask = np.ones(COND_DIM, dtype=bool)
    mask[masked] = False
    cond2 = b.cond.copy()
    cond2[:, changed] = rng.standard_normal(cond2[:, changed].shape) * 10
    a = D.predict_noise(p, b.x0, b.t, b.ref, b.cond, condition_mask=mask)
    c = D.predict_noise(p, b.x0, b.t, b.ref, cond2, condition_mask=mask)
    assert a.tobytes() == c.tobytes()
    assert D.predict_noise(p, b.x0, b.t, b.ref, cond2).tobytes() != a.tobytes()


def test_mask_condition_writes_positive_zero():
    out = D.mask_condition(np.full((1, COND_DIM), -3.0), np.zeros(COND_DIM, dtype=bool))
    assert out.tobytes() == np.zeros((1, COND_DIM)).tobytes()


def test_posterior_init_is_exact_for_a_perfect_trunk():
    cfg = D.DenoiserConfig(data_dim=4, hidden=4, ref_hidden=2, film_hidden=2, n_steps=20, prior_std=0.0)
    sch = D.make_schedule(20)
    p = D.zero_params(cfg)
    ip = D.init_params(cfg, schedule=sch)
    p.blocks["time_embed"]["skip"][:] = ip.blocks["time_embed"]["skip"]
    p.blocks["time_embed"]["gain"][:] = ip.blocks["time_embed"]["gain"]
    x0 = np.array([0.3, -0.1, 0.7, 0.2])
    p.blocks["spatial_block"]["b_out"][:] = x0
    rng = np.random.default_rng(6)
    eps = rng.standard_normal((20, 4))
    t = np.arange(20)
    xt = D.forward_noise(np.tile(x0, (20, 1)), t, eps, sch)
    assert np.allclose(D.predict_noise(p, xt, t, np.zeros((20, 4)), np.zeros((20, COND_DIM))), eps, atol=1e-9)


def test_single_step_sampler_with_perfect_denoiser():
    sch = D.make_schedule(1, beta_min=0.3, beta_max=0.3)
    x0 = np.array([2.0, -1.0, 0.5])
    ab = sch.alpha_bars[0]

    def eps_fn(x, t):
        return (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)

    out = D.ancestral_sample(eps_fn, (3,), sch, np.random.default_rng(7))
    rng = np.random.default_rng(7)
    rng.standard_normal(3)
    z = rng.standard_normal(3)
    assert np.allclose(out, x0 + np.sqrt(0.3) * z, atol=1e-12)


def test_sample_shapes_windows_and_determinism():
    p = busy_params()
    ref = np.random.default_rng(8).standard_normal((6, 2)) * 50 + 256
    cond = np.random.default_rng(9).standard_normal((5, COND_DIM))
    sch = D.make_schedule(10)
    a = D.sample(p, ref, cond, sch, seed=3)
    assert len(a) == 5 and a[0].shape == (6, 2)
    b = D.sample(p, ref, cond, sch, seed=3)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    c = D.sample(p, ref, cond, sch, seed=4)
    assert not np.array_equal(a[0], c[0])
    # 5 frames in windows of 3: the padded tail is dropped
    assert D.has_temporal(p) and len(D.sample(p, ref, cond[:4], sch, seed=3)) == 4
    per_frame = D.sample(p, ref, cond, sch, seed=3, window=None)
    assert len(per_frame) == 5 and not np.array_equal(per_frame[0], a[0])


def test_checkpoint_round_trip(tmp_path):
    p = busy_params()
    p.cond_mask[5:9] = False
    D.save_checkpoint(p, tmp_path / "c.ckpt", extra={"stage": "motion"})
    q = D.load_checkpoint(tmp_path / "c.ckpt")
    assert q.config == p.config and np.array_equal(q.cond_mask, p.cond_mask)
    for b in D.BLOCKS:
        for k in p.blocks[b]:
            assert p.blocks[b][k].tobytes() == q.blocks[b][k].tobytes()
    data = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "d.ckpt").write_bytes(data + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        D.load_checkpoint(tmp_path / "d.ckpt")
    (tmp_path / "e.ckpt").write_bytes(b"NOPE" + data)
    with pytest.raises(ValueError):
        D.load_checkpoint(tmp_path / "e.ckpt")


def tiny_set(rng, cfg=SMALL, S=3, n=5):
    return D.TrainingSet(
        rng.standard_normal((S, n, cfg.data_dim)) * 0.1,
        rng.standard_normal((S, cfg.data_dim)) * 0.1,
        rng.standard_normal((S, n, COND_DIM)),
    )


def test_training_freezes_blocks_and_is_deterministic():
    rng = np.random.default_rng(10)
    data = tiny_set(rng)
    p = busy_params()
    cfg = D.TrainConfig(steps=20, lr=0.01, batch_size=4, trainable=("expression_block",), seed=2)
    log = []
    a = D.train(p, data, cfg, D.make_schedule(10), log)
    b = D.train(p, data, cfg, D.make_schedule(10))
    assert len(log) == 20 and {r["stage"] for r in log} == {"train"}
    for blk in D.BLOCKS:
        for k in p.blocks[blk]:
            assert a.blocks[blk][k].tobytes() == b.blocks[blk][k].tobytes()
            same = a.blocks[blk][k].tobytes() == p.blocks[blk][k].tobytes()
            assert same == (blk != "expression_block")


def test_training_reduces_loss_and_respects_clip():
    rng = np.random.default_rng(11)
    data = tiny_set(rng)
    sch = D.make_schedule(10)
    p = D.init_params(SMALL, seed=0, schedule=sch)
    before = D.evaluation_loss(p, data, sch)
    after = D.evaluation_loss(D.train(p, data, D.TrainConfig(steps=200, lr=0.05, batch_size=8, clip=1.0), sch), data, sch)
    assert after < before


def test_divergence_is_reported():
    rng = np.random.default_rng(12)
    p = busy_params()
    with pytest.raises(D.TrainingDiverged):
        D.train(p, tiny_set(rng), D.TrainConfig(steps=200, lr=1e6, batch_size=4), D.make_schedule(10))
