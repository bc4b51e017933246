import numpy as np
import pytest
from conftest import random_rotations
from oracles import lbs_oracle, rotation_oracle

from headcond.head_model import (
    Camera,
    HeadCoefficients,
    evaluate,
    load_asset,
    make_desk_asset,
    project,
    render_landmarks,
    save_asset,
)


def random_coeffs(asset, rng, pose_scale=0.5):
    return HeadCoefficients(
        beta=rng.standard_normal(asset.n_shape),
        psi_exp=rng.standard_normal(asset.n_expr),
        psi_eyelids=rng.uniform(0, 1, 2),
        theta_global=random_rotations(rng, 1, pose_scale)[0],
        theta_neck=random_rotations(rng, 1, pose_scale)[0],
        theta_jaw=random_rotations(rng, 1, pose_scale)[0],
        theta_eye_l=random_rotations(rng, 1, pose_scale)[0],
        theta_eye_r=random_rotations(rng, 1, pose_scale)[0],
    )


def test_evaluate_matches_brute_force_skinning():
    asset = make_desk_asset(n_vertices=60, n_landmarks=10, seed=3)
    rng = np.random.default_rng(0)
    for _ in range(5):
        c = random_coeffs(asset, rng)
        assert np.max(np.abs(evaluate(asset, c).vertices - lbs_oracle(asset, c))) < 1e-10


def test_zero_coefficients_give_template_exactly(asset):
    mesh = evaluate(asset, HeadCoefficients.zeros_like_asset(asset))
    assert np.array_equal(mesh.vertices, asset.template)
    assert mesh.facets is asset.facets


def test_global_rotation_rotates_whole_mesh(asset):
    rng = np.random.default_rng(1)
    c = random_coeffs(asset, rng)
    g = np.array([0.1, -0.4, 0.2])
    moved = evaluate(asset, c.copy(theta_global=g)).vertices
    base = evaluate(asset, c.copy(theta_global=np.zeros(3))).vertices
    assert np.allclose(moved, base @ rotation_oracle(g).T, atol=1e-12)


def test_projection_of_rotated_mesh_is_consistent(asset, camera):
    c = random_coeffs(asset, np.random.default_rng(2))
    mesh = evaluate(asset, c)
    lm = project(mesh, camera, asset.landmark_idx)
    assert np.allclose(lm, camera.scale * mesh.vertices[asset.landmark_idx, :2] + camera.translation)
    assert np.array_equal(render_landmarks(asset, c, camera), lm)


def test_dimension_mismatch_raises(asset):
    with pytest.raises(ValueError, match="psi_exp"):
        evaluate(asset, HeadCoefficients.zeros(asset.n_shape, asset.n_expr + 1))


def test_bad_camera_and_landmark_index(asset):
    with pytest.raises(ValueError):
        Camera(0.0)
    with pytest.raises(IndexError):
        project(evaluate(asset, HeadCoefficients.zeros_like_asset(asset)), Camera(), [asset.n_vertices])


def test_desk_asset_shape_and_validity(asset):
    assert asset.n_vertices == 300 and asset.n_landmarks == 68
    assert asset.n_shape == 10 and asset.n_expr == 20
    asset.validate()
    # closed surface: Euler characteristic of a sphere
    n_edges = len({tuple(sorted(e)) for f in asset.facets for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0]))})
    assert asset.n_vertices - n_edges + len(asset.facets) == 2


def test_desk_asset_is_deterministic():
    a, b = make_desk_asset(seed=5), make_desk_asset(seed=5)
    assert all(np.array_equal(getattr(a, k), getattr(b, k)) for k in a.__dataclass_fields__)


def test_asset_file_round_trip(asset, tmp_path):
    path = save_asset(asset, tmp_path / "a.bin")
    back = load_asset(path)
    for k in asset.__dataclass_fields__:
        assert np.array_equal(getattr(asset, k), getattr(back, k)), k
    assert (tmp_path / "a.bin.manifest.txt").read_text().startswith("format: FLAPASSET")


def test_asset_file_corruption_is_rejected(asset, tmp_path):
    path = save_asset(asset, tmp_path / "a.bin")
    data = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"X" + data[1:])
    with pytest.raises(ValueError, match="magic"):
        load_asset(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_asset(tmp_path / "short.bin")
    (tmp_path / "long.bin").write_bytes(data + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_asset(tmp_path / "long.bin")


def test_restricted_asset_matches_slicing(asset):
    c = random_coeffs(asset, np.random.default_rng(4))
    idx = asset.landmark_idx
    assert np.allclose(evaluate(asset.restricted(idx), c).vertices, evaluate(asset, c).vertices[idx], atol=1e-14)
