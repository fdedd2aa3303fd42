from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from camgeo import synth
from camgeo.calibrate import (
    CorrespondenceSet,
    OptimizerConfig,
    View,
    correspondences_from_jsonl,
    correspondences_to_jsonl,
    decompose_projection,
    dlt_projection_matrix,
    estimate_pose,
    mean_reprojection_error,
    perturb_and_recover,
    rectify,
    refine,
    reprojection_stats,
)
from camgeo.cameras import EUCM, UCM, Pinhole
from camgeo.errors import CamGeoError, DegenerateError, FormatError
from camgeo.geometry import Pose
from camgeo.photometric import pixel_grid

UCM_B = UCM(235.4, 245.1, 186.5, 132.6, 0.650)
EUCM_B = EUCM(235.6, 245.4, 186.4, 132.7, 0.597, 1.112)
SIZE = (384, 256)


def cube_scene(rng, n=30):
    return np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(4, 8, n)])


@pytest.fixture(scope="module")
def ucm_data():
    return synth.calibration_views(UCM_B, SIZE, n_views=20, noise=0.2, seed=0)


# linear initialization ------------------------------------------------------------


def test_dlt_noiseless(rng):
    K = Pinhole(300, 320, 200, 150)
    pose = Pose.from_rotvec([0.1, -0.2, 0.05], [0.2, -0.1, 0.5])
    P = cube_scene(rng)
    p = K.project(pose.apply(P))
    M = dlt_projection_matrix(P, p)
    assert np.isclose(np.linalg.norm(M), 1.0)
    q = np.column_stack([P, np.ones(len(P))]) @ M.T
    assert np.max(np.abs(q[:, :2] / q[:, 2:] - p)) < 1e-8


def test_dlt_preconditions(rng):
    P = cube_scene(rng, 5)
    with pytest.raises(DegenerateError):
        dlt_projection_matrix(P, P[:, :2])
    board = synth.checkerboard_points() + [0, 0, 1]
    p = Pinhole(300, 300, 200, 150).project(board)
    with pytest.raises(DegenerateError):
        dlt_projection_matrix(board, p)


def test_decompose_recovers_factors(rng):
    K = np.array([[310.0, 0.5, 190.0], [0, 305.0, 140.0], [0, 0, 1]])
    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.normal(size=3)
    M = K @ np.column_stack([R, t])
    K2, pose = decompose_projection(-3.7 * M)  # arbitrary (negative) scale
    assert np.allclose(K2, K, atol=1e-8)
    assert np.allclose(pose.rotation, R, atol=1e-8)
    assert np.allclose(pose.translation, t, atol=1e-8)


def test_decompose_identity():
    K, pose = decompose_projection(np.column_stack([np.eye(3), np.zeros(3)]))
    assert np.allclose(K, np.eye(3)) and np.allclose(pose.matrix, np.eye(4))


def test_decompose_positive_focals(rng):
    K = np.diag([-200.0, -210.0, 1.0])
    K, _ = decompose_projection(K @ np.column_stack([np.eye(3), [0, 0, 1.0]]))
    assert K[0, 0] > 0 and K[1, 1] > 0 and K[2, 2] == 1.0


@pytest.mark.parametrize("planar", [True, False])
def test_estimate_pose_exact(planar, rng):
    pts = synth.checkerboard_points() if planar else cube_scene(rng) - [0, 0, 6]
    pose = Pose.from_rotvec([0.3, -0.2, 0.4], [0.05, -0.02, 0.6 if planar else 7.0])
    p = UCM_B.project(pose.apply(pts))
    est = estimate_pose(UCM_B, pts, p)
    assert np.allclose(est.matrix, pose.matrix, atol=1e-8)


# reprojection error -----------------------------------------------------------------


def test_mre_scalar_example():
    cam = Pinhole(100, 100, 0, 0)
    view = View([[0.0, 0.0, 1.0]], [[3.0, 4.0]])
    assert mean_reprojection_error(cam, [Pose.identity()], CorrespondenceSet((view,))) == 25.0


def test_mre_perfect_model(ucm_data):
    corrs, poses = ucm_data
    clean = CorrespondenceSet(tuple(View(v.points, UCM_B.project(p.apply(v.points))) for v, p in zip(corrs.views, poses)))
    assert mean_reprojection_error(UCM_B, poses, clean) == 0.0


def test_mre_excludes_unprojectable():
    cam = Pinhole(100, 100, 0, 0)
    view = View([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]], [[3.0, 4.0], [0.0, 0.0]])
    stats = reprojection_stats(cam, [Pose.identity()], CorrespondenceSet((view,)))
    assert stats.mse == 25.0 and stats.n_excluded == 1


# refinement -------------------------------------------------------------------------


def test_refine_ucm_scene(ucm_data):
    corrs, _ = ucm_data
    res = refine(UCM(192, 192, 192, 128, 0.5), corrs)
    assert res.converged
    rel = np.abs(res.model.params()[:4] / UCM_B.params()[:4] - 1)
    assert np.all(rel < 0.01)
    assert abs(res.model.alpha - UCM_B.alpha) < 0.01
    assert res.rms < 0.3
    assert np.isclose(res.mre, res.rms**2)


def test_refine_objective_matches_mre(ucm_data):
    corrs, _ = ucm_data
    res = refine(UCM(192, 192, 192, 128, 0.5), corrs)
    assert np.isclose(mean_reprojection_error(res.model, res.poses, corrs), res.mre, rtol=1e-12)


def test_refine_never_increases_cost(ucm_data):
    corrs, _ = ucm_data
    hist = refine(UCM(192, 192, 192, 128, 0.5), corrs).diagnostics["cost_history"]
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_refine_already_optimal():
    corrs, poses = synth.calibration_views(UCM_B, SIZE, n_views=5, noise=0.0, seed=2)
    with_poses = CorrespondenceSet(tuple(View(v.points, v.pixels, p) for v, p in zip(corrs.views, poses)))
    res = refine(UCM_B, with_poses)
    assert res.iterations == 0 and res.converged and res.mre < 1e-10


def test_refine_model_mismatch(ucm_data):
    corrs, _ = ucm_data
    ucm = refine(UCM(192, 192, 192, 128, 0.5), corrs)
    pin = refine(Pinhole(150, 150, 192, 128), corrs)
    assert pin.converged
    assert pin.mre >= 5 * ucm.mre


def test_refine_invariant_to_relabeling(ucm_data, rng):
    corrs, _ = ucm_data
    base = refine(UCM(192, 192, 192, 128, 0.5), corrs).model.params()
    views = []
    for v in corrs.views[::-1]:
        perm = rng.permutation(len(v))
        views.append(View(v.points[perm], v.pixels[perm]))
    other = refine(UCM(192, 192, 192, 128, 0.5), CorrespondenceSet(tuple(views))).model.params()
    assert np.allclose(base, other, rtol=0, atol=1e-6)


def test_optimizer_config_validation():
    with pytest.raises(CamGeoError):
        OptimizerConfig(max_iters=0)


# perturbation ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def eucm_clean():
    return synth.calibration_views(EUCM_B, SIZE, n_views=20, noise=0.0, seed=0)[0]


@pytest.mark.parametrize("factor", [1.10, 0.90])
def test_perturb_recovers_eucm(factor, eucm_clean):
    res = perturb_and_recover(EUCM_B, eucm_clean, factor)
    assert res.converged
    assert max(res.relative_errors.values()) < 0.03
    assert res.rms < 1.0
    assert res.diagnostics["factor"] == factor


def test_perturb_factor_one_is_immediate(eucm_clean):
    res = perturb_and_recover(EUCM_B, eucm_clean, 1.0)
    assert res.iterations <= 1 and max(res.relative_errors.values()) < 1e-9


def test_perturb_rejects_bad_factor(eucm_clean):
    with pytest.raises(CamGeoError):
        perturb_and_recover(EUCM_B, eucm_clean, 0.0)


def test_recovery_error_grows_with_noise():
    means = []
    for sigma in (0.0, 0.2, 0.5):
        errs = []
        for seed in range(5):
            corrs, _ = synth.calibration_views(EUCM_B, SIZE, n_views=20, noise=sigma, seed=seed)
            errs.append(max(perturb_and_recover(EUCM_B, corrs, 1.10).relative_errors.values()))
        means.append(np.mean(errs))
    assert means[0] <= means[1] <= means[2]


# rectification ----------------------------------------------------------------------


def test_rectify_identity():
    H, W = 60, 80
    uv = pixel_grid(H, W)
    img = 0.5 + 0.3 * np.sin(uv[..., 0] / 7.0)[..., None] * np.cos(uv[..., 1] / 5.0)[..., None] * [1, 0.5, 0.2]
    cam = Pinhole(70, 70, 39.5, 29.5)
    out, mask = rectify(img, cam, cam)
    assert mask.all()
    assert np.max(np.abs(out - img)) < 1e-6


def test_rectify_straightens_lines():
    W, H = SIZE
    # fisheye image of a thin bright 3D line: intensity falls off with the
    # angle between each pixel's ray and the plane through the line and the center
    a, b = np.array([-2.0, 0.4, 3.0]), np.array([2.0, 0.9, 3.0])
    n = np.cross(a, b)
    n /= np.linalg.norm(n)
    X, ok = UCM_B.unproject_with_mask(pixel_grid(H, W))
    d = X / np.linalg.norm(X, axis=-1, keepdims=True)
    img = np.where(ok, np.exp(-((d @ n) ** 2) / (2 * 0.004**2)), 0.0)[..., None].repeat(3, axis=-1)
    dst = Pinhole(150, 150, (W - 1) / 2, (H - 1) / 2)
    out, mask = rectify(img, UCM_B, dst)
    g = out[..., 0]
    cols = np.flatnonzero(g.sum(axis=0) > 1.0)
    rows = np.arange(H)
    cu = cols.astype(float)
    cv = np.array([np.sum(rows * g[:, c]) / np.sum(g[:, c]) for c in cols])
    fit = np.polyfit(cu, cv, 1)
    assert len(cols) > 100
    assert np.sqrt(np.mean((np.polyval(fit, cu) - cv) ** 2)) < 0.5
    # the same line in the fisheye image is visibly curved
    src_cols = np.flatnonzero(img[..., 0].sum(axis=0) > 1.0)
    sv = np.array([np.sum(rows * img[:, c, 0]) / np.sum(img[:, c, 0]) for c in src_cols])
    fit0 = np.polyfit(src_cols, sv, 1)
    assert np.sqrt(np.mean((np.polyval(fit0, src_cols) - sv) ** 2)) > 2.0


def test_rectify_masks_outside_source():
    img = np.ones((64, 96, 3))
    src = UCM(60, 60, 47.5, 31.5, 0.8)
    out, mask = rectify(img, src, Pinhole(10, 10, 47.5, 31.5))
    assert mask.any() and not mask.all()
    assert np.all(out[~mask] == 0)


# file format ----------------------------------------------------------------------------


def test_jsonl_roundtrip(ucm_data):
    corrs, _ = ucm_data
    back = correspondences_from_jsonl(correspondences_to_jsonl(corrs))
    assert len(back.views) == len(corrs.views)
    for a, b in zip(back.views, corrs.views):
        assert np.array_equal(a.points, b.points) and np.array_equal(a.pixels, b.pixels)


@pytest.mark.parametrize(
    "bad, line",
    [
        ('{"view": 0, "P": [0, 0, 1], "p": [1, 2]}\n{"view": 0, "P": [0, 0]', 2),
        ('{"view": 0, "P": [0, 0, 1], "p": [1, 2]}\n\n{"view": -1, "P": [0, 0, 1], "p": [1, 2]}', 3),
        ('{"view": 0, "P": [0, 0, 1]}', 1),
        ('{"view": 0, "P": [0, 0, "x"], "p": [1, 2]}', 1),
        ('[1, 2]', 1),
    ],
)
def test_jsonl_errors_are_line_precise(bad, line):
    with pytest.raises(FormatError) as info:
        correspondences_from_jsonl(bad, "c.jsonl")
    assert info.value.line == line
    assert str(info.value).startswith(f"c.jsonl:{line}:")
