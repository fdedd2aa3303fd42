from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camgeo import synth
from camgeo.cameras import Pinhole
from camgeo.embeddings import (
    AugmentConfig,
    FourierConfig,
    camera_embedding,
    camera_rays,
    canonical_jitter,
    canonical_randomize,
    fourier_encode,
    jitter_pose,
    look_at,
    project_to_virtual,
    read_embedding,
    supervision_losses,
    virtual_camera,
    write_embedding,
)
from camgeo.errors import CamGeoError, FormatError
from camgeo.geometry import Pose, compose, ray_from_pixel
from camgeo.multicam import PointCloud, Rig, assemble_pointcloud
from camgeo.photometric import pixel_grid

from helpers import random_pose

CAM = Pinhole(64.0, 60.0, 31.5, 23.5)
K = CAM.K


def rel(a, b):
    return compose(a, b.inverse()).matrix


# rays and encodings ----------------------------------------------------------------


def test_rays_identity_pose():
    o, r = camera_rays(K, Pose.identity(), 48, 64)
    assert not o.any()
    p = pixel_grid(48, 64)
    ref = np.stack([(p[..., 0] - CAM.cx) / CAM.fx, (p[..., 1] - CAM.cy) / CAM.fy, np.ones(p.shape[:2])], axis=-1)
    assert np.allclose(r, ref, atol=1e-15)
    _, rc = camera_rays(Pinhole(64, 60, 32, 24), Pose.identity(), 48, 64)
    assert np.allclose(rc[24, 32], [0, 0, 1])


def test_rays_against_viewing_ray(rng):
    pose = random_pose(rng)
    p = pixel_grid(48, 64)
    ray = ray_from_pixel(p, K, pose)
    o, r = camera_rays(K, pose, 48, 64, mode="geometric")
    assert np.allclose(o, ray.origin)
    assert np.allclose(r / np.linalg.norm(r, axis=-1, keepdims=True), ray.direction)
    # the default direction differs by exactly the translation vector
    _, rp = camera_rays(K, pose, 48, 64)
    assert np.allclose(rp - r, pose.translation)
    o2, _ = camera_rays(K, pose, 48, 64)
    assert np.allclose(o2[0, 0], -pose.rotation @ pose.translation)
    with pytest.raises(CamGeoError):
        camera_rays(K, pose, 4, 4, mode="bogus")


def test_singular_intrinsics():
    with pytest.raises(CamGeoError):
        camera_rays(np.zeros((3, 3)), Pose.identity(), 4, 4)


def test_fourier_trivial_cases(rng):
    x = rng.normal(size=(5, 3))
    assert np.array_equal(fourier_encode(x, 0, 60), x)
    z = fourier_encode(np.zeros(1), 3, 60)
    assert z.tolist() == [0, 0, 1, 0, 1, 0, 1]
    with pytest.raises(CamGeoError):
        fourier_encode(x, -1, 60)


def test_fourier_scalar_oracle(rng):
    x = rng.uniform(-2, 2, size=3)
    Kf, mu = 4, 10.0
    freqs = [1 + k * (mu / 2 - 1) / (Kf - 1) for k in range(Kf)]
    ref = []
    for xi in x:
        ref.append(xi)
        for f in freqs:
            ref += [math.sin(f * math.pi * xi), math.cos(f * math.pi * xi)]
    assert np.allclose(fourier_encode(x, Kf, mu), ref, atol=1e-14)


def test_embedding_dimension():
    cfg = FourierConfig()
    assert cfg.dim == 186
    emb = camera_embedding(K, Pose.identity(), 6, 8, cfg)
    assert emb.shape == (6, 8, 186)
    assert FourierConfig(k_o=2, k_r=1).dim == 3 * 5 + 3 * 3
    with pytest.raises(CamGeoError):
        FourierConfig(mu_o=1.0)


def test_fourier_injective_on_unit_interval():
    x = np.random.default_rng(3).uniform(0, 1, size=(10**6, 1))
    enc = fourier_encode(x, 1, 60)
    assert len(np.unique(enc, axis=0)) == len(np.unique(x))


# virtual cameras --------------------------------------------------------------------


def test_look_at_and_zero_noise(rng):
    pts = rng.normal(size=(50, 3)) + [0, 0, 5]
    base = random_pose(rng)
    v = virtual_camera(base, pts, AugmentConfig(sigma_v=0.0), rng)
    assert np.allclose(v.center, base.center)
    c = v.apply(pts.mean(axis=0))
    assert abs(c[0]) < 1e-9 and abs(c[1]) < 1e-9 and c[2] > 0
    assert np.allclose(v.rotation @ v.rotation.T, np.eye(3)) and np.linalg.det(v.rotation) == pytest.approx(1)
    up = look_at([0, 0, 0], [0, 0, 1])
    assert np.allclose(up.rotation @ up.rotation.T, np.eye(3))
    with pytest.raises(CamGeoError):
        look_at([1, 1, 1], [1, 1, 1])
    with pytest.raises(CamGeoError):
        virtual_camera(base, np.empty((0, 3)), AugmentConfig(), rng)


def test_virtual_camera_deterministic(rng):
    pts = rng.normal(size=(20, 3))
    a = virtual_camera(Pose.identity(), pts, AugmentConfig(), np.random.default_rng(7))
    b = virtual_camera(Pose.identity(), pts, AugmentConfig(), np.random.default_rng(7))
    assert np.array_equal(a.matrix, b.matrix)


def test_projection_round_trip():
    room = synth.room()
    pose = Pose.from_rotvec([0.05, 0.2, 0], [0.1, 0, 0])
    img, d, _ = synth.render(CAM, pose, (64, 48), [room])
    cloud = assemble_pointcloud(Rig((CAM,), (pose,)), [d], [img])
    D, C = project_to_virtual(cloud, CAM, pose, 48, 64)
    assert np.array_equal(D.valid, d.valid)
    assert np.max(np.abs(D.depth - d.depth)[d.valid]) < 1e-6
    assert np.max(np.abs(C - img)[d.valid]) < 1e-12


def test_zbuffer_keeps_nearer():
    pts = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 2.0], [0.0, 0.0, 9.0]])
    cloud = PointCloud(pts, np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]), np.zeros(3, int))
    D, C = project_to_virtual(cloud, Pinhole(10, 10, 2, 2), Pose.identity(), 5, 5)
    assert D.valid.sum() == 1 and D.depth[2, 2] == 2.0
    assert C[2, 2].tolist() == [0, 1, 0]


def test_virtual_projection_on_box_scene():
    room = synth.room()
    rig = synth.yaw_rig(CAM, [0.0, 60.0, -60.0])
    renders = [synth.render(CAM, X, (64, 48), [room]) for X in rig.extrinsics]
    cloud = assemble_pointcloud(rig, [r[1] for r in renders], [r[0] for r in renders])
    v = virtual_camera(rig.extrinsics[0], cloud, AugmentConfig(sigma_v=0.25), np.random.default_rng(5))
    D, _ = project_to_virtual(cloud, CAM, v, 48, 64)
    assert D.valid.sum() > 100
    # independent z-buffer: per pixel, the nearest point landing there
    X = v.apply(cloud.points)
    uv = CAM.project(X)
    best = {}
    for (u, w), z, P in zip(np.rint(uv).astype(int).tolist(), X[:, 2].tolist(), cloud.points):
        if 0 <= u < 64 and 0 <= w < 48 and z > 0 and z < best.get((w, u), (np.inf,))[0]:
            best[(w, u)] = (z, P)
    assert set(best) == set(zip(*np.nonzero(D.valid)))
    for (w, u), (z, P) in best.items():
        assert D.depth[w, u] == z
        # the surviving point is where the virtual ray through it meets the box
        ray = P - v.center
        dist = np.linalg.norm(ray)
        assert abs(room.intersect(v.center, ray / dist) - dist) < 1e-4


# canonical augmentation ----------------------------------------------------------------


def test_jitter_preserves_relative_geometry(rng):
    ext = [Pose.identity()] + [random_pose(rng) for _ in range(3)]
    out = canonical_jitter(ext, AugmentConfig(), rng)
    for i in range(4):
        for j in range(4):
            assert np.allclose(rel(out[i], out[j]), rel(ext[i], ext[j]), atol=1e-12)
    zero = canonical_jitter(ext, AugmentConfig(sigma_t=0, sigma_r=0), rng)
    assert all(np.allclose(a.matrix, b.matrix) for a, b in zip(zero, ext))
    with pytest.raises(CamGeoError):
        canonical_jitter([], AugmentConfig(), rng)


def test_jitter_statistics():
    cfg = AugmentConfig(sigma_t=0.1, sigma_r=0.1)
    t = np.array([jitter_pose(cfg, np.random.default_rng(s)).translation for s in range(10**4)])
    assert np.all(np.abs(t.std(axis=0) / 0.1 - 1) < 0.05)


@given(st.integers(0, 2**31), st.integers(1, 5))
def test_randomize(seed, n):
    rng = np.random.default_rng(seed)
    ext = [random_pose(rng) for _ in range(n)]
    out, o = canonical_randomize(ext, rng)
    assert np.array_equal(out[o].matrix, np.eye(4))
    for i in range(n):
        for j in range(n):
            assert np.allclose(rel(out[i], out[j]), rel(ext[i], ext[j]), atol=1e-9)


# losses --------------------------------------------------------------------------------


def test_supervision_losses(rng):
    d = rng.uniform(1, 10, (6, 6))
    c = rng.uniform(size=(6, 6, 3))
    assert supervision_losses(d, d, c, c).total == 0
    assert supervision_losses(math.e * d, d, c, c).depth == pytest.approx(1.0)
    pd = rng.uniform(1, 10, (6, 6))
    pc = rng.uniform(size=(6, 6, 3))
    vd, vpd = rng.uniform(1, 10, (2, 4, 4))
    vc, vpc = rng.uniform(size=(2, 4, 4, 3))
    ld = np.mean([abs(math.log(a) - math.log(b)) for a, b in zip(d.ravel(), pd.ravel())])
    ls = np.mean([sum((a - b) ** 2) for a, b in zip(pc.reshape(-1, 3), c.reshape(-1, 3))])
    ldv = np.mean([abs(math.log(a) - math.log(b)) for a, b in zip(vd.ravel(), vpd.ravel())])
    lsv = np.mean([sum((a - b) ** 2) for a, b in zip(vpc.reshape(-1, 3), vc.reshape(-1, 3))])
    out = supervision_losses(pd, d, pc, c, virtual=(vpd, vd, vpc, vc))
    assert out.total == pytest.approx(ld + 5 * ls + 0.5 * (ldv + 5 * lsv), rel=1e-12)
    with pytest.raises(CamGeoError):
        supervision_losses(-d, d, c, c)


# embedding files -------------------------------------------------------------------------


def test_embedding_file_roundtrip(tmp_path, rng):
    emb = rng.normal(size=(3, 4, 5)).astype(np.float32)
    write_embedding(tmp_path / "e.bin", emb)
    assert np.array_equal(read_embedding(tmp_path / "e.bin"), emb)
    (tmp_path / "bad.bin").write_bytes(b"NOPE 1 2 3\n")
    with pytest.raises(FormatError):
        read_embedding(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(b"CAMEMB 1 2 3\n\x00\x00")
    with pytest.raises(FormatError):
        read_embedding(tmp_path / "short.bin")
