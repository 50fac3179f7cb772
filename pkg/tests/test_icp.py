import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from resflow.data import SceneGenConfig, generate_scene
from resflow.errors import DegenerateGeometry
from resflow.geometry import RigidTransform, random_rotation, rot_z
from resflow.icp import IcpConfig, best_fit_transform, icp_flow, icp_register
from resflow.metrics import evaluate_3d, evaluate_pose


def cloud(rng, n=400):
    return rng.uniform([-2, -1, 3], [2, 1, 7], size=(n, 3))


def test_best_fit_matches_scipy_alignment():
    rng = np.random.default_rng(0)
    for _ in range(10):
        src = rng.normal(size=(50, 3))
        dst = src @ random_rotation(rng).T + rng.normal(size=3) + rng.normal(scale=0.05, size=(50, 3))
        T = best_fit_transform(src, dst)
        # scipy solves the same least-squares rotation on centred point sets
        R_ref, _ = Rotation.align_vectors(dst - dst.mean(0), src - src.mean(0))
        np.testing.assert_allclose(T.rotation, R_ref.as_matrix(), atol=1e-10)
        assert T.is_valid() and np.linalg.det(T.rotation) > 0


def test_reflection_is_corrected():
    src = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [-1, -1, 0.5]])
    mirrored = src * [1, 1, -1]
    T = best_fit_transform(src, mirrored)
    assert np.linalg.det(T.rotation) == pytest.approx(1.0)


def test_identity_in_one_iteration():
    P = cloud(np.random.default_rng(1))
    T, hist = icp_register(P, P)
    np.testing.assert_allclose(T.matrix(), np.eye(4), atol=1e-12)
    assert len(hist) == 2 and hist[0] == 0.0


def test_recovers_random_transforms():
    rng = np.random.default_rng(2)
    for _ in range(10):
        P = cloud(rng)
        T = RigidTransform(random_rotation(rng, 15), rng.uniform(-0.5, 0.5, 3))
        T_hat, hist = icp_register(P, T.apply(P))
        rle, roe = evaluate_pose(T_hat, T)
        assert roe < 0.5 and rle < 0.01
        assert np.all(np.diff(hist) <= 1e-12)


def test_noise_floor():
    rng = np.random.default_rng(3)
    P = cloud(rng, 2000)
    T = RigidTransform(rot_z(math.radians(5)), [0.2, 0, 0.1])
    sigma = 0.01
    Q = T.apply(P) + rng.normal(scale=sigma, size=P.shape)
    T_hat, hist = icp_register(P, Q)
    rle, roe = evaluate_pose(T_hat, T)
    assert roe < 0.5 and rle < 0.01
    # the residual settles at the noise level, not at zero and not far above it
    assert 0.3 * sigma < hist[-1] < 2 * math.sqrt(3) * sigma


def test_rigid_scene_flow():
    s = generate_scene(SceneGenConfig(n=800, blob_amplitude=0.0, max_rotation_deg=10, seed=4))
    assert np.abs(s.gt_nonrigid).max() == 0.0
    flow = icp_flow(s.p1, s.p2)
    assert flow.kind == "total"
    assert evaluate_3d(flow, s.gt_total)[0] < 1e-3
    static = icp_flow(s.p1, s.p1)
    assert np.abs(static.vectors).max() < 1e-12


def test_non_rigid_residual_bound():
    s = generate_scene(SceneGenConfig(n=600, blob_amplitude=0.6, seed=5))
    d = icp_flow(s.p1, s.p2).vectors
    # with true correspondences the least-squares rigid fit minimises the RMS residual,
    # so no rigid predictor, ICP included, can beat it
    fit = best_fit_transform(s.p1, s.p1 + s.gt_total)
    floor = np.sqrt(np.mean(np.sum((fit.apply(s.p1) - s.p1 - s.gt_total) ** 2, axis=1)))
    rms = np.sqrt(np.mean(np.sum((d - s.gt_total) ** 2, axis=1)))
    assert floor > 0.01
    assert rms >= floor - 1e-12


def test_degenerate_inputs():
    line = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegenerateGeometry):
        icp_register(line, line + [0.1, 0, 0])
    with pytest.raises(DegenerateGeometry):
        best_fit_transform(line[:2], line[:2])
    P = cloud(np.random.default_rng(6))
    with pytest.raises(DegenerateGeometry):
        icp_register(P, P + 100.0, IcpConfig(max_correspondence_distance=1.0))


def test_config_validation():
    with pytest.raises(ValueError):
        IcpConfig(max_iterations=0)
    with pytest.raises(ValueError):
        IcpConfig(convergence_tol=0)


def test_large_initial_rotation_converges_on_generated_scene():
    s = generate_scene(SceneGenConfig(n=1000, blob_amplitude=0.0, max_rotation_deg=0.0, max_translation=0.0, seed=7))
    T = RigidTransform(rot_z(math.radians(30)), [0.1, 0.0, 0.0])
    T_hat, _ = icp_register(s.p1, T.apply(s.p1), IcpConfig(max_iterations=200))
    rle, roe = evaluate_pose(T_hat, T)
    assert roe < 0.5 and rle < 0.01
