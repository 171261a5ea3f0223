import numpy as np
import pytest

from lidartrack.flow import FlowNoiseModel, oracle_flows
from lidartrack.geometry import (PerturbBounds, PoseSE3, perturb_pose,
                                 pose_error, project_points, se3_exp)
from lidartrack.mapping import CropExtents, crop_local
from lidartrack.pnp import (Correspondences, DegenerateConfigurationError,
                            RansacConfig, TooFewCorrespondencesError,
                            correspondences_from_flow, refine_pose,
                            solve_pnp_ransac)
from lidartrack.rendering import FlowField, remove_occlusions, render_depth


def make_exact_corrs(K, pose, points, n, seed, z_min=1.0):
    """Noiseless correspondences: sampled points with exact projections."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(points), size=min(n, len(points)), replace=False)
    P = points[idx]
    cam = pose.apply(P)
    keep = cam[:, 2] > z_min
    uv, _ = project_points(K, cam[keep])
    inside = ((uv[:, 0] >= 0) & (uv[:, 0] < K.width)
              & (uv[:, 1] >= 0) & (uv[:, 1] < K.height))
    return Correspondences.from_arrays(P[keep][inside], uv[inside])


@pytest.fixture(scope="module")
def world(K, corridor):
    gmap, traj = corridor
    T_gt = traj[0]
    crop = crop_local(gmap, T_gt, CropExtents())
    return K, T_gt, crop


class TestCorrespondencesFromFlow:
    def test_zero_flow_anchors_at_pixels(self, K, corridor):
        gmap, traj = corridor
        T = traj[0]
        crop = crop_local(gmap, T, CropExtents())
        d = remove_occlusions(render_depth(crop, K, T))
        zero = FlowField(np.zeros(d.depth.shape), np.zeros(d.depth.shape),
                         d.valid.copy())
        corrs = correspondences_from_flow(d, zero, crop)
        assert len(corrs) == d.valid.sum()
        rows, cols = np.nonzero(d.valid)
        assert np.allclose(corrs.x_img[:, 0], cols)
        assert np.allclose(corrs.x_img[:, 1], rows)

    def test_empty_joint_mask(self, K, corridor):
        gmap, traj = corridor
        crop = crop_local(gmap, traj[0], CropExtents())
        d = remove_occlusions(render_depth(crop, K, traj[0]))
        empty = FlowField.invalid(*d.depth.shape)
        assert len(correspondences_from_flow(d, empty, crop)) == 0

    def test_gt_flow_lands_near_gt_projection(self, K, corridor):
        gmap, traj = corridor
        T_gt = traj[0]
        T_init = perturb_pose(T_gt, PerturbBounds(1.5, 8.0), 21)
        crop = crop_local(gmap, T_init, CropExtents())
        d = remove_occlusions(render_depth(crop, K, T_init))
        t = oracle_flows(crop, K, T_init, T_gt, traj[1], FlowNoiseModel(),
                         depth_init=d)
        corrs = correspondences_from_flow(d, t.f_c2d, crop)
        assert len(corrs) > 200
        uv_gt, front = project_points(K, T_gt.apply(corrs.p_world))
        assert np.all(front)
        assert np.abs(corrs.x_img - uv_gt).max() <= 0.5 + 1e-9

    def test_dimension_mismatch(self, K):
        d = render_depth(np.array([[0.0, 0, 10]]), K, PoseSE3.identity())
        with pytest.raises(ValueError):
            correspondences_from_flow(d, FlowField.invalid(4, 4), np.zeros((1, 3)))


class TestRefinePose:
    def test_stays_at_noiseless_optimum(self, world):
        K, T_gt, crop = world
        corrs = make_exact_corrs(K, T_gt, crop, 300, seed=0)
        res = refine_pose(corrs, K, T_gt)
        rot, transl = pose_error(res.pose, T_gt)
        assert rot < 1e-9 and transl < 1e-9

    def test_recovers_from_large_perturbation(self, world):
        K, T_gt, crop = world
        corrs = make_exact_corrs(K, T_gt, crop, 400, seed=1)
        for seed in range(5):
            T0 = perturb_pose(T_gt, PerturbBounds(2.0, 10.0), seed)
            res = refine_pose(corrs, K, T0)
            rot, transl = pose_error(res.pose, T_gt)
            assert rot < 0.01 and transl < 0.01

    def test_noisy_cost_decreases(self, world):
        K, T_gt, crop = world
        corrs = make_exact_corrs(K, T_gt, crop, 500, seed=2)
        rng = np.random.default_rng(3)
        noisy = Correspondences.from_arrays(
            corrs.p_world, corrs.x_img + rng.normal(0, 1.0, corrs.x_img.shape))
        T0 = perturb_pose(T_gt, PerturbBounds(0.5, 3.0), 4)
        from lidartrack.pnp import _reproj_cost
        c0 = _reproj_cost(noisy, K, T0, 2.0)
        res = refine_pose(noisy, K, T0)
        assert res.cost < c0
        rot, transl = pose_error(res.pose, T_gt)
        assert transl < 0.05 and rot < 0.1

    def test_too_few_points(self, world):
        K, T_gt, crop = world
        corrs = make_exact_corrs(K, T_gt, crop, 300, seed=0)
        with pytest.raises(TooFewCorrespondencesError):
            refine_pose(corrs.subset([0, 1, 2]), K, T_gt)

    def test_collinear_points_rejected(self, K):
        P = np.array([[0.0, 0, 10 + i] for i in range(10)])
        uv, _ = project_points(K, P)
        with pytest.raises(DegenerateConfigurationError):
            refine_pose(Correspondences.from_arrays(P, uv), K, PoseSE3.identity())


class TestRansac:
    def test_noiseless_recovery(self, world):
        K, T_gt, crop = world
        corrs = make_exact_corrs(K, T_gt, crop, 200, seed=5)
        T0 = perturb_pose(T_gt, PerturbBounds(2.0, 10.0), 6)
        res = solve_pnp_ransac(corrs, K, T0, RansacConfig(seed=0))
        assert res.success
        rot, transl = pose_error(res.pose, T_gt)
        assert rot < 0.01 and transl < 0.01
        assert res.inliers.sum() == len(corrs)

    def test_outliers_excluded(self, world):
        K, T_gt, crop = world
        corrs = make_exact_corrs(K, T_gt, crop, 300, seed=7)
        rng = np.random.default_rng(8)
        n = len(corrs)
        n_out = int(0.3 * n)
        bad = rng.choice(n, size=n_out, replace=False)
        x = corrs.x_img.copy()
        phi = rng.uniform(0, 2 * np.pi, n_out)
        x[bad] += 50.0 * np.stack([np.cos(phi), np.sin(phi)], axis=1)
        corrupted = Correspondences.from_arrays(corrs.p_world, x)
        T0 = perturb_pose(T_gt, PerturbBounds(1.0, 5.0), 9)
        res = solve_pnp_ransac(corrupted, K, T0, RansacConfig(seed=1))
        assert res.success
        rot, transl = pose_error(res.pose, T_gt)
        assert rot < 0.01 and transl < 0.01
        assert not res.inliers[bad].any()

    def test_too_few_correspondences(self, K):
        P = np.array([[0.0, 0, 10], [1, 0, 11], [0, 1, 12]])
        uv, _ = project_points(K, P)
        with pytest.raises(TooFewCorrespondencesError):
            solve_pnp_ransac(Correspondences.from_arrays(P, uv), K,
                             PoseSE3.identity(), RansacConfig())

    def test_failure_flag_when_no_consensus(self, world):
        K, T_gt, crop = world
        corrs = make_exact_corrs(K, T_gt, crop, 100, seed=10)
        rng = np.random.default_rng(11)
        x = corrs.x_img + rng.uniform(-200, 200, corrs.x_img.shape)
        garbage = Correspondences.from_arrays(corrs.p_world, x)
        res = solve_pnp_ransac(garbage, K, T_gt,
                               RansacConfig(max_iters=50, min_inliers=50, seed=2))
        assert not res.success
        rot, transl = pose_error(res.pose, T_gt)  # falls back to T_init
        assert rot < 1e-12 and transl < 1e-12

    def test_deterministic_per_seed(self, world):
        K, T_gt, crop = world
        corrs = make_exact_corrs(K, T_gt, crop, 250, seed=12)
        rng = np.random.default_rng(13)
        x = corrs.x_img + rng.normal(0, 1.5, corrs.x_img.shape)
        noisy = Correspondences.from_arrays(corrs.p_world, x)
        T0 = perturb_pose(T_gt, PerturbBounds(1.0, 5.0), 14)
        a = solve_pnp_ransac(noisy, K, T0, RansacConfig(seed=42))
        b = solve_pnp_ransac(noisy, K, T0, RansacConfig(seed=42))
        assert np.array_equal(a.pose.q, b.pose.q)
        assert np.array_equal(a.pose.t, b.pose.t)
        assert np.array_equal(a.inliers, b.inliers)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RansacConfig(max_iters=0)
        with pytest.raises(ValueError):
            RansacConfig(inlier_threshold=0.0)
        with pytest.raises(ValueError):
            RansacConfig(confidence=1.0)
