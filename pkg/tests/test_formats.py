import numpy as np
import pytest

from lidartrack import formats
from lidartrack.formats import FormatError
from lidartrack.geometry import PoseSE3, pose_error, se3_exp
from lidartrack.rendering import FlowField, render_depth


class TestCloudIO:
    def test_xyz_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.normal(0, 100, (500, 3))
        path = tmp_path / "cloud.xyz"
        formats.save_xyz(pts, path)
        assert np.array_equal(formats.load_xyz(path), pts)

    def test_xyz_bad_field_count(self, tmp_path):
        path = tmp_path / "bad.xyz"
        path.write_text("1 2 3\n4 5\n")
        with pytest.raises(FormatError, match="line 2"):
            formats.load_xyz(path)

    def test_binary_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        pts = rng.normal(0, 50, (321, 3)).astype(np.float32).astype(float)
        path = tmp_path / "cloud.xmpc"
        formats.save_cloud_binary(pts, path)
        assert np.allclose(formats.load_cloud_binary(path), pts, atol=1e-6)

    def test_binary_header(self, tmp_path):
        path = tmp_path / "cloud.xmpc"
        formats.save_cloud_binary(np.zeros((7, 3)), path)
        raw = path.read_bytes()
        assert raw[:4] == b"XMPC"
        assert len(raw) == 16 + 7 * 3 * 4

    def test_binary_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"JUNK" + b"\x00" * 20)
        with pytest.raises(FormatError):
            formats.load_cloud_binary(path)

    def test_sniffing_loader(self, tmp_path):
        pts = np.arange(12.0).reshape(4, 3)
        t = tmp_path / "a.xyz"
        b = tmp_path / "b.bin"
        formats.save_xyz(pts, t)
        formats.save_cloud_binary(pts, b)
        assert np.allclose(formats.load_cloud(t), pts)
        assert np.allclose(formats.load_cloud(b), pts, atol=1e-6)


class TestKittiPoses:
    def test_raw_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        poses = [se3_exp(rng.uniform(-2, 2, 6)) for _ in range(50)]
        path = tmp_path / "poses.txt"
        formats.save_kitti_poses(poses, path)
        back = formats.load_kitti_poses(path)
        for a, b in zip(back, poses):
            rot, transl = pose_error(a, b)
            assert rot < 1e-9 and transl < 1e-9

    def test_trajectory_poses_invert_at_boundary(self, tmp_path):
        # the file stores camera-to-world rows; loading returns extrinsics
        T = se3_exp([0.2, -0.1, 0.4, 3, -2, 1])
        path = tmp_path / "traj.txt"
        formats.save_trajectory_poses([T], path)
        raw = formats.load_kitti_poses(path)[0]
        rot, transl = pose_error(raw, T.inverse())
        assert rot < 1e-9 and transl < 1e-9
        back = formats.load_trajectory_poses(path)[0]
        rot, transl = pose_error(back, T)
        assert rot < 1e-9 and transl < 1e-9


class TestDepthDump:
    def test_pgm_roundtrip(self, tmp_path, K):
        pts = np.array([[0.0, 0.0, 10.0], [1.0, 1.0, 25.0]])
        d = render_depth(pts, K, PoseSE3.identity())
        path = tmp_path / "depth.pgm"
        formats.save_depth_pgm(d, path, scale=256.0)
        depth, valid, scale = formats.load_depth_pgm(path)
        assert scale == 256.0
        assert np.array_equal(valid, d.valid)
        assert np.allclose(depth[valid], d.depth[d.valid], atol=1.0 / 256.0)

    def test_pgm_header(self, tmp_path, K):
        d = render_depth(np.array([[0.0, 0, 5.0]]), K, PoseSE3.identity())
        path = tmp_path / "depth.pgm"
        formats.save_depth_pgm(d, path)
        head = path.read_bytes()[:64]
        assert head.startswith(b"P5")
        assert b"depth-scale" in head


class TestFlowDump:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        f = FlowField(du=rng.normal(size=(40, 60)).astype(np.float32).astype(float),
                      dv=rng.normal(size=(40, 60)).astype(np.float32).astype(float),
                      valid=rng.random((40, 60)) > 0.5)
        path = tmp_path / "flow.xmfl"
        formats.save_flow(f, path)
        back = formats.load_flow(path)
        assert np.array_equal(back.valid, f.valid)
        assert np.allclose(back.du, f.du, atol=1e-6)
        assert np.allclose(back.dv, f.dv, atol=1e-6)

    def test_header(self, tmp_path):
        f = FlowField.invalid(8, 16)
        path = tmp_path / "flow.xmfl"
        formats.save_flow(f, path)
        raw = path.read_bytes()
        assert raw[:4] == b"XMFL"
        assert len(raw) == 16 + 3 * 8 * 16 * 4

    def test_truncated(self, tmp_path):
        f = FlowField.invalid(8, 16)
        path = tmp_path / "flow.xmfl"
        formats.save_flow(f, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError):
            formats.load_flow(path)
