import json

import numpy as np
import pytest
from PIL import Image

from ic_align.errors import FormatError
from ic_align.geometry import exp_se3
from ic_align.imaging import InverseDepthImage, ScalarImage
from ic_align.io import (BatchReport, FramePaths, PoseRecord, load_depth, load_intensity,
                         load_intrinsics, load_poses_tum, pose_from_tum, read_report, save_depth,
                         save_intensity, save_intrinsics, save_poses_tum, write_report)
from ic_align.solver import align
from ic_align.warp import AFFINE, CameraIntrinsics


def write_pgm(path, width, height, pixels):
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode() + bytes(pixels))
    return path


class TestIntensity:
    def test_pgm_full_scale(self, tmp_path):
        img = load_intensity(write_pgm(tmp_path / "white.pgm", 2, 2, [255] * 4))
        np.testing.assert_array_equal(img.data, np.ones((2, 2)))

    def test_pgm_values(self, tmp_path):
        img = load_intensity(write_pgm(tmp_path / "two.pgm", 2, 1, [0, 128]))
        np.testing.assert_allclose(img.data, [[0.0, 128 / 255]])

    def test_png_roundtrip_within_quantisation(self, tmp_path, rng):
        img = ScalarImage(rng.uniform(size=(12, 16)))
        save_intensity(img, tmp_path / "img.png")
        back = load_intensity(tmp_path / "img.png")
        assert np.abs(back.data - img.data).max() <= 0.5 / 255 + 1e-12

    def test_rgb_uses_luma(self, tmp_path):
        rgb = np.zeros((2, 2, 3), dtype=np.uint8)
        rgb[..., 0] = 255
        Image.fromarray(rgb).save(tmp_path / "red.png")
        np.testing.assert_allclose(load_intensity(tmp_path / "red.png").data, 0.299)

    def test_sixteen_bit(self, tmp_path):
        Image.fromarray(np.full((3, 3), 65535, dtype=np.uint16)).save(tmp_path / "wide.png")
        np.testing.assert_allclose(load_intensity(tmp_path / "wide.png").data, 1.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError) as err:
            load_intensity(tmp_path / "nope.png")
        assert "nope.png" in str(err.value)

    def test_not_an_image(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_text("definitely not a png")
        with pytest.raises(FormatError):
            load_intensity(path)


class TestDepth:
    def test_tum_scale(self, tmp_path):
        raw = np.array([[5000, 0], [50000, 10000]], dtype=np.uint16)
        Image.fromarray(raw).save(tmp_path / "depth.png")
        d = load_depth(tmp_path / "depth.png")
        np.testing.assert_allclose(d.data, [[1.0, 0.0], [0.0, 0.5]])

    def test_roundtrip(self, tmp_path):
        depth = InverseDepthImage.from_depth(np.array([[1.5, 2.0], [0.0, 4.0]]))
        save_depth(depth, tmp_path / "d.png")
        np.testing.assert_allclose(load_depth(tmp_path / "d.png").data, depth.data, rtol=1e-4)

    def test_needs_sixteen_bit(self, tmp_path):
        Image.fromarray(np.zeros((2, 2), dtype=np.uint8)).save(tmp_path / "eight.png")
        with pytest.raises(FormatError):
            load_depth(tmp_path / "eight.png")

    def test_frame_paths_size_mismatch(self, tmp_path):
        save_intensity(ScalarImage(np.zeros((4, 4))), tmp_path / "i.png")
        Image.fromarray(np.zeros((4, 5), dtype=np.uint16)).save(tmp_path / "d.png")
        with pytest.raises(FormatError):
            FramePaths(str(tmp_path / "i.png"), str(tmp_path / "d.png")).load()


class TestIntrinsics:
    def test_parse(self, tmp_path):
        path = tmp_path / "k.txt"
        path.write_text("# fx fy cx cy\n525.0 525.0 319.5 239.5\n")
        assert load_intrinsics(path) == CameraIntrinsics(525.0, 525.0, 319.5, 239.5)

    def test_roundtrip(self, tmp_path):
        k = CameraIntrinsics(131.25, 130.0, 79.5, 59.5)
        save_intrinsics(k, tmp_path / "k.txt")
        assert load_intrinsics(tmp_path / "k.txt") == k

    def test_malformed_line_number(self, tmp_path):
        path = tmp_path / "k.txt"
        path.write_text("# header\n525.0 525.0 abc 239.5\n")
        with pytest.raises(FormatError) as err:
            load_intrinsics(path)
        assert err.value.line == 2
        assert ":2:" in str(err.value)


class TestPoses:
    def test_identity_line(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text("# timestamp tx ty tz qx qy qz qw\n1.0 0 0 0 0 0 0 1\n")
        (record,) = load_poses_tum(path)
        assert record.timestamp == 1.0
        np.testing.assert_array_equal(record.transform.matrix(), np.eye(4))

    def test_quaternion_convention(self):
        s = np.sqrt(0.5)
        t = pose_from_tum([0.0, 0.0, 0.0, 0.0, 0.0, s, s])
        np.testing.assert_allclose(t.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_roundtrip(self, tmp_path, rng):
        records = [PoseRecord(float(i), exp_se3(rng.normal(size=6) * 0.5)) for i in range(20)]
        save_poses_tum(tmp_path / "traj.txt", records)
        back = load_poses_tum(tmp_path / "traj.txt")
        assert [r.timestamp for r in back] == [r.timestamp for r in records]
        for a, b in zip(records, back):
            np.testing.assert_allclose(b.transform.matrix(), a.transform.matrix(), atol=1e-9)

    def test_bad_quaternion(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text("0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 2\n")
        with pytest.raises(FormatError) as err:
            load_poses_tum(path)
        assert err.value.line == 2

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text("0 0 0 0 0 0 1\n")
        with pytest.raises(FormatError):
            load_poses_tum(path)


class TestReports:
    def result(self, textured_frame):
        return align(textured_frame, textured_frame, AFFINE)

    def test_json_alignment_report(self, tmp_path, textured_frame):
        result = self.result(textured_frame)
        write_report(result, tmp_path / "r.json")
        doc = read_report(tmp_path / "r.json")
        assert doc["schema_version"] == 1
        assert doc["family"] == AFFINE
        assert doc["trace"] == result.as_dict()["trace"]
        assert "timestamp" not in doc

    def test_json_timestamp_only_when_asked(self, tmp_path, textured_frame):
        write_report(self.result(textured_frame), tmp_path / "r.json", timestamp="2024-01-01T00:00:00")
        assert read_report(tmp_path / "r.json")["timestamp"] == "2024-01-01T00:00:00"

    def test_json_is_stable(self, tmp_path, textured_frame):
        result = self.result(textured_frame)
        write_report(result, tmp_path / "a.json")
        write_report(result, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert json.loads((tmp_path / "a.json").read_text())["converged"] is True

    def test_csv_alignment_report(self, tmp_path, textured_frame):
        write_report(self.result(textured_frame), tmp_path / "r.csv")
        (row,) = read_report(tmp_path / "r.csv")
        assert row["schema_version"] == 1
        assert row["converged"] is True
        assert row["final_objective"] == 0.0

    def test_empty_batch_has_header_only(self, tmp_path):
        write_report(BatchReport(("pair", "l1_error")), tmp_path / "b.csv")
        assert (tmp_path / "b.csv").read_text() == "schema_version,pair,l1_error\n"

    def test_batch_roundtrip(self, tmp_path):
        rows = [{"pair": "pair_0000", "l1_error": 0.125}, {"pair": "pair_0001", "l1_error": 2.5}]
        write_report(BatchReport(("pair", "l1_error"), rows, {"pairs": 2}), tmp_path / "b.csv")
        back = read_report(tmp_path / "b.csv")
        assert [r["l1_error"] for r in back] == [0.125, 2.5]

    def test_unknown_format(self, tmp_path):
        with pytest.raises(FormatError):
            write_report(BatchReport(("pair",)), tmp_path / "b.xml")

