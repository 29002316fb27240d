import numpy as np
import pytest

from paircomp.imageio import (
    read_pgm,
    read_ppm,
    read_score_map,
    write_pgm,
    write_ppm,
    write_score_map,
)

rng = np.random.default_rng(8)


class TestPGM:
    def test_binary_mask_round_trip_exact(self, tmp_path):
        mask = (rng.random((9, 13)) > 0.5).astype(np.float64)
        write_pgm(tmp_path / "m.pgm", mask)
        assert np.array_equal(read_pgm(tmp_path / "m.pgm"), mask)

    def test_binary_values_are_0_and_255(self, tmp_path):
        write_pgm(tmp_path / "m.pgm", np.array([[0.0, 1.0]]))
        body = (tmp_path / "m.pgm").read_text().split()
        assert body[:4] == ["P2", "2", "1", "255"]
        assert body[4:] == ["0", "255"]

    def test_soft_mask_rounds_to_nearest(self, tmp_path):
        soft = np.array([[0.5, 0.25]])
        write_pgm(tmp_path / "s.pgm", soft)
        back = read_pgm(tmp_path / "s.pgm")
        assert np.abs(back - soft).max() <= 0.5 / 255

    def test_out_of_range_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "bad.pgm", np.array([[1.5]]))

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.pgm").write_text("P5\n1 1\n255\n0\n")
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "bad.pgm")


class TestPPM:
    def test_round_trip_within_quantization(self, tmp_path):
        img = rng.random((7, 5, 3))
        write_ppm(tmp_path / "i.ppm", img)
        back = read_ppm(tmp_path / "i.ppm")
        assert back.shape == (7, 5, 3)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_quantized_round_trip_exact(self, tmp_path):
        img = np.round(rng.random((4, 4, 3)) * 255) / 255
        write_ppm(tmp_path / "i.ppm", img)
        assert np.allclose(read_ppm(tmp_path / "i.ppm"), img, atol=1e-12)

    def test_wrong_shape_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_ppm(tmp_path / "x.ppm", np.zeros((4, 4)))


class TestScoreMap:
    def test_signed_round_trip(self, tmp_path):
        scores = rng.normal(size=(6, 6)) * 3.0
        write_score_map(tmp_path / "d.pgm", scores)
        back = read_score_map(tmp_path / "d.pgm")
        span = scores.max() - scores.min()
        assert np.abs(back - scores).max() <= span / 255 / 2 + 1e-12

    def test_constant_map_mid_gray(self, tmp_path):
        write_score_map(tmp_path / "c.pgm", np.full((3, 3), 2.5))
        raw = read_pgm(tmp_path / "c.pgm")
        assert np.allclose(raw, 128 / 255)
        assert np.allclose(read_score_map(tmp_path / "c.pgm"), 2.5)
