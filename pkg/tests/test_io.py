import json

import numpy as np
import pytest

from cadsim.errors import ValidationError
from cadsim.evaluate import aggregate, scene_record
from cadsim.io import (file_digest, load_psf_binary, load_psf_stack, read_image, read_pfm, read_psf_manifest,
                       save_psf_binary, save_psf_stack, write_manifest, write_pfm, write_png)
from cadsim.psf import code_psf_stack


class TestPfm:
    @pytest.mark.parametrize("shape", [(7, 5), (4, 6, 3), (3, 3, 1)])
    def test_round_trip(self, tmp_path, rng, shape):
        x = rng.normal(size=shape).astype(np.float32)
        back = read_pfm(write_pfm(tmp_path / "x.pfm", x))
        np.testing.assert_array_equal(back, x.reshape(back.shape))

    def test_header_and_row_order(self, tmp_path):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        raw = write_pfm(tmp_path / "h.pfm", x).read_bytes()
        assert raw.startswith(b"Pf\n2 2\n-1.0\n")
        # bottom row first
        np.testing.assert_array_equal(np.frombuffer(raw[-16:], "<f4"), [3, 4, 1, 2])

    def test_bad_shape(self, tmp_path):
        with pytest.raises(ValidationError):
            write_pfm(tmp_path / "b.pfm", np.zeros((2, 2, 2)))

    def test_truncated(self, tmp_path):
        p = write_pfm(tmp_path / "t.pfm", np.zeros((4, 4)))
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(ValidationError):
            read_pfm(p)


class TestPng:
    def test_8bit(self, tmp_path, rng):
        x = rng.random((6, 9))
        back = read_image(write_png(tmp_path / "a.png", x, vmax=1.0))
        assert np.max(np.abs(back - x)) <= 0.5 / 255 + 1e-12

    def test_16bit(self, tmp_path, rng):
        x = rng.random((6, 9))
        back = read_image(write_png(tmp_path / "b.png", x, bits=16, vmax=1.0))
        assert np.max(np.abs(back - x)) <= 0.5 / 65535 + 1e-12

    def test_rgb(self, tmp_path, rng):
        x = rng.random((5, 5, 3))
        assert read_image(write_png(tmp_path / "c.png", x, vmax=1.0)).shape == (5, 5, 3)

    def test_bits_validation(self, tmp_path):
        with pytest.raises(ValidationError):
            write_png(tmp_path / "d.png", np.zeros((2, 2)), bits=12)


class TestPsfContainers:
    def test_binary_exact(self, tmp_path, naive_stack):
        back = load_psf_binary(save_psf_binary(naive_stack, tmp_path / "s.bin"))
        for a in ("blurs", "left", "right"):
            assert getattr(back, a).tobytes() == getattr(naive_stack, a).tobytes()
        assert not back.coded

    def test_directory(self, tmp_path, naive_stack, reference_mask):
        coded = code_psf_stack(naive_stack, reference_mask)
        d = save_psf_stack(coded, tmp_path / "stack")
        back = load_psf_stack(d)
        np.testing.assert_array_equal(back.left, coded.left)
        assert back.coded
        meta = read_psf_manifest(d)
        assert int(meta["planes"]) == 21 and int(meta["extent"]) == coded.kernel_extent_px
        assert [p["blur"] for p in meta["planes_table"]] == list(coded.blurs)
        # the 16-bit previews reproduce the kernels up to quantisation
        p = meta["planes_table"][3]
        png = read_image(d / p["left"]) * p["scale"]
        assert np.max(np.abs(png - coded.left[3])) <= p["scale"] / 65535

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"x" * 40)
        with pytest.raises(ValidationError):
            load_psf_binary(p)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_psf_stack(tmp_path / "nothing")


def test_manifest(tmp_path):
    src = tmp_path / "in.txt"
    src.write_text("hello")
    p = write_manifest(tmp_path / "m.json", "render", {"seed": 1}, {"intensity": src})
    rec = json.loads(p.read_text())
    assert rec["command"] == "render" and rec["config"] == {"seed": 1}
    assert rec["inputs"]["intensity"] == file_digest(src)
    assert {"tool_version", "format_version"} <= rec.keys()


class TestEvaluateRecords:
    def test_perfect(self, rng):
        z = rng.uniform(300, 500, (12, 12))
        d = rng.uniform(-1, 1, (12, 12))
        a = rng.random((12, 12))
        r = scene_record("s", z, z, d, d, a, a)
        assert r["mae_mm"] == 0 and r["delta1"] == 1 and r["ssim"] == pytest.approx(1.0)
        assert r["spearman"] < 1e-12 and r["psnr_db"] == float("inf")

    def test_aggregate_mean(self, rng):
        recs = [scene_record(f"s{i}", rng.uniform(300, 500, (4, 4)), rng.uniform(300, 500, (4, 4)))
                for i in range(3)]
        agg = aggregate(recs)
        assert agg["count"] == 3
        assert agg["mae_mm"] == pytest.approx(np.mean([r["mae_mm"] for r in recs]))

    def test_aggregate_empty(self):
        with pytest.raises(ValidationError):
            aggregate([])
