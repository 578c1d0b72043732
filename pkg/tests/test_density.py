"""Co-attention, density assembly, density/total losses, count readout."""

import numpy as np
import pytest

from avcc.config import GEOMETRIES
from avcc.density import (DensityAssembler, co_attention, combine_losses,
                          density_loss, final_count, read_density_bin,
                          write_density_bin, write_pgm)
from avcc.errors import DivergenceError, ShapeError
from avcc.tensor import Tensor


class TestCoAttention:
    def test_zero_inputs_give_column_mean_rows(self, rng):
        visual = rng.normal(size=(4, 6))
        out = co_attention(Tensor(np.zeros((4, 6))), Tensor(np.zeros((6, 1))),
                           Tensor(visual))
        mean = visual.mean(axis=0)
        for row in out.data:
            np.testing.assert_allclose(row, mean, atol=1e-12)

    def test_two_patch_case_matches_hand_arithmetic(self, rng):
        attended = rng.normal(size=(2, 2))
        emb = rng.normal(size=(2, 1))
        visual = rng.normal(size=(2, 2))
        out = co_attention(Tensor(attended), Tensor(emb), Tensor(visual))
        keys = np.tile(emb, (1, 2))
        logits = attended @ keys / 2.0
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, attn @ visual, atol=1e-12)

    @pytest.mark.parametrize("n,z", [(4, 36), (16, 144), (64, 144)])
    def test_output_shape_per_grid_mode(self, rng, n, z):
        out = co_attention(Tensor(rng.normal(size=(n, z))),
                           Tensor(rng.normal(size=(z, 1))),
                           Tensor(rng.normal(size=(n, z))))
        assert out.shape == (n, z)

    def test_attention_rows_stochastic_on_random_inputs(self, rng):
        for _ in range(100):
            n, z = int(rng.integers(2, 9)), int(rng.integers(2, 40))
            _, attn = co_attention(Tensor(rng.normal(scale=3.0, size=(n, z))),
                                   Tensor(rng.normal(size=(z, 1))),
                                   Tensor(rng.normal(size=(n, z))),
                                   return_attention=True)
            np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-6)

    def test_image_only_mode_uses_visual_keys(self, rng):
        attended = rng.normal(size=(3, 4))
        visual = rng.normal(size=(3, 4))
        out = co_attention(Tensor(attended), None, Tensor(visual))
        logits = attended @ visual.T / 4.0
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, attn @ visual, atol=1e-12)


class TestDensityAssembler:
    def test_default_geometry_chain(self, rng):
        geo = GEOMETRIES["full"]
        assert geo.coarse_shape == (128, 72)
        out = DensityAssembler(geo)(Tensor(rng.normal(size=(64, 144))))
        assert out.shape == (1024, 576)

    def test_low_res_geometry_chain(self, rng):
        geo = GEOMETRIES["low_res"]
        assert geo.coarse_shape == (64, 36)
        out = DensityAssembler(geo)(Tensor(rng.normal(size=(16, 144))))
        assert out.shape == (128, 72)

    def test_constant_input_gives_constant_map(self):
        geo = GEOMETRIES["toy"]
        out = DensityAssembler(geo)(Tensor(np.full((4, 36), 2.25)))
        np.testing.assert_allclose(out.data, 2.25, atol=1e-12)
        assert abs(final_count(out) - 2.25 * 64 * 36) < 1e-8

    def test_linearity(self, rng):
        geo = GEOMETRIES["toy"]
        assemble = DensityAssembler(geo)
        x = rng.normal(size=(4, 36))
        y = rng.normal(size=(4, 36))
        a, b = 1.7, -0.4
        combined = assemble(Tensor(a * x + b * y)).data
        separate = a * assemble(Tensor(x)).data + b * assemble(Tensor(y)).data
        np.testing.assert_allclose(combined, separate, atol=1e-8)

    def test_count_conservation_factor(self, rng):
        # mass factor measured once from a constant input, then must hold
        geo = GEOMETRIES["toy"]
        assemble = DensityAssembler(geo)
        ones = assemble(Tensor(np.ones((4, 36)))).data.sum()
        factor = ones / (4 * 36)
        for _ in range(10):
            x = rng.normal(size=(4, 36))
            got = assemble(Tensor(x)).data.sum()
            # holds exactly here because the resize preserves the mean of a
            # constant and tile sums distribute linearly
            assert abs(got - factor * x.sum()) / max(abs(got), 1.0) < 1e-4

    def test_tiles_land_on_their_grid_cells(self):
        geo = GEOMETRIES["toy"]
        patch_map = np.zeros((4, 36))
        patch_map[0] = 1.0  # patch (0, 0): top-left cell of the coarse grid
        coarse_w, coarse_h = geo.coarse_shape
        assembled = DensityAssembler(geo)(Tensor(patch_map)).data
        # mass must concentrate in the top-left image quadrant
        quad = assembled[: 32, : 18].sum()
        assert quad > 0.8 * assembled.sum()


class TestDensityLoss:
    def test_zero_at_equality(self, rng):
        x = rng.normal(size=(8, 6))
        assert float(density_loss(Tensor(x), x).data) == 0.0

    def test_constant_offset(self):
        x = np.zeros((8, 6))
        loss = density_loss(Tensor(x + 1.0), x)
        assert abs(float(loss.data) - 48.0) < 1e-12

    def test_matches_pixel_loop_oracle(self, rng):
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(7, 5))
        acc = 0.0
        for i in range(7):
            for j in range(5):
                acc += (a[i, j] - b[i, j]) ** 2
        assert abs(float(density_loss(Tensor(a), b).data) - acc) < 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            density_loss(Tensor(np.zeros((4, 4))), np.zeros((4, 5)))


class TestTotalLoss:
    def test_plain_sum(self):
        total, report = combine_losses(Tensor(np.asarray(0.1)),
                                       Tensor(np.asarray(0.2)),
                                       Tensor(np.asarray(0.3)))
        assert abs(float(total.data) - 0.6) < 1e-15
        assert report.total == pytest.approx(0.6)
        assert report.has_pir and report.has_pce

    def test_ablated_term_contributes_zero(self):
        total, report = combine_losses(None, Tensor(np.asarray(0.2)),
                                       Tensor(np.asarray(0.3)))
        assert float(total.data) == pytest.approx(0.5)
        assert report.loss_pir == 0.0 and not report.has_pir

    def test_all_zero(self):
        total, report = combine_losses(Tensor(np.asarray(0.0)),
                                       Tensor(np.asarray(0.0)),
                                       Tensor(np.asarray(0.0)))
        assert float(total.data) == 0.0

    def test_nan_aborts(self):
        with pytest.raises(DivergenceError, match="dm"):
            combine_losses(None, None, Tensor(np.asarray(float("nan"))))


class TestCountAndExports:
    def test_zero_map_counts_zero(self):
        assert final_count(np.zeros((10, 10))) == 0.0

    def test_count_matches_loop_sum(self, rng):
        x = rng.normal(size=(31, 17))
        acc = 0.0
        for v in x.ravel():
            acc += v
        assert abs(final_count(x) - acc) < 1e-8

    def test_density_bin_roundtrip(self, tmp_path, rng):
        x = rng.normal(size=(12, 9)).astype(np.float32)
        path = tmp_path / "d.dmp"
        write_density_bin(path, x)
        blob = path.read_bytes()
        assert blob[:4] == b"DMP1"
        back = read_density_bin(path)
        np.testing.assert_array_equal(back, x)

    def test_pgm_export(self, tmp_path, rng):
        x = rng.normal(size=(12, 9))
        path = tmp_path / "d.pgm"
        write_pgm(path, x)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n12 9\n255\n")
        assert len(blob) == len(b"P5\n12 9\n255\n") + 12 * 9
