import numpy as np
import pytest

from palu.core import Matrix, random_matrix
from palu.decompose import Granularity, decompose, reconstruct
from palu.errors import ValidationError
from palu.quant import (
    QuantParams,
    QuantizedLatent,
    dequantize,
    fuse_hadamard,
    outlier_metric,
    pack_codes,
    quantize,
    unpack_codes,
)

from oracles import quantize_row_scalar


class TestQuantize:
    def test_lattice_aligned_row(self):
        q = quantize(Matrix([[0.0, 1.0, 2.0, 3.0]]), QuantParams(2))
        assert q.scales[0] == 1.0
        assert q.zero_points[0] == 0
        assert q.codes.tolist() == [[0, 1, 2, 3]]

    def test_constant_row(self):
        q = quantize(Matrix([[5.0, 5.0, 5.0]]), QuantParams(4))
        assert len(set(q.codes[0].tolist())) == 1
        back = dequantize(q).data
        assert np.max(np.abs(back - 5.0)) < 1e-7

    def test_formula_oracle_row(self):
        row = np.array([-1.0, 0.0, 1.0])
        q = quantize(Matrix([row]), QuantParams(3))
        codes, s, z = quantize_row_scalar(row, 3)
        assert q.codes[0].tolist() == codes.tolist()
        assert abs(q.scales[0] - s) < 1e-15
        assert q.zero_points[0] == z
        # z rounding pushes the max value past qmax: the clamp must bite
        assert q.codes[0, 2] == 7

    def test_matches_scalar_loop(self):
        x = random_matrix(32, 16, seed=9).data * 3.0
        for bits in (2, 3, 4, 8):
            q = quantize(Matrix(x), QuantParams(bits))
            for i in range(32):
                codes, s, z = quantize_row_scalar(x[i], bits)
                assert q.codes[i].tolist() == codes.tolist()
                assert abs(q.scales[i] - s) < 1e-15
                assert q.zero_points[i] == z

    def test_rejects_unknown_bits(self):
        with pytest.raises(ValidationError):
            QuantParams(5)

    def test_codes_within_range(self):
        x = random_matrix(20, 8, seed=3).data * 100.0
        for bits in (2, 3, 4, 8):
            q = quantize(Matrix(x), QuantParams(bits))
            assert q.codes.max() <= (1 << bits) - 1


class TestDequantize:
    def test_exact_round_trip_on_lattice(self):
        m = Matrix([[0.0, 1.0, 2.0, 3.0]])
        back = dequantize(quantize(m, QuantParams(2)))
        assert np.array_equal(back.data, m.data)

    def test_error_bound_unclamped(self):
        x = random_matrix(64, 16, seed=4).data
        for bits in (2, 3, 4, 8):
            q = quantize(Matrix(x), QuantParams(bits))
            back = dequantize(q).data
            qmax = (1 << bits) - 1
            unclamped = (q.codes > 0) & (q.codes < qmax)
            err = np.abs(x - back)
            bound = q.scales[:, None] / 2.0 + 1e-12
            assert np.all(err[unclamped] <= bound.repeat(16, axis=1)[unclamped])

    def test_per_row_mse_matches_scalar_loop(self):
        x = random_matrix(32, 16, seed=5).data
        q = quantize(Matrix(x), QuantParams(4))
        back = dequantize(q).data
        for i in range(32):
            codes, s, z = quantize_row_scalar(x[i], 4)
            manual = (codes - z) * s
            mse_lib = float(np.mean((x[i] - back[i]) ** 2))
            mse_ora = float(np.mean((x[i] - manual) ** 2))
            assert abs(mse_lib - mse_ora) < 1e-12

    def test_idempotent_codes(self):
        x = random_matrix(50, 12, seed=6).data * 7.0
        for bits in (2, 3, 4, 8):
            q1 = quantize(Matrix(x), QuantParams(bits))
            q2 = quantize(dequantize(q1), QuantParams(bits))
            assert np.array_equal(q1.codes, q2.codes)

    def test_invariant_validation(self):
        with pytest.raises(ValidationError):
            QuantizedLatent(
                codes=np.array([[9]], dtype=np.int64),
                scales=np.array([1.0]),
                zero_points=np.array([0]),
                bits=3,
            )


class TestOutlierMetric:
    def test_all_ones(self):
        assert abs(outlier_metric(Matrix(np.ones((5, 8)))) - 1.0) < 1e-12

    def test_one_hot_rows(self):
        x = np.zeros((4, 16))
        x[np.arange(4), [0, 3, 7, 15]] = 1.0
        assert abs(outlier_metric(Matrix(x)) - 4.0) < 1e-12

    def test_hadamard_reduces_outliers_on_svd_latents(self):
        w = random_matrix(16, 16, seed=11, spectrum=0.5)
        layer = decompose(w, 1, 16, Granularity.multi_head(), 8)
        tokens = random_matrix(32, 16, seed=12).data
        latent = tokens @ layer.groups[0].a.data
        rotated = fuse_hadamard(layer)
        latent_rot = tokens @ rotated.layer.groups[0].a.data
        assert outlier_metric(Matrix(latent_rot)) < outlier_metric(Matrix(latent))


class TestFuseHadamard:
    def test_rank_one_is_identity(self):
        w = random_matrix(8, 4, seed=13)
        layer = decompose(w, 2, 2, Granularity.multi_head(), 1)
        rot = fuse_hadamard(layer)
        for g0, g1 in zip(layer.groups, rot.layer.groups):
            assert np.array_equal(g0.a.data, g1.a.data)
            assert np.array_equal(g0.b.data, g1.b.data)

    def test_reconstruction_unchanged(self):
        w = random_matrix(8, 8, seed=14)
        layer = decompose(w, 2, 4, Granularity.multi_head(), 4)
        rot = fuse_hadamard(layer)
        diff = reconstruct(rot.layer).data - reconstruct(layer).data
        assert np.max(np.abs(diff)) < 1e-10

    def test_involution_for_pow2_ranks(self):
        w = random_matrix(8, 8, seed=15)
        layer = decompose(w, 2, 4, Granularity.multi_head(), 4)
        twice = fuse_hadamard(fuse_hadamard(layer).layer)
        for g0, g1 in zip(layer.groups, twice.layer.groups):
            assert np.max(np.abs(g0.a.data - g1.a.data)) < 1e-10

    def test_norm_preserved_per_token(self):
        w = random_matrix(16, 16, seed=16, spectrum=0.6)
        layer = decompose(w, 1, 16, Granularity.multi_head(), 8)
        rot = fuse_hadamard(layer)
        tokens = random_matrix(10, 16, seed=17).data
        lat = tokens @ layer.groups[0].a.data
        lat_rot = tokens @ rot.layer.groups[0].a.data
        assert np.max(np.abs(np.linalg.norm(lat, axis=1) - np.linalg.norm(lat_rot, axis=1))) < 1e-10

    def test_non_pow2_rank_still_exact(self):
        w = random_matrix(12, 12, seed=18)
        layer = decompose(w, 1, 12, Granularity.multi_head(), 6)
        rot = fuse_hadamard(layer)
        diff = reconstruct(rot.layer).data - reconstruct(layer).data
        assert np.max(np.abs(diff)) < 1e-10

    def test_quantization_mse_improves_on_decayed_spectra(self):
        wins = 0
        trials = 40
        for seed in range(trials):
            w = random_matrix(16, 16, seed=seed, spectrum=0.5)
            layer = decompose(w, 1, 16, Granularity.multi_head(), 8)
            rot = fuse_hadamard(layer)
            tokens = random_matrix(24, 16, seed=10_000 + seed).data
            lat = tokens @ layer.groups[0].a.data
            lat_rot = tokens @ rot.layer.groups[0].a.data
            params = QuantParams(2)
            mse = np.mean((lat - dequantize(quantize(Matrix(lat), params)).data) ** 2)
            mse_rot = np.mean((lat_rot - dequantize(quantize(Matrix(lat_rot), params)).data) ** 2)
            if mse_rot < mse:
                wins += 1
        assert wins >= 0.95 * trials


class TestPacking:
    @pytest.mark.parametrize("bits", [2, 3, 4, 8])
    def test_round_trip(self, bits):
        rng_vals = random_matrix(7, 11, seed=bits).data
        codes = ((rng_vals + 1.0) * 0.5 * ((1 << bits) - 1)).astype(np.uint8)
        packed = pack_codes(codes, bits)
        assert len(packed) == -(-codes.size * bits // 8)
        back = unpack_codes(packed, codes.size, bits)
        assert np.array_equal(back, codes.reshape(-1))

    def test_three_bit_density(self):
        codes = np.arange(8, dtype=np.uint8).reshape(1, 8)
        packed = pack_codes(codes, 3)
        assert len(packed) == 3  # 8 codes in exactly 3 bytes

    def test_little_endian_within_byte(self):
        packed = pack_codes(np.array([[1, 2]], dtype=np.uint8), 4)
        assert packed == bytes([0x21])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            pack_codes(np.array([[4]], dtype=np.uint8), 2)

    def test_short_payload_rejected(self):
        with pytest.raises(ValidationError):
            unpack_codes(b"\x00", 9, 3)
