import math

import numpy as np
import pytest

from palu.core import Matrix, random_matrix
from palu.decompose import (
    CalibrationSet,
    Granularity,
    decompose,
    frobenius_error,
    reconstruct,
)
from palu.errors import ValidationError

from oracles import best_rank_approx, truncation_error


def make_weight(d, n_heads, head_dim, seed, spectrum=None):
    return random_matrix(d, n_heads * head_dim, seed=seed, spectrum=spectrum)


class TestGranularity:
    def test_group_size_must_divide(self):
        with pytest.raises(ValidationError):
            Granularity.group_head(3).validate_for(8)

    def test_joint_requires_all_heads(self):
        with pytest.raises(ValidationError):
            Granularity(kind="joint_head", group_size=2).validate_for(4)

    def test_multi_head_is_group_size_one(self):
        with pytest.raises(ValidationError):
            Granularity(kind="multi_head", group_size=2)

    def test_n_groups(self):
        assert Granularity.multi_head().n_groups(8) == 8
        assert Granularity.group_head(2).n_groups(8) == 4
        assert Granularity.joint_head(8).n_groups(8) == 1


class TestDecompose:
    def test_full_rank_reproduces_slices(self):
        w = make_weight(8, 4, 2, seed=10)
        for gran in [Granularity.multi_head(), Granularity.group_head(2), Granularity.joint_head(4)]:
            width = 2 * gran.group_size
            layer = decompose(w, 4, 2, gran, min(8, width))
            assert frobenius_error(layer, w) < 1e-8 * max(np.linalg.norm(w.data), 1.0)

    def test_spectrum_error_matches_eckart_young(self):
        w = make_weight(8, 1, 8, seed=3, spectrum=0.5)
        layer = decompose(w, 1, 8, Granularity.multi_head(), 2)
        want = math.sqrt(sum(0.5 ** (2 * (i - 1)) for i in range(3, 9)))
        assert abs(frobenius_error(layer, w) - want) < 1e-8

    def test_error_matches_svd_oracle(self):
        w = make_weight(16, 2, 8, seed=8)
        layer = decompose(w, 2, 8, Granularity.multi_head(), 4)
        want = math.sqrt(
            sum(truncation_error(w.data[:, 8 * j : 8 * (j + 1)], 4) ** 2 for j in range(2))
        )
        assert abs(frobenius_error(layer, w) - want) < 1e-9

    def test_rank_out_of_range(self):
        w = make_weight(8, 4, 2, seed=1)
        with pytest.raises(ValidationError):
            decompose(w, 4, 2, Granularity.multi_head(), 0)
        with pytest.raises(ValidationError):
            decompose(w, 4, 2, Granularity.multi_head(), 3)  # min(8, 2) = 2

    def test_per_group_ranks(self):
        w = make_weight(8, 4, 2, seed=2)
        layer = decompose(w, 4, 2, Granularity.group_head(2), [1, 3])
        assert layer.ranks == (1, 3)

    def test_deterministic(self):
        w = make_weight(8, 2, 4, seed=5)
        l1 = decompose(w, 2, 4, Granularity.multi_head(), 2)
        l2 = decompose(w, 2, 4, Granularity.multi_head(), 2)
        for g1, g2 in zip(l1.groups, l2.groups):
            assert np.array_equal(g1.a.data, g2.a.data)
            assert np.array_equal(g1.b.data, g2.b.data)

    def test_monotone_in_rank(self):
        w = make_weight(12, 2, 6, seed=6)
        errs = [
            frobenius_error(decompose(w, 2, 6, Granularity.multi_head(), r), w)
            for r in range(1, 7)
        ]
        for lo, hi in zip(errs[1:], errs[:-1]):
            assert lo <= hi + 1e-12

    def test_random_search_cannot_beat_svd(self):
        w = make_weight(8, 1, 8, seed=14)
        rank = 3
        layer = decompose(w, 1, 8, Granularity.multi_head(), rank)
        best = frobenius_error(layer, w)
        rng_best = math.inf
        for trial in range(100):
            a = random_matrix(8, rank, seed=1000 + trial).data
            b = random_matrix(rank, 8, seed=2000 + trial).data
            rng_best = min(rng_best, float(np.linalg.norm(w.data - a @ b)))
        assert best <= rng_best + 1e-6


class TestConcurrency:
    def test_parallel_decomposition_is_identical(self):
        from concurrent.futures import ThreadPoolExecutor

        w = make_weight(16, 4, 4, seed=99)
        serial = decompose(w, 4, 4, Granularity.group_head(2), 5)
        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(
                pool.map(lambda _: decompose(w, 4, 4, Granularity.group_head(2), 5), range(8))
            )
        for layer in results:
            for g_ref, g_got in zip(serial.groups, layer.groups):
                assert np.array_equal(g_ref.a.data, g_got.a.data)
                assert np.array_equal(g_ref.b.data, g_got.b.data)


class TestWhitened:
    def test_requires_calibration(self):
        w = make_weight(8, 1, 8, seed=4)
        with pytest.raises(ValidationError):
            decompose(w, 1, 8, Granularity.multi_head(), 4, mode="whitened")

    def test_requires_enough_samples(self):
        w = make_weight(8, 1, 8, seed=4)
        calib = CalibrationSet(random_matrix(4, 8, seed=9))
        with pytest.raises(ValidationError):
            decompose(w, 1, 8, Granularity.multi_head(), 4, mode="whitened", calib=calib)

    def test_never_worse_in_activation_norm(self):
        for seed in range(6):
            w = make_weight(8, 1, 8, seed=seed)
            x = random_matrix(24, 8, seed=seed + 50)
            calib = CalibrationSet(x)
            plain = decompose(w, 1, 8, Granularity.multi_head(), 4)
            white = decompose(w, 1, 8, Granularity.multi_head(), 4, mode="whitened", calib=calib)
            err_plain = np.linalg.norm(x.data @ (w.data - reconstruct(plain).data))
            err_white = np.linalg.norm(x.data @ (w.data - reconstruct(white).data))
            assert err_white <= err_plain + 1e-9

    def test_full_rank_exact(self):
        w = make_weight(6, 1, 6, seed=11)
        calib = CalibrationSet(random_matrix(18, 6, seed=12))
        layer = decompose(w, 1, 6, Granularity.multi_head(), 6, mode="whitened", calib=calib)
        assert frobenius_error(layer, w) < 1e-8

    def test_singular_gram_matrix(self):
        from palu.errors import NumericalError

        w = make_weight(6, 1, 6, seed=13)
        calib = CalibrationSet(Matrix(np.zeros((12, 6))))  # Gram matrix is zero
        with pytest.raises(NumericalError, match="jitter"):
            decompose(w, 1, 6, Granularity.multi_head(), 3, mode="whitened", calib=calib)


class TestReconstruct:
    def test_full_rank_round_trip(self):
        w = make_weight(8, 4, 2, seed=20)
        layer = decompose(w, 4, 2, Granularity.joint_head(4), 8)
        assert np.max(np.abs(reconstruct(layer).data - w.data)) < 1e-8

    def test_rank_one_slices_exact(self):
        # build a weight whose every head slice is rank one
        pieces = []
        for j in range(4):
            u = random_matrix(8, 1, seed=30 + j).data
            v = random_matrix(1, 2, seed=40 + j).data
            pieces.append(u @ v)
        w = Matrix(np.concatenate(pieces, axis=1))
        layer = decompose(w, 4, 2, Granularity.multi_head(), 1)
        assert np.max(np.abs(reconstruct(layer).data - w.data)) < 1e-8

    def test_matches_per_slice_oracle(self):
        w = make_weight(8, 4, 2, seed=21)
        layer = decompose(w, 4, 2, Granularity.group_head(2), 3)
        got = reconstruct(layer).data
        for j in range(2):
            sl = w.data[:, 4 * j : 4 * (j + 1)]
            want = best_rank_approx(sl, 3)
            assert np.max(np.abs(got[:, 4 * j : 4 * (j + 1)] - want)) < 1e-8


class TestGranularityOrdering:
    def test_joint_beats_group_beats_multi_on_shared_component(self):
        # slices share a common component C, so wider groups capture it better
        wins = 0
        trials = 60
        for seed in range(trials):
            d, n, dh = 16, 4, 4
            c = random_matrix(d, dh, seed=seed).data
            pieces = [
                c + 0.3 * random_matrix(d, dh, seed=1000 * (seed + 1) + j).data
                for j in range(n)
            ]
            w = Matrix(np.concatenate(pieces, axis=1))
            r = 2
            err_m = frobenius_error(decompose(w, n, dh, Granularity.multi_head(), r), w)
            err_g = frobenius_error(decompose(w, n, dh, Granularity.group_head(2), 2 * r), w)
            err_j = frobenius_error(decompose(w, n, dh, Granularity.joint_head(n), 4 * r), w)
            if err_j <= err_g + 1e-9 and err_g <= err_m + 1e-9:
                wins += 1
        assert wins >= 0.95 * trials
