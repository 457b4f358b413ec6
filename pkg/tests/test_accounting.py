import numpy as np
import pytest

from palu.accounting import (
    LLAMA2_7B,
    ModelPreset,
    check_table2,
    fmt_fixed,
    fmt_pct,
    kv_cache_bytes,
    recon_macs,
    render_table2,
    total_memory_breakdown,
    weight_ratio,
)
from palu.decompose import Granularity
from palu.errors import ValidationError
from palu.ranks import FisherScore, allocate


class TestKvCacheBytes:
    def test_baseline_64_gb(self):
        rep = kv_cache_bytes(LLAMA2_7B, 128 * 1024)
        assert rep.kv_gb_baseline == 64.0
        assert rep.kv_gb_compressed == 64.0

    def test_palu30_16bit(self):
        rep = kv_cache_bytes(LLAMA2_7B, 128 * 1024, 0.3, 16)
        assert fmt_fixed(rep.kv_gb_compressed, 1) == "44.8"
        assert rep.compression_rate == 0.3

    def test_palu30_3bit(self):
        rep = kv_cache_bytes(LLAMA2_7B, 128 * 1024, 0.3, 3)
        assert fmt_fixed(rep.kv_gb_compressed, 1) == "8.4"
        assert abs(rep.compression_rate - 0.86875) < 1e-12

    def test_palu50_2bit(self):
        rep = kv_cache_bytes(LLAMA2_7B, 128 * 1024, 0.5, 2)
        assert rep.kv_gb_compressed == 4.0
        assert rep.compression_rate == 0.9375

    def test_rate_equals_plan_rate_at_16_bits(self):
        for rate in (0.1, 0.25, 0.3, 0.5, 0.7):
            rep = kv_cache_bytes(LLAMA2_7B, 4096, rate, 16)
            assert rep.compression_rate == rate

    def test_rank_plan_input(self):
        scores = [FisherScore(f"l{i}.{t}", 1.0) for i in range(2) for t in ("k", "v")]
        plan = allocate(scores, [16, 16, 16, 16], 64, 0.5)
        preset = ModelPreset("tiny", layers=2, n_heads=4, head_dim=4, d_model=16)
        rep = kv_cache_bytes(preset, 100, plan, 16)
        assert rep.compression_rate == 0.5
        assert rep.kv_bytes_compressed == 0.5 * rep.kv_bytes_baseline

    def test_metadata_accounting(self):
        rep = kv_cache_bytes(LLAMA2_7B, 1000, 0.5, 2, include_metadata=True)
        assert rep.metadata_bytes == 8 * 1000 * 2 * 32
        assert rep.kv_bytes_with_metadata == rep.kv_bytes_compressed + rep.metadata_bytes
        rep_off = kv_cache_bytes(LLAMA2_7B, 1000, 0.5, 2)
        assert rep_off.metadata_bytes == 0.0

    def test_invariant_rate_definition(self):
        rep = kv_cache_bytes(LLAMA2_7B, 8192, 0.37, 3)
        want = 1.0 - rep.kv_bytes_compressed / rep.kv_bytes_baseline
        assert abs(rep.compression_rate - want) < 1e-15

    def test_byte_counts_integral_for_rank_plans(self):
        scores = [FisherScore(f"l0.{t}", 1.0) for t in ("k", "v")]
        plan = allocate(scores, [16, 16], 64, 0.5)
        preset = ModelPreset("tiny", layers=1, n_heads=4, head_dim=4, d_model=16)
        rep = kv_cache_bytes(preset, 33, plan, 3)
        assert rep.kv_bytes_compressed == int(rep.kv_bytes_compressed)


class TestTable2:
    def test_all_rows_match(self):
        checks = check_table2()
        assert len(checks) == 7
        for c in checks:
            assert c.ok, f"{c.label} {c.bits}: gb={c.gb} ref={c.gb_ref} rate={c.rate_pct} ref={c.rate_ref}"

    def test_printed_sizes(self):
        got = [c.gb_str for c in check_table2()]
        assert got == ["64.0", "44.8", "32.0", "8.4", "6.0", "5.6", "4.0"]

    def test_render_is_deterministic(self):
        assert render_table2() == render_table2()
        assert "Match" in render_table2()


class TestWeightRatio:
    def test_square_at_70_percent(self):
        n = 4096
        assert weight_ratio(n, n, 0.7 * n) == 1.4

    def test_grouped_target(self):
        assert weight_ratio(4096, 512, 0.7 * 512) == 0.7875

    def test_full_rank_square_doubles(self):
        assert weight_ratio(64, 64, 64) == 2.0

    def test_symmetry_and_linearity(self):
        assert weight_ratio(128, 32, 10) == weight_ratio(32, 128, 10)
        lo, hi = weight_ratio(64, 16, 2), weight_ratio(64, 16, 4)
        assert abs(hi - 2 * lo) < 1e-15


class TestReconMacs:
    def test_joint_vs_multi_is_n_times(self):
        for n in (4, 8, 32):
            dh, r = 8, 4
            multi = recon_macs(Granularity.multi_head(), r, dh, n)
            joint = recon_macs(Granularity.joint_head(n), r * n, dh, n)
            assert joint.per_head_max == n * multi.per_head_max
            assert joint.total == n * multi.total

    def test_group_is_s_times(self):
        n, dh, r = 4, 8, 4
        multi = recon_macs(Granularity.multi_head(), r, dh, n)
        group = recon_macs(Granularity.group_head(2), 2 * r, dh, n)
        assert group.per_head_max == 2 * multi.per_head_max

    def test_desk_example(self):
        multi = recon_macs(Granularity.multi_head(), 4, 8, 4)
        joint = recon_macs(Granularity.joint_head(4), 16, 8, 4)
        assert multi.per_head == (32, 32, 32, 32)
        assert joint.per_head == (128,)

    def test_full_rank_multi_head(self):
        dh = 8
        macs = recon_macs(Granularity.multi_head(), dh, dh, 4)
        assert macs.per_head == (dh * dh,) * 4

    def test_latent_load_invariant(self):
        # equal total latent width means equal per-token latent loads
        n, dh = 8, 4
        for gran, rank in [
            (Granularity.multi_head(), 2),
            (Granularity.group_head(4), 8),
            (Granularity.joint_head(n), 16),
        ]:
            macs = recon_macs(gran, rank, dh, n)
            latent_width = sum(macs.per_group) // dh // gran.group_size
            assert latent_width == 16


class TestMemoryBreakdown:
    def test_zero_tokens_weight_only(self):
        mb = total_memory_breakdown(LLAMA2_7B, 0, 0.5, 16)
        assert mb.kv_bytes_compressed == 0.0
        assert mb.kv_reduction is None
        assert abs(mb.total_reduction - mb.weight_bytes_baseline / mb.weight_bytes_palu) < 1e-12

    def test_kv_only_reduction_16bit(self):
        mb = total_memory_breakdown(LLAMA2_7B, 64 * 1024, 0.5, 16)
        assert mb.kv_reduction == 2.0

    def test_kv_only_reduction_2bit(self):
        mb = total_memory_breakdown(LLAMA2_7B, 64 * 1024, 0.5, 2)
        assert mb.kv_reduction == 16.0
        assert mb.total_reduction > 1.0

    def test_rope_keeps_reconstruction_factors(self):
        on = total_memory_breakdown(LLAMA2_7B, 1024, 0.5, 16, rope=True)
        off = total_memory_breakdown(LLAMA2_7B, 1024, 0.5, 16, rope=False)
        assert on.weight_bytes_palu != off.weight_bytes_palu

    def test_render(self):
        text = total_memory_breakdown(LLAMA2_7B, 64 * 1024, 0.5, 2).render()
        assert "kv-only reduction: 16.00x" in text


class TestFormatting:
    def test_half_up_on_decimal_strings(self):
        assert fmt_fixed(8.449999, 1) == "8.4"
        assert fmt_fixed(8.451, 1) == "8.5"
        # 0.90625 is exactly representable: a true tie, rounded half up
        assert fmt_pct(0.90625) == "90.63"

    def test_validation(self):
        with pytest.raises(ValidationError):
            kv_cache_bytes(LLAMA2_7B, -1)
        with pytest.raises(ValidationError):
            weight_ratio(0, 4, 1)
        with pytest.raises(ValidationError):
            kv_cache_bytes(LLAMA2_7B, 10, 1.5, 16)
