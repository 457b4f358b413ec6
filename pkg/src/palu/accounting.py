"""Analytic memory and compute accounting for latent KV caches.

Sizes are exact rational arithmetic converted to float at the edge, so
printed tables are reproducible bit for bit. "GB" follows the binary
convention (2^30 bytes) with 128K = 131072 tokens; that is the only
reading under which a 2 * 32 * 4096 * 131072 * 2-byte baseline prints as
exactly 64.0.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

from .decompose import Granularity
from .errors import ValidationError
from .ranks import RankPlan
from .tables import render_csv, render_text

GIB = 1 << 30
TABLE2_TOKENS = 128 * 1024


@dataclass(frozen=True)
class ModelPreset:
    name: str
    layers: int
    n_heads: int
    head_dim: int
    d_model: int
    kv_dtype_bits: int = 16

    def __post_init__(self):
        if min(self.layers, self.n_heads, self.head_dim, self.d_model, self.kv_dtype_bits) <= 0:
            raise ValidationError("preset dimensions must be positive")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValidationError(
                f"d_model {self.d_model} != n_heads*head_dim {self.n_heads * self.head_dim}"
            )


LLAMA2_7B = ModelPreset("llama2-7b", layers=32, n_heads=32, head_dim=128, d_model=4096)
PRESETS = {LLAMA2_7B.name: LLAMA2_7B}


@dataclass(frozen=True)
class CostReport:
    preset: str
    tokens: int
    bits: int
    kv_bytes_baseline: float
    kv_bytes_compressed: float
    compression_rate: float
    metadata_bytes: float
    kv_bytes_with_metadata: float
    compression_rate_with_metadata: float

    @property
    def kv_gb_baseline(self) -> float:
        return self.kv_bytes_baseline / GIB

    @property
    def kv_gb_compressed(self) -> float:
        return self.kv_bytes_compressed / GIB


def fmt_fixed(x: float, decimals: int) -> str:
    """Half-up decimal formatting of the exact binary value of ``x``."""
    quantum = Decimal(1).scaleb(-decimals)
    return str(Decimal(x).quantize(quantum, rounding=ROUND_HALF_UP))


def fmt_pct(rate: float, decimals: int = 2) -> str:
    quantum = Decimal(1).scaleb(-decimals)
    return str(Decimal(rate).scaleb(2).quantize(quantum, rounding=ROUND_HALF_UP))


def _keep_fraction(plan) -> Fraction:
    """Latent width kept per token, as an exact fraction of full width.

    ``plan`` is a RankPlan, a uniform compression rate in (0, 1] given as
    a float (read with decimal semantics, so 0.3 means exactly 3/10), or
    None for no width reduction.
    """
    if plan is None:
        return Fraction(1)
    if isinstance(plan, RankPlan):
        return Fraction(plan.total_rank, plan.total_width)
    rate = Fraction(str(plan))
    if not (0 < rate <= 1):
        raise ValidationError(f"uniform compression rate must lie in (0, 1], got {plan}")
    return 1 - rate


def _plan_groups(plan, preset: ModelPreset, metadata_groups: int | None) -> int:
    if metadata_groups is not None:
        return metadata_groups
    if isinstance(plan, RankPlan):
        return len(plan.entries)
    return 2 * preset.layers


def kv_cache_bytes(
    preset: ModelPreset,
    tokens: int,
    plan=None,
    bits: int | None = None,
    include_metadata: bool = False,
    metadata_groups: int | None = None,
) -> CostReport:
    """Baseline and compressed cache sizes at a context length.

    Baseline bytes = 2 * layers * n_heads * head_dim * tokens * dtype/8.
    Compressed bytes scale that by kept latent width and quantized bit
    width. Metadata (one 4-byte scale plus 4-byte zero-point per token per
    head group) is tracked separately and excluded from the headline rate
    unless asked for.
    """
    if tokens < 0:
        raise ValidationError(f"tokens must be >= 0, got {tokens}")
    bits = preset.kv_dtype_bits if bits is None else bits
    keep = _keep_fraction(plan)

    baseline = Fraction(2 * preset.layers * preset.d_model * tokens * preset.kv_dtype_bits, 8)
    compressed = baseline * keep * Fraction(bits, preset.kv_dtype_bits)
    rate = 1 - compressed / baseline if baseline else Fraction(0)

    groups = _plan_groups(plan, preset, metadata_groups)
    metadata = Fraction(8 * tokens * groups) if include_metadata else Fraction(0)
    with_meta = compressed + metadata
    rate_meta = 1 - with_meta / baseline if baseline else Fraction(0)

    return CostReport(
        preset=preset.name,
        tokens=tokens,
        bits=bits,
        kv_bytes_baseline=float(baseline),
        kv_bytes_compressed=float(compressed),
        compression_rate=float(rate),
        metadata_bytes=float(metadata),
        kv_bytes_with_metadata=float(with_meta),
        compression_rate_with_metadata=float(rate_meta),
    )


def weight_ratio(m: float, n: float, r: float) -> float:
    """Factor-pair storage relative to the dense matrix: (m*r + r*n)/(m*n)."""
    if m <= 0 or n <= 0:
        raise ValidationError("matrix dimensions must be positive")
    if r < 0:
        raise ValidationError("rank must be non-negative")
    return (m * r + r * n) / (m * n)


@dataclass(frozen=True)
class ReconMacs:
    """Per-step key/value reconstruction MAC counts for one projection."""

    per_head: tuple[int, ...]  # one entry per group: r_g * head_dim
    per_group: tuple[int, ...]  # r_g * head_dim * group_size
    total: int

    @property
    def per_head_max(self) -> int:
        return max(self.per_head)


def recon_macs(granularity: Granularity, ranks, head_dim: int, n_heads: int) -> ReconMacs:
    """MACs to rebuild key or value states from latents for one token.

    Rebuilding one head costs r_g * head_dim because the whole group
    latent participates; a group of s heads costs s times that. At equal
    total latent width, joint decomposition therefore pays n_heads times
    the per-head cost of per-head decomposition.
    """
    n_groups = granularity.n_groups(n_heads)
    if isinstance(ranks, int):
        rank_list = [ranks] * n_groups
    else:
        rank_list = [int(r) for r in ranks]
    if len(rank_list) != n_groups:
        raise ValidationError(f"expected {n_groups} ranks, got {len(rank_list)}")
    s = granularity.group_size
    per_head = tuple(r * head_dim for r in rank_list)
    per_group = tuple(r * head_dim * s for r in rank_list)
    return ReconMacs(per_head=per_head, per_group=per_group, total=sum(per_group))


@dataclass(frozen=True)
class MemoryBreakdown:
    tokens: int
    bits: int
    rope: bool
    kv_bytes_baseline: float
    kv_bytes_compressed: float
    weight_bytes_baseline: float
    weight_bytes_palu: float
    fused_weight_bytes: float
    kv_reduction: float | None
    weight_ratio_overall: float
    total_reduction: float

    def render(self) -> str:
        rows = [
            ["attention weights", fmt_fixed(self.weight_bytes_baseline / GIB, 3), fmt_fixed(self.weight_bytes_palu / GIB, 3)],
            ["kv cache", fmt_fixed(self.kv_bytes_baseline / GIB, 3), fmt_fixed(self.kv_bytes_compressed / GIB, 3)],
            [
                "total",
                fmt_fixed((self.weight_bytes_baseline + self.kv_bytes_baseline) / GIB, 3),
                fmt_fixed((self.weight_bytes_palu + self.kv_bytes_compressed) / GIB, 3),
            ],
        ]
        out = render_text(["component", "baseline GB", "palu GB"], rows)
        kv_red = "n/a" if self.kv_reduction is None else f"{self.kv_reduction:.2f}x"
        out += f"kv-only reduction: {kv_red}\n"
        out += f"weight ratio: {self.weight_ratio_overall:.4f}\n"
        out += f"total reduction: {self.total_reduction:.2f}x\n"
        return out


def total_memory_breakdown(
    preset: ModelPreset,
    tokens: int,
    plan,
    bits: int | None = None,
    rope: bool = True,
    group_size: int = 4,
) -> MemoryBreakdown:
    """Attention weights plus KV cache, baseline versus decomposed.

    Weights are modeled at the preset dtype and cover the four attention
    projections only. The decomposed side stores per-group A factors for
    keys and values, the fused value/output matrix, and either the fused
    query matrix (no rotary) or the original query projection plus the
    key reconstruction factors (rotary). Uniform-rate plans assume
    ``group_size`` heads per group; RankPlans carry their own widths.
    """
    bits = preset.kv_dtype_bits if bits is None else bits
    kv = kv_cache_bytes(preset, tokens, plan, bits)
    d = Fraction(preset.d_model)
    dh = preset.head_dim
    dtype_bytes = Fraction(preset.kv_dtype_bits, 8)

    if isinstance(plan, RankPlan):
        entries = [(Fraction(e.allocated_rank), Fraction(e.full_width)) for e in plan.entries]
    else:
        keep = _keep_fraction(plan)
        if preset.n_heads % group_size:
            raise ValidationError(f"group_size {group_size} does not divide n_heads {preset.n_heads}")
        width = Fraction(dh * group_size)
        n_groups = preset.n_heads // group_size
        rank = keep * width
        entries = [(rank, width)] * (2 * preset.layers * n_groups)

    half = len(entries) // 2
    k_entries, v_entries = entries[:half], entries[half:]

    a_params = sum(d * r for r, _ in entries)
    bk_params = sum(r * w for r, w in k_entries)
    wo_fused_params = sum(d * r * (w / dh) for r, w in v_entries)
    if rope:
        wq_params = Fraction(preset.layers) * d * d
        fused_params = wo_fused_params
        palu_params = wq_params + a_params + bk_params + fused_params
    else:
        wq_fused_params = sum(d * r * (w / dh) for r, w in k_entries)
        fused_params = wo_fused_params + wq_fused_params
        palu_params = a_params + fused_params

    weight_base = Fraction(preset.layers * 4) * d * d * dtype_bytes
    weight_palu = palu_params * dtype_bytes
    fused_bytes = fused_params * dtype_bytes

    kv_base = Fraction(kv.kv_bytes_baseline)
    kv_comp = Fraction(kv.kv_bytes_compressed)
    kv_reduction = float(kv_base / kv_comp) if kv_comp else None
    total_reduction = float((weight_base + kv_base) / (weight_palu + kv_comp))

    return MemoryBreakdown(
        tokens=tokens,
        bits=bits,
        rope=rope,
        kv_bytes_baseline=float(kv_base),
        kv_bytes_compressed=float(kv_comp),
        weight_bytes_baseline=float(weight_base),
        weight_bytes_palu=float(weight_palu),
        fused_weight_bytes=float(fused_bytes),
        kv_reduction=kv_reduction,
        weight_ratio_overall=float(weight_palu / weight_base),
        total_reduction=total_reduction,
    )


# One row per baseline/compressed configuration of the published cache-size
# table at 128K context: (label, bits, uniform compression rate or None,
# reference GB string, reference rate string or None).
TABLE2_ROWS = (
    ("Baseline", 16, None, "64.0", None),
    ("Palu-30%", 16, 0.3, "44.8", "30"),
    ("Palu-50%", 16, 0.5, "32.0", "50"),
    ("Palu-30%", 3, 0.3, "8.4", "86.87"),
    ("Palu-50%", 3, 0.5, "6.0", "90.63"),
    ("Palu-30%", 2, 0.3, "5.6", "91.25"),
    ("Palu-50%", 2, 0.5, "4.0", "93.75"),
)


@dataclass(frozen=True)
class Table2Check:
    label: str
    bits: int
    gb: float
    gb_str: str
    gb_ref: str
    rate_pct: float | None
    rate_str: str
    rate_ref: str
    ok: bool


def _within_printed(computed: float, printed: str) -> bool:
    """True when ``printed`` is a correct rounding of ``computed``.

    Agreement is within half a unit of the last printed digit, which
    deliberately accepts either direction on exact ties.
    """
    ref = Decimal(printed)
    quantum = ref.as_tuple().exponent
    half = Decimal(5).scaleb(quantum - 1)
    return abs(Decimal(computed) - ref) <= half + Decimal("1e-12")


def check_table2(preset: ModelPreset = LLAMA2_7B) -> list[Table2Check]:
    checks = []
    for label, bits, rate, gb_ref, rate_ref in TABLE2_ROWS:
        rep = kv_cache_bytes(preset, TABLE2_TOKENS, rate, bits)
        gb = rep.kv_gb_compressed
        ok = _within_printed(gb, gb_ref)
        if rate_ref is None:
            rate_pct = None
            rate_str = "-"
        else:
            rate_pct = rep.compression_rate * 100.0
            rate_str = fmt_pct(rep.compression_rate)
            ok = ok and _within_printed(rate_pct, rate_ref)
        checks.append(
            Table2Check(
                label=label,
                bits=bits,
                gb=gb,
                gb_str=fmt_fixed(gb, 1),
                gb_ref=gb_ref,
                rate_pct=rate_pct,
                rate_str=rate_str,
                rate_ref="-" if rate_ref is None else rate_ref,
                ok=ok,
            )
        )
    return checks


def render_table2(checks: list[Table2Check] | None = None, csv: bool = False) -> str:
    checks = checks if checks is not None else check_table2()
    headers = ["Method", "Bit", "KV-Cache Size (GB)", "Comp. Rate (%)", "Ref GB", "Ref Rate (%)", "Match"]
    rows = [
        [c.label, str(c.bits), c.gb_str, c.rate_str, c.gb_ref, c.rate_ref, "yes" if c.ok else "NO"]
        for c in checks
    ]
    if csv:
        return render_csv(headers, rows)
    title = "KV-cache size at 128K context, llama2-7b\n"
    return title + render_text(headers, rows)
