"""Multi-head attention decoding: exact reference path and latent-cache paths.

The reference path implements standard per-head attention over cached
keys/values. The latent paths never materialize full keys or values in the
cache: each layer input is down-projected per head group (h = x @ A) and
only those latent rows are stored.

Without rotary embedding both reconstruction matrices disappear offline:
B_k^T folds into the query projection (scores = x (W_q B_k^T) H_k^T) and
B_v folds into the output projection (out = p H_v (B_v W_o)). With rotary
embedding the key side cannot fuse, so keys are rebuilt tile by tile from
the latent cache and rotated at their absolute positions before scoring;
the value side fuses either way.

Caches may store latents quantized per token. All paths are pure given
their inputs except that decode steps append to the session's own cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Matrix
from .decompose import DecomposedLayer
from .errors import ValidationError
from .quant import QuantParams, quantize_rows

FP_BITS = 16


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    head_dim: int
    layers: int
    rope: bool = False
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ValidationError(
                f"d_model {self.d_model} != n_heads*head_dim {self.n_heads * self.head_dim}"
            )
        if self.layers < 1:
            raise ValidationError(f"layers must be >= 1, got {self.layers}")
        if self.rope:
            if self.rope_base <= 1.0:
                raise ValidationError(f"rope base must exceed 1, got {self.rope_base}")
            if self.head_dim % 2 != 0:
                raise ValidationError("rotary embedding requires an even head_dim")


@dataclass(frozen=True)
class LayerWeights:
    """One layer's projections, all d x d. wq/wk/wv use column blocks per
    head; wo uses row blocks per head."""

    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix


@dataclass(frozen=True)
class ModelWeights:
    layers: tuple[LayerWeights, ...]

    def validate_for(self, config: AttentionConfig) -> None:
        if len(self.layers) != config.layers:
            raise ValidationError(
                f"{len(self.layers)} weight layers for a {config.layers}-layer config"
            )
        d = config.d_model
        for i, lw in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo"):
                m = getattr(lw, name)
                if m.shape != (d, d):
                    raise ValidationError(f"layer {i} {name} has shape {m.shape}, expected ({d}, {d})")


@dataclass(frozen=True)
class LayerKV:
    """Decomposed key and value projections for one layer."""

    key: DecomposedLayer
    value: DecomposedLayer


def rope_apply(v, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotate a head vector by its position: dim i pairs with i + d_h/2."""
    vec = np.asarray(v, dtype=np.float64)
    if vec.ndim != 1:
        raise ValidationError("rope_apply expects a 1-D vector")
    if vec.shape[0] % 2 != 0:
        raise ValidationError(f"rope_apply requires even length, got {vec.shape[0]}")
    if position < 0:
        raise ValidationError("position must be non-negative")
    return _rope_rows(vec[None, :], np.array([position], dtype=np.float64), base)[0]


def _rope_rows(rows: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    d = rows.shape[1]
    half = d // 2
    idx = np.arange(half, dtype=np.float64)
    angles = positions[:, None] * base ** (-2.0 * idx / d)
    cos, sin = np.cos(angles), np.sin(angles)
    lo, hi = rows[:, :half], rows[:, half:]
    return np.concatenate([lo * cos - hi * sin, lo * sin + hi * cos], axis=1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


@dataclass
class ReferenceLayerCache:
    keys: np.ndarray  # (t, d), rotary already applied when enabled
    values: np.ndarray  # (t, d)


@dataclass
class DecodeResult:
    outputs: np.ndarray  # (T, d)
    cache: list[ReferenceLayerCache]


def reference_decode(weights: ModelWeights, config: AttentionConfig, token_stream) -> DecodeResult:
    """Standard cached multi-head attention over a stream of d-dim tokens."""
    weights.validate_for(config)
    tokens = np.asarray(token_stream, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != config.d_model:
        raise ValidationError(f"token stream must be (T, {config.d_model})")
    d, n, dh = config.d_model, config.n_heads, config.head_dim
    caches = [
        ReferenceLayerCache(np.zeros((0, d)), np.zeros((0, d))) for _ in range(config.layers)
    ]
    outputs = np.zeros_like(tokens)
    for t in range(tokens.shape[0]):
        x = tokens[t]
        for li, lw in enumerate(weights.layers):
            k_row = x @ lw.wk.data
            v_row = x @ lw.wv.data
            if config.rope:
                pos = np.array([t], dtype=np.float64)
                k_row = np.concatenate(
                    [_rope_rows(k_row[None, i * dh : (i + 1) * dh], pos, config.rope_base)[0] for i in range(n)]
                )
            cache = caches[li]
            cache.keys = np.vstack([cache.keys, k_row])
            cache.values = np.vstack([cache.values, v_row])
            out = np.zeros(d)
            for h in range(n):
                sl = slice(h * dh, (h + 1) * dh)
                q = x @ lw.wq.data[:, sl]
                if config.rope:
                    q = _rope_rows(q[None, :], np.array([t], dtype=np.float64), config.rope_base)[0]
                probs = _softmax(cache.keys[:, sl] @ q / math.sqrt(dh))
                attn = probs @ cache.values[:, sl]
                out += attn @ lw.wo.data[sl, :]
            x = out
        outputs[t] = x
    return DecodeResult(outputs=outputs, cache=caches)


def _head_offsets(dec: DecomposedLayer, n_heads: int) -> tuple[int, ...]:
    s = dec.granularity.group_size
    offs = [0]
    for i in range(n_heads):
        offs.append(offs[-1] + dec.groups[i // s].rank)
    return tuple(offs)


@dataclass(frozen=True)
class LayerFused:
    wq_fused: Matrix | None  # d x sum_i r_k(group(i)); absent on the rotary path
    wo_fused: Matrix  # (sum_i r_v(group(i))) x d
    q_offsets: tuple[int, ...]
    o_offsets: tuple[int, ...]
    key_ranks: tuple[int, ...]
    value_ranks: tuple[int, ...]


@dataclass(frozen=True)
class FusedWeights:
    layers: tuple[LayerFused, ...]


def build_fused(weights: ModelWeights, decomposed: list[LayerKV], config: AttentionConfig) -> FusedWeights:
    """Absorb reconstruction factors offline.

    Per head i of key group g: wq block = W_q[:, i] @ B_k[g][:, i-in-g]^T.
    Per head i of value group g: wo block = B_v[g][:, i-in-g] @ W_o[rows i].
    The key-side fusion only exists when rotary embedding is off.
    """
    weights.validate_for(config)
    if len(decomposed) != config.layers:
        raise ValidationError(f"{len(decomposed)} decomposed layers for {config.layers}-layer config")
    d, n, dh = config.d_model, config.n_heads, config.head_dim
    fused_layers = []
    for li, (lw, kv) in enumerate(zip(weights.layers, decomposed)):
        for dec, tag in ((kv.key, "key"), (kv.value, "value")):
            if dec.d_model != d or dec.n_heads != n or dec.head_dim != dh:
                raise ValidationError(f"layer {li} {tag} decomposition does not match the config")
        s_k = kv.key.granularity.group_size
        s_v = kv.value.granularity.group_size
        q_blocks = []
        o_blocks = []
        for i in range(n):
            gk, pk = divmod(i, s_k)
            gv, pv = divmod(i, s_v)
            bk = kv.key.groups[gk].b.data[:, pk * dh : (pk + 1) * dh]
            bv = kv.value.groups[gv].b.data[:, pv * dh : (pv + 1) * dh]
            if not config.rope:
                q_blocks.append(lw.wq.data[:, i * dh : (i + 1) * dh] @ bk.T)
            o_blocks.append(bv @ lw.wo.data[i * dh : (i + 1) * dh, :])
        fused_layers.append(
            LayerFused(
                wq_fused=None if config.rope else Matrix.wrap(np.concatenate(q_blocks, axis=1)),
                wo_fused=Matrix.wrap(np.concatenate(o_blocks, axis=0)),
                q_offsets=_head_offsets(kv.key, n),
                o_offsets=_head_offsets(kv.value, n),
                key_ranks=kv.key.ranks,
                value_ranks=kv.value.ranks,
            )
        )
    return FusedWeights(layers=tuple(fused_layers))


class _GroupStore:
    """Latent rows for one head group, stored raw or quantized per token."""

    __slots__ = ("rank", "bits", "_rows", "_codes", "_scales", "_zps")

    def __init__(self, rank: int, bits: int):
        self.rank = rank
        self.bits = bits
        self._rows: list[np.ndarray] = []
        self._codes: list[np.ndarray] = []
        self._scales: list[float] = []
        self._zps: list[int] = []

    def append(self, row: np.ndarray) -> None:
        if self.bits == FP_BITS:
            self._rows.append(row)
            return
        q = quantize_rows(row[None, :], QuantParams(self.bits))
        self._codes.append(q.codes[0])
        self._scales.append(float(q.scales[0]))
        self._zps.append(int(q.zero_points[0]))

    def matrix(self) -> np.ndarray:
        """All cached rows, dequantized when stored quantized."""
        if self.bits == FP_BITS:
            if not self._rows:
                return np.zeros((0, self.rank))
            return np.vstack(self._rows)
        if not self._codes:
            return np.zeros((0, self.rank))
        codes = np.vstack(self._codes).astype(np.float64)
        scales = np.asarray(self._scales)
        zps = np.asarray(self._zps, dtype=np.float64)
        return (codes - zps[:, None]) * scales[:, None]

    def quantized_latent(self):
        from .quant import QuantizedLatent

        if self.bits == FP_BITS:
            raise ValidationError("cache stores raw latents; no quantized form")
        codes = np.vstack(self._codes) if self._codes else np.zeros((0, self.rank), dtype=np.uint8)
        return QuantizedLatent(
            codes=codes,
            scales=np.asarray(self._scales) if self._scales else np.ones(0),
            zero_points=np.asarray(self._zps, dtype=np.int64) if self._zps else np.zeros(0, dtype=np.int64),
            bits=self.bits,
        )


class _LayerCache:
    __slots__ = ("k_groups", "v_groups")

    def __init__(self, kv: LayerKV, k_bits: int, v_bits: int):
        self.k_groups = [_GroupStore(g.rank, k_bits) for g in kv.key.groups]
        self.v_groups = [_GroupStore(g.rank, v_bits) for g in kv.value.groups]


def _norm_bits(bits) -> tuple[int, int]:
    """Key/value storage widths; a single int applies to both sides."""
    pair = (bits, bits) if isinstance(bits, int) else tuple(bits)
    if len(pair) != 2:
        raise ValidationError(f"bits must be an int or a (key, value) pair, got {bits!r}")
    for b in pair:
        if b != FP_BITS:
            QuantParams(b)  # validates the width
    return pair


class LatentKVCache:
    """Per-layer latent column blocks, one store per head group.

    ``bits`` of 16 keeps raw float64 rows; 2/3/4/8 stores per-token
    quantized codes and dequantizes on read. A ``(key_bits, value_bits)``
    pair splits the choice per side, e.g. raw keys with quantized values
    on the rotary path. The token count ``t`` only grows. A cache is
    owned by a single decode session.
    """

    def __init__(self, decomposed: list[LayerKV], config: AttentionConfig, bits=FP_BITS):
        k_bits, v_bits = _norm_bits(bits)
        if len(decomposed) != config.layers:
            raise ValidationError(
                f"{len(decomposed)} decomposed layers for {config.layers}-layer config"
            )
        self.config = config
        self.decomposed = list(decomposed)
        self.bits = bits
        self.k_bits = k_bits
        self.v_bits = v_bits
        self.layers = [_LayerCache(kv, k_bits, v_bits) for kv in decomposed]
        self.t = 0

    def hk(self, layer: int) -> np.ndarray:
        return np.concatenate([g.matrix() for g in self.layers[layer].k_groups], axis=1)

    def hv(self, layer: int) -> np.ndarray:
        return np.concatenate([g.matrix() for g in self.layers[layer].v_groups], axis=1)


def _check_cache_fused(cache: LatentKVCache, fused: FusedWeights) -> None:
    if len(fused.layers) != len(cache.layers):
        raise ValidationError("cache and fused weights disagree on layer count")
    for li, lf in enumerate(fused.layers):
        kv = cache.decomposed[li]
        if lf.key_ranks != kv.key.ranks or lf.value_ranks != kv.value.ranks:
            raise ValidationError(f"cache/fused rank mismatch at layer {li}")


def _append_latents(kv: LayerKV, layer_cache: _LayerCache, x: np.ndarray) -> None:
    for g, store in zip(kv.key.groups, layer_cache.k_groups):
        store.append(x @ g.a.data)
    for g, store in zip(kv.value.groups, layer_cache.v_groups):
        store.append(x @ g.a.data)


def _value_output(
    lf: LayerFused,
    layer_cache: _LayerCache,
    probs_per_head: list[np.ndarray],
    s_v: int,
    d: int,
) -> np.ndarray:
    out = np.zeros(d)
    hv_mats = [g.matrix() for g in layer_cache.v_groups]
    for i, probs in enumerate(probs_per_head):
        ctx = probs @ hv_mats[i // s_v]
        out += ctx @ lf.wo_fused.data[lf.o_offsets[i] : lf.o_offsets[i + 1], :]
    return out


def palu_decode_step_norope(weights: ModelWeights, fused: FusedWeights, cache: LatentKVCache, x_t) -> np.ndarray:
    """One decode step with both fusions active (rotary embedding off)."""
    cfg = cache.config
    if cfg.rope:
        raise ValidationError("palu_decode_step_norope requires a rope-off config")
    _check_cache_fused(cache, fused)
    x = np.asarray(x_t, dtype=np.float64)
    d, n, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    for li in range(cfg.layers):
        kv = cache.decomposed[li]
        lf = fused.layers[li]
        layer_cache = cache.layers[li]
        _append_latents(kv, layer_cache, x)
        s_k = kv.key.granularity.group_size
        s_v = kv.value.granularity.group_size
        hk_mats = [g.matrix() for g in layer_cache.k_groups]
        probs = []
        for i in range(n):
            q_lat = x @ lf.wq_fused.data[:, lf.q_offsets[i] : lf.q_offsets[i + 1]]
            logits = hk_mats[i // s_k] @ q_lat * scale
            probs.append(_softmax(logits))
        x = _value_output(lf, layer_cache, probs, s_v, d)
    cache.t += 1
    return x


def palu_decode_step_rope(
    weights: ModelWeights,
    fused: FusedWeights,
    cache: LatentKVCache,
    x_t,
    tile_len: int | None = None,
) -> np.ndarray:
    """One decode step with online key reconstruction under rotary embedding.

    Cached key latents are rebuilt tile by tile (K_tile = H_tile @ B_k per
    group), rotated at their absolute positions, and scored against the
    rotated query. The value path is fused exactly as in the non-rotary
    case. Output is independent of tile_len.
    """
    cfg = cache.config
    if not cfg.rope:
        raise ValidationError("palu_decode_step_rope requires a rope-on config")
    if tile_len is not None and tile_len < 1:
        raise ValidationError(f"tile_len must be >= 1, got {tile_len}")
    _check_cache_fused(cache, fused)
    weights.validate_for(cfg)
    x = np.asarray(x_t, dtype=np.float64)
    d, n, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    pos_t = float(cache.t)
    for li in range(cfg.layers):
        kv = cache.decomposed[li]
        lf = fused.layers[li]
        lw = weights.layers[li]
        layer_cache = cache.layers[li]
        _append_latents(kv, layer_cache, x)
        s_k = kv.key.granularity.group_size
        s_v = kv.value.granularity.group_size
        t_rows = cache.t + 1
        tile = t_rows if tile_len is None else tile_len

        queries = []
        for i in range(n):
            q = x @ lw.wq.data[:, i * dh : (i + 1) * dh]
            queries.append(_rope_rows(q[None, :], np.array([pos_t]), cfg.rope_base)[0])

        logits = np.zeros((n, t_rows))
        for g, store in enumerate(layer_cache.k_groups):
            h_all = store.matrix()
            b = kv.key.groups[g].b.data
            for start in range(0, t_rows, tile):
                stop = min(start + tile, t_rows)
                k_tile = h_all[start:stop] @ b  # (rows, dh*s_k)
                positions = np.arange(start, stop, dtype=np.float64)
                for p in range(s_k):
                    head = g * s_k + p
                    k_head = _rope_rows(k_tile[:, p * dh : (p + 1) * dh], positions, cfg.rope_base)
                    logits[head, start:stop] = k_head @ queries[head] * scale
        probs = [_softmax(logits[i]) for i in range(n)]
        x = _value_output(lf, layer_cache, probs, s_v, d)
    cache.t += 1
    return x


def palu_decode_step_quantized(
    weights: ModelWeights,
    fused: FusedWeights,
    cache: LatentKVCache,
    x_t,
    tile_len: int | None = None,
) -> np.ndarray:
    """Decode step over a quantized latent cache.

    Identical to the matching raw path except that cached latents pass
    through dequantization before use and fresh latents are quantized
    before storage; a 16-bit cache makes this a bit-exact bypass.
    """
    if cache.config.rope:
        return palu_decode_step_rope(weights, fused, cache, x_t, tile_len)
    return palu_decode_step_norope(weights, fused, cache, x_t)


def palu_prefill(
    weights: ModelWeights,
    decomposed: list[LayerKV],
    config: AttentionConfig,
    prompt,
    bits=FP_BITS,
    fused: FusedWeights | None = None,
    tile_len: int | None = None,
) -> LatentKVCache:
    """Process a prompt token by token, building the latent cache.

    Each layer's input is that token's attention output from the previous
    layer, so prefill runs the same decode steps and keeps only the cache.
    """
    tokens = np.asarray(prompt, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != config.d_model:
        raise ValidationError(f"prompt must be (T, {config.d_model})")
    if fused is None:
        fused = build_fused(weights, decomposed, config)
    cache = LatentKVCache(decomposed, config, bits)
    for t in range(tokens.shape[0]):
        if config.rope:
            palu_decode_step_rope(weights, fused, cache, tokens[t], tile_len)
        else:
            palu_decode_step_norope(weights, fused, cache, tokens[t])
    return cache


def palu_decode(
    weights: ModelWeights,
    decomposed: list[LayerKV],
    config: AttentionConfig,
    token_stream,
    bits=FP_BITS,
    tile_len: int | None = None,
) -> tuple[np.ndarray, LatentKVCache]:
    """Decode a whole stream, returning per-step outputs and the cache."""
    tokens = np.asarray(token_stream, dtype=np.float64)
    fused = build_fused(weights, decomposed, config)
    cache = LatentKVCache(decomposed, config, bits)
    outputs = np.zeros_like(tokens)
    for t in range(tokens.shape[0]):
        if config.rope:
            outputs[t] = palu_decode_step_rope(weights, fused, cache, tokens[t], tile_len)
        else:
            outputs[t] = palu_decode_step_norope(weights, fused, cache, tokens[t])
    return outputs, cache
