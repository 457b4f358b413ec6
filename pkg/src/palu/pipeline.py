"""End-to-end pipeline stages: generate, fisher, allocate, decompose,
rotate, quantize, run, report.

Every stage reads and writes container or JSON files under the config's
out_dir, so each one can also be invoked on its own against a previous
stage's outputs. All randomness derives from the config seed hashed with
the stage name; reruns are byte-identical.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .accounting import (
    ModelPreset,
    check_table2,
    kv_cache_bytes,
    recon_macs,
    render_table2,
)
from .attention import (
    AttentionConfig,
    LayerKV,
    LayerWeights,
    ModelWeights,
    palu_decode,
    reference_decode,
)
from .config import PipelineConfig, SyntheticSpec, derive_seed
from .container import Container, PackedTensor, read_container, write_container
from .core import Matrix, hadamard, random_matrix
from .decompose import (
    CalibrationSet,
    DecomposedLayer,
    Granularity,
    GroupFactors,
    decompose,
)
from .errors import GoldenMismatchError, PaluError, ValidationError
from .quant import QuantParams, fuse_hadamard, outlier_metric, pack_codes, quantize_rows
from .ranks import (
    FisherScore,
    RankPlan,
    allocate,
    estimate_fisher,
    plan_report,
    plan_to_json,
    scores_to_json,
)
from .tables import render_csv, render_text

MODEL_FILE = "model.palu"
FISHER_FILE = "fisher.json"
PLAN_FILE = "plan.json"
FACTORS_FILE = "factors.palu"
ROTATED_FILE = "factors_rotated.palu"
LATENTS_FILE = "latents.palu"
RUN_REPORT_BASE = "run_report"
PIPELINE_REPORT = "report.txt"

_PROJECTIONS = ("k", "v")


def thread_budget() -> int:
    env = os.environ.get("PALU_THREADS", "").strip()
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ValidationError(f"PALU_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise ValidationError(f"PALU_THREADS must be >= 1, got {cap}")
        return cap
    return min(4, os.cpu_count() or 1)


def out_path(cfg: PipelineConfig, name: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def granularity_for(cfg: PipelineConfig, n_heads: int) -> Granularity:
    if cfg.granularity_kind == "multi_head":
        return Granularity.multi_head()
    if cfg.granularity_kind == "joint_head":
        return Granularity.joint_head(n_heads)
    return Granularity.group_head(cfg.group_size)


def _spec_dict(spec: SyntheticSpec) -> dict:
    return {
        "d_model": spec.d_model,
        "n_heads": spec.n_heads,
        "head_dim": spec.head_dim,
        "layers": spec.layers,
        "spectrum": spec.spectrum,
    }


def preset_for(cfg: PipelineConfig) -> ModelPreset:
    if cfg.preset is not None:
        from .accounting import PRESETS

        return PRESETS[cfg.preset]
    spec = cfg.require_synthetic()
    return ModelPreset(
        "synthetic",
        layers=spec.layers,
        n_heads=spec.n_heads,
        head_dim=spec.head_dim,
        d_model=spec.d_model,
    )


# ---------------------------------------------------------------------------
# gen-model
# ---------------------------------------------------------------------------


def gen_model(cfg: PipelineConfig) -> tuple[Path, str]:
    spec = cfg.require_synthetic()
    d = spec.d_model
    tensors = {}
    lines = [f"seed: {cfg.seed}"]
    for li in range(spec.layers):
        for name in ("wq", "wk", "wv", "wo"):
            stage_seed = derive_seed(cfg.seed, f"model:layer{li}:{name}")
            tensors[f"layer{li}.{name}"] = random_matrix(d, d, stage_seed, spectrum=spec.spectrum)
            lines.append(f"layer{li}.{name}: {d}x{d}")
    path = out_path(cfg, MODEL_FILE)
    write_container(path, tensors, meta={"model": _spec_dict(spec), "seed": cfg.seed})
    return path, "\n".join(lines) + "\n"


def load_model(path) -> tuple[Container, ModelWeights, SyntheticSpec]:
    cont = read_container(path)
    m = cont.meta.get("model")
    if not m:
        raise ValidationError(f"{path}: container has no model metadata")
    spec = SyntheticSpec(
        d_model=int(m["d_model"]),
        n_heads=int(m["n_heads"]),
        head_dim=int(m["head_dim"]),
        layers=int(m["layers"]),
        spectrum=m.get("spectrum"),
    )
    layers = tuple(
        LayerWeights(
            wq=cont.matrix(f"layer{li}.wq"),
            wk=cont.matrix(f"layer{li}.wk"),
            wv=cont.matrix(f"layer{li}.wv"),
            wo=cont.matrix(f"layer{li}.wo"),
        )
        for li in range(spec.layers)
    )
    return cont, ModelWeights(layers=layers), spec


# ---------------------------------------------------------------------------
# fisher
# ---------------------------------------------------------------------------


def _target_ids(spec: SyntheticSpec, gran: Granularity) -> list[str]:
    n_groups = gran.n_groups(spec.n_heads)
    return [
        f"layer{li}.{proj}.g{g}"
        for li in range(spec.layers)
        for proj in _PROJECTIONS
        for g in range(n_groups)
    ]


def fisher_stage(cfg: PipelineConfig, model_path) -> tuple[Path, list[FisherScore]]:
    cont, weights, spec = load_model(model_path)
    gran = granularity_for(cfg, spec.n_heads)
    width = spec.head_dim * gran.group_size
    n_groups = gran.n_groups(spec.n_heads)
    samples = cfg.fisher_samples or spec.d_model

    scores: list[FisherScore] = []
    if not cfg.fisher_enabled:
        scores = [FisherScore(tid, 1.0) for tid in _target_ids(spec, gran)]
    else:
        batches = [
            random_matrix(samples, spec.d_model, derive_seed(cfg.seed, f"fisher:batch{b}")).data
            for b in range(cfg.fisher_batches)
        ]
        for li in range(spec.layers):
            per_proj = {"k": weights.layers[li].wk, "v": weights.layers[li].wv}
            for proj in _PROJECTIONS:
                w = per_proj[proj]
                for g in range(n_groups):
                    slab = Matrix(w.data[:, g * width : (g + 1) * width])

                    def loss(m, batch):
                        y = batches[batch] @ m.data
                        return 0.5 * float(np.sum(y * y))

                    score = estimate_fisher(
                        slab, loss, calib_batches=cfg.fisher_batches,
                        target_id=f"layer{li}.{proj}.g{g}",
                    )
                    scores.append(score)
    path = out_path(cfg, FISHER_FILE)
    path.write_text(scores_to_json(scores) + "\n", "utf-8")
    return path, scores


# ---------------------------------------------------------------------------
# allocate
# ---------------------------------------------------------------------------


def allocate_stage(cfg: PipelineConfig, scores: list[FisherScore], spec: SyntheticSpec) -> tuple[Path, RankPlan]:
    gran = granularity_for(cfg, spec.n_heads)
    width = spec.head_dim * gran.group_size
    # budget_rate is the kept latent fraction, so 1.0 passes through at
    # full rank and 0.5 halves the cache (a 50% compression rate)
    plan = allocate(
        scores,
        full_widths=[width] * len(scores),
        d_model=spec.d_model,
        budget_rate=cfg.budget_rate,
        min_rank=cfg.min_rank,
        rounding=cfg.rounding,
    )
    path = out_path(cfg, PLAN_FILE)
    path.write_text(plan_to_json(plan) + "\n", "utf-8")
    return path, plan


# ---------------------------------------------------------------------------
# decompose
# ---------------------------------------------------------------------------


def _plan_ranks(plan: RankPlan, li: int, proj: str, n_groups: int) -> list[int]:
    return [plan.rank_for(f"layer{li}.{proj}.g{g}") for g in range(n_groups)]


def decompose_stage(cfg: PipelineConfig, model_path, plan: RankPlan) -> Path:
    cont, weights, spec = load_model(model_path)
    gran = granularity_for(cfg, spec.n_heads)
    n_groups = gran.n_groups(spec.n_heads)

    calib = None
    if cfg.whiten:
        n_samples = max(spec.d_model, cfg.fisher_samples or spec.d_model)
        calib = CalibrationSet(
            random_matrix(n_samples, spec.d_model, derive_seed(cfg.seed, "calib")),
            source="seeded-uniform",
        )
    mode = "whitened" if cfg.whiten else "plain"

    def factor_one(li: int, proj: str) -> tuple[str, DecomposedLayer]:
        w = weights.layers[li].wk if proj == "k" else weights.layers[li].wv
        ranks = _plan_ranks(plan, li, proj, n_groups)
        layer = decompose(w, spec.n_heads, spec.head_dim, gran, ranks, mode=mode, calib=calib)
        return f"layer{li}.{proj}", layer

    jobs = [(li, proj) for li in range(spec.layers) for proj in _PROJECTIONS]
    with ThreadPoolExecutor(max_workers=thread_budget()) as pool:
        results = dict(pool.map(lambda job: factor_one(*job), jobs))

    tensors = {}
    ranks_meta = {}
    for key, layer in results.items():
        ranks_meta[key] = list(layer.ranks)
        for g, factors in enumerate(layer.groups):
            tensors[f"{key}.g{g}.a"] = factors.a
            tensors[f"{key}.g{g}.b"] = factors.b
    meta = {
        "model": _spec_dict(spec),
        "granularity": {"kind": cfg.granularity_kind, "group_size": cfg.group_size},
        "ranks": ranks_meta,
        "rotated": False,
        "mode": mode,
        "seed": cfg.seed,
    }
    path = out_path(cfg, FACTORS_FILE)
    write_container(path, tensors, meta=meta)
    return path


def load_factors(path) -> tuple[Container, list[LayerKV], SyntheticSpec, bool]:
    cont = read_container(path)
    meta = cont.meta
    m = meta.get("model")
    if not m:
        raise ValidationError(f"{path}: container has no model metadata")
    spec = SyntheticSpec(
        d_model=int(m["d_model"]),
        n_heads=int(m["n_heads"]),
        head_dim=int(m["head_dim"]),
        layers=int(m["layers"]),
        spectrum=m.get("spectrum"),
    )
    g = meta["granularity"]
    if g["kind"] == "multi_head":
        gran = Granularity.multi_head()
    elif g["kind"] == "joint_head":
        gran = Granularity.joint_head(spec.n_heads)
    else:
        gran = Granularity.group_head(int(g["group_size"]))
    n_groups = gran.n_groups(spec.n_heads)

    decomposed = []
    for li in range(spec.layers):
        per_proj = {}
        for proj in _PROJECTIONS:
            groups = []
            for gi in range(n_groups):
                a = cont.matrix(f"layer{li}.{proj}.g{gi}.a")
                b = cont.matrix(f"layer{li}.{proj}.g{gi}.b")
                groups.append(GroupFactors(a=a, b=b, rank=a.cols))
            per_proj[proj] = DecomposedLayer(
                granularity=gran,
                groups=tuple(groups),
                d_model=spec.d_model,
                head_dim=spec.head_dim,
                n_heads=spec.n_heads,
            )
        decomposed.append(LayerKV(key=per_proj["k"], value=per_proj["v"]))
    return cont, decomposed, spec, bool(meta.get("rotated", False))


# ---------------------------------------------------------------------------
# rotate
# ---------------------------------------------------------------------------


def rotate_stage(cfg: PipelineConfig, factors_path) -> Path:
    cont, decomposed, spec, rotated = load_factors(factors_path)
    if rotated:
        raise ValidationError(f"{factors_path}: factors are already rotated")
    tensors = {}
    for li, kv in enumerate(decomposed):
        for proj, layer in (("k", kv.key), ("v", kv.value)):
            rot = fuse_hadamard(layer)
            for g, factors in enumerate(rot.layer.groups):
                tensors[f"layer{li}.{proj}.g{g}.a"] = factors.a
                tensors[f"layer{li}.{proj}.g{g}.b"] = factors.b
    meta = dict(cont.meta)
    meta["rotated"] = True
    path = out_path(cfg, ROTATED_FILE)
    write_container(path, tensors, meta=meta)
    return path


# ---------------------------------------------------------------------------
# quantize (standalone container transform)
# ---------------------------------------------------------------------------


def quantize_stage(cfg: PipelineConfig, in_path, out_file: str = "quantized.palu") -> Path:
    if cfg.bits == 16:
        raise ValidationError("quantize stage needs bits in {2,3,4,8}; 16 means off")
    cont = read_container(in_path)
    params = QuantParams(cfg.bits)
    tensors = {}
    quantized = 0
    for name, value in cont.tensors.items():
        if isinstance(value, np.ndarray) and value.ndim == 2:
            q = quantize_rows(value, params)
            tensors[f"{name}.codes"] = PackedTensor(
                data=pack_codes(q.codes, cfg.bits), shape=q.codes.shape, bits=cfg.bits
            )
            tensors[f"{name}.scales"] = q.scales
            tensors[f"{name}.zero_points"] = q.zero_points.astype(np.float64)
            quantized += 1
        else:
            tensors[name] = value
    if not quantized:
        raise ValidationError(f"{in_path}: no 2-D f64 tensors to quantize")
    meta = dict(cont.meta)
    meta["quantized_bits"] = cfg.bits
    path = out_path(cfg, out_file)
    write_container(path, tensors, meta=meta)
    return path


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _fmt_err(x) -> str:
    return "n/a" if x is None else f"{x:.3e}"


def _outlier_summary(cache, decomposed, rotated: bool) -> dict:
    """Mean outlier metric per projection, for raw and rotated latents.

    The Hadamard blocks are symmetric orthogonal, so the counterpart of a
    latent block is always latent @ H regardless of direction.
    """
    agg = {}
    for proj in _PROJECTIONS:
        raw_vals = []
        rot_vals = []
        for li, kv in enumerate(decomposed):
            layer = kv.key if proj == "k" else kv.value
            stores = cache.layers[li].k_groups if proj == "k" else cache.layers[li].v_groups
            for g, store in zip(layer.groups, stores):
                m = store.matrix()
                if m.shape[0] == 0:
                    continue
                other = m @ hadamard(g.rank).data
                a, b = outlier_metric(Matrix(m)), outlier_metric(Matrix(other))
                if rotated:
                    rot_vals.append(a)
                    raw_vals.append(b)
                else:
                    raw_vals.append(a)
                    rot_vals.append(b)
        agg[proj] = {
            "before_rotation": float(np.mean(raw_vals)) if raw_vals else None,
            "after_rotation": float(np.mean(rot_vals)) if rot_vals else None,
        }
    return agg


def run_stage(cfg: PipelineConfig, model_path, factors_path, plan: RankPlan | None = None) -> tuple[Path, dict]:
    _, weights, spec = load_model(model_path)
    _, decomposed, fspec, rotated = load_factors(factors_path)
    if _spec_dict(spec) != _spec_dict(fspec):
        raise ValidationError("model and factors containers disagree on model dimensions")

    attn = AttentionConfig(
        d_model=spec.d_model,
        n_heads=spec.n_heads,
        head_dim=spec.head_dim,
        layers=spec.layers,
        rope=cfg.rope,
        rope_base=cfg.rope_base,
    )
    stream = random_matrix(
        max(cfg.stream_length, 1), spec.d_model, derive_seed(cfg.seed, "stream")
    ).data[: cfg.stream_length]

    ref = reference_decode(weights, attn, stream)
    got, cache = palu_decode(weights, decomposed, attn, stream, bits=cfg.bits, tile_len=cfg.tile_len)

    steps = []
    for t in range(stream.shape[0]):
        denom = float(np.linalg.norm(ref.outputs[t]))
        err = float(np.linalg.norm(got[t] - ref.outputs[t])) / max(denom, 1e-300)
        steps.append({"t": t, "rel_err": err})
    errs = [s["rel_err"] for s in steps]

    preset = preset_for(cfg)
    cost = kv_cache_bytes(preset, stream.shape[0], plan, cfg.bits)
    gran = granularity_for(cfg, spec.n_heads)
    macs = recon_macs(gran, list(decomposed[0].key.ranks), spec.head_dim, spec.n_heads)

    report = {
        "config": {
            "seed": cfg.seed,
            "bits": cfg.bits,
            "rope": cfg.rope,
            "hadamard_factors": rotated,
            "granularity": {"kind": cfg.granularity_kind, "group_size": cfg.group_size},
            "budget_rate": cfg.budget_rate,
            "stream_length": cfg.stream_length,
            "tile_len": cfg.tile_len,
        },
        "steps": steps,
        "max_rel_err": max(errs) if errs else None,
        "mean_rel_err": float(np.mean(errs)) if errs else None,
        "outlier_metric": _outlier_summary(cache, decomposed, rotated),
        "kv_cost": {
            "tokens": cost.tokens,
            "bits": cost.bits,
            "kv_bytes_baseline": cost.kv_bytes_baseline,
            "kv_bytes_compressed": cost.kv_bytes_compressed,
            "compression_rate": cost.compression_rate,
        },
        "recon_macs": {
            "per_head": list(macs.per_head),
            "per_group": list(macs.per_group),
            "total": macs.total,
        },
    }
    if plan is not None:
        report["plan"] = json.loads(plan_to_json(plan))

    json_path = out_path(cfg, RUN_REPORT_BASE + ".json")
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", "utf-8")

    rows = [[str(s["t"]), f"{s['rel_err']:.3e}"] for s in steps]
    text = render_text(["step", "rel_err"], rows)
    text += f"max rel err:  {_fmt_err(report['max_rel_err'])}\n"
    text += f"mean rel err: {_fmt_err(report['mean_rel_err'])}\n"
    for proj in _PROJECTIONS:
        om = report["outlier_metric"][proj]
        if om["before_rotation"] is not None:
            text += (
                f"outlier metric ({proj}): {om['before_rotation']:.4f} raw, "
                f"{om['after_rotation']:.4f} rotated\n"
            )
    out_path(cfg, RUN_REPORT_BASE + ".txt").write_text(text, "utf-8")
    out_path(cfg, RUN_REPORT_BASE + ".csv").write_text(
        render_csv(["step", "rel_err"], rows), "utf-8"
    )

    if cfg.bits != 16:
        tensors = {}
        for li in range(spec.layers):
            for proj in _PROJECTIONS:
                stores = cache.layers[li].k_groups if proj == "k" else cache.layers[li].v_groups
                for g, store in enumerate(stores):
                    q = store.quantized_latent()
                    base = f"layer{li}.{proj}.g{g}"
                    tensors[f"{base}.codes"] = PackedTensor(
                        data=pack_codes(q.codes, q.bits), shape=q.codes.shape, bits=q.bits
                    )
                    tensors[f"{base}.scales"] = q.scales
                    tensors[f"{base}.zero_points"] = q.zero_points.astype(np.float64)
        if tensors:
            write_container(
                out_path(cfg, LATENTS_FILE),
                tensors,
                meta={"model": _spec_dict(spec), "bits": cfg.bits, "seed": cfg.seed},
            )

    return json_path, report


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PaluError as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc


def run_pipeline(cfg: PipelineConfig) -> dict:
    spec = cfg.require_synthetic()
    model_path, gen_text = _stage("gen-model", gen_model, cfg)
    _, scores = _stage("fisher", fisher_stage, cfg, model_path)
    _, plan = _stage("allocate", allocate_stage, cfg, scores, spec)
    factors_path = _stage("decompose", decompose_stage, cfg, model_path, plan)
    if cfg.hadamard:
        factors_path = _stage("rotate", rotate_stage, cfg, factors_path)
    _, report = _stage("run", run_stage, cfg, model_path, factors_path, plan)

    summary = gen_text
    summary += "\n" + plan_report(plan).render()
    summary += f"\nmax rel err:  {_fmt_err(report['max_rel_err'])}\n"
    summary += f"mean rel err: {_fmt_err(report['mean_rel_err'])}\n"
    cost = report["kv_cost"]
    summary += (
        f"kv bytes: {cost['kv_bytes_baseline']:.0f} baseline, "
        f"{cost['kv_bytes_compressed']:.6f} compressed "
        f"(rate {cost['compression_rate']:.4f})\n"
    )
    if cfg.report_golden == "table2":
        checks = check_table2()
        summary += "\n" + render_table2(checks)
        if not all(c.ok for c in checks):
            out_path(cfg, PIPELINE_REPORT).write_text(summary, "utf-8")
            raise GoldenMismatchError("table2 golden rows do not match")
    out_path(cfg, PIPELINE_REPORT).write_text(summary, "utf-8")
    return report


__all__ = [
    "allocate_stage",
    "decompose_stage",
    "fisher_stage",
    "gen_model",
    "granularity_for",
    "load_factors",
    "load_model",
    "preset_for",
    "quantize_stage",
    "rotate_stage",
    "run_pipeline",
    "run_stage",
    "thread_budget",
]
