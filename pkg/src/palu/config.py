"""Pipeline configuration: JSON schema validation and seed derivation.

Configs validate strictly: unknown keys are rejected at every level so a
typo never silently changes an experiment. All randomness flows from the
single top-level seed; stages derive their own streams by hashing
(seed, stage-name).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .accounting import PRESETS
from .errors import ValidationError

_BITS_CHOICES = (2, 3, 4, 8, 16)
_GRAN_KINDS = ("multi_head", "group_head", "joint_head")


def derive_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass(frozen=True)
class SyntheticSpec:
    d_model: int
    n_heads: int
    head_dim: int
    layers: int
    spectrum: float | None = None


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    preset: str | None
    synthetic: SyntheticSpec | None
    granularity_kind: str
    group_size: int
    budget_rate: float
    min_rank: int
    rounding: str
    bits: int
    hadamard: bool
    whiten: bool
    rope: bool
    rope_base: float
    tile_len: int | None
    stream_length: int
    fisher_enabled: bool
    fisher_batches: int
    fisher_samples: int | None
    report_golden: str | None
    out_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    def require_synthetic(self) -> SyntheticSpec:
        if self.synthetic is None:
            raise ValidationError(
                "this command needs a synthetic model spec "
                "(model: {d_model, n_heads, head_dim, layers, ...})"
            )
        return self.synthetic


def _expect(obj: dict, context: str, allowed: dict[str, bool]) -> None:
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ValidationError(f"{context}: unknown keys {sorted(unknown)}")
    missing = [k for k, required in allowed.items() if required and k not in obj]
    if missing:
        raise ValidationError(f"{context}: missing required keys {missing}")


def _check_int(obj, context, key, lo=None, hi=None, default=None, required=False):
    if key not in obj:
        if required:
            raise ValidationError(f"{context}: missing {key}")
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ValidationError(f"{context}: {key} must be an integer, got {val!r}")
    if lo is not None and val < lo:
        raise ValidationError(f"{context}: {key} must be >= {lo}, got {val}")
    if hi is not None and val > hi:
        raise ValidationError(f"{context}: {key} must be <= {hi}, got {val}")
    return val


def _check_number(obj, context, key, lo_exclusive=None, hi_inclusive=None, default=None, required=False):
    if key not in obj:
        if required:
            raise ValidationError(f"{context}: missing {key}")
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ValidationError(f"{context}: {key} must be a number, got {val!r}")
    val = float(val)
    if lo_exclusive is not None and not (val > lo_exclusive):
        raise ValidationError(f"{context}: {key} must exceed {lo_exclusive}, got {val}")
    if hi_inclusive is not None and val > hi_inclusive:
        raise ValidationError(f"{context}: {key} must be <= {hi_inclusive}, got {val}")
    return val


def _check_bool(obj, context, key, default):
    if key not in obj:
        return default
    if not isinstance(obj[key], bool):
        raise ValidationError(f"{context}: {key} must be a boolean")
    return obj[key]


def validate_config(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    _expect(
        raw,
        "config",
        {
            "seed": True,
            "model": True,
            "granularity": False,
            "budget_rate": False,
            "min_rank": False,
            "rounding": False,
            "bits": False,
            "hadamard": False,
            "whiten": False,
            "rope": False,
            "tile_len": False,
            "stream_length": False,
            "fisher": False,
            "report_golden": False,
            "out_dir": False,
        },
    )
    seed = _check_int(raw, "config", "seed", lo=0, required=True)

    model = raw["model"]
    if not isinstance(model, dict):
        raise ValidationError("config: model must be an object")
    preset = None
    synthetic = None
    if "preset" in model:
        _expect(model, "model", {"preset": True})
        preset = model["preset"]
        if preset not in PRESETS:
            raise ValidationError(f"model: unknown preset {preset!r}; have {sorted(PRESETS)}")
    else:
        _expect(
            model,
            "model",
            {"d_model": True, "n_heads": True, "head_dim": True, "layers": True, "spectrum": False},
        )
        d_model = _check_int(model, "model", "d_model", lo=1, required=True)
        n_heads = _check_int(model, "model", "n_heads", lo=1, required=True)
        head_dim = _check_int(model, "model", "head_dim", lo=1, required=True)
        layers = _check_int(model, "model", "layers", lo=1, required=True)
        if d_model != n_heads * head_dim:
            raise ValidationError(
                f"model: d_model {d_model} != n_heads*head_dim {n_heads * head_dim}"
            )
        spectrum = _check_number(model, "model", "spectrum", lo_exclusive=0.0, hi_inclusive=1.0)
        synthetic = SyntheticSpec(d_model, n_heads, head_dim, layers, spectrum)

    gran = raw.get("granularity", {"kind": "group_head", "group_size": 4})
    if not isinstance(gran, dict):
        raise ValidationError("config: granularity must be an object")
    _expect(gran, "granularity", {"kind": True, "group_size": False})
    kind = gran["kind"]
    if kind not in _GRAN_KINDS:
        raise ValidationError(f"granularity: kind must be one of {_GRAN_KINDS}, got {kind!r}")
    if kind == "multi_head":
        group_size = _check_int(gran, "granularity", "group_size", lo=1, default=1)
        if group_size != 1:
            raise ValidationError("granularity: multi_head requires group_size 1")
    elif kind == "joint_head":
        n_heads = synthetic.n_heads if synthetic else PRESETS[preset].n_heads
        group_size = _check_int(gran, "granularity", "group_size", lo=1, default=n_heads)
        if group_size != n_heads:
            raise ValidationError(f"granularity: joint_head requires group_size {n_heads}")
    else:
        group_size = _check_int(gran, "granularity", "group_size", lo=2, required=True)
    n_heads_all = synthetic.n_heads if synthetic else PRESETS[preset].n_heads
    if n_heads_all % group_size:
        raise ValidationError(
            f"granularity: group_size {group_size} does not divide n_heads {n_heads_all}"
        )

    budget_rate = _check_number(raw, "config", "budget_rate", lo_exclusive=0.0, hi_inclusive=1.0, default=0.5)
    min_rank = _check_int(raw, "config", "min_rank", lo=1, default=1)

    rounding = raw.get("rounding", "none")
    if not isinstance(rounding, str) or (
        rounding not in ("none", "pow2") and not rounding.startswith("block:")
    ):
        raise ValidationError(f"config: rounding must be none|pow2|block:<k>, got {rounding!r}")
    if rounding.startswith("block:"):
        try:
            if int(rounding.split(":", 1)[1]) < 1:
                raise ValueError
        except ValueError:
            raise ValidationError(f"config: bad block rounding {rounding!r}") from None

    bits = _check_int(raw, "config", "bits", default=16)
    if bits not in _BITS_CHOICES:
        raise ValidationError(f"config: bits must be one of {_BITS_CHOICES}, got {bits}")

    hadamard = _check_bool(raw, "config", "hadamard", False)
    whiten = _check_bool(raw, "config", "whiten", False)

    rope_obj = raw.get("rope", {"enabled": False})
    if not isinstance(rope_obj, dict):
        raise ValidationError("config: rope must be an object")
    _expect(rope_obj, "rope", {"enabled": True, "base": False})
    rope = _check_bool(rope_obj, "rope", "enabled", False)
    rope_base = _check_number(rope_obj, "rope", "base", lo_exclusive=1.0, default=10000.0)

    tile_len = None
    if raw.get("tile_len") is not None:
        tile_len = _check_int(raw, "config", "tile_len", lo=1)

    stream_length = _check_int(raw, "config", "stream_length", lo=0, default=16)

    fisher_obj = raw.get("fisher", {"enabled": True})
    if not isinstance(fisher_obj, dict):
        raise ValidationError("config: fisher must be an object")
    _expect(fisher_obj, "fisher", {"enabled": False, "batches": False, "samples": False})
    fisher_enabled = _check_bool(fisher_obj, "fisher", "enabled", True)
    fisher_batches = _check_int(fisher_obj, "fisher", "batches", lo=1, default=1)
    fisher_samples = _check_int(fisher_obj, "fisher", "samples", lo=1)

    report_golden = raw.get("report_golden")
    if report_golden is not None and report_golden != "table2":
        raise ValidationError(f"config: report_golden must be 'table2', got {report_golden!r}")

    out_dir = raw.get("out_dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ValidationError("config: out_dir must be a non-empty string")

    return PipelineConfig(
        seed=seed,
        preset=preset,
        synthetic=synthetic,
        granularity_kind=kind,
        group_size=group_size,
        budget_rate=budget_rate,
        min_rank=min_rank,
        rounding=rounding,
        bits=bits,
        hadamard=hadamard,
        whiten=whiten,
        rope=rope,
        rope_base=rope_base,
        tile_len=tile_len,
        stream_length=stream_length,
        fisher_enabled=fisher_enabled,
        fisher_batches=fisher_batches,
        fisher_samples=fisher_samples,
        report_golden=report_golden,
        out_dir=out_dir,
        raw=raw,
    )


def load_config(path, seed_override: int | None = None, out_override: str | None = None) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: bad JSON: {exc}") from None
    if seed_override is not None:
        raw = dict(raw)
        raw["seed"] = seed_override
    if out_override is not None:
        raw = dict(raw)
        raw["out_dir"] = out_override
    return validate_config(raw)
