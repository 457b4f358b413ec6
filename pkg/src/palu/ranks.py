"""Fisher-information importance estimation and budgeted rank allocation.

Importance of a weight matrix is approximated by the accumulated sum of
squared loss-gradient entries, estimated with central finite differences
so no autodiff stack is needed. A global latent-width budget is then split
across decomposition targets proportionally to these scores, with integer
residuals distributed by largest fractional remainder.
"""

from __future__ import annotations

import inspect
import json
import math
from dataclasses import dataclass

from .core import Matrix
from .errors import NumericalError, ValidationError
from .tables import render_text

_FD_STEP_BASE = 1e-4
_TIE_QUANTUM = 1e-12


@dataclass(frozen=True)
class FisherScore:
    target_id: str
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score) or self.score < 0.0:
            raise ValidationError(f"Fisher score must be finite and >= 0, got {self.score}")


@dataclass(frozen=True)
class PlanEntry:
    target_id: str
    full_width: int
    allocated_rank: int


@dataclass(frozen=True)
class RankPlan:
    entries: tuple[PlanEntry, ...]
    budget_rate: float
    rounding: str

    def rank_for(self, target_id: str) -> int:
        for e in self.entries:
            if e.target_id == target_id:
                return e.allocated_rank
        raise ValidationError(f"no plan entry for target {target_id!r}")

    @property
    def total_rank(self) -> int:
        return sum(e.allocated_rank for e in self.entries)

    @property
    def total_width(self) -> int:
        return sum(e.full_width for e in self.entries)


def _loss_arity(loss) -> int:
    try:
        params = [
            p
            for p in inspect.signature(loss).parameters.values()
            if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)
        ]
        return 2 if len(params) >= 2 else 1
    except (TypeError, ValueError):
        return 1


def estimate_fisher(
    w: Matrix,
    loss,
    calib_batches: int = 1,
    target_id: str = "",
) -> FisherScore:
    """Sum over batches of the squared finite-difference gradient of ``loss``.

    ``loss`` is a scalar function of the weight matrix, optionally taking a
    batch index as second argument. Each entry uses a central difference
    with step 1e-4 * (1 + |w_ij|).
    """
    if calib_batches < 1:
        raise ValidationError(f"calib_batches must be >= 1, got {calib_batches}")
    arity = _loss_arity(loss)

    def eval_loss(mat: Matrix, batch: int) -> float:
        val = loss(mat, batch) if arity == 2 else loss(mat)
        val = float(val)
        if not math.isfinite(val):
            raise NumericalError(f"loss returned a non-finite value on batch {batch}")
        return val

    base = w.data
    total = 0.0
    for batch in range(calib_batches):
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                h = _FD_STEP_BASE * (1.0 + abs(base[i, j]))
                plus = base.copy()
                plus[i, j] += h
                minus = base.copy()
                minus[i, j] -= h
                g = (eval_loss(Matrix.wrap(plus), batch) - eval_loss(Matrix.wrap(minus), batch)) / (2.0 * h)
                total += g * g
    return FisherScore(target_id=target_id, score=total)


def _apply_rounding(rank: int, rounding: str, min_rank: int) -> int:
    if rounding == "none":
        return rank
    if rounding == "pow2":
        floored = 1 << (rank.bit_length() - 1)
        return max(floored, min_rank)
    if rounding.startswith("block:"):
        k = int(rounding.split(":", 1)[1])
        if k < 1:
            raise ValidationError(f"block rounding unit must be >= 1, got {k}")
        return max((rank // k) * k, min_rank)
    raise ValidationError(f"unknown rounding mode {rounding!r}")


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


def allocate(
    scores: list[FisherScore],
    full_widths: list[int],
    d_model: int,
    budget_rate: float,
    min_rank: int = 1,
    rounding: str = "none",
) -> RankPlan:
    """Split a latent-width budget across targets proportionally to score.

    The budget R = round(budget_rate * sum(full_widths)) is distributed as
    r_j = R * score_j / total_score, clamped to [min_rank, min(d_model,
    width_j)], with the integer residual going to the largest fractional
    remainders (ties broken by lower target_id). The rounding mode is
    applied last and only ever rounds down, so the advertised compression
    rate is a floor.
    """
    if not scores:
        raise ValidationError("scores must be non-empty")
    if len(scores) != len(full_widths):
        raise ValidationError(
            f"{len(scores)} scores but {len(full_widths)} widths"
        )
    if not (0.0 < budget_rate <= 1.0):
        raise ValidationError(f"budget_rate must lie in (0, 1], got {budget_rate}")
    if min_rank < 1:
        raise ValidationError(f"min_rank must be >= 1, got {min_rank}")
    total_score = sum(s.score for s in scores)
    if total_score <= 0.0:
        raise ValidationError("total Fisher score must be positive")
    _apply_rounding(min_rank, rounding, min_rank)  # validates the mode early

    n = len(scores)
    widths = [int(w) for w in full_widths]
    caps = [min(d_model, w) for w in widths]
    total_width = sum(widths)
    budget = _round_half_away(budget_rate * total_width)
    if budget < n * min_rank:
        feasible = n * min_rank / total_width
        raise ValidationError(
            f"budget {budget} cannot give {n} targets min_rank {min_rank}; "
            f"smallest feasible rate is {feasible:.6f}"
        )
    for cap in caps:
        if cap < min_rank:
            raise ValidationError(f"min_rank {min_rank} exceeds a target cap {cap}")

    provisional = [budget * s.score / total_score for s in scores]
    clamped = [min(max(p, float(min_rank)), float(caps[j])) for j, p in enumerate(provisional)]
    ranks = [int(math.floor(c)) for c in clamped]
    fracs = [c - r for c, r in zip(clamped, ranks)]
    # quantize remainders so that rescaling all scores cannot flip a near-tie
    keys = [round(f / _TIE_QUANTUM) for f in fracs]

    residual = budget - sum(ranks)
    if residual > 0:
        order = sorted(range(n), key=lambda j: (-keys[j], scores[j].target_id))
        progressed = True
        while residual > 0 and progressed:
            progressed = False
            for j in order:
                if residual == 0:
                    break
                if ranks[j] < caps[j]:
                    ranks[j] += 1
                    residual -= 1
                    progressed = True
    elif residual < 0:
        order = sorted(range(n), key=lambda j: (keys[j], scores[j].target_id))
        progressed = True
        while residual < 0 and progressed:
            progressed = False
            for j in order:
                if residual == 0:
                    break
                if ranks[j] > min_rank:
                    ranks[j] -= 1
                    residual += 1
                    progressed = True

    entries = tuple(
        PlanEntry(
            target_id=scores[j].target_id,
            full_width=widths[j],
            allocated_rank=_apply_rounding(ranks[j], rounding, min_rank),
        )
        for j in range(n)
    )
    return RankPlan(entries=entries, budget_rate=budget_rate, rounding=rounding)


def _kv_tag(target_id: str) -> str | None:
    tokens = target_id.lower().replace("-", ".").replace("_", ".").split(".")
    is_k = any(t in ("k", "key", "keys") for t in tokens)
    is_v = any(t in ("v", "value", "values") for t in tokens)
    if is_k and not is_v:
        return "K"
    if is_v and not is_k:
        return "V"
    return None


@dataclass(frozen=True)
class PlanReport:
    rows: tuple[dict, ...]
    overall_compression: float
    key_compression: float | None
    value_compression: float | None

    def render(self) -> str:
        table = render_text(
            ["target", "width", "rank", "compression"],
            [
                [r["target_id"], str(r["full_width"]), str(r["allocated_rank"]), f"{r['compression'] * 100:.2f}%"]
                for r in self.rows
            ],
        )
        lines = [table, f"overall compression: {self.overall_compression * 100:.2f}%"]
        if self.key_compression is not None:
            lines.append(f"key targets average compression: {self.key_compression * 100:.2f}%")
        if self.value_compression is not None:
            lines.append(f"value targets average compression: {self.value_compression * 100:.2f}%")
        return "\n".join(lines) + "\n"


def plan_report(plan: RankPlan) -> PlanReport:
    """Per-target compression table plus key/value aggregates when tagged."""
    rows = []
    for e in plan.entries:
        rows.append(
            {
                "target_id": e.target_id,
                "full_width": e.full_width,
                "allocated_rank": e.allocated_rank,
                "compression": 1.0 - e.allocated_rank / e.full_width,
                "kv": _kv_tag(e.target_id),
            }
        )
    overall = 1.0 - plan.total_rank / plan.total_width
    k_rows = [r for r in rows if r["kv"] == "K"]
    v_rows = [r for r in rows if r["kv"] == "V"]
    key_avg = sum(r["compression"] for r in k_rows) / len(k_rows) if k_rows else None
    value_avg = sum(r["compression"] for r in v_rows) / len(v_rows) if v_rows else None
    return PlanReport(
        rows=tuple(rows),
        overall_compression=overall,
        key_compression=key_avg,
        value_compression=value_avg,
    )


def scores_to_json(scores: list[FisherScore]) -> str:
    return json.dumps(
        [{"target_id": s.target_id, "score": s.score} for s in scores], indent=2
    )


def scores_from_json(text: str) -> list[FisherScore]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bad scores JSON: {exc}") from None
    if not isinstance(raw, list):
        raise ValidationError("scores JSON must be a list of {target_id, score}")
    out = []
    for item in raw:
        if not isinstance(item, dict) or set(item) != {"target_id", "score"}:
            raise ValidationError(f"bad scores entry: {item!r}")
        out.append(FisherScore(target_id=str(item["target_id"]), score=float(item["score"])))
    return out


def plan_to_json(plan: RankPlan) -> str:
    return json.dumps(
        {
            "budget_rate": plan.budget_rate,
            "rounding": plan.rounding,
            "entries": [
                {
                    "target_id": e.target_id,
                    "full_width": e.full_width,
                    "allocated_rank": e.allocated_rank,
                }
                for e in plan.entries
            ],
        },
        indent=2,
    )


def plan_from_json(text: str) -> RankPlan:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bad plan JSON: {exc}") from None
    try:
        entries = tuple(
            PlanEntry(
                target_id=str(e["target_id"]),
                full_width=int(e["full_width"]),
                allocated_rank=int(e["allocated_rank"]),
            )
            for e in raw["entries"]
        )
        return RankPlan(
            entries=entries,
            budget_rate=float(raw["budget_rate"]),
            rounding=str(raw["rounding"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad plan JSON structure: {exc}") from None
