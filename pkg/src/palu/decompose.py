"""Low-rank decomposition of concatenated per-head projection matrices.

A weight matrix W (d x d_h*n, one column block per head) is split into
groups of heads and each group slice is factored as W_g ~= A_g @ B_g via
truncated SVD, with A = U_r sqrt(S_r) and B = sqrt(S_r) V_r^T. Group size 1
decomposes every head on its own, group size n decomposes all heads
jointly, and anything in between trades reconstruction cost for accuracy.

The optional whitened mode decomposes L^T W instead, where L L^T is the
jittered Gram matrix of calibration inputs; this minimizes the truncation
error as seen through those inputs rather than in plain Frobenius norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Matrix, cholesky, svd
from .errors import ValidationError

MULTI_HEAD = "multi_head"
GROUP_HEAD = "group_head"
JOINT_HEAD = "joint_head"

_WHITEN_JITTER_REL = 1e-6


@dataclass(frozen=True)
class Granularity:
    """Decomposition granularity: how many heads share one factor pair."""

    kind: str
    group_size: int

    def __post_init__(self):
        if self.kind not in (MULTI_HEAD, GROUP_HEAD, JOINT_HEAD):
            raise ValidationError(f"unknown granularity kind {self.kind!r}")
        if self.group_size < 1:
            raise ValidationError(f"group_size must be positive, got {self.group_size}")
        if self.kind == MULTI_HEAD and self.group_size != 1:
            raise ValidationError("multi_head granularity requires group_size 1")

    @classmethod
    def multi_head(cls) -> "Granularity":
        return cls(MULTI_HEAD, 1)

    @classmethod
    def group_head(cls, group_size: int) -> "Granularity":
        return cls(GROUP_HEAD, group_size)

    @classmethod
    def joint_head(cls, n_heads: int) -> "Granularity":
        return cls(JOINT_HEAD, n_heads)

    def validate_for(self, n_heads: int) -> None:
        if n_heads % self.group_size != 0:
            raise ValidationError(
                f"group_size {self.group_size} does not divide n_heads {n_heads}"
            )
        if self.kind == JOINT_HEAD and self.group_size != n_heads:
            raise ValidationError(
                f"joint_head granularity requires group_size == n_heads "
                f"({self.group_size} != {n_heads})"
            )
        if self.kind == GROUP_HEAD and self.group_size == 1:
            raise ValidationError("group_head with group_size 1 is multi_head")

    def n_groups(self, n_heads: int) -> int:
        self.validate_for(n_heads)
        return n_heads // self.group_size


@dataclass(frozen=True)
class GroupFactors:
    """One group's factor pair: a (d x rank) down- and b (rank x width) up-projection."""

    a: Matrix
    b: Matrix
    rank: int

    def __post_init__(self):
        if self.a.cols != self.rank or self.b.rows != self.rank:
            raise ValidationError(
                f"factor shapes {self.a.shape} / {self.b.shape} disagree with rank {self.rank}"
            )


@dataclass(frozen=True)
class DecomposedLayer:
    granularity: Granularity
    groups: tuple[GroupFactors, ...]
    d_model: int
    head_dim: int
    n_heads: int

    def __post_init__(self):
        expect = self.granularity.n_groups(self.n_heads)
        if len(self.groups) != expect:
            raise ValidationError(f"expected {expect} groups, got {len(self.groups)}")
        width = self.head_dim * self.granularity.group_size
        for g in self.groups:
            if g.a.rows != self.d_model or g.b.cols != width:
                raise ValidationError(
                    f"group factors {g.a.shape} x {g.b.shape} do not match "
                    f"d_model {self.d_model} and group width {width}"
                )
            if g.rank > min(self.d_model, width):
                raise ValidationError(f"rank {g.rank} exceeds min(d, group width) {min(self.d_model, width)}")

    @property
    def group_width(self) -> int:
        return self.head_dim * self.granularity.group_size

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(g.rank for g in self.groups)


@dataclass(frozen=True)
class CalibrationSet:
    """Layer inputs used for whitened decomposition, one sample per row."""

    x: Matrix
    source: str = field(default="synthetic")


def _normalize_ranks(ranks, n_groups: int, max_rank: int) -> list[int]:
    if isinstance(ranks, (int, np.integer)):
        rank_list = [int(ranks)] * n_groups
    else:
        rank_list = [int(r) for r in ranks]
    if len(rank_list) != n_groups:
        raise ValidationError(f"expected {n_groups} ranks, got {len(rank_list)}")
    for r in rank_list:
        if not (1 <= r <= max_rank):
            raise ValidationError(f"rank {r} outside [1, {max_rank}]")
    return rank_list


def decompose(
    w: Matrix,
    n_heads: int,
    head_dim: int,
    granularity: Granularity,
    ranks,
    mode: str = "plain",
    calib: CalibrationSet | None = None,
) -> DecomposedLayer:
    """Factor each head-group slice of ``w`` as a truncated SVD pair.

    ``ranks`` is either one integer applied to every group or a per-group
    list. Whitened mode requires a CalibrationSet whose sample count is at
    least d_model, decomposes L^T W_g, and un-whitens the A factor so that
    A @ B still approximates the original slice.
    """
    if w.cols != head_dim * n_heads:
        raise ValidationError(
            f"weight has {w.cols} columns, expected head_dim*n_heads = {head_dim * n_heads}"
        )
    granularity.validate_for(n_heads)
    if mode not in ("plain", "whitened"):
        raise ValidationError(f"unknown decomposition mode {mode!r}")

    d = w.rows
    width = head_dim * granularity.group_size
    n_groups = n_heads // granularity.group_size
    rank_list = _normalize_ranks(ranks, n_groups, min(d, width))

    lt = None
    if mode == "whitened":
        if calib is None:
            raise ValidationError("whitened mode requires a CalibrationSet")
        x = calib.x
        if x.cols != d:
            raise ValidationError(f"calibration width {x.cols} != d_model {d}")
        if x.rows < d:
            raise ValidationError(
                f"whitening needs at least d_model={d} samples, got {x.rows}"
            )
        gram = x.data.T @ x.data
        jitter = _WHITEN_JITTER_REL * float(np.trace(gram)) / d
        lt = cholesky(Matrix.wrap(gram), jitter).data.T  # upper triangular

    groups = []
    for j, rank in enumerate(rank_list):
        slab = w.data[:, j * width : (j + 1) * width]
        if lt is None:
            u_r, s_r, vt_r = svd(Matrix.wrap(slab.copy())).truncated(rank)
            root = np.sqrt(s_r)
            a = u_r * root
        else:
            u_r, s_r, vt_r = svd(Matrix.wrap(lt @ slab)).truncated(rank)
            root = np.sqrt(s_r)
            a = np.linalg.solve(lt, u_r * root)
        b = root[:, None] * vt_r
        groups.append(GroupFactors(Matrix.wrap(a), Matrix.wrap(b), rank))
    return DecomposedLayer(granularity, tuple(groups), d, head_dim, n_heads)


def reconstruct(layer: DecomposedLayer) -> Matrix:
    """Concatenate per-group products a @ b back into a d x d_h*n matrix."""
    parts = [g.a.data @ g.b.data for g in layer.groups]
    return Matrix.wrap(np.concatenate(parts, axis=1))


def frobenius_error(layer: DecomposedLayer, w: Matrix) -> float:
    approx = reconstruct(layer)
    if approx.shape != w.shape:
        raise ValidationError(f"shape mismatch: {approx.shape} vs {w.shape}")
    return float(np.linalg.norm(approx.data - w.data))
