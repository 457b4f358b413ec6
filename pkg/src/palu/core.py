"""Dense matrix core: the Matrix carrier plus matmul, SVD, Cholesky,
Hadamard construction, and counter-based seeded random matrices.

Everything here is pure and operates on 64-bit floats. Matrix values are
immutable after construction, so they can be shared freely across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

_JACOBI_MAX_SWEEPS = 60
_JACOBI_TOL = 1e-12


class Matrix:
    """Immutable dense 2-D array of float64, row-major.

    Construction validates that the payload is two-dimensional, non-empty
    and finite. The underlying ndarray is exposed read-only via ``.data``.
    """

    __slots__ = ("data",)

    def __init__(self, data, *, _own: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _own:
            arr = np.array(arr, dtype=np.float64, order="C", copy=True)
        else:
            arr = np.ascontiguousarray(arr)
        if arr.ndim != 2:
            raise ValidationError(f"Matrix requires a 2-D payload, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"Matrix dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("Matrix entries must be finite (found NaN or Inf)")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Matrix":
        """Take ownership of a freshly computed array (no defensive copy)."""
        return cls(arr, _own=True)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def t(self) -> "Matrix":
        return Matrix.wrap(self.data.T.copy())

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __setattr__(self, name, value):
        raise AttributeError("Matrix is immutable")

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


def identity(n: int) -> Matrix:
    return Matrix.wrap(np.eye(n))


@dataclass(frozen=True)
class SvdResult:
    """Full SVD ``m = u @ diag(singular_values) @ vt``.

    ``singular_values`` is non-increasing and non-negative; ``u`` has
    orthonormal columns and ``vt`` orthonormal rows.
    """

    u: Matrix
    singular_values: np.ndarray
    vt: Matrix

    def truncated(self, rank: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Leading ``rank`` components as raw arrays (u_r, sigma_r, vt_r)."""
        return (
            self.u.data[:, :rank],
            self.singular_values[:rank],
            self.vt.data[:rank, :],
        )

    def reconstruct(self) -> Matrix:
        return Matrix.wrap((self.u.data * self.singular_values) @ self.vt.data)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with shape validation."""
    if a.cols != b.rows:
        raise ValidationError(
            f"matmul dimension mismatch: {a.rows}x{a.cols} times {b.rows}x{b.cols}"
        )
    return Matrix.wrap(a.data @ b.data)


def transpose(a: Matrix) -> Matrix:
    return a.t()


def frobenius(arr: np.ndarray) -> float:
    return float(np.sqrt(np.sum(arr * arr)))


def _complete_basis(u: np.ndarray, degenerate: list[int]) -> None:
    """Fill near-zero columns of ``u`` with unit vectors orthogonal to the rest."""
    m = u.shape[0]
    good = [j for j in range(u.shape[1]) if j not in set(degenerate)]
    filled: list[int] = []
    for j in degenerate:
        for cand in range(m):
            e = np.zeros(m)
            e[cand] = 1.0
            for k in good + filled:
                e -= (u[:, k] @ e) * u[:, k]
            norm = np.linalg.norm(e)
            if norm > 0.5:
                u[:, j] = e / norm
                filled.append(j)
                break
        else:
            raise NumericalError("could not complete an orthonormal basis for U")


def _round_robin_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint column pairs covering
    every pair exactly once."""
    players = list(range(n)) + ([n] if n % 2 else [])
    size = len(players)
    rounds = []
    order = players[:]
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            a, b = order[i], order[size - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        order = [order[0]] + [order[-1]] + order[1:-1]
    return rounds


def svd(m: Matrix) -> SvdResult:
    """Full SVD via one-sided Jacobi rotations.

    Column pairs follow a fixed round-robin schedule; the pairs within a
    round are disjoint, so each round rotates them all at once. Sweeps
    repeat until every off-diagonal rotation falls below 1e-12 (relative),
    with a hard cap of 60 sweeps. Dependency-free and accurate down to
    tiny singular values.

    Sign convention: the largest-magnitude entry of each left singular
    vector is forced non-negative, so results are byte-reproducible.
    """
    a = m.data
    transposed = a.shape[0] < a.shape[1]
    # work on rows (the original columns) so every vector is contiguous
    gt = (a.T if transposed else a).T.copy()
    cols = gt.shape[0]
    vt = np.eye(cols)
    # inner products below this floor are noise between numerically
    # zero columns; never rotate on them
    scale2 = float(np.max(np.sum(gt * gt, axis=1))) if cols else 0.0
    abs_floor = (np.finfo(np.float64).eps ** 2) * scale2
    rounds = _round_robin_rounds(cols)

    converged = False
    sweeps = 0
    for sweeps in range(1, _JACOBI_MAX_SWEEPS + 1):
        rotated = False
        for ps, qs in rounds:
            gp = gt[ps]
            gq = gt[qs]
            apq = np.einsum("ij,ij->i", gp, gq)
            app = np.einsum("ij,ij->i", gp, gp)
            aqq = np.einsum("ij,ij->i", gq, gq)
            need = (np.abs(apq) > abs_floor) & (
                np.abs(apq) > _JACOBI_TOL * np.sqrt(app * aqq)
            )
            if not np.any(need):
                continue
            rotated = True
            p_sel, q_sel = ps[need], qs[need]
            apq_s, app_s, aqq_s = apq[need], app[need], aqq[need]
            tau = (aqq_s - app_s) / (2.0 * apq_s)
            # copysign semantics: tau of exactly zero still rotates
            t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = 1.0 / np.hypot(1.0, t)
            s = (c * t)[:, None]
            c = c[:, None]
            gp_s, gq_s = gt[p_sel], gt[q_sel]
            gt[p_sel] = c * gp_s - s * gq_s
            gt[q_sel] = s * gp_s + c * gq_s
            vp_s, vq_s = vt[p_sel], vt[q_sel]
            vt[p_sel] = c * vp_s - s * vq_s
            vt[q_sel] = s * vp_s + c * vq_s
        if not rotated:
            converged = True
            break
    if not converged:
        raise NumericalError(
            f"Jacobi SVD did not converge within {_JACOBI_MAX_SWEEPS} sweeps "
            f"(completed {sweeps})"
        )

    g = gt.T
    v = vt.T
    sigma = np.sqrt(np.sum(g * g, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]

    u = np.zeros_like(g)
    smax = sigma[0] if sigma.size else 0.0
    cutoff = smax * g.shape[0] * np.finfo(np.float64).eps
    degenerate = []
    for j in range(cols):
        if sigma[j] > cutoff and sigma[j] > 0.0:
            u[:, j] = g[:, j] / sigma[j]
        else:
            degenerate.append(j)
    if degenerate:
        _complete_basis(u, degenerate)

    if transposed:
        left, right_t = v, u.T
    else:
        left, right_t = u, v.T

    # resolve sign ambiguity per singular pair
    left = left.copy()
    right_t = right_t.copy()
    for k in range(left.shape[1]):
        idx = int(np.argmax(np.abs(left[:, k])))
        if left[idx, k] < 0.0:
            left[:, k] = -left[:, k]
            right_t[k, :] = -right_t[k, :]

    sigma.setflags(write=False)
    return SvdResult(Matrix.wrap(left), sigma, Matrix.wrap(right_t))


def cholesky(g: Matrix, jitter: float = 0.0) -> Matrix:
    """Lower-triangular L with ``L @ L.T == g + jitter * I``.

    Raises NumericalError advising a larger jitter if the (jittered)
    matrix is not positive definite.
    """
    if g.rows != g.cols:
        raise ValidationError(f"cholesky requires a square matrix, got {g.rows}x{g.cols}")
    a = g.data
    scale = float(np.max(np.abs(a))) or 1.0
    if float(np.max(np.abs(a - a.T))) > 1e-9 * scale:
        raise ValidationError("cholesky requires a symmetric matrix")
    shifted = a + jitter * np.eye(g.rows)
    try:
        low = np.linalg.cholesky(shifted)
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"matrix not positive definite with jitter={jitter!r}; increase jitter"
        ) from None
    return Matrix.wrap(low)


def _sylvester(block: int) -> np.ndarray:
    h = np.array([[1.0]])
    size = 1
    while size < block:
        h = np.block([[h, h], [h, -h]])
        size *= 2
    return h / math.sqrt(block)


def hadamard(dim: int) -> Matrix:
    """Orthogonal Walsh-Hadamard matrix of size ``dim``.

    Powers of two use the Sylvester construction scaled by 1/sqrt(dim).
    Other sizes fall back to a block-diagonal composition over the binary
    decomposition of ``dim`` (e.g. 12 -> 8 (+) 4), largest block first;
    each block is orthogonal, so the whole matrix is.
    """
    if dim <= 0:
        raise ValidationError(f"hadamard dimension must be positive, got {dim}")
    blocks = []
    remaining = dim
    while remaining:
        p = 1 << (remaining.bit_length() - 1)
        blocks.append(_sylvester(p))
        remaining -= p
    out = np.zeros((dim, dim))
    at = 0
    for b in blocks:
        n = b.shape[0]
        out[at : at + n, at : at + n] = b
        at += n
    return Matrix.wrap(out)


_MIX_INC = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_ROW_SALT = np.uint64(0xD6E8FEB86659FD93)
_COL_SALT = np.uint64(0xA5A5A5A5B4B4B4B5)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _MIX_INC
    z = (z ^ (z >> np.uint64(30))) * _MIX_A
    z = (z ^ (z >> np.uint64(27))) * _MIX_B
    return z ^ (z >> np.uint64(31))


def _cell_uniform(seed: int, rows: int, cols: int, stream: int = 0) -> np.ndarray:
    """Uniform [0,1) values keyed by (seed, stream, row, col).

    Counter-based: each cell hashes its own coordinates, so the result is
    independent of fill order and identical across runs and platforms.
    """
    base = np.uint64((seed ^ (stream * 0x517CC1B727220A95)) & 0xFFFFFFFFFFFFFFFF)
    r = (np.arange(rows, dtype=np.uint64) + np.uint64(1)) * _ROW_SALT
    c = (np.arange(cols, dtype=np.uint64) + np.uint64(1)) * _COL_SALT
    state = _splitmix64(base ^ r[:, None]) ^ c[None, :]
    h = _splitmix64(state)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def random_matrix(rows: int, cols: int, seed: int, spectrum: float | None = None) -> Matrix:
    """Deterministic seeded matrix, entries uniform on [-1, 1).

    With ``spectrum`` set to a decay gamma in (0, 1], the matrix is built
    as U diag(gamma^0, gamma^1, ...) V^T from seeded orthogonal factors,
    so its singular values are exactly that geometric sequence.
    """
    if rows < 1 or cols < 1:
        raise ValidationError(f"random_matrix dimensions must be positive, got {rows}x{cols}")
    if spectrum is None:
        vals = 2.0 * _cell_uniform(seed, rows, cols) - 1.0
        return Matrix.wrap(vals)
    if not (0.0 < spectrum <= 1.0):
        raise ValidationError(f"spectrum decay must lie in (0, 1], got {spectrum}")
    base = Matrix.wrap(2.0 * _cell_uniform(seed, rows, cols, stream=1) - 1.0)
    factors = svd(base)
    k = min(rows, cols)
    sv = spectrum ** np.arange(k, dtype=np.float64)
    built = (factors.u.data * sv) @ factors.vt.data
    return Matrix.wrap(built)
