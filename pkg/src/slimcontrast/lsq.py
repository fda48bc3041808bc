"""Closed-form least-squares analysis of a shared (width-sliced) linear probe.

A single probe layer shared between the full network and a sub-network is
only optimal for both when the feature matrices satisfy a block-matrix
condition. This module solves the two regression problems in closed form,
builds the inverse Gram matrix blockwise via the Schur complement, and
measures how far given inputs are from that optimality condition.

All computation is double precision; Gram matrices beyond the condition
bound are rejected rather than regularized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from slimcontrast.errors import IllConditionedError

DEFAULT_COND_LIMIT = 1e8


def _as2d(name: str, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2d matrix, got shape {a.shape}")
    return a


def _check_cond(name: str, gram: np.ndarray, limit: float) -> None:
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > limit:
        raise IllConditionedError(name, cond, limit)


@dataclass
class ProbeProblem:
    """Feature matrices, targets, and the column split of the probe analysis."""

    X: np.ndarray   # N x d, full-width features
    X1: np.ndarray  # N x d1, sub-width features
    T: np.ndarray   # N x C, targets
    d1: int
    cond_limit: float = DEFAULT_COND_LIMIT

    def __post_init__(self):
        self.X = _as2d("X", self.X)
        self.X1 = _as2d("X1", self.X1)
        self.T = _as2d("T", self.T)
        n, d = self.X.shape
        if not (1 <= self.d1 < d):
            raise ValueError(f"d1 must lie in [1, d-1]={d - 1}, got {self.d1}")
        if n < d:
            raise ValueError(f"need N >= d, got N={n}, d={d}")
        if self.X1.shape != (n, self.d1):
            raise ValueError(f"X1 must be ({n}, {self.d1}), got {self.X1.shape}")
        if self.T.shape[0] != n:
            raise ValueError(f"T must have {n} rows, got {self.T.shape[0]}")
        _check_cond("X^T X", self.X.T @ self.X, self.cond_limit)
        _check_cond("X1^T X1", self.X1.T @ self.X1, self.cond_limit)

    @property
    def X11(self) -> np.ndarray:
        return self.X[:, :self.d1]

    @property
    def X12(self) -> np.ndarray:
        return self.X[:, self.d1:]

    @property
    def d2(self) -> int:
        return self.X.shape[1] - self.d1


def fit_least_squares(X: np.ndarray, T: np.ndarray,
                      cond_limit: float = DEFAULT_COND_LIMIT) -> np.ndarray:
    """Unique minimizer of ||X theta - T||^2 via the normal equations."""
    X, T = _as2d("X", X), _as2d("T", T)
    if X.shape[0] != T.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but T has {T.shape[0]}")
    gram = X.T @ X
    _check_cond("X^T X", gram, cond_limit)
    return np.linalg.solve(gram, X.T @ T)


def squared_loss(X: np.ndarray, theta: np.ndarray, T: np.ndarray) -> float:
    return float(np.sum((X @ theta - T) ** 2))


@dataclass
class BlockInverse:
    """The four blocks of the inverse Gram matrix of [X11, X12]."""

    B11: np.ndarray
    B12: np.ndarray
    B21: np.ndarray
    B22: np.ndarray

    @property
    def assembled(self) -> np.ndarray:
        return np.block([[self.B11, self.B12], [self.B21, self.B22]])


def block_inverse(X: np.ndarray, d1: int,
                  cond_limit: float = DEFAULT_COND_LIMIT) -> BlockInverse:
    """Blockwise inverse of X^T X with B11 as the inverse Schur complement.

    B11 = (X11^T X11 - X11^T X12 (X12^T X12)^-1 X12^T X11)^-1, the
    off-diagonal blocks follow from the zero blocks of the identity, and
    B22 closes the remaining identity row.
    """
    X = _as2d("X", X)
    d = X.shape[1]
    if not (1 <= d1 < d):
        raise ValueError(f"d1 must lie in [1, d-1]={d - 1}, got {d1}")
    X11, X12 = X[:, :d1], X[:, d1:]
    g11 = X11.T @ X11
    g12 = X11.T @ X12
    g22 = X12.T @ X12
    _check_cond("X^T X", X.T @ X, cond_limit)
    _check_cond("X12^T X12", g22, cond_limit)
    g22_inv = np.linalg.inv(g22)
    schur = g11 - g12 @ g22_inv @ g12.T
    B11 = np.linalg.inv(schur)
    B21 = -g22_inv @ g12.T @ B11
    B12 = -B11 @ g12 @ g22_inv
    B22 = g22_inv @ (np.eye(X12.shape[1]) - g12.T @ B12)
    return BlockInverse(B11, B12, B21, B22)


def identity_residuals(X: np.ndarray, d1: int, blocks: BlockInverse) -> dict[str, float]:
    """Max-abs residuals of the four block identities defining the inverse."""
    X = _as2d("X", X)
    X11, X12 = X[:, :d1], X[:, d1:]
    g11, g12, g22 = X11.T @ X11, X11.T @ X12, X12.T @ X12
    i1 = np.eye(d1)
    i2 = np.eye(X12.shape[1])
    return {
        "upper_left": float(np.abs(g11 @ blocks.B11 + g12 @ blocks.B21 - i1).max()),
        "upper_right": float(np.abs(g11 @ blocks.B12 + g12 @ blocks.B22).max()),
        "lower_left": float(np.abs(g12.T @ blocks.B11 + g22 @ blocks.B21).max()),
        "lower_right": float(np.abs(g12.T @ blocks.B12 + g22 @ blocks.B22 - i2).max()),
    }


@dataclass
class ConditionCheck:
    """Shared-probe optimality condition: left/right sides and their gap."""

    residual: np.ndarray       # L - R, elementwise
    mean_abs: float            # mean |L - R| over all entries
    total_abs: float           # sum  |L - R|
    projector_form_gap: float  # max-abs gap between the two closed forms of L
    left: np.ndarray
    right: np.ndarray


def shared_probe_condition(X: np.ndarray, X1: np.ndarray, T: np.ndarray, d1: int,
                           cond_limit: float = DEFAULT_COND_LIMIT,
                           internal_tol: float = 1e-8) -> ConditionCheck:
    """Gap between the shared-head slice and the standalone sub-width solution.

    Left side: the first-d1 rows of the full-problem solution, written via
    the block inverse; right side: the direct sub-problem solution
    (X1^T X1)^-1 X1^T T. The two printed forms of the left side must agree;
    their disagreement beyond ``internal_tol`` signals numerical breakdown.
    """
    X, X1, T = _as2d("X", X), _as2d("X1", X1), _as2d("T", T)
    if X1.shape[1] != d1:
        raise ValueError(f"X1 has {X1.shape[1]} columns but d1={d1}")
    if not (X.shape[0] == X1.shape[0] == T.shape[0]):
        raise ValueError("X, X1, T must have the same number of rows")
    X11, X12 = X[:, :d1], X[:, d1:]
    blocks = block_inverse(X, d1, cond_limit)
    g22_inv = np.linalg.inv(X12.T @ X12)
    left = blocks.B11 @ (X11.T - X11.T @ X12 @ g22_inv @ X12.T) @ T
    left_sum_form = (blocks.B11 @ X11.T + blocks.B12 @ X12.T) @ T
    gap = float(np.abs(left - left_sum_form).max())
    if gap > internal_tol:
        raise IllConditionedError("shared-probe left-side forms disagree", gap, internal_tol)
    right = fit_least_squares(X1, T, cond_limit)
    residual = left - right
    return ConditionCheck(
        residual=residual,
        mean_abs=float(np.abs(residual).mean()),
        total_abs=float(np.abs(residual).sum()),
        projector_form_gap=gap,
        left=left,
        right=right,
    )


@dataclass
class ProbeLossComparison:
    """Total squared losses of independent-per-width vs shared probe heads."""

    switchable_total: float
    shared_total: float
    full_loss: float
    sub_loss_switchable: float
    sub_loss_shared: float
    condition_mean_abs: float

    @property
    def switchable_wins(self) -> bool:
        return self.switchable_total < self.shared_total


def probe_loss_comparison(X: np.ndarray, X1: np.ndarray, T: np.ndarray, d1: int,
                          mode: str = "induced",
                          cond_limit: float = DEFAULT_COND_LIMIT) -> ProbeLossComparison:
    """Compare independent per-width heads against one shared sliced head.

    ``induced``: the shared head solves the full-width problem exactly and
    its first-d1 rows are evaluated on the sub-width problem. ``joint``:
    the shared head minimizes the sum of both residuals (what gradient
    training of a shared head optimizes), solved as one stacked
    least-squares problem.
    """
    X, X1, T = _as2d("X", X), _as2d("X1", X1), _as2d("T", T)
    theta_full = fit_least_squares(X, T, cond_limit)
    theta_sub = fit_least_squares(X1, T, cond_limit)
    full_loss = squared_loss(X, theta_full, T)
    switchable_sub = squared_loss(X1, theta_sub, T)

    if mode == "induced":
        shared_full = full_loss
        shared_sub = squared_loss(X1, theta_full[:d1], T)
    elif mode == "joint":
        d = X.shape[1]
        stacked = np.vstack([X, np.hstack([X1, np.zeros((X1.shape[0], d - d1))])])
        targets = np.vstack([T, T])
        theta_joint = fit_least_squares(stacked, targets, cond_limit)
        shared_full = squared_loss(X, theta_joint, T)
        shared_sub = squared_loss(X1, theta_joint[:d1], T)
    else:
        raise ValueError(f"unknown comparison mode {mode!r}")

    condition = shared_probe_condition(X, X1, T, d1, cond_limit)
    return ProbeLossComparison(
        switchable_total=full_loss + switchable_sub,
        shared_total=shared_full + shared_sub,
        full_loss=full_loss,
        sub_loss_switchable=switchable_sub,
        sub_loss_shared=shared_sub,
        condition_mean_abs=condition.mean_abs,
    )


def random_problem(N: int, d: int, d1: int, C: int, seed: int,
                   cond_limit: float = DEFAULT_COND_LIMIT) -> ProbeProblem:
    """Generic Gaussian instance; redraws on the (rare) ill-conditioned sample."""
    rng = np.random.default_rng(seed)
    for _ in range(16):
        X = rng.standard_normal((N, d))
        X1 = rng.standard_normal((N, d1))
        T = rng.standard_normal((N, C))
        try:
            return ProbeProblem(X, X1, T, d1, cond_limit)
        except IllConditionedError:
            continue
    raise IllConditionedError("random_problem gave up after 16 redraws", float("inf"), cond_limit)


def orthogonal_block_problem(N: int, d1: int, d2: int, C: int, seed: int) -> ProbeProblem:
    """Synthetic control satisfying the shared-probe condition by construction.

    X11 and X12 live on disjoint row supports, so the cross Gram block
    X11^T X12 is exactly zero, and X1 equals X11.
    """
    if N < 2 * max(d1, d2):
        raise ValueError("need N >= 2*max(d1, d2) for invertible half-support Grams")
    rng = np.random.default_rng(seed)
    half = N // 2
    X = np.zeros((N, d1 + d2))
    X[:half, :d1] = rng.standard_normal((half, d1))
    X[half:, d1:] = rng.standard_normal((N - half, d2))
    T = rng.standard_normal((N, C))
    return ProbeProblem(X, X[:, :d1].copy(), T, d1)


@dataclass
class VerifySummary:
    instances: int
    max_identity_residual: float
    max_assembled_error: float
    max_schur_vs_direct: float
    max_solution_form_gap: float
    control_residual: float
    min_generic_mean_abs: float

    def lines(self) -> list[str]:
        return [
            f"instances checked:              {self.instances}",
            f"block identity residual (max):  {self.max_identity_residual:.3e}",
            f"assembled inverse error (max):  {self.max_assembled_error:.3e}",
            f"schur B11 vs direct (max):      {self.max_schur_vs_direct:.3e}",
            f"solution form gap (max):        {self.max_solution_form_gap:.3e}",
            f"orthogonal control |L-R| mean:  {self.control_residual:.3e}",
            f"generic |L-R| mean (min):       {self.min_generic_mean_abs:.3e}",
        ]


def verify_suite(instances: int = 100, N: int = 64, d: int = 16, d1: int = 8,
                 C: int = 10, seed: int = 0) -> VerifySummary:
    """Run the full closed-form verification battery on random instances."""
    max_identity = max_assembled = max_schur = max_gap = 0.0
    min_generic = float("inf")
    for i in range(instances):
        prob = random_problem(N, d, d1, C, seed + i)
        blocks = block_inverse(prob.X, d1)
        res = identity_residuals(prob.X, d1, blocks)
        max_identity = max(max_identity, *res.values())
        direct = np.linalg.inv(prob.X.T @ prob.X)
        max_assembled = max(max_assembled, float(np.abs(blocks.assembled - direct).max()))
        max_schur = max(max_schur, float(np.abs(blocks.B11 - direct[:d1, :d1]).max()))
        check = shared_probe_condition(prob.X, prob.X1, prob.T, d1)
        max_gap = max(max_gap, check.projector_form_gap)
        min_generic = min(min_generic, check.mean_abs)
    control = orthogonal_block_problem(N, d1, d - d1, C, seed)
    control_check = shared_probe_condition(control.X, control.X1, control.T, d1)
    return VerifySummary(
        instances=instances,
        max_identity_residual=max_identity,
        max_assembled_error=max_assembled,
        max_schur_vs_direct=max_schur,
        max_solution_form_gap=max_gap,
        control_residual=control_check.mean_abs,
        min_generic_mean_abs=min_generic,
    )
