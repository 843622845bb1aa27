"""Sparse solvers: ISTA/FISTA for the LASSO, OMP, and coherence diagnostics.

All solvers work on real vectors through :class:`LinearOperator`. Complex
measurement models are realified before they get here.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class LinearOperator:
    """Matrix-free real linear map ``R^in_dim -> R^out_dim`` with its adjoint.

    ``apply`` and ``apply_adjoint`` must accept either a vector or a 2-D array
    whose columns are independent inputs. ``matrix`` holds the dense
    realisation when one exists; ``gram`` optionally caches ``A^T A``.
    """

    def __init__(
        self,
        apply: Callable[[np.ndarray], np.ndarray],
        apply_adjoint: Callable[[np.ndarray], np.ndarray],
        in_dim: int,
        out_dim: int,
        matrix: np.ndarray | None = None,
        gram: np.ndarray | None = None,
    ):
        self._apply = apply
        self._adjoint = apply_adjoint
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.matrix = matrix
        self.gram = gram

    @classmethod
    def from_matrix(cls, a, with_gram: bool = False) -> LinearOperator:
        a = np.asarray(a, dtype=float)
        if a.ndim != 2:
            raise ValueError("expected a 2-D matrix")
        return cls(
            a.__matmul__, a.T.__matmul__, a.shape[1], a.shape[0],
            matrix=a, gram=a.T @ a if with_gram else None,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    def apply(self, x):
        return self._apply(x)

    def apply_adjoint(self, y):
        return self._adjoint(y)

    def __matmul__(self, x):
        return self._apply(x)

    def compose(self, inner: LinearOperator) -> LinearOperator:
        """``self @ inner`` without materialising the product."""
        if inner.out_dim != self.in_dim:
            raise ValueError(f"cannot compose {self.shape} with {inner.shape}")
        return LinearOperator(
            lambda x: self._apply(inner.apply(x)),
            lambda y: inner.apply_adjoint(self._adjoint(y)),
            inner.in_dim, self.out_dim,
        )

    def column(self, j: int) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix[:, j]
        e = np.zeros(self.in_dim)
        e[j] = 1.0
        return self._apply(e)

    def to_dense(self) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix
        return self._apply(np.eye(self.in_dim))


def adjoint_mismatch(op: LinearOperator, rng: np.random.Generator) -> float:
    """Relative gap between <Ax, y> and <x, A^T y> for one random pair."""
    x = rng.standard_normal(op.in_dim)
    y = rng.standard_normal(op.out_dim)
    lhs = float(np.dot(op.apply(x), y))
    rhs = float(np.dot(x, op.apply_adjoint(y)))
    scale = np.linalg.norm(op.apply(x)) * np.linalg.norm(y)
    return abs(lhs - rhs) / max(scale, np.finfo(float).tiny)


@dataclass
class SparseCode:
    coefficients: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients)

    @property
    def sparsity(self) -> int:
        return int(np.count_nonzero(self.coefficients))


@dataclass
class SolveResult:
    code: SparseCode
    trace: np.ndarray  # objective per iteration, trace[0] at the starting point
    step: float = 0.0
    iterations: int = 0
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return self.code.coefficients


def soft_threshold(v, tau: float) -> np.ndarray:
    """Elementwise ``sign(v) * max(|v| - tau, 0)``."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def lipschitz_estimate(op: LinearOperator, n_iter: int = 30, margin: float = 1.05) -> float:
    """Largest eigenvalue of ``A^T A`` by power iteration, times a safety margin."""
    v = np.random.default_rng(0).standard_normal(op.in_dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        w = op.gram @ v if op.gram is not None else op.apply_adjoint(op.apply(v))
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return margin * lam


def lasso_objective(op: LinearOperator, y, s, lambda_reg: float) -> float:
    r = op.apply(s) - y
    return 0.5 * float(r @ r) + lambda_reg * float(np.abs(s).sum())


def _check_problem(op: LinearOperator, y, lambda_reg):
    y = np.asarray(y, dtype=float)
    if y.shape[0] != op.out_dim:
        raise ValueError(f"y has length {y.shape[0]}, operator expects {op.out_dim}")
    if not lambda_reg > 0:
        raise ValueError("lambda_reg must be positive")
    return y


def _proximal_gradient(op, y, lambda_reg, iters, step, x0, accelerate, restart, tol):
    y = _check_problem(op, y, lambda_reg)
    if step is None:
        lip = lipschitz_estimate(op)
        step = 1.0 / lip if lip > 0 else 1.0
    x = np.zeros(op.in_dim) if x0 is None else np.array(x0, dtype=float)
    ax = op.apply(x)
    f = 0.5 * float((ax - y) @ (ax - y)) + lambda_reg * float(np.abs(x).sum())
    trace = [f]
    best_x, best_f = x.copy(), f
    z, az, t = x, ax, 1.0
    k = 0
    for k in range(1, iters + 1):
        grad = op.apply_adjoint(az - y)
        x_new = soft_threshold(z - step * grad, step * lambda_reg)
        ax_new = op.apply(x_new)
        r = ax_new - y
        f = 0.5 * float(r @ r) + lambda_reg * float(np.abs(x_new).sum())
        trace.append(f)
        if f < best_f:
            best_x, best_f = x_new, f
        dx = x_new - x
        if accelerate:
            # gradient-based adaptive restart
            if restart and float((z - x_new) @ dx) > 0:
                t = 1.0
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            beta = (t - 1.0) / t_new
            z = x_new + beta * dx
            az = ax_new + beta * (ax_new - ax)
            t = t_new
        else:
            z, az = x_new, ax_new
        x, ax = x_new, ax_new
        if tol and np.linalg.norm(dx) <= tol * max(1.0, np.linalg.norm(x)):
            break
    return SolveResult(SparseCode(best_x.copy()), np.asarray(trace), step, k)


def debias(op: LinearOperator, y, s) -> np.ndarray:
    """Least-squares refit of ``s`` restricted to its support."""
    s = np.asarray(s, dtype=float)
    supp = np.flatnonzero(s)
    out = np.zeros_like(s)
    if supp.size == 0:
        return out
    cols = np.column_stack([op.column(j) for j in supp])
    coef, *_ = np.linalg.lstsq(cols, np.asarray(y, dtype=float), rcond=None)
    out[supp] = coef
    return out


def fista(
    op: LinearOperator,
    y,
    lambda_reg: float,
    iters: int = 500,
    step: float | None = None,
    x0=None,
    *,
    restart: bool = True,
    tol: float = 0.0,
    debiased: bool = False,
) -> SolveResult:
    """Minimise ``0.5 * ||A s - y||^2 + lambda_reg * ||s||_1`` with FISTA.

    Parameters
    ----------
    op : LinearOperator
        Sensing operator ``A``.
    y : array
        Data vector of length ``op.out_dim``.
    lambda_reg : float
        l1 weight, strictly positive.
    iters : int
        Maximum number of iterations.
    step : float, optional
        Gradient step. Defaults to ``1 / L`` with ``L`` from 30 power
        iterations on ``A^T A`` inflated by 5%.
    x0 : array, optional
        Warm start. The returned iterate never has a larger objective.
    restart : bool
        Reset the momentum whenever it points uphill (adaptive restart).
    tol : float
        Stop once ``||s_k+1 - s_k|| <= tol * max(1, ||s_k+1||)``; 0 runs all iterations.
    debiased : bool
        Refit the coefficients by least squares on the final support. The
        returned trace still refers to the undebiased iterates.

    Returns
    -------
    SolveResult
        Lowest-objective iterate visited, plus the per-iteration objective trace.
    """
    res = _proximal_gradient(op, y, lambda_reg, iters, step, x0, True, restart, tol)
    if debiased:
        res.code = SparseCode(debias(op, y, res.x))
    return res


def ista(op, y, lambda_reg: float, iters: int = 500, step: float | None = None,
         x0=None, *, tol: float = 0.0) -> SolveResult:
    """Plain proximal gradient; the objective trace is non-increasing."""
    return _proximal_gradient(op, y, lambda_reg, iters, step, x0, False, False, tol)


def fista_gram(gram, aty, lambda_reg, iters, step=None, s0=None, *, tol=0.0, restart=True):
    """Batched FISTA on the normal equations.

    Solves ``min_s 0.5 s^T G s - b^T s + lambda_reg ||s||_1`` independently for
    every column of ``aty`` (``b = A^T y``, ``G = A^T A``). The constant
    ``0.5 ||y||^2`` is left out of the returned objectives. ``gram`` may be
    the matrix ``G`` or a callable computing ``G @ v``.

    Returns ``(S, objective)`` where each column of ``S`` is the best iterate
    for that column and ``objective`` its smooth-plus-l1 value.
    """
    b = np.asarray(aty, dtype=float)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    g_apply = gram if callable(gram) else gram.__matmul__
    if step is None:
        lip = lipschitz_estimate(LinearOperator(g_apply, g_apply, b.shape[0], b.shape[0]))
        step = 1.0 / lip if lip > 0 else 1.0
    x = np.zeros_like(b) if s0 is None else np.array(s0, dtype=float).reshape(b.shape)

    def objective(s, gs):
        return 0.5 * np.einsum("ij,ij->j", s, gs) - np.einsum("ij,ij->j", b, s) \
            + lambda_reg * np.abs(s).sum(axis=0)

    gx = g_apply(x)
    best = x.copy()
    best_f = objective(x, gx)
    z, gz = x, gx
    t = np.ones(b.shape[1])
    for _ in range(iters):
        x_new = z - step * (gz - b)
        x_new = np.sign(x_new) * np.maximum(np.abs(x_new) - step * lambda_reg, 0.0)
        gx_new = g_apply(x_new)
        f = objective(x_new, gx_new)
        better = f < best_f
        if better.any():
            best[:, better] = x_new[:, better]
            best_f = np.where(better, f, best_f)
        dx = x_new - x
        if restart:
            t = np.where(np.einsum("ij,ij->j", z - x_new, dx) > 0, 1.0, t)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_new
        z = x_new + beta * dx
        gz = gx_new + beta * (gx_new - gx)
        x, gx, t = x_new, gx_new, t_new
        if tol and np.all(np.linalg.norm(dx, axis=0) <= tol * np.maximum(1.0, np.linalg.norm(x, axis=0))):
            break
    if squeeze:
        return best[:, 0], float(best_f[0])
    return best, best_f


class RankDeficientWarning(RuntimeWarning):
    pass


def omp(op: LinearOperator, y, k_max: int, residual_tol: float = 0.0) -> SolveResult:
    """Orthogonal matching pursuit.

    Each step adds the column most correlated with the residual (ties go to
    the lowest index), refits all active coefficients by least squares and
    updates the residual. Stops after ``k_max`` atoms, once the residual norm
    drops to ``residual_tol``, or when the residual stops decreasing.

    If a new atom makes the active set rank deficient the step is undone, a
    :class:`RankDeficientWarning` is issued and ``status`` is set to
    ``"rank_deficient"``. The trace holds residual norms.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[0] != op.out_dim:
        raise ValueError("dimension mismatch")
    if not 0 <= k_max <= op.in_dim:
        raise ValueError("k_max must lie in [0, J]")
    if op.matrix is not None:
        norms = np.linalg.norm(op.matrix, axis=0)
        if np.max(np.abs(norms - 1.0)) > 1e-8:
            raise ValueError("OMP needs unit-norm columns")
    coef = np.zeros(op.in_dim)
    active: list[int] = []
    cols = np.zeros((op.out_dim, 0))
    residual = y.copy()
    rnorm = float(np.linalg.norm(residual))
    trace = [rnorm]
    status = "ok"
    sol = np.zeros(0)
    while len(active) < k_max and rnorm > residual_tol:
        corr = np.abs(op.apply_adjoint(residual))
        corr[active] = -1.0
        j = int(np.argmax(corr))  # first maximum = lowest index
        trial = np.column_stack([cols, op.column(j)])
        sv = np.linalg.svd(trial, compute_uv=False)
        if sv[-1] <= 1e-10 * sv[0]:
            status = "rank_deficient"
            warnings.warn(f"OMP: atom {j} makes the active set rank deficient; stopping",
                          RankDeficientWarning, stacklevel=2)
            break
        trial_sol, *_ = np.linalg.lstsq(trial, y, rcond=None)
        trial_res = y - trial @ trial_sol
        trial_norm = float(np.linalg.norm(trial_res))
        if trial_norm >= rnorm:
            status = "stalled"
            break
        active.append(j)
        cols, sol, residual, rnorm = trial, trial_sol, trial_res, trial_norm
        trace.append(rnorm)
    coef[active] = sol
    return SolveResult(SparseCode(coef), np.asarray(trace), iterations=len(active),
                       status=status, extra={"order": list(active)})


def mutual_coherence(d, tol: float = 1e-8) -> float:
    """Largest ``|<d_i, d_j>|`` over distinct unit-norm columns."""
    d = np.asarray(d, dtype=float)
    norms = np.linalg.norm(d, axis=0)
    if np.max(np.abs(norms - 1.0)) > tol:
        raise ValueError("columns must have unit norm")
    if d.shape[1] < 2:
        return 0.0
    g = np.abs(d.T @ d)
    np.fill_diagonal(g, 0.0)
    return float(min(g.max(), 1.0))


def uniqueness_bound(coherence: float) -> float:
    """Sparsity below which a representation is the unique sparsest one.

    Returns ``0.5 * (1 + 1/coherence)``; ``math.inf`` for an orthogonal
    dictionary (coherence 0).
    """
    if coherence == 0:
        return math.inf
    if not 0 < coherence <= 1:
        raise ValueError("coherence must lie in [0, 1]")
    return 0.5 * (1.0 + 1.0 / coherence)


def write_trace_csv(path, trace, header=("iteration", "objective")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
