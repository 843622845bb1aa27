"""Back-propagation and alternating least squares with a sparse-coding prior.

Everything here works in contrast units: with ``K_D = G_D c`` and
``K_S = G_S c`` (``c`` the lambda scale of the scene) the products
``G_D Lam`` and ``G_S Lam`` become ``K_D diag(x)`` and ``K_S diag(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dictionaries import Dictionary
from .forward import GreensOperators, ScatteringScene, forward_solve, incident_fields
from .sparse import SparseCode, fista_gram
from .tensors_io import RunConfig


@dataclass
class InversionResult:
    contrast_estimate: np.ndarray
    cost_trace: list[dict]  # one row per iteration, row 0 is the starting point
    iterations_run: int
    method: str
    e_total: np.ndarray | None = None
    sparse_code: SparseCode | None = None
    half_steps: list[dict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    fista_lambda: float | None = None


def cost_terms(greens: GreensOperators, lam, e_total, e_inc, e_meas):
    """Squared Frobenius norms of the state residual and the data residual."""
    lam = np.asarray(lam)
    state = e_total - greens.g_domain @ (lam[:, None] * e_total) - e_inc
    data = greens.g_measure @ (lam[:, None] * e_total) - e_meas
    return float(np.vdot(state, state).real), float(np.vdot(data, data).real)


def evaluate_cost(scene, greens, lambda_vec, e_total, e_inc, e_meas, alpha) -> float:
    """``alpha^2 ||(I - G_D Lam) E_t - E_i||^2 + (1 - alpha^2) ||G_S Lam E_t - E_s||^2``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    state, data = cost_terms(greens, lambda_vec, e_total, e_inc, e_meas)
    return alpha**2 * state + (1 - alpha**2) * data


def relative_error(x_hat, x_true) -> tuple[float, bool]:
    """``(||x_hat - x|| / ||x||, False)``; ``(||x_hat||, True)`` when ``x`` is zero."""
    x_hat = np.asarray(x_hat, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    if x_hat.shape != x_true.shape:
        raise ValueError("shape mismatch")
    nrm = np.linalg.norm(x_true)
    if nrm == 0:
        return float(np.linalg.norm(x_hat)), True
    return float(np.linalg.norm(x_hat - x_true) / nrm), False


def back_propagation_currents(greens: GreensOperators, e_meas) -> np.ndarray:
    """Induced currents ``J_p = gamma_p G_S^H e_p`` (``I x N_inc``).

    ``gamma_p`` is the least-squares scale making ``G_S J_p`` match ``e_p``.
    """
    gs = greens.g_measure
    back = gs.conj().T @ e_meas
    fwd = gs @ back
    num = np.einsum("ij,ij->j", fwd.conj(), e_meas)
    den = np.einsum("ij,ij->j", fwd.conj(), fwd).real
    gamma = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return gamma[None, :] * back


def invert_bp(scene: ScatteringScene, greens: GreensOperators, e_meas, e_inc=None) -> InversionResult:
    """Back-propagation estimate of the contrast.

    The total field is ``E_t = E_i + G_D J`` and each pixel's ``lam_i`` is the
    least-squares fit of ``J_pi = lam_i E_t,pi`` over incidences. The returned
    contrast is ``Re(lam / c)`` clipped at zero.
    """
    if e_inc is None:
        e_inc = incident_fields(scene)
    j = back_propagation_currents(greens, e_meas)
    e_tot = e_inc + greens.g_domain @ j
    den = np.sum(np.abs(e_tot) ** 2, axis=1)
    lam = np.sum(e_tot.conj() * j, axis=1) / np.where(den > 0, den, 1.0)
    x = np.maximum(scene.lambda_to_contrast(lam).real, 0.0)
    return InversionResult(x, [{"iteration": 0}], 0, "bp", e_total=e_tot)


class _LambdaStep:
    """The l1-regularised least-squares problem in ``s`` for fixed ``E_t``.

    With ``F_p = [a K_D diag(E_t,p); b K_S diag(E_t,p)]`` and
    ``h_p = [a (E_t,p - E_i,p); b E_s,p]`` (``a = alpha``,
    ``b = sqrt(1 - alpha^2)``) the cost is ``sum_p ||F_p D s - h_p||^2`` for
    real ``s``. Stacking real and imaginary parts turns this into a real
    least-squares problem whose normal equations are formed directly.
    """

    def __init__(self, kd, ks, q, atoms, alpha, e_tot, e_inc, e_meas):
        a2, b2 = alpha**2, 1 - alpha**2
        self.atoms = atoms
        # Re(F^H F) in pixel space; Q = a^2 K_D^H K_D + b^2 K_S^H K_S
        self.gx = (q * (e_tot.conj() @ e_tot.T)).real
        self.bx = np.sum(e_tot.conj() * (a2 * (kd.conj().T @ (e_tot - e_inc))
                                         + b2 * (ks.conj().T @ e_meas)), axis=1).real
        self.const = a2 * np.linalg.norm(e_tot - e_inc) ** 2 + b2 * np.linalg.norm(e_meas) ** 2
        self.aty = atoms.T @ self.bx

    def gram_apply(self, v):
        return self.atoms.T @ (self.gx @ (self.atoms @ v))

    def cost(self, s) -> float:
        """Weighted cost ``C`` at ``x = D s`` (the state fixed)."""
        x = self.atoms @ s
        return float(x @ self.gx @ x - 2 * self.bx @ x + self.const)


def _et_step(kd, ks, x, alpha, e_inc, e_meas):
    """Exact minimiser of the cost over ``E_t`` for fixed contrast ``x``."""
    n = kd.shape[0]
    a, b = alpha, math.sqrt(1 - alpha**2)
    stacked = np.vstack([a * (np.eye(n) - kd * x[None, :]), b * (ks * x[None, :])])
    rhs = np.vstack([a * e_inc, b * e_meas])
    q, r = scipy.linalg.qr(stacked, mode="economic", check_finite=False)
    return scipy.linalg.solve_triangular(r, q.conj().T @ rhs, check_finite=False)


def _weighted_cost(kd, ks, x, e_tot, e_inc, e_meas, alpha):
    state = e_tot - kd @ (x[:, None] * e_tot) - e_inc
    data = ks @ (x[:, None] * e_tot) - e_meas
    st = float(np.vdot(state, state).real)
    dt = float(np.vdot(data, data).real)
    return alpha**2 * st + (1 - alpha**2) * dt, st, dt


def invert_als_cs(
    scene: ScatteringScene,
    greens: GreensOperators,
    e_meas,
    e_inc,
    dictionary: Dictionary,
    config: RunConfig,
    *,
    initial_code=None,
    initial_total=None,
    rel_tol: float = 1e-6,
    patience: int = 3,
) -> InversionResult:
    """Alternating minimisation of the weighted state/data cost with a sparse contrast.

    Starts from back-propagation (contrast and total field) unless
    ``initial_code`` is given, in which case ``x = D s0`` and ``E_t`` is
    ``initial_total`` or the forward solution for ``x``. Each iteration then

    1. replaces ``E_t`` by the exact least-squares minimiser for the current
       contrast (per incidence, one shared QR factorisation);
    2. re-codes the contrast: FISTA on the realified problem in ``s`` with
       ``x = D s``, warm-started at the previous code, weight
       ``config.fista_lambda`` (``0`` picks ``0.01 max|D~^T y|`` at the first
       pass and keeps it).

    Half-step records hold the cost ``C`` and the penalised objective
    ``C + 2 lambda ||s||_1`` (the FISTA objective times two plus a constant),
    plus monotonicity flags. Iteration stops early once ``C`` changes by less
    than ``rel_tol`` (relative) over ``patience`` iterations. The returned
    contrast is ``max(D s, 0)``.
    """
    alpha = config.alpha
    atoms = dictionary.atoms
    if atoms.shape[0] != scene.n_pixels:
        raise ValueError("dictionary and scene disagree on the pixel count")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    kd, ks = greens.domain_kernel(), greens.measure_kernel()
    q = alpha**2 * (kd.conj().T @ kd) + (1 - alpha**2) * (ks.conj().T @ ks)

    if initial_code is None:
        bp = invert_bp(scene, greens, e_meas, e_inc)
        x = bp.contrast_estimate.copy()
        e_tot = bp.e_total
        s = np.zeros(atoms.shape[1])
    else:
        s = np.asarray(initial_code, dtype=float).copy()
        x = atoms @ s
        if initial_total is None:
            initial_total, _ = forward_solve(scene, greens, x, e_inc=e_inc)
        e_tot = np.asarray(initial_total)

    lam_reg = config.fista_lambda if config.fista_lambda > 0 else None
    c0, st0, dt0 = _weighted_cost(kd, ks, x, e_tot, e_inc, e_meas, alpha)
    trace = [_row(0, c0, st0, dt0, 0.0, c0)]
    half: list[dict] = []
    flags: list[str] = []
    history = [c0]
    it = 0
    for it in range(1, config.als_iters + 1):
        try:
            e_new = _et_step(kd, ks, x, alpha, e_inc, e_meas)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise RuntimeError(f"E_t-step failed at iteration {it}: {exc}") from exc
        c_old = _weighted_cost(kd, ks, x, e_tot, e_inc, e_meas, alpha)[0]
        c_new, st, dt = _weighted_cost(kd, ks, x, e_new, e_inc, e_meas, alpha)
        et_ok = c_new <= c_old * (1 + 1e-10)
        if not et_ok:
            flags.append(f"et_step_increase@{it}")
        e_tot = e_new
        half.append({"iteration": it, "step": "E_t", "cost_before": c_old, "cost": c_new,
                     "monotone": et_ok})

        prob = _LambdaStep(kd, ks, q, atoms, alpha, e_tot, e_inc, e_meas)
        if lam_reg is None:
            lam_reg = 0.01 * float(np.max(np.abs(prob.aty))) or 1e-12
        pen_prev = prob.cost(s) + 2 * lam_reg * np.abs(s).sum()
        s_new, _ = fista_gram(prob.gram_apply, prob.aty, lam_reg, config.fista_iters, None, s)
        pen_new = prob.cost(s_new) + 2 * lam_reg * np.abs(s_new).sum()
        lam_ok = pen_new <= pen_prev + 1e-10 * abs(pen_prev)
        if not lam_ok:
            flags.append(f"lambda_step_increase@{it}")
        s = s_new
        x = atoms @ s
        c, st, dt = _weighted_cost(kd, ks, x, e_tot, e_inc, e_meas, alpha)
        l1 = float(np.abs(s).sum())
        half.append({"iteration": it, "step": "Lambda", "penalised_before": pen_prev,
                     "penalised": pen_new, "cost": c, "monotone": lam_ok})
        trace.append(_row(it, c, st, dt, l1, c + 2 * lam_reg * l1))
        history.append(c)
        if len(history) > patience:
            ref = history[-1 - patience]
            if abs(history[-1] - ref) <= rel_tol * max(abs(ref), np.finfo(float).tiny):
                break
    return InversionResult(np.maximum(x, 0.0), trace, it, "als_cs", e_total=e_tot,
                           sparse_code=SparseCode(s), half_steps=half, flags=flags,
                           fista_lambda=lam_reg)


def _row(it, c, state, data, l1, pen):
    return {"iteration": it, "cost": c, "state_term": state, "data_term": data,
            "l1": l1, "penalised": pen}
