"""Residual-based error indicator and rank adaptation for the reduced models.

The indicator propagates an approximation of the full-minus-reduced solution
difference through the linearized time-stepping residual. Thanks to the
block-triangular Jacobian of the scheme no 2N x 2N system is ever solved;
everything reduces to Jacobian-vector products with the field Jacobian, which
is a gather / tridiagonal solve / scatter pipeline of linear cost.
"""

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from .fem import locate, solve_poisson, charge_density, field_gradient

logger = logging.getLogger(__name__)


def jacobian_E_matvec(grid, x, w):
    """Product of the field Jacobian at positions x with vector(s) w.

    For P1 elements the shape functions have vanishing second derivatives, so
    the diagonal term drops and the product is
    (ell_x / N) grad(Lambda) T^{-1} grad(Lambda)^T w, computed in O(N + kappa)
    per column.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    squeeze = x.ndim == 1
    X = x[:, None] if squeeze else x
    W = w[:, None] if squeeze else w
    n_part, p = X.shape
    j, w1 = locate(grid, X)
    jr = (j + 1) % grid.n_x
    inv_dx = 1.0 / grid.dx

    # a = grad(Lambda)^T w: scatter -w/dx to left nodes, +w/dx to right nodes
    offs = np.arange(p, dtype=np.int64) * grid.n_x
    acc = np.bincount((j + offs).ravel(), weights=(-W * inv_dx).ravel(),
                      minlength=grid.n_x * p)
    acc += np.bincount((jr + offs).ravel(), weights=(W * inv_dx).ravel(),
                       minlength=grid.n_x * p)
    a = acc.reshape(p, grid.n_x).T[1:, :]  # drop pinned node row

    b = solve_poisson(grid, a)
    bn = np.vstack([np.zeros((1, p)), b])
    left = np.take_along_axis(bn, j, axis=0)
    right = np.take_along_axis(bn, jr, axis=0)
    out = (grid.ell_x / n_part) * (right - left) * inv_dx
    return out[:, 0] if squeeze else out


def sv_residual(x_now, v_now, x_prev, v_prev, e_prev, e_now, dt):
    """Discrete residual of the Stormer-Verlet update, stacked blocks (2N, p).

    e_prev and e_now are the fields at the previous and current positions;
    both are available from the time stepping, so no field solve happens here.
    """
    rx = x_now - x_prev - dt * (v_prev - 0.5 * dt * e_prev)
    rv = v_now - v_prev + 0.5 * dt * (e_prev + e_now)
    return np.vstack([rx, rv])


def legendre_basis(amp_range, sd_range):
    """Tensorized Legendre polynomials up to degree 2 on the parameter box."""
    a_mid = 0.5 * (amp_range[0] + amp_range[1])
    a_half = 0.5 * (amp_range[1] - amp_range[0])
    s_mid = 0.5 * (sd_range[0] + sd_range[1])
    s_half = 0.5 * (sd_range[1] - sd_range[0])

    def evaluate(params):
        params = np.asarray(params, dtype=float)
        ah = (params[:, 0] - a_mid) / a_half
        sh = (params[:, 1] - s_mid) / s_half
        return np.vstack([
            np.ones_like(ah),
            ah,
            sh,
            0.5 * (3.0 * ah * ah - 1.0),
            0.5 * (3.0 * sh * sh - 1.0),
            ah * sh,
        ])

    evaluate.size = 6
    return evaluate


def build_interpolation_operator(params, sample_idx, basis):
    """Parameter-space interpolation operator P of shape (n_samples, p).

    P = pinv(B Pi) B with B the basis evaluation matrix; error approximations
    known at the sample parameters extend to all parameters as E_star @ P.
    """
    sample_idx = np.asarray(sample_idx, dtype=np.int64)
    if sample_idx.size < basis.size:
        raise ValueError("need at least as many sample parameters as basis functions")
    b = basis(params)  # (q, p)
    b_pi = b[:, sample_idx]
    gram = b_pi @ b_pi.T
    try:
        pinv = b_pi.T @ np.linalg.solve(gram, np.eye(basis.size))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "interpolation system is rank deficient; re-sample the parameters"
        ) from exc
    cond = np.linalg.cond(gram)
    if cond > 1e12:
        raise np.linalg.LinAlgError(
            f"interpolation system is rank deficient (cond={cond:.2e}); "
            "re-sample the parameters"
        )
    return pinv @ b


@dataclass
class AdaptivityState:
    """Everything the per-step indicator carries forward in time."""

    sample_idx: np.ndarray        # indices of the indicator sample parameters
    interp: np.ndarray            # operator (n_samples, p)
    c1: float
    c2: float
    gamma: int
    err: np.ndarray               # (2N, n_samples) current error approximation
    recon_x: np.ndarray           # cached reconstructed positions at samples
    recon_v: np.ndarray
    field: np.ndarray             # cached field at recon_x
    ref_indicator: float          # indicator value at the last rank update
    n_updates: int = 0
    history: list = dc_field(default_factory=list)

    @property
    def n_samples(self):
        return int(self.sample_idx.size)


def init_adaptivity(grid, full_x, full_v, state, sample_idx, interp, c1, c2, gamma):
    """Initial indicator data: exact projection error at the sample parameters."""
    sample_idx = np.asarray(sample_idx, dtype=np.int64)
    xr = state.psi @ state.y[:, sample_idx]
    vr = state.psi @ state.w[:, sample_idx]
    err = np.vstack([full_x[:, sample_idx] - xr, full_v[:, sample_idx] - vr])
    theta_full = np.vstack([full_x[:, sample_idx], full_v[:, sample_idx]])
    denom = np.linalg.norm(theta_full)
    ref = np.linalg.norm(err) / denom if denom > 0 else 0.0
    return AdaptivityState(
        sample_idx=sample_idx,
        interp=interp,
        c1=c1,
        c2=c2,
        gamma=gamma,
        err=err,
        recon_x=xr,
        recon_v=vr,
        field=field_gradient(grid, xr),
        ref_indicator=ref,
    )


def error_indicator_step(grid, adapt, state, dt):
    """Advance the error approximation by one step and return the indicator.

    Uses the cached previous reconstructed states and fields, evaluates the
    exact field at the new reconstructed sample states, applies the linearized
    residual recursion and the block-triangular inverse of the scheme
    Jacobian. Cost O(N (n + 1) n_samples).
    """
    idx = adapt.sample_idx
    n_part = state.psi.shape[0]
    xr = state.psi @ state.y[:, idx]
    vr = state.psi @ state.w[:, idx]
    e_now = field_gradient(grid, xr)

    r = sv_residual(xr, vr, adapt.recon_x, adapt.recon_v, adapt.field, e_now, dt)

    ex, ev = adapt.err[:n_part], adapt.err[n_part:]
    jex = jacobian_E_matvec(grid, adapt.recon_x, ex)
    prev_top = -ex + 0.5 * dt * dt * jex - dt * ev
    prev_bot = 0.5 * dt * jex - ev

    b_top = r[:n_part] + prev_top
    b_bot = r[n_part:] + prev_bot
    e_top = -b_top
    e_bot = 0.5 * dt * jacobian_E_matvec(grid, xr, b_top) - b_bot

    err_new = np.vstack([e_top, e_bot])
    theta = np.vstack([xr, vr])
    denom = np.linalg.norm(theta + err_new)
    if denom == 0.0:
        logger.warning("degenerate all-zero state in error indicator; returning 0")
        indicator = 0.0
    else:
        indicator = float(np.linalg.norm(err_new) / denom)

    adapt.err = err_new
    adapt.recon_x = xr
    adapt.recon_v = vr
    adapt.field = e_now
    adapt.history.append(indicator)
    return indicator


def update_due(adapt, indicator):
    """Rank update criterion with the geometric escalation of the threshold."""
    return indicator >= adapt.c1 * adapt.c2 ** adapt.n_updates * adapt.ref_indicator


def rank_update(psi, y, w, err_star, gamma, interp):
    """Grow the basis by the dominant direction of the projected error.

    err_star stacks the position and velocity error blocks (2N, n_samples).
    With gamma = 0 the coefficients are zero-padded, which leaves the
    reconstructed state unchanged; with gamma = 1 the interpolated error
    correction is added. Returns (psi, y, w, applied) where applied is False
    when the projected error was numerically zero and the update was skipped.
    """
    n_part = psi.shape[0]
    ex, ev = err_star[:n_part], err_star[n_part:]
    stacked = np.hstack([ex, ev])
    proj = stacked - psi @ (psi.T @ stacked)
    if np.linalg.norm(proj) < 1e-14:
        logger.warning("projected error numerically zero; rank update skipped")
        return psi, y, w, False
    u, _, _ = np.linalg.svd(proj, full_matrices=False)
    new_vec = u[:, :1]
    psi_new = np.hstack([psi, new_vec])
    pad = np.zeros((1, y.shape[1]))
    y_new = np.vstack([y, pad])
    w_new = np.vstack([w, pad])
    if gamma:
        y_new = y_new + psi_new.T @ (ex @ interp)
        w_new = w_new + psi_new.T @ (ev @ interp)
    return psi_new, y_new, w_new, True
