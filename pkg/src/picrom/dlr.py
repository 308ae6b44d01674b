"""Symplectic dynamical low-rank model: evolving basis plus coefficients.

The reduced state is X ~ Psi Y, V ~ Psi W with Psi on the Stiefel manifold.
Coefficients follow the reduced Hamiltonian flow; the basis follows the
projected dynamics integrated with a tangent method built on the Cayley
retraction, so orthonormality is preserved without re-orthonormalization.
"""

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from .fem import field_gradient

logger = logging.getLogger(__name__)

GRAM_TRUNC_REL = 1e-12


class StepSizeError(RuntimeError):
    """Raised when the retraction's small core system is (near) singular,
    which signals a pathologically large tangent update for the step size."""


@dataclass
class ReducedState:
    psi: np.ndarray  # (N, n) orthonormal basis
    y: np.ndarray    # (n, p) position coefficients
    w: np.ndarray    # (n, p) velocity coefficients
    time: float = 0.0
    ortho_err: float = 0.0  # max |Psi^T Psi - I| recorded after the last step

    @property
    def n(self):
        return self.psi.shape[1]

    def reconstruct(self):
        return self.psi @ self.y, self.psi @ self.w


@dataclass
class PrkTableau:
    """Coefficients of the 2-stage partitioned RK scheme, one (a, b) set per
    sub-system: index 0 drives the position coefficients, 1 the velocity
    coefficients, 2 the basis tangent variable."""

    a: np.ndarray  # (3, 2, 2)
    b: np.ndarray  # (3, 2)

    def order_residuals(self):
        """Residuals of the order-2 conditions: consistency sum(b)-1 per set,
        own coupling sum_i b_i sum_j a_ij - 1/2, and the cross conditions."""
        res = []
        rowsums = self.a.sum(axis=2)  # (3, 2)
        for l in range(3):
            res.append(self.b[l].sum() - 1.0)
            res.append(float(self.b[l] @ rowsums[l]) - 0.5)
        for l in range(3):
            for r in range(3):
                if l != r:
                    res.append(float(self.b[l] @ rowsums[r]) - 0.5)
        return np.array(res)


def default_tableau():
    """Stormer-Verlet for both coefficient blocks combined with Heun for the
    basis tangent variable; explicit thanks to the Hamiltonian separability."""
    a = np.zeros((3, 2, 2))
    a[0] = [[0.0, 0.0], [0.5, 0.5]]
    a[1] = [[0.5, 0.0], [0.5, 0.0]]
    a[2] = [[0.0, 0.0], [1.0, 0.0]]
    b = np.array([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    return PrkTableau(a=a, b=b)


def _require_explicit(tab):
    a = tab.a
    zeros = [a[0][0, 0], a[0][0, 1], a[2][0, 0], a[2][0, 1],
             a[1][0, 1], a[1][1, 1], a[2][1, 1]]
    if any(z != 0.0 for z in zeros):
        raise ValueError("tableau is not explicit for the separable coupled system")


def cotangent_lift(x0, v0, n):
    """Initial basis from the leading left singular vectors of [X0 V0]."""
    stacked = np.hstack([x0, v0])
    if n > min(stacked.shape):
        raise ValueError(f"n={n} exceeds min(N, 2p)={min(stacked.shape)}")
    u, s, _ = np.linalg.svd(stacked, full_matrices=False)
    rank = int(np.sum(s > max(stacked.shape) * np.finfo(float).eps * s[0]))
    if n > rank:
        raise ValueError(f"n={n} exceeds rank {rank} of the initial snapshot")
    psi = u[:, :n]
    return ReducedState(psi=psi, y=psi.T @ x0, w=psi.T @ v0, time=0.0)


def gram_apply_inverse(y, w, b):
    """Right-multiply b by M^{-1} with M = Y Y^T + W W^T.

    Eigenvalues below GRAM_TRUNC_REL times the largest are truncated
    (pseudo-inverse); the event is logged since it signals a rank-deficient
    basis evolution problem.
    """
    m = y @ y.T + w @ w.T
    lam, q = np.linalg.eigh(m)
    lam_max = lam[-1] if lam.size else 0.0
    if lam_max <= 0.0:
        logger.warning("Gram matrix is zero; basis velocity suppressed")
        return np.zeros_like(b)
    keep = lam > GRAM_TRUNC_REL * lam_max
    if not keep.all():
        logger.warning("Gram matrix truncated: %d of %d modes kept",
                       int(keep.sum()), lam.size)
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    return (b @ q) * inv @ q.T


def _cayley_factors(psi0, ups):
    """Low-rank factors of A = Z Psi0^T - Psi0 Z^T with Z = (I - Psi0 Psi0^T/2) Ups,
    and the 2n x 2n Woodbury core of (I - A/2)."""
    z = ups - psi0 @ ((psi0.T @ ups) * 0.5)
    f = np.hstack([z, -psi0])
    g = np.hstack([psi0, z])
    core = np.eye(f.shape[1]) - 0.5 * (g.T @ f)
    return f, g, core


def _apply_cayley_inverse(f, g, core, b):
    """(I - A/2)^{-1} b through the Woodbury identity; O(N n^2)."""
    try:
        sol = np.linalg.solve(core, g.T @ b)
    except np.linalg.LinAlgError as exc:
        raise StepSizeError("singular retraction core; reduce the step size") from exc
    return b + 0.5 * (f @ sol)


def retract(psi0, ups):
    """Cayley retraction cay(A) Psi0 evaluated with O(N n^2) operations."""
    f, g, core = _cayley_factors(psi0, ups)
    if np.linalg.cond(core) > 1e12:
        raise StepSizeError("ill-conditioned retraction core; reduce the step size")
    u1 = psi0 + 0.5 * (f @ (g.T @ psi0))
    return _apply_cayley_inverse(f, g, core, u1)


def apply_inverse_tangent_map(psi0, ups, rhs):
    """Solve d cay-retraction at ups applied to Delta equals rhs, for Delta.

    Uses the closed form of the differential: with A(Ups) linear in Ups,
    dR[Ups](Delta) = (I - A/2)^{-1} A(Delta) (I - A/2)^{-1} Psi0, which
    reduces to two n x n solves after splitting along span(Psi0).
    """
    f, g, core = _cayley_factors(psi0, ups)
    if np.linalg.cond(core) > 1e12:
        raise StepSizeError("ill-conditioned retraction core; reduce the step size")
    w = rhs - 0.5 * (f @ (g.T @ rhs))           # (I - A/2) rhs
    eta = _apply_cayley_inverse(f, g, core, psi0)  # (I - A/2)^{-1} Psi0
    s = psi0.T @ eta
    eta_perp = eta - psi0 @ s
    w0 = psi0.T @ w
    w_perp = w - psi0 @ w0
    try:
        m_perp = np.linalg.solve(s.T, w_perp.T).T
        rhs0 = w0 + m_perp.T @ eta_perp
        m0 = np.linalg.solve(2.0 * s.T, rhs0.T).T
    except np.linalg.LinAlgError as exc:
        raise StepSizeError("singular tangent-map system; reduce the step size") from exc
    return m_perp + 2.0 * (psi0 @ m0)


class ExactRhs:
    """Right-hand sides of the reduced model using exact full-order fields.

    The field at the reconstructed positions is cached per (psi, y) pair so
    the coefficient kick and the basis velocity share one evaluation.
    """

    def __init__(self, grid):
        self.grid = grid
        self._key = (None, None)
        self._field = None

    def _field_at(self, psi, y):
        if self._key[0] is not psi or self._key[1] is not y:
            self._field = field_gradient(self.grid, psi @ y)
            self._key = (psi, y)  # strong refs keep the identity check sound
        return self._field

    def kick(self, psi, y):
        """Reduced gradient Psi^T grad h(Psi Y), shape (n, p)."""
        return psi.T @ self._field_at(psi, y)

    def basis_velocity(self, psi, y, w):
        """(Psi Psi^T - I) grad h(Psi Y) W^T M^{-1}(Y, W), shape (N, n)."""
        e = self._field_at(psi, y)
        lmat = (psi @ (psi.T @ e) - e) @ w.T
        return gram_apply_inverse(y, w, lmat)


def rom_rhs(grid, psi, y, w):
    """Coupled reduced-model right-hand side (ydot, wdot, basis velocity)."""
    rhs = ExactRhs(grid)
    wdot = -rhs.kick(psi, y)
    bvel = rhs.basis_velocity(psi, y, w)
    return w.copy(), wdot, bvel


def prk_step(state, dt, tableau, provider, evolve_basis=True):
    """One step of the explicit 2-stage partitioned RK scheme.

    provider supplies kick(psi, y) -> (n, p) and
    basis_velocity(psi, y, w) -> (N, n); the basis update composes the
    retraction with the inverse of its tangent map.
    """
    _require_explicit(tableau)
    a1, a2, a3 = tableau.a
    b1, b2, b3 = tableau.b
    psi0, y0, w0 = state.psi, state.y, state.w

    k2_1 = -provider.kick(psi0, y0)
    w_s1 = w0 + dt * a2[0, 0] * k2_1
    w_s2 = w0 + dt * a2[1, 0] * k2_1
    y_s2 = y0 + dt * (a1[1, 0] * w_s1 + a1[1, 1] * w_s2)

    if evolve_basis:
        k3_1 = provider.basis_velocity(psi0, y0, w_s1)
        ups_s2 = dt * a3[1, 0] * k3_1
        psi_mid = retract(psi0, ups_s2)
        l2 = provider.basis_velocity(psi_mid, y_s2, w_s2)
        k3_2 = apply_inverse_tangent_map(psi0, ups_s2, l2)
        ups_new = dt * (b3[0] * k3_1 + b3[1] * k3_2)
    else:
        psi_mid = psi0
        ups_new = None

    k2_2 = -provider.kick(psi_mid, y_s2)
    y_new = y0 + dt * (b1[0] * w_s1 + b1[1] * w_s2)
    w_new = w0 + dt * (b2[0] * k2_1 + b2[1] * k2_2)
    psi_new = retract(psi0, ups_new) if evolve_basis else psi0

    n = psi_new.shape[1]
    ortho_err = float(np.max(np.abs(psi_new.T @ psi_new - np.eye(n))))
    return ReducedState(psi=psi_new, y=y_new, w=w_new,
                        time=state.time + dt, ortho_err=ortho_err)


def prk2_step(grid, state, dt, tableau=None, evolve_basis=True):
    """Reduced-model step with exact (non-hyper-reduced) right-hand sides."""
    if tableau is None:
        tableau = default_tableau()
    return prk_step(state, dt, tableau, ExactRhs(grid), evolve_basis=evolve_basis)


def reduced_hamiltonian(grid, state):
    """H evaluated at the reconstructed state, per parameter."""
    from .fem import hamiltonian

    xr, vr = state.reconstruct()
    return hamiltonian(grid, xr, vr)
