"""Hyper-reduction of the particle-to-grid nonlinearity.

The electric potential energy is rewritten through the stiffness
eigendecomposition as a sum of squares, one per eigenmode:
h(x) = sum_k (alpha_k + beta_k * sum_l G^k_l(x))^2, where G^k samples the
k-th eigenvector through the hat functions at the particle positions. Each
G^k depends entrywise on a single particle, so empirical interpolation of
the G^k (not of the assembled gradient) is both sparse and gradient
preserving: the hyper-reduced force is exactly the gradient of the
hyper-reduced energy.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

from .dlr import prk_step, default_tableau, gram_apply_inverse
from .fem import field_gradient, locate


class HamiltonianDecomposition:
    """Per-mode constants of the eigen-decomposed potential energy.

    alpha[k] = sqrt(N / (2 ell_x delta_k)) s . V^k
    beta[k]  = -sqrt(ell_x / (2 N delta_k)), the common value of all N
    entries of the beta vector of mode k.
    vext holds the eigenvectors padded with the pinned node's zero row, in
    full node numbering, for fast gathering.
    """

    def __init__(self, grid, n_particles):
        self.grid = grid
        self.n_particles = int(n_particles)
        delta = grid.eigvals
        self.alpha = np.sqrt(self.n_particles / (2.0 * grid.ell_x * delta)) * (
            grid.load @ grid.eigvecs
        )
        self.beta = -np.sqrt(grid.ell_x / (2.0 * self.n_particles * delta))
        self.vext = np.vstack([np.zeros((1, grid.kappa)), grid.eigvecs])

    def mode_slopes(self):
        """max_x |sum_j V^k_j lambda_j'(x)| per mode (piecewise constant)."""
        grid = self.grid
        rolled = np.vstack([self.vext[1:], self.vext[:1]])  # right-node values
        return np.max(np.abs(rolled - self.vext), axis=0) / grid.dx


def eval_mode(grid, dec, x, k, subset=None):
    """G^k and the diagonal of its Jacobian at the given positions.

    x is a position vector; with subset, only those particles are evaluated
    (cost proportional to the subset size, never to kappa).
    """
    x = np.asarray(x, dtype=float)
    if subset is not None:
        x = x[np.asarray(subset)]
    j, w1 = locate(grid, x)
    jr = (j + 1) % grid.n_x
    col = dec.vext[:, k]
    vals = col[j] * (1.0 - w1) + col[jr] * w1
    jac = (col[jr] - col[j]) / grid.dx
    return vals, jac


def _modes_at(grid, dec, x):
    """G and Jacobian diagonals for all modes at a position vector: (N, kappa)."""
    j, w1 = locate(grid, np.asarray(x, dtype=float))
    jr = (j + 1) % grid.n_x
    left = dec.vext[j, :]
    right = dec.vext[jr, :]
    g = left * (1.0 - w1)[:, None] + right * w1[:, None]
    jac = (right - left) / grid.dx
    return g, jac


def reduced_gradient_exact(grid, dec, psi, y):
    """Gradient of h(Psi y) with respect to y through the mode decomposition.

    Algebraically identical to Psi^T field_gradient(Psi y); kept as the
    independent exact form. Accepts (n,) or (n, p) coefficients.
    """
    y2 = y[:, None] if y.ndim == 1 else y
    out = np.empty((psi.shape[1], y2.shape[1]))
    for s in range(y2.shape[1]):
        g, jac = _modes_at(grid, dec, psi @ y2[:, s])
        a = dec.alpha + dec.beta * g.sum(axis=0)
        out[:, s] = psi.T @ (jac @ (2.0 * a * dec.beta))
    return out[:, 0] if y.ndim == 1 else out


def reduced_energy_exact(grid, dec, psi, y):
    """h(Psi y) through the mode decomposition, per parameter."""
    y2 = y[:, None] if y.ndim == 1 else y
    vals = np.empty(y2.shape[1])
    for s in range(y2.shape[1]):
        g, _ = _modes_at(grid, dec, psi @ y2[:, s])
        a = dec.alpha + dec.beta * g.sum(axis=0)
        vals[s] = float(a @ a)
    return vals[0] if y.ndim == 1 else vals


def greedy_eim(snapshots, tol):
    """Greedy interpolation basis from snapshot columns.

    Repeatedly picks the residual column of largest norm as the next basis
    vector and its largest-magnitude entry as the interpolation index, then
    re-projects all snapshots through the interpolatory projector. Stops when
    the largest residual column norm drops to tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    s = np.asarray(snapshots, dtype=float)
    n_rows, n_cols = s.shape
    # the residual of the interpolatory projector updates by one rank-1
    # correction per selected column (the new basis column is already a
    # residual, so re-projecting it leaves it unchanged); this is the same
    # projector as rebuilding U (P^T U)^{-1} P^T from scratch each pass
    resid = s.copy()
    cols, idx = [], []
    norms = np.linalg.norm(resid, axis=0)
    while norms.size and norms.max() > tol:
        jm = int(np.argmax(norms))
        col = resid[:, jm].copy()
        new_idx = int(np.argmax(np.abs(col)))
        if new_idx in idx:
            raise RuntimeError(
                "duplicate EIM interpolation index: snapshots numerically collinear"
            )
        cols.append(col)
        idx.append(new_idx)
        if len(cols) == n_cols:
            break
        resid -= np.outer(col / col[new_idx], resid[new_idx, :])
        norms = np.linalg.norm(resid, axis=0)
    if cols:
        return np.column_stack(cols), np.array(idx, dtype=np.int64)
    return np.empty((n_rows, 0)), np.array([], dtype=np.int64)


@dataclass
class EimApprox:
    """Per-mode EIM data plus flattened structures for fast evaluation.

    Slots enumerate all (mode, interpolation index) pairs; slot_upos maps a
    slot to its particle's position in the union index set, so one union
    reconstruction serves every mode.
    """

    n_particles: int
    bases: list
    indices: list
    beta_hat: list
    union: np.ndarray
    slot_mode: np.ndarray
    slot_upos: np.ndarray
    slot_beta: np.ndarray
    mode_scatter: scipy.sparse.csr_matrix
    union_scatter: scipy.sparse.csr_matrix

    @property
    def union_size(self):
        return int(self.union.size)

    def mode_sizes(self):
        return [b.shape[1] for b in self.bases]

    def project(self, k, f):
        """Apply the mode-k interpolatory projector to columns of f."""
        u = self.bases[k]
        if u.shape[1] == 0:
            return np.zeros_like(f)
        idx = self.indices[k]
        return u @ np.linalg.solve(u[idx, :], f[np.asarray(idx)])

    def interp_solve_transposed(self, k, rhs):
        """(U^T P)^{-1} rhs for mode k (used by beta_hat and error constants)."""
        u = self.bases[k]
        idx = self.indices[k]
        return np.linalg.solve(u[idx, :].T, rhs)


def _assemble_eim(dec, bases, indices):
    """Build the flattened slot structures shared by all evaluations."""
    kappa = len(bases)
    n = dec.n_particles
    beta_hat = []
    for k in range(kappa):
        u = bases[k]
        if u.shape[1] == 0:
            beta_hat.append(np.empty(0))
            continue
        idx = indices[k]
        bh = dec.beta[k] * np.linalg.solve(u[idx, :].T, u.sum(axis=0))
        beta_hat.append(bh)
    all_idx = (
        np.concatenate([i for i in indices if i.size])
        if any(i.size for i in indices)
        else np.array([], dtype=np.int64)
    )
    union = np.unique(all_idx)
    slot_mode = np.concatenate(
        [np.full(indices[k].size, k, dtype=np.int64) for k in range(kappa)]
    ) if all_idx.size else np.array([], dtype=np.int64)
    slot_upos = np.searchsorted(union, all_idx)
    slot_beta = (
        np.concatenate([bh for bh in beta_hat if bh.size])
        if all_idx.size
        else np.empty(0)
    )
    n_slots = all_idx.size
    rows = slot_mode
    cols = np.arange(n_slots)
    mode_scatter = scipy.sparse.csr_matrix(
        (slot_beta, (rows, cols)), shape=(kappa, n_slots)
    )
    union_scatter = scipy.sparse.csr_matrix(
        (np.ones(n_slots), (slot_upos, cols)), shape=(union.size, n_slots)
    )
    return EimApprox(
        n_particles=n,
        bases=bases,
        indices=indices,
        beta_hat=beta_hat,
        union=union,
        slot_mode=slot_mode,
        slot_upos=slot_upos,
        slot_beta=slot_beta,
        mode_scatter=mode_scatter,
        union_scatter=union_scatter,
    )


def identity_eim(dec):
    """Exact EIM with identity projectors for every mode (testing and the
    degenerate-exactness path)."""
    n = dec.n_particles
    kappa = dec.grid.kappa
    eye = np.eye(n)
    bases = [eye] * kappa
    indices = [np.arange(n, dtype=np.int64)] * kappa
    return _assemble_eim(dec, bases, indices)


def subsample_parameters(y, w, n_select):
    """Most relevant parameter columns via column-pivoted QR of [Y; W]."""
    coeff = np.vstack([y, w])
    if not 1 <= n_select <= coeff.shape[1]:
        raise ValueError("n_select must be in 1..p")
    _, _, piv = scipy.linalg.qr(coeff, pivoting=True, mode="economic")
    return piv[:n_select]


def mode_force(grid, dec, psi, x, k):
    """Force block of mode k: (alpha_k + beta^k . G^k(x)) J^k(x) Psi, (N, n)."""
    g, jac = eval_mode(grid, dec, x, k)
    a_k = dec.alpha[k] + dec.beta[k] * g.sum()
    return a_k * jac[:, None] * psi


def mode_snapshot_matrix(grid, dec, psi, positions, k):
    """EIM snapshot matrix of mode k for the given sample positions (N, s):
    the G^k columns followed by one force block per sample parameter."""
    n_samples = positions.shape[1]
    blocks = [np.column_stack([eval_mode(grid, dec, positions[:, s], k)[0]
                               for s in range(n_samples)])]
    for s in range(n_samples):
        blocks.append(mode_force(grid, dec, psi, positions[:, s], k))
    return np.hstack(blocks)


def build_eim(grid, dec, psi, y, tol, pi_db, w=None):
    """Greedy EIM bases for all modes from snapshots at pi_db sample parameters.

    Snapshots per mode stack the G^k columns and the mode forcing blocks
    (alpha_k + beta^k . G^k) J^k Psi, one block per sample parameter. Sample
    parameters come from a column-pivoted QR of the coefficient matrix
    ([Y; W] when the velocity coefficients are available).
    """
    p = y.shape[1]
    pi_db = min(pi_db, p)
    if w is not None:
        sel = subsample_parameters(y, w, pi_db)
    else:
        _, _, piv = scipy.linalg.qr(y, pivoting=True, mode="economic")
        sel = piv[:pi_db]
    positions = psi @ y[:, sel]

    # one particle-to-grid pass per sample, shared by all modes
    g_cols = []
    jac_cols = []
    for s in range(pi_db):
        g, jac = _modes_at(grid, dec, positions[:, s])
        g_cols.append(g)
        jac_cols.append(jac)

    bases, indices = [], []
    for k in range(grid.kappa):
        blocks = [np.column_stack([g_cols[s][:, k] for s in range(pi_db)])]
        for s in range(pi_db):
            a_ks = dec.alpha[k] + dec.beta[k] * g_cols[s][:, k].sum()
            blocks.append(a_ks * jac_cols[s][:, k][:, None] * psi)
        snap = np.hstack(blocks)
        u, idx = greedy_eim(snap, tol)
        bases.append(u)
        indices.append(idx)
    return _assemble_eim(dec, bases, indices)


def _eim_mode_amplitudes(grid, dec, eim, psi, y):
    """a_k = alpha_k + beta_hat^k . G^k at interpolation indices, plus the
    slot-level Jacobian values; everything evaluated on the union set only."""
    y2 = y[:, None] if y.ndim == 1 else y
    p = y2.shape[1]
    kappa = grid.kappa
    if eim.union.size == 0:
        a = np.repeat(dec.alpha[:, None], p, axis=1)
        return a, None, None
    upos = psi[eim.union, :] @ y2
    j, w1 = locate(grid, upos)
    jr = (j + 1) % grid.n_x
    js = j[eim.slot_upos, :]
    jrs = jr[eim.slot_upos, :]
    w1s = w1[eim.slot_upos, :]
    km = eim.slot_mode[:, None]
    left = dec.vext[js, km]
    right = dec.vext[jrs, km]
    g_slots = left * (1.0 - w1s) + right * w1s
    jac_slots = (right - left) / grid.dx
    a = dec.alpha[:, None] + eim.mode_scatter @ g_slots
    return a, g_slots, jac_slots


def hyper_reduced_gradient(grid, dec, eim, psi, y):
    """Gradient of the hyper-reduced energy with respect to y, per parameter.

    Only the union index rows of Psi y are reconstructed and only
    interpolation entries of G^k and its Jacobian are touched, so the cost is
    O(p m n), independent of the particle count.
    """
    y2 = y[:, None] if y.ndim == 1 else y
    a, _, jac_slots = _eim_mode_amplitudes(grid, dec, eim, psi, y2)
    if jac_slots is None:
        out = np.zeros((psi.shape[1], y2.shape[1]))
        return out[:, 0] if y.ndim == 1 else out
    c = 2.0 * a[eim.slot_mode, :] * eim.slot_beta[:, None] * jac_slots
    agg = eim.union_scatter @ c
    grad = psi[eim.union, :].T @ agg
    return grad[:, 0] if y.ndim == 1 else grad


def hyper_reduced_energy(grid, dec, eim, psi, y):
    """Hyper-reduced potential energy sum_k a_k^2, per parameter."""
    y2 = y[:, None] if y.ndim == 1 else y
    a, _, _ = _eim_mode_amplitudes(grid, dec, eim, psi, y2)
    vals = np.sum(a * a, axis=0)
    return vals[0] if y.ndim == 1 else vals


class HyperRhs:
    """Right-hand sides for the hyper-reduced model: EIM coefficient kicks and
    a parameter-subsampled, rescaled basis velocity with exact fields."""

    def __init__(self, grid, dec, eim, pi_av):
        self.grid = grid
        self.dec = dec
        self.eim = eim
        self.pi_av = pi_av

    def kick(self, psi, y):
        return hyper_reduced_gradient(self.grid, self.dec, self.eim, psi, y)

    def basis_velocity(self, psi, y, w):
        p = y.shape[1]
        pav = min(self.pi_av, p)
        sel = subsample_parameters(y, w, pav)
        es = field_gradient(self.grid, psi @ y[:, sel])
        lmat = (p / pav) * ((psi @ (psi.T @ es) - es) @ w[:, sel].T)
        return gram_apply_inverse(y, w, lmat)


def prk_hr_step(grid, dec, eim, state, dt, pi_av, tableau=None, evolve_basis=True):
    """One hyper-reduced time step (same partitioned RK scheme as the ROM)."""
    if tableau is None:
        tableau = default_tableau()
    provider = HyperRhs(grid, dec, eim, pi_av)
    return prk_step(state, dt, tableau, provider, evolve_basis=evolve_basis)


def k1_closed_form(grid):
    """Closed form of the gradient-error constant for uniform P1 elements."""
    return grid.ell_x / math.sqrt(grid.n_x) / math.sqrt(
        1.0 - math.cos(math.pi / grid.n_x)
    )


def compute_bound_constants(grid, eim):
    """Constants (K1, K2) of the a priori EIM gradient error bound.

    K1 = sqrt(2 ell_x / min_k delta_k). K2 takes the max over modes of
    delta_k^{-1} ||(U^T P)^{-1} U^T 1_N|| max_x |sum_j V^k_j lambda_j'(x)|,
    scaled by ell_x / sqrt(N).
    """
    k1 = math.sqrt(2.0 * grid.ell_x / grid.eigvals.min())
    dec = HamiltonianDecomposition(grid, eim.n_particles)
    slopes = dec.mode_slopes()
    worst = 0.0
    for k in range(grid.kappa):
        if eim.bases[k].shape[1] == 0:
            continue
        u = eim.bases[k]
        vec = eim.interp_solve_transposed(k, u.sum(axis=0))
        worst = max(worst, float(np.linalg.norm(vec)) * slopes[k] / grid.eigvals[k])
    k2 = grid.ell_x / math.sqrt(eim.n_particles) * worst
    return k1, k2
