"""Periodic P1 finite elements for the 1D Poisson problem driven by particles.

The spatial interval [0, ell_x] is split into n_x uniform cells with nodes
x_i = i*dx. Hat functions sit on the nodes; the hat associated with node
x_0 = x_{n_x} is pinned to zero to single out a solution of the periodic
Poisson problem, which leaves kappa = n_x - 1 active basis functions and
makes the stiffness matrix the plain tridiagonal (-1, 2, -1)/dx.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky_banded, cho_solve_banded, eigh_tridiagonal


class FemGrid:
    """Uniform periodic P1 mesh with precomputed stiffness data.

    Immutable after construction (the particle-to-grid evaluation counter is
    the only mutable diagnostic). Safe to share across threads.

    Attributes
    ----------
    ell_x : float       domain length
    n_x : int           number of cells
    dx : float          cell width
    kappa : int         active basis size, n_x - 1
    eigvals : (kappa,)  stiffness eigenvalues, strictly positive
    eigvecs : (kappa, kappa) orthonormal eigenvectors, column k pairs with eigvals[k]
    load : (kappa,)     integrals of the active hat functions (= dx)
    """

    def __init__(self, ell_x, n_x):
        if n_x < 3:
            raise ValueError(f"n_x must be >= 3, got {n_x} (Poisson solve degenerates)")
        if ell_x <= 0:
            raise ValueError(f"ell_x must be positive, got {ell_x}")
        self.ell_x = float(ell_x)
        self.n_x = int(n_x)
        self.dx = self.ell_x / self.n_x
        self.kappa = self.n_x - 1

        main = np.full(self.kappa, 2.0 / self.dx)
        off = np.full(self.kappa - 1, -1.0 / self.dx)
        self._diag_main = main
        self._diag_off = off
        self.load = np.full(self.kappa, self.dx)

        # banded Cholesky of T, reused for every Poisson solve (O(kappa) each)
        ab = np.zeros((2, self.kappa))
        ab[0] = main
        ab[1, :-1] = off
        self._chol_banded = cholesky_banded(ab, lower=True)

        self.eigvals, self.eigvecs = eigh_tridiagonal(main, off)

        # diagnostic: number of (particle, parameter) shape evaluations
        self.p2g_evals = 0

    def stiffness_dense(self):
        """Dense kappa x kappa stiffness matrix (for tests and small oracles)."""
        T = np.diag(self._diag_main)
        T += np.diag(self._diag_off, 1) + np.diag(self._diag_off, -1)
        return T

    def reset_eval_count(self):
        self.p2g_evals = 0


@dataclass
class ShapeSample:
    """Shape-function data of one particle: the p+1 = 2 covering hats.

    nodes are in full periodic numbering 0..n_x-1 (node n_x folded back to 0);
    rows give the index into the active kappa-sized basis, or None when the
    hat is the pinned one. values sum to 1 over the full basis.
    """

    particle: int
    nodes: tuple
    rows: tuple
    values: tuple
    derivs: tuple


def locate(grid, x):
    """Wrap positions into [0, ell_x) and find the covering element.

    Returns (j, w1): element index j in 0..n_x-1 and the weight w1 on the
    element's right node (the left node gets 1 - w1). A particle exactly on
    a node belongs to the left element, so derivative values there come from
    the left element.
    """
    t = np.mod(x, grid.ell_x) / grid.dx
    j = np.ceil(t).astype(np.int64) - 1
    w1 = t - j
    # t == 0 falls out of the ceil convention; wrap to the last element
    wrap = j < 0
    if np.any(wrap):
        j = np.where(wrap, grid.n_x - 1, j)
        w1 = np.where(wrap, 1.0, w1)
    # guard against t rounding up to n_x for x just below a period
    high = j >= grid.n_x
    if np.any(high):
        j = np.where(high, grid.n_x - 1, j)
        w1 = np.where(high, 1.0, w1)
    grid.p2g_evals += x.size
    return j, w1


def sample_shape(grid, x):
    """Per-particle ShapeSample list (small-scale introspection, not the hot path)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    j, w1 = locate(grid, x)
    out = []
    inv = 1.0 / grid.dx
    for ell in range(x.size):
        left, right = int(j[ell]), int(j[ell]) + 1
        right_node = right % grid.n_x
        row_left = left - 1 if left >= 1 else None
        row_right = right - 1 if 1 <= right <= grid.kappa else None
        out.append(
            ShapeSample(
                particle=ell,
                nodes=(left, right_node),
                rows=(row_left, row_right),
                values=(1.0 - float(w1[ell]), float(w1[ell])),
                derivs=(-inv, inv),
            )
        )
    return out


def nodal_weight_sums(grid, x):
    """Sum of hat values per node in the full n_x periodic numbering.

    Column-wise for x of shape (N,) or (N, p). Entry i is sum_l lambda_i(x_l)
    with node n_x identified with node 0 (no pinning applied).
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    X = x[:, None] if squeeze else x
    N, p = X.shape
    j, w1 = locate(grid, X)
    w0 = 1.0 - w1
    offs = np.arange(p, dtype=np.int64) * grid.n_x
    flat_left = (j + offs).ravel()
    flat_right = ((j + 1) % grid.n_x + offs).ravel()
    acc = np.bincount(flat_left, weights=w0.ravel(), minlength=grid.n_x * p)
    acc += np.bincount(flat_right, weights=w1.ravel(), minlength=grid.n_x * p)
    nodal = acc.reshape(p, grid.n_x).T
    return nodal[:, 0] if squeeze else nodal


def charge_density(grid, x):
    """Discrete charge density g with g_j = dx - (ell_x/N) sum_l lambda_j(x_l).

    x may be (N,) or (N, p); the result is (kappa,) or (kappa, p).
    """
    x = np.asarray(x, dtype=float)
    N = x.shape[0]
    nodal = nodal_weight_sums(grid, x)
    lam_sums = nodal[1:] if nodal.ndim == 1 else nodal[1:, :]
    return grid.dx - (grid.ell_x / N) * lam_sums


def solve_poisson(grid, g):
    """Solve T Phi = g with the precomputed banded factorization."""
    return cho_solve_banded((grid._chol_banded, True), np.asarray(g, dtype=float))


def _potential_nodes(grid, phi):
    """Pad the active potential coefficients with the pinned node value 0."""
    if phi.ndim == 1:
        return np.concatenate(([0.0], phi))
    return np.vstack([np.zeros((1, phi.shape[1])), phi])


def field_gradient(grid, x):
    """Gradient of the electric potential energy h at the particle positions.

    Equals -grad(Lambda(x)) T^{-1} g(x), column-wise for (N, p) input. One
    particle-to-grid pass is shared between the density scatter and the
    potential gather.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    X = x[:, None] if squeeze else x
    N, p = X.shape
    j, w1 = locate(grid, X)
    w0 = 1.0 - w1

    offs = np.arange(p, dtype=np.int64) * grid.n_x
    flat_left = (j + offs).ravel()
    flat_right = ((j + 1) % grid.n_x + offs).ravel()
    acc = np.bincount(flat_left, weights=w0.ravel(), minlength=grid.n_x * p)
    acc += np.bincount(flat_right, weights=w1.ravel(), minlength=grid.n_x * p)
    nodal = acc.reshape(p, grid.n_x).T

    g = grid.dx - (grid.ell_x / N) * nodal[1:, :]
    phi = solve_poisson(grid, g)
    phin = _potential_nodes(grid, phi)  # (n_x, p), node n_x wraps to value 0

    left = np.take_along_axis(phin, j, axis=0)
    jr = (j + 1) % grid.n_x
    right = np.take_along_axis(phin, jr, axis=0)
    grad = (left - right) / grid.dx
    return grad[:, 0] if squeeze else grad


def electric_energy(grid, x):
    """Discrete electric potential energy h(x) = (N/2 ell_x) g^T T^{-1} g, per column."""
    x = np.asarray(x, dtype=float)
    N = x.shape[0]
    g = charge_density(grid, x)
    phi = solve_poisson(grid, g)
    h = (N / (2.0 * grid.ell_x)) * np.sum(g * phi, axis=0)
    return float(h) if np.isscalar(h) or h.ndim == 0 else h


def hamiltonian(grid, x, v):
    """Discrete Hamiltonian H = v.v/2 + h(x), column-wise for matrix input."""
    v = np.asarray(v, dtype=float)
    kinetic = 0.5 * np.sum(v * v, axis=0)
    h = electric_energy(grid, x)
    out = kinetic + h
    return float(out) if np.ndim(out) == 0 else out
