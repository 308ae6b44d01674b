"""Full order particle model: quasirandom initialization and Stormer-Verlet."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .fem import FemGrid, field_gradient, electric_energy


@dataclass
class BenchmarkSpec:
    """Benchmark description: initial distribution family and run sizes.

    kind is 'nlld' (Maxwellian) or 'tsi' (two counter-streaming beams at +-3).
    The parameter box is [amp_lo, amp_hi] x [sd_lo, sd_hi] for the perturbation
    amplitude and the velocity standard deviation.
    """

    kind: str
    wavenumber: float
    amp_range: tuple
    sd_range: tuple
    n_particles: int
    n_x: int
    n_params: int
    t_final: float
    dt: float

    def __post_init__(self):
        if self.kind not in ("nlld", "tsi"):
            raise ValueError(f"unknown benchmark kind {self.kind!r}")
        if self.dt <= 0 or self.t_final <= 0:
            raise ValueError("dt and t_final must be positive")
        if self.amp_range[0] >= self.amp_range[1] or self.sd_range[0] >= self.sd_range[1]:
            raise ValueError("parameter box must be non-degenerate")

    @property
    def ell_x(self):
        return 2.0 * math.pi / self.wavenumber

    @property
    def n_steps(self):
        return int(round(self.t_final / self.dt))

    def make_grid(self):
        return FemGrid(self.ell_x, self.n_x)


@dataclass
class EnsembleState:
    """Positions and velocities for all particles and test parameters."""

    x: np.ndarray  # (N, p)
    v: np.ndarray  # (N, p)
    params: list   # p pairs (amp, sd)
    time: float = 0.0


def radical_inverse_base2(i):
    """Van der Corput radical inverse in base 2 for positive integer indices."""
    i = np.asarray(i, dtype=np.uint64)
    out = np.zeros(i.shape, dtype=float)
    f = 0.5
    work = i.copy()
    while work.any():
        out += f * (work & np.uint64(1))
        work >>= np.uint64(1)
        f *= 0.5
    return out


def hammersley(n):
    """n Hammersley points in [0,1)^2: ((i-0.5)/n, phi_2(i)) for i = 1..n.

    The half-cell offset on the first coordinate keeps u away from 0 and 1,
    so the periodic wrap never duplicates a sample at x = ell_x.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(1, n + 1)
    return np.column_stack([(i - 0.5) / n, radical_inverse_base2(i)])


def _invert_monotone(fun, targets, lo, hi, x0, tol=1e-12, max_iter=100):
    """Vectorized safeguarded Newton for F(x) = target with F increasing.

    fun returns (F(x), F'(x)). Convergence is checked before the first step so
    an exact initial guess is returned untouched. Newton steps falling outside
    the current bracket are replaced by bisection.
    """
    lo = np.full_like(x0, lo, dtype=float)
    hi = np.full_like(x0, hi, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(max_iter):
        f, df = fun(x)
        resid = f - targets
        done = np.abs(resid) <= tol
        if done.all():
            return x
        lo = np.where(resid < 0, np.maximum(lo, x), lo)
        hi = np.where(resid > 0, np.minimum(hi, x), hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(df > 0, resid / np.where(df > 0, df, 1.0), np.inf)
        cand = x - step
        bad = ~np.isfinite(cand) | (cand <= lo) | (cand >= hi)
        cand = np.where(bad, 0.5 * (lo + hi), cand)
        x = np.where(done, x, cand)
    raise RuntimeError(
        "inverse CDF iteration did not converge in 100 steps; check parameters"
    )


def _velocity_cdf(spec, sd):
    if spec.kind == "nlld":
        def cdf(v):
            z = v / sd
            pdf = np.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi))
            return ndtr(z), pdf
    else:
        def cdf(v):
            zp = (v - 3.0) / sd
            zm = (v + 3.0) / sd
            c = 0.5 * (ndtr(zp) + ndtr(zm))
            pdf = 0.5 * (
                np.exp(-0.5 * zp * zp) + np.exp(-0.5 * zm * zm)
            ) / (sd * math.sqrt(2.0 * math.pi))
            return c, pdf
    return cdf


def sample_initial(spec, param):
    """Initial particle state for one parameter via inverse-CDF sampling.

    The Hammersley pair (u, w) feeds u into the spatial CDF
    F(x) = (x + (amp/k) sin(k x)) / ell_x and w into the velocity CDF.
    """
    amp, sd = param
    if abs(amp) >= 1.0:
        raise ValueError("perturbation amplitude must satisfy |amp| < 1")
    pts = hammersley(spec.n_particles)
    u, w = pts[:, 0], pts[:, 1]
    k = spec.wavenumber
    ell = spec.ell_x

    def space_cdf(x):
        return (x + (amp / k) * np.sin(k * x)) / ell, (1.0 + amp * np.cos(k * x)) / ell

    x = _invert_monotone(space_cdf, u, 0.0, ell, ell * u)
    v = _invert_monotone(_velocity_cdf(spec, sd), w, -10.0, 10.0, np.zeros_like(w))
    return x, v


def parameter_grid(amp_range, sd_range, p):
    """p test parameters covering the box as uniformly as possible.

    A near-square tensor grid is used when p factors; otherwise the points
    come from the Hammersley set mapped onto the box.
    """
    p1 = 1
    for d in range(int(math.isqrt(p)), 0, -1):
        if p % d == 0:
            p1 = d
            break
    if p1 == 1 and p > 3:
        pts = hammersley(p)
        amps = amp_range[0] + (amp_range[1] - amp_range[0]) * pts[:, 0]
        sds = sd_range[0] + (sd_range[1] - sd_range[0]) * pts[:, 1]
        return [(float(a), float(s)) for a, s in zip(amps, sds)]
    p2 = p // p1
    amps = np.linspace(amp_range[0], amp_range[1], p1)
    sds = np.linspace(sd_range[0], sd_range[1], p2)
    return [(float(a), float(s)) for a in amps for s in sds]


def sample_ensemble(spec):
    """Initial EnsembleState over the spec's full parameter set."""
    params = parameter_grid(spec.amp_range, spec.sd_range, spec.n_params)
    N = spec.n_particles
    X = np.empty((N, len(params)))
    V = np.empty((N, len(params)))
    for s, param in enumerate(params):
        X[:, s], V[:, s] = sample_initial(spec, param)
    return EnsembleState(x=X, v=V, params=params, time=0.0)


def sv_step(grid, state, dt, e_current=None):
    """One Stormer-Verlet step. Returns the new state and the field at the
    new positions, which the caller passes back in as e_current next step."""
    if e_current is None:
        e_current = field_gradient(grid, state.x)
    x_new = state.x + dt * (state.v - 0.5 * dt * e_current)
    e_new = field_gradient(grid, x_new)
    v_new = state.v - 0.5 * dt * (e_current + e_new)
    return EnsembleState(x=x_new, v=v_new, params=state.params, time=state.time + dt), e_new


@dataclass
class Trajectory:
    """Strided snapshots of a run, with enough to rebuild full states."""

    times: list = field(default_factory=list)
    snaps: list = field(default_factory=list)  # entries as returned by a reconstructor
    energy: list = field(default_factory=list)  # electric energy per parameter

    def append(self, t, snap, energy):
        self.times.append(t)
        self.snaps.append(snap)
        self.energy.append(energy)


def run_fom(grid, spec, store_every=20, state=None):
    """Advance the full order model for spec.n_steps steps.

    Snapshots (copies of X, V) and the electric energy per parameter are kept
    every store_every steps plus at the initial and final times.
    """
    if state is None:
        state = sample_ensemble(spec)
    traj = Trajectory()
    traj.append(state.time, (state.x.copy(), state.v.copy()), electric_energy(grid, state.x))
    n_steps = spec.n_steps
    e_cache = field_gradient(grid, state.x)
    for step in range(1, n_steps + 1):
        state, e_cache = sv_step(grid, state, spec.dt, e_cache)
        if step % store_every == 0 or step == n_steps:
            traj.append(state.time, (state.x.copy(), state.v.copy()),
                        electric_energy(grid, state.x))
    return traj, state
