"""End-to-end orchestration of the FOM, ROM, hROM and rank-adaptive hROM."""

import math
import time as _time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import adapt as _adapt
from . import dlr as _dlr
from . import fom as _fom
from . import hyper as _hyper
from .fem import electric_energy, hamiltonian, field_gradient

MODELS = ("fom", "rom", "hrom", "hrom-ra")


@dataclass
class RunConfig:
    benchmark: _fom.BenchmarkSpec
    model: str = "hrom"
    n: int = 3
    tol_eim: float = 1e-4       # math.inf selects exact (identity) projectors
    delta_eim: int = 20
    pi_db: int = 6
    pi_av: int = 6
    pi_star: int = 6
    c1: float = 1.05
    c2: float = 1.05
    gamma: int = 1
    seed: int = 0
    snapshot_stride: int = 100
    metric_stride: int = 20
    histograms: bool = False
    outdir: str = ""

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        p = self.benchmark.n_params
        if self.model != "fom":
            if not 1 <= self.n <= p:
                raise ValueError(f"n={self.n} must be in 1..p={p}")
        # sample sizes are capped by the parameter count
        self.pi_av = min(self.pi_av, p)
        self.pi_db = min(self.pi_db, p)
        if self.model == "hrom-ra" and self.pi_star > p:
            raise ValueError(f"pi_star={self.pi_star} must not exceed p={p}")
        if self.gamma not in (0, 1):
            raise ValueError("gamma must be 0 or 1")


def preset(name):
    """Named benchmark configurations. Desk presets run in minutes; the
    paper-scale presets reproduce the published setup and run for hours."""
    presets = {
        "nlld-desk": _fom.BenchmarkSpec(
            kind="nlld", wavenumber=0.5, amp_range=(0.46, 0.5), sd_range=(0.96, 1.0),
            n_particles=20000, n_x=32, n_params=20, t_final=20.0, dt=0.01),
        "tsi-desk": _fom.BenchmarkSpec(
            kind="tsi", wavenumber=0.2, amp_range=(0.009, 0.011), sd_range=(0.98, 1.02),
            n_particles=30000, n_x=32, n_params=20, t_final=20.0, dt=0.01),
        "nlld-paper": _fom.BenchmarkSpec(
            kind="nlld", wavenumber=0.5, amp_range=(0.46, 0.5), sd_range=(0.96, 1.0),
            n_particles=100000, n_x=64, n_params=100, t_final=40.0, dt=0.002),
        "tsi-paper": _fom.BenchmarkSpec(
            kind="tsi", wavenumber=0.2, amp_range=(0.009, 0.011), sd_range=(0.98, 1.02),
            n_particles=150000, n_x=64, n_params=100, t_final=20.0, dt=0.0025),
    }
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    return presets[name]


@dataclass
class FullSnapshot:
    time: float
    x: np.ndarray
    v: np.ndarray

    def state_matrix(self):
        return np.vstack([self.x, self.v])


@dataclass
class ReducedSnapshot:
    time: float
    psi: np.ndarray
    y: np.ndarray
    w: np.ndarray

    def state_matrix(self):
        return np.vstack([self.psi @ self.y, self.psi @ self.w])


@dataclass
class MetricSeries:
    """Scalar diagnostics recorded along a run, one row per stored time."""

    time: np.ndarray
    electric_energy: np.ndarray  # (T, p) potential energy per parameter
    ham_err: np.ndarray          # (T,) parameter-averaged relative H drift
    reduced_dim: np.ndarray      # (T,)
    eim_size: np.ndarray         # (T,) union interpolation set size
    indicator: np.ndarray        # (T,) nan where not computed
    step_walltime: np.ndarray    # (T,) mean seconds/step since previous row


@dataclass
class RunResult:
    config: RunConfig
    series: MetricSeries
    snapshots: list
    final_state: object
    info: dict = dc_field(default_factory=dict)


class _Recorder:
    def __init__(self):
        self.rows = {k: [] for k in
                     ("time", "energy", "ham", "dim", "eim", "ind", "wall")}

    def add(self, t, energy, ham, dim, eim, ind, wall):
        self.rows["time"].append(t)
        self.rows["energy"].append(np.atleast_1d(energy))
        self.rows["ham"].append(ham)
        self.rows["dim"].append(dim)
        self.rows["eim"].append(eim)
        self.rows["ind"].append(ind)
        self.rows["wall"].append(wall)

    def series(self):
        return MetricSeries(
            time=np.array(self.rows["time"]),
            electric_energy=np.vstack(self.rows["energy"]),
            ham_err=np.array(self.rows["ham"]),
            reduced_dim=np.array(self.rows["dim"], dtype=int),
            eim_size=np.array(self.rows["eim"], dtype=int),
            indicator=np.array(self.rows["ind"], dtype=float),
            step_walltime=np.array(self.rows["wall"]),
        )


def _ham_err(h_now, h_init):
    return float(np.mean(np.abs(h_now - h_init) / np.abs(h_init)))


def _run_fom(config, grid):
    spec = config.benchmark
    state = _fom.sample_ensemble(spec)
    h0 = hamiltonian(grid, state.x, state.v)
    rec = _Recorder()
    snaps = [FullSnapshot(0.0, state.x.copy(), state.v.copy())]
    rec.add(0.0, electric_energy(grid, state.x), 0.0, 0, 0, math.nan, 0.0)
    e_cache = field_gradient(grid, state.x)
    wall, last_rec = 0.0, 0
    for step in range(1, spec.n_steps + 1):
        t0 = _time.perf_counter()
        state, e_cache = _fom.sv_step(grid, state, spec.dt, e_cache)
        wall += _time.perf_counter() - t0
        last = step == spec.n_steps
        if step % config.metric_stride == 0 or last:
            rec.add(state.time, electric_energy(grid, state.x),
                    _ham_err(hamiltonian(grid, state.x, state.v), h0),
                    0, 0, math.nan, wall / (step - last_rec))
            wall, last_rec = 0.0, step
        if step % config.snapshot_stride == 0 or last:
            if not snaps or snaps[-1].time != state.time:
                snaps.append(FullSnapshot(state.time, state.x.copy(), state.v.copy()))
    return RunResult(config, rec.series(), snaps, state, {})


def _run_reduced(config, grid):
    spec = config.benchmark
    ens = _fom.sample_ensemble(spec)
    rs = _dlr.cotangent_lift(ens.x, ens.v, config.n)
    tableau = _dlr.default_tableau()
    p = spec.n_params

    dec = eim = None
    exact_eim = math.isinf(config.tol_eim)
    if config.model in ("hrom", "hrom-ra"):
        dec = _hyper.HamiltonianDecomposition(grid, spec.n_particles)
        if exact_eim:
            eim = _hyper.identity_eim(dec)
        else:
            eim = _hyper.build_eim(grid, dec, rs.psi, rs.y, config.tol_eim,
                                   config.pi_db, w=rs.w)

    adapt_state = None
    updates = []
    if config.model == "hrom-ra":
        rng = np.random.default_rng(config.seed)
        basis = _adapt.legendre_basis(spec.amp_range, spec.sd_range)
        # a draw of sample parameters can make the interpolation system rank
        # deficient (too few distinct values along one axis); re-sample then
        for attempt in range(20):
            sample_idx = np.sort(rng.choice(p, size=config.pi_star, replace=False))
            try:
                interp = _adapt.build_interpolation_operator(
                    ens.params, sample_idx, basis)
                break
            except np.linalg.LinAlgError:
                if attempt == 19:
                    raise
        adapt_state = _adapt.init_adaptivity(
            grid, ens.x, ens.v, rs, sample_idx, interp,
            config.c1, config.c2, config.gamma)

    xr0, vr0 = rs.reconstruct()
    h0 = hamiltonian(grid, xr0, vr0)
    rec = _Recorder()
    snaps = [ReducedSnapshot(0.0, rs.psi.copy(), rs.y.copy(), rs.w.copy())]
    m0 = eim.union_size if eim is not None else 0
    ind0 = adapt_state.ref_indicator if adapt_state is not None else math.nan
    rec.add(0.0, electric_energy(grid, xr0), 0.0, rs.n, m0, ind0, 0.0)
    del ens

    max_ortho = 0.0
    wall, last_rec = 0.0, 0
    for step in range(1, spec.n_steps + 1):
        t0 = _time.perf_counter()
        if config.model == "rom":
            rs = _dlr.prk_step(rs, spec.dt, tableau, _dlr.ExactRhs(grid))
        else:
            rs = _hyper.prk_hr_step(grid, dec, eim, rs, spec.dt, config.pi_av,
                                    tableau=tableau)
        indicator = math.nan
        if adapt_state is not None:
            indicator = _adapt.error_indicator_step(grid, adapt_state, rs, spec.dt)
            if _adapt.update_due(adapt_state, indicator):
                psi, y, w, applied = _adapt.rank_update(
                    rs.psi, rs.y, rs.w, adapt_state.err, config.gamma,
                    adapt_state.interp)
                if applied:
                    rs = _dlr.ReducedState(psi=psi, y=y, w=w, time=rs.time,
                                           ortho_err=rs.ortho_err)
                    adapt_state.n_updates += 1
                    adapt_state.ref_indicator = indicator
                    updates.append((step, indicator))
                    if config.gamma:
                        # keep the cached sample-state quantities consistent
                        # with the corrected reconstruction
                        idx = adapt_state.sample_idx
                        xr = psi @ y[:, idx]
                        vr = psi @ w[:, idx]
                        adapt_state.err = adapt_state.err - np.vstack(
                            [xr - adapt_state.recon_x, vr - adapt_state.recon_v])
                        adapt_state.recon_x = xr
                        adapt_state.recon_v = vr
                        adapt_state.field = field_gradient(grid, xr)
        if (eim is not None and not exact_eim
                and config.delta_eim > 0 and step % config.delta_eim == 0):
            eim = _hyper.build_eim(grid, dec, rs.psi, rs.y, config.tol_eim,
                                   config.pi_db, w=rs.w)
        wall += _time.perf_counter() - t0
        max_ortho = max(max_ortho, rs.ortho_err)

        last = step == spec.n_steps
        if step % config.metric_stride == 0 or last:
            xr, vr = rs.reconstruct()
            rec.add(rs.time, electric_energy(grid, xr),
                    _ham_err(hamiltonian(grid, xr, vr), h0),
                    rs.n, eim.union_size if eim is not None else 0,
                    indicator, wall / (step - last_rec))
            wall, last_rec = 0.0, step
        if step % config.snapshot_stride == 0 or last:
            if not snaps or snaps[-1].time != rs.time:
                snaps.append(ReducedSnapshot(rs.time, rs.psi.copy(),
                                             rs.y.copy(), rs.w.copy()))
    info = {"updates": updates, "n_updates": len(updates), "max_ortho_err": max_ortho}
    return RunResult(config, rec.series(), snaps, rs, info)


def run(config):
    """Execute one configured run and return its metrics and snapshots.

    On failure mid-run the exception propagates after a diagnostic dump of the
    last recorded state (when an output directory is configured).
    """
    grid = config.benchmark.make_grid()
    runner = _run_fom if config.model == "fom" else _run_reduced
    try:
        result = runner(config, grid)
    except Exception:
        if config.outdir:
            import os

            os.makedirs(config.outdir, exist_ok=True)
            with open(os.path.join(config.outdir, "ABORTED"), "w") as fh:
                fh.write("run aborted; see traceback\n")
        raise
    if config.outdir:
        write_outputs(result, config.outdir)
    return result


def eps_rank(mat, eps):
    """Smallest truncation rank with relative Frobenius error below eps."""
    s = np.linalg.svd(mat, compute_uv=False)
    total = float(np.sum(s * s))
    if total == 0.0:
        return 0
    tail = np.sqrt(np.maximum(0.0, total - np.cumsum(s * s)) / total)
    below = np.nonzero(tail < eps)[0]
    if 1.0 < eps:
        return 0
    return int(below[0]) + 1 if below.size else len(s)


@dataclass
class ComparisonSeries:
    """Error of a model trajectory against the full order reference."""

    time: np.ndarray
    rel_err: np.ndarray
    rel_err_avg: float
    fom_eps_rank: dict


def metrics(fom_result, model_result, eps_values=(1e-1, 1e-2, 1e-3)):
    """Relative solution error over the common stored times plus its time
    average (trapezoidal rule) and the eps-rank history of the reference."""
    t_f = np.array([s.time for s in fom_result.snapshots])
    t_m = np.array([s.time for s in model_result.snapshots])
    if t_f.shape != t_m.shape or not np.allclose(t_f, t_m, rtol=0, atol=1e-12):
        raise ValueError("snapshot time grids are misaligned")
    errs = np.empty(t_f.size)
    ranks = {e: np.empty(t_f.size, dtype=int) for e in eps_values}
    for i, (sf, sm) in enumerate(zip(fom_result.snapshots, model_result.snapshots)):
        ref = sf.state_matrix()
        diff = sm.state_matrix() - ref
        errs[i] = np.linalg.norm(diff) / np.linalg.norm(ref)
        for e in eps_values:
            ranks[e][i] = eps_rank(ref, e)
    span = t_f[-1] - t_f[0]
    avg = float(np.trapezoid(errs, t_f) / span) if span > 0 else float(errs[0])
    return ComparisonSeries(time=t_f, rel_err=errs, rel_err_avg=avg,
                            fom_eps_rank=ranks)


def scaling_probe(config, p_list, n_steps=100):
    """Mean per-step wall time of the FOM and hROM over the first n_steps
    steps, for each parameter count in p_list."""
    if list(p_list) != sorted(p_list):
        raise ValueError("p_list must be ascending")
    rows = []
    for p in p_list:
        spec = replace(config.benchmark, n_params=int(p),
                       t_final=n_steps * config.benchmark.dt)
        for model in ("fom", "hrom"):
            cfg = replace(config, benchmark=spec, model=model,
                          snapshot_stride=10 ** 9, metric_stride=10 ** 9, outdir="")
            result = run(cfg)
            mean_wall = float(np.nanmean(result.series.step_walltime[1:]))
            rows.append({"model": model, "p": int(p),
                         "seconds_per_step": mean_wall})
    return rows


# ---------------------------------------------------------------------------
# configuration files and output writing

_CONFIG_KEYS = {
    "preset": str, "model": str, "n": int, "tol_eim": float, "delta_eim": int,
    "pi_db": int, "pi_av": int, "pi_star": int, "c1": float, "c2": float,
    "gamma": int, "seed": int, "snapshot_stride": int, "metric_stride": int,
    "histograms": bool, "outdir": str,
    # benchmark overrides
    "kind": str, "wavenumber": float, "amp_lo": float, "amp_hi": float,
    "sd_lo": float, "sd_hi": float, "n_particles": int, "n_x": int,
    "n_params": int, "t_final": float, "dt": float,
}

_BENCH_KEYS = ("kind", "wavenumber", "amp_lo", "amp_hi", "sd_lo", "sd_hi",
               "n_particles", "n_x", "n_params", "t_final", "dt")


def _coerce(key, raw):
    typ = _CONFIG_KEYS[key]
    if typ is bool:
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean for {key}: {raw!r}")
    return typ(raw)


def config_from_mapping(mapping):
    """Build a RunConfig from a flat key/value mapping (fail-closed)."""
    unknown = sorted(set(mapping) - set(_CONFIG_KEYS))
    if unknown:
        raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
    vals = {k: _coerce(k, v) for k, v in mapping.items()}
    bench_overrides = {k: vals.pop(k) for k in _BENCH_KEYS if k in vals}
    name = vals.pop("preset", None)
    if name is not None:
        spec = preset(name)
        ranges = {}
        if "amp_lo" in bench_overrides or "amp_hi" in bench_overrides:
            ranges["amp_range"] = (bench_overrides.pop("amp_lo", spec.amp_range[0]),
                                   bench_overrides.pop("amp_hi", spec.amp_range[1]))
        if "sd_lo" in bench_overrides or "sd_hi" in bench_overrides:
            ranges["sd_range"] = (bench_overrides.pop("sd_lo", spec.sd_range[0]),
                                  bench_overrides.pop("sd_hi", spec.sd_range[1]))
        spec = replace(spec, **bench_overrides, **ranges)
    else:
        required = set(_BENCH_KEYS)
        missing = sorted(required - set(bench_overrides))
        if missing:
            raise ValueError(
                "configuration needs 'preset' or all benchmark keys; missing: "
                + ", ".join(missing))
        spec = _fom.BenchmarkSpec(
            kind=bench_overrides["kind"],
            wavenumber=bench_overrides["wavenumber"],
            amp_range=(bench_overrides["amp_lo"], bench_overrides["amp_hi"]),
            sd_range=(bench_overrides["sd_lo"], bench_overrides["sd_hi"]),
            n_particles=bench_overrides["n_particles"],
            n_x=bench_overrides["n_x"],
            n_params=bench_overrides["n_params"],
            t_final=bench_overrides["t_final"],
            dt=bench_overrides["dt"])
    return RunConfig(benchmark=spec, **vals)


def parse_config(path):
    """Read a flat 'key = value' configuration file."""
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            mapping[key] = val
    if not mapping:
        raise ValueError(
            "empty configuration; required: 'preset' (or the benchmark keys "
            + ", ".join(_BENCH_KEYS) + ") plus optional run keys "
            + ", ".join(k for k in _CONFIG_KEYS if k not in _BENCH_KEYS))
    return config_from_mapping(mapping)


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def config_items(config):
    spec = config.benchmark
    items = {
        "model": config.model, "n": config.n, "tol_eim": config.tol_eim,
        "delta_eim": config.delta_eim, "pi_db": config.pi_db,
        "pi_av": config.pi_av, "pi_star": config.pi_star, "c1": config.c1,
        "c2": config.c2, "gamma": config.gamma, "seed": config.seed,
        "snapshot_stride": config.snapshot_stride,
        "metric_stride": config.metric_stride, "histograms": config.histograms,
        "kind": spec.kind, "wavenumber": spec.wavenumber,
        "amp_lo": spec.amp_range[0], "amp_hi": spec.amp_range[1],
        "sd_lo": spec.sd_range[0], "sd_hi": spec.sd_range[1],
        "n_particles": spec.n_particles, "n_x": spec.n_x,
        "n_params": spec.n_params, "t_final": spec.t_final, "dt": spec.dt,
    }
    return items


def write_outputs(result, outdir):
    """Write the metadata record, metric tables and optional histograms."""
    import os

    os.makedirs(outdir, exist_ok=True)
    try:
        from importlib.metadata import version

        ver = version("picrom")
    except Exception:
        ver = "0.1.0"

    with open(os.path.join(outdir, "metadata.txt"), "w") as fh:
        fh.write(f"picrom_version = {ver}\n")
        for key, val in sorted(config_items(result.config).items()):
            fh.write(f"{key} = {_fmt(val)}\n")
        for key, val in sorted(result.info.items()):
            if key != "updates":
                fh.write(f"info_{key} = {_fmt(val)}\n")

    ser = result.series
    # wall times go to their own table so the metric tables are reproducible
    # byte-for-byte across runs with the same configuration and seed
    with open(os.path.join(outdir, "metrics.csv"), "w") as fh:
        fh.write("time,electric_energy_mean,ham_err,n,m,indicator\n")
        for i in range(ser.time.size):
            fh.write(",".join([
                repr(float(ser.time[i])),
                repr(float(ser.electric_energy[i].mean())),
                repr(float(ser.ham_err[i])),
                str(int(ser.reduced_dim[i])),
                str(int(ser.eim_size[i])),
                repr(float(ser.indicator[i])),
            ]) + "\n")

    with open(os.path.join(outdir, "timings.csv"), "w") as fh:
        fh.write("time,step_walltime\n")
        for i in range(ser.time.size):
            fh.write(f"{float(ser.time[i])!r},{float(ser.step_walltime[i])!r}\n")

    with open(os.path.join(outdir, "energy.csv"), "w") as fh:
        p = ser.electric_energy.shape[1]
        fh.write("time," + ",".join(f"param{s}" for s in range(p)) + "\n")
        for i in range(ser.time.size):
            row = [repr(float(ser.time[i]))]
            row += [repr(float(v)) for v in ser.electric_energy[i]]
            fh.write(",".join(row) + "\n")

    np.savez_compressed(
        os.path.join(outdir, "snapshots.npz"),
        times=np.array([s.time for s in result.snapshots]),
        **_snapshot_arrays(result.snapshots),
    )

    if result.config.histograms:
        ell = result.config.benchmark.ell_x
        for i, snap in enumerate(result.snapshots):
            mat = snap.state_matrix()
            n_part = mat.shape[0] // 2
            x = np.mod(mat[:n_part, 0], ell)
            v = mat[n_part:, 0]
            counts, xe, ve = np.histogram2d(
                x, v, bins=128, range=[[0.0, ell], [-10.0, 10.0]])
            np.savez_compressed(
                os.path.join(outdir, f"hist_{i:04d}.npz"),
                counts=counts, x_edges=xe, v_edges=ve, time=snap.time)


def _snapshot_arrays(snapshots):
    arrays = {}
    for i, snap in enumerate(snapshots):
        if isinstance(snap, FullSnapshot):
            arrays[f"x_{i:04d}"] = snap.x
            arrays[f"v_{i:04d}"] = snap.v
        else:
            arrays[f"psi_{i:04d}"] = snap.psi
            arrays[f"y_{i:04d}"] = snap.y
            arrays[f"w_{i:04d}"] = snap.w
    return arrays


def load_snapshots(path):
    """Rebuild snapshot objects from a snapshots.npz file."""
    data = np.load(path)
    times = data["times"]
    snaps = []
    for i, t in enumerate(times):
        if f"x_{i:04d}" in data:
            snaps.append(FullSnapshot(float(t), data[f"x_{i:04d}"], data[f"v_{i:04d}"]))
        else:
            snaps.append(ReducedSnapshot(float(t), data[f"psi_{i:04d}"],
                                         data[f"y_{i:04d}"], data[f"w_{i:04d}"]))
    return snaps
