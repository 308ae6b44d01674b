import math
import os
import subprocess
import sys

import numpy as np
import pytest

from picrom.fom import BenchmarkSpec
from picrom.driver import (
    ComparisonSeries,
    FullSnapshot,
    ReducedSnapshot,
    RunConfig,
    config_from_mapping,
    eps_rank,
    load_snapshots,
    metrics,
    parse_config,
    preset,
    run,
    scaling_probe,
    write_outputs,
)


def tiny_spec(**over):
    base = dict(kind="nlld", wavenumber=0.5, amp_range=(0.46, 0.5),
                sd_range=(0.96, 1.0), n_particles=200, n_x=8, n_params=5,
                t_final=0.5, dt=0.01)
    base.update(over)
    return BenchmarkSpec(**base)


class TestPresets:
    def test_nlld_box(self):
        spec = preset("nlld-desk")
        assert spec.amp_range == (0.46, 0.5)
        assert spec.sd_range == (0.96, 1.0)
        assert spec.wavenumber == 0.5
        assert spec.ell_x == pytest.approx(4 * np.pi)

    def test_tsi_box(self):
        spec = preset("tsi-paper")
        assert spec.amp_range == (0.009, 0.011)
        assert spec.sd_range == (0.98, 1.02)
        assert spec.wavenumber == 0.2

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            preset("nope")


class TestConfigParsing:
    def test_empty_config_lists_required_keys(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("# nothing here\n")
        with pytest.raises(ValueError, match="preset"):
            parse_config(path)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown configuration keys"):
            config_from_mapping({"preset": "nlld-desk", "wibble": "3"})

    def test_preset_with_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "preset = nlld-desk\nmodel = rom\nn = 2\nn_particles = 500\n"
            "t_final = 1.0\nseed = 7\n")
        cfg = parse_config(path)
        assert cfg.model == "rom"
        assert cfg.n == 2
        assert cfg.benchmark.n_particles == 500
        assert cfg.benchmark.t_final == 1.0
        assert cfg.benchmark.n_x == 32  # untouched preset value

    def test_explicit_benchmark(self):
        cfg = config_from_mapping({
            "kind": "tsi", "wavenumber": "0.2", "amp_lo": "0.009",
            "amp_hi": "0.011", "sd_lo": "0.98", "sd_hi": "1.02",
            "n_particles": "100", "n_x": "8", "n_params": "4",
            "t_final": "0.1", "dt": "0.01", "model": "fom"})
        assert cfg.benchmark.kind == "tsi"
        assert cfg.benchmark.n_params == 4

    def test_missing_benchmark_keys_listed(self):
        with pytest.raises(ValueError, match="missing"):
            config_from_mapping({"kind": "tsi", "model": "fom"})

    def test_invalid_model(self):
        with pytest.raises(ValueError, match="model"):
            RunConfig(benchmark=tiny_spec(), model="wrong")


class TestEpsRank:
    def test_constructed_rank_three(self):
        rng = np.random.default_rng(80)
        u = np.linalg.qr(rng.standard_normal((40, 3)))[0]
        v = np.linalg.qr(rng.standard_normal((10, 3)))[0]
        mat = u @ np.diag([10.0, 5.0, 1.0]) @ v.T
        mat += 1e-10 * rng.standard_normal((40, 10))
        assert eps_rank(mat, 1e-6) == 3

    def test_extremes(self):
        mat = np.outer(np.arange(5.0), np.ones(3))
        assert eps_rank(mat, 2.0) == 0
        assert eps_rank(np.zeros((4, 2)), 0.5) == 0
        assert eps_rank(mat, 1e-14) == 1


class TestMetrics:
    def test_identical_trajectories(self):
        cfg = RunConfig(benchmark=tiny_spec(), model="fom", snapshot_stride=10,
                        metric_stride=10)
        res = run(cfg)
        comp = metrics(res, res)
        assert np.max(comp.rel_err) == 0.0
        assert comp.rel_err_avg == 0.0

    def test_misaligned_grids_rejected(self):
        cfg1 = RunConfig(benchmark=tiny_spec(), model="fom", snapshot_stride=10,
                         metric_stride=10)
        cfg2 = RunConfig(benchmark=tiny_spec(), model="fom", snapshot_stride=25,
                         metric_stride=25)
        with pytest.raises(ValueError, match="misaligned"):
            metrics(run(cfg1), run(cfg2))

    def test_exactly_conserved_synthetic_hamiltonian(self):
        # E_H of a model whose reconstructed states are frozen in time is 0
        cfg = RunConfig(benchmark=tiny_spec(t_final=0.1), model="fom",
                        snapshot_stride=5, metric_stride=5)
        res = run(cfg)
        frozen = [FullSnapshot(s.time, res.snapshots[0].x, res.snapshots[0].v)
                  for s in res.snapshots]
        from picrom.fem import hamiltonian

        grid = cfg.benchmark.make_grid()
        h = [hamiltonian(grid, s.x, s.v) for s in frozen]
        e_h = [np.mean(np.abs(hi - h[0]) / np.abs(h[0])) for hi in h]
        assert np.max(e_h) == 0.0


class TestRunModels:
    def test_degenerate_hrom_equals_rom(self):
        spec = tiny_spec()
        rom = run(RunConfig(benchmark=spec, model="rom", n=3,
                            snapshot_stride=10, metric_stride=10))
        hrom = run(RunConfig(benchmark=spec, model="hrom", n=3,
                             tol_eim=math.inf, pi_av=spec.n_params,
                             snapshot_stride=10, metric_stride=10))
        assert np.allclose(rom.series.electric_energy,
                           hrom.series.electric_energy, rtol=1e-10, atol=1e-13)
        assert np.allclose(rom.series.ham_err, hrom.series.ham_err,
                           rtol=1e-8, atol=1e-10)
        for a, b in zip(rom.snapshots, hrom.snapshots):
            assert np.max(np.abs(a.state_matrix() - b.state_matrix())) <= 1e-10

    def test_rank_adaptive_run_bookkeeping(self):
        spec = tiny_spec(n_params=12, t_final=1.0)
        cfg = RunConfig(benchmark=spec, model="hrom-ra", n=2, pi_star=6,
                        pi_av=6, pi_db=6, gamma=1, c1=1.01, c2=1.01,
                        snapshot_stride=20, metric_stride=10, seed=3)
        res = run(cfg)
        dims = res.series.reduced_dim
        assert np.all(np.diff(dims) >= 0)
        if res.info["updates"]:
            steps = [s for s, _ in res.info["updates"]]
            assert all(b > a for a, b in zip(steps, steps[1:]))
            assert dims[-1] > 2
        assert res.info["max_ortho_err"] <= 1e-9

    def test_reproducibility_byte_identical(self, tmp_path):
        spec = tiny_spec(t_final=0.2)
        outs = []
        for sub in ("a", "b"):
            cfg = RunConfig(benchmark=spec, model="hrom", n=2, seed=11,
                            snapshot_stride=10, metric_stride=10,
                            outdir=str(tmp_path / sub))
            run(cfg)
            outs.append((tmp_path / sub / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_outputs_round_trip(self, tmp_path):
        cfg = RunConfig(benchmark=tiny_spec(t_final=0.1), model="fom",
                        snapshot_stride=5, metric_stride=5,
                        outdir=str(tmp_path / "fomrun"), histograms=True)
        res = run(cfg)
        outdir = tmp_path / "fomrun"
        assert (outdir / "metadata.txt").exists()
        assert (outdir / "metrics.csv").exists()
        assert (outdir / "energy.csv").exists()
        snaps = load_snapshots(outdir / "snapshots.npz")
        assert len(snaps) == len(res.snapshots)
        assert np.allclose(snaps[-1].x, res.snapshots[-1].x)
        hists = sorted(outdir.glob("hist_*.npz"))
        assert len(hists) == len(res.snapshots)
        data = np.load(hists[0])
        assert data["counts"].shape == (128, 128)
        assert data["counts"].sum() == cfg.benchmark.n_particles

    def test_metadata_contains_config(self, tmp_path):
        cfg = RunConfig(benchmark=tiny_spec(t_final=0.05), model="rom", n=2,
                        seed=5, snapshot_stride=5, metric_stride=5,
                        outdir=str(tmp_path / "meta"))
        run(cfg)
        text = (tmp_path / "meta" / "metadata.txt").read_text()
        assert "seed = 5" in text
        assert "model = rom" in text
        assert "picrom_version" in text


class TestScalingProbe:
    def test_single_entry(self):
        cfg = RunConfig(benchmark=tiny_spec(n_particles=400, n_params=8),
                        model="hrom", n=2, pi_av=4, pi_db=4)
        rows = scaling_probe(cfg, [8], n_steps=10)
        assert len(rows) == 2
        assert {r["model"] for r in rows} == {"fom", "hrom"}
        assert all(r["seconds_per_step"] > 0 for r in rows)

    def test_rejects_unsorted(self):
        cfg = RunConfig(benchmark=tiny_spec(), model="hrom", n=2)
        with pytest.raises(ValueError):
            scaling_probe(cfg, [100, 50])


class TestCli:
    def test_run_and_metrics_roundtrip(self, tmp_path):
        cfg_text = (
            "preset = nlld-desk\nn_particles = 300\nn_x = 8\nn_params = 4\n"
            "t_final = 0.2\ndt = 0.01\nsnapshot_stride = 10\n"
            "metric_stride = 10\n")
        fom_cfg = tmp_path / "fom.cfg"
        fom_cfg.write_text(cfg_text + "model = fom\n"
                           + f"outdir = {tmp_path / 'fom_out'}\n")
        rom_cfg = tmp_path / "rom.cfg"
        rom_cfg.write_text(cfg_text + "model = rom\nn = 2\n"
                           + f"outdir = {tmp_path / 'rom_out'}\n")
        for cfg in (fom_cfg, rom_cfg):
            proc = subprocess.run(
                [sys.executable, "-m", "picrom.cli", "run", "--config", str(cfg)],
                capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
        out_csv = tmp_path / "comparison.csv"
        proc = subprocess.run(
            [sys.executable, "-m", "picrom.cli", "metrics",
             "--fom-dir", str(tmp_path / "fom_out"),
             "--model-dir", str(tmp_path / "rom_out"),
             "--out", str(out_csv)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0].startswith("time,rel_err")
        assert lines[-1].startswith("# rel_err_avg")

    def test_flag_overrides(self, tmp_path):
        out = tmp_path / "flagged"
        proc = subprocess.run(
            [sys.executable, "-m", "picrom.cli", "run", "--preset", "nlld-desk",
             "--model", "fom", "--n-particles", "200", "--n-x", "8",
             "--n-params", "3", "--t-final", "0.05", "--metric-stride", "5",
             "--snapshot-stride", "5", "--outdir", str(out)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (out / "metrics.csv").exists()
        meta = (out / "metadata.txt").read_text()
        assert "n_particles = 200" in meta
