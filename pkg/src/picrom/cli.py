"""Command line interface: run, metrics and scaling subcommands."""

import argparse
import os
import sys

from . import driver


def _add_run_flags(parser):
    parser.add_argument("--config", help="flat key = value configuration file")
    for key, typ in driver._CONFIG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, dest=f"opt_{key}", default=None,
                            help=f"override config key {key}")


def _collect_mapping(args):
    mapping = {}
    if args.config:
        cfg = driver.parse_config(args.config)
        mapping.update({k: str(v) for k, v in driver.config_items(cfg).items()})
        mapping["outdir"] = cfg.outdir
    for key in driver._CONFIG_KEYS:
        val = getattr(args, f"opt_{key}", None)
        if val is not None:
            mapping[key] = val
    if not mapping:
        raise SystemExit("no configuration given; pass --config or --preset plus flags")
    mapping.pop("kind", None) if "preset" in mapping and args.config is None else None
    return mapping


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="picrom",
        description="Vlasov-Poisson particle models: full order, low-rank "
                    "reduced, and adaptive hyper-reduced simulations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured simulation")
    _add_run_flags(p_run)

    p_met = sub.add_parser("metrics", help="compare a model run against a FOM run")
    p_met.add_argument("--fom-dir", required=True)
    p_met.add_argument("--model-dir", required=True)
    p_met.add_argument("--out", required=True, help="output CSV path")

    p_sca = sub.add_parser("scaling", help="per-step cost versus parameter count")
    _add_run_flags(p_sca)
    p_sca.add_argument("--p-list", required=True,
                       help="comma-separated ascending parameter counts")
    p_sca.add_argument("--out", required=True, help="output CSV path")

    args = parser.parse_args(argv)

    if args.command == "run":
        mapping = _collect_mapping(args)
        config = driver.config_from_mapping(mapping)
        if not config.outdir:
            raise SystemExit("run requires an output directory (outdir)")
        driver.run(config)
        return 0

    if args.command == "metrics":
        from dataclasses import dataclass

        @dataclass
        class _Loaded:
            snapshots: list

        fom_res = _Loaded(driver.load_snapshots(
            os.path.join(args.fom_dir, "snapshots.npz")))
        mod_res = _Loaded(driver.load_snapshots(
            os.path.join(args.model_dir, "snapshots.npz")))
        comp = driver.metrics(fom_res, mod_res)
        with open(args.out, "w") as fh:
            eps_keys = sorted(comp.fom_eps_rank)
            fh.write("time,rel_err," + ",".join(f"eps_rank_{e:g}" for e in eps_keys)
                     + "\n")
            for i in range(comp.time.size):
                row = [repr(float(comp.time[i])), repr(float(comp.rel_err[i]))]
                row += [str(int(comp.fom_eps_rank[e][i])) for e in eps_keys]
                fh.write(",".join(row) + "\n")
            fh.write(f"# rel_err_avg = {comp.rel_err_avg!r}\n")
        return 0

    if args.command == "scaling":
        mapping = _collect_mapping(args)
        config = driver.config_from_mapping(mapping)
        p_list = [int(tok) for tok in args.p_list.split(",")]
        rows = driver.scaling_probe(config, p_list)
        with open(args.out, "w") as fh:
            fh.write("model,p,seconds_per_step\n")
            for row in rows:
                fh.write(f"{row['model']},{row['p']},{row['seconds_per_step']!r}\n")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
