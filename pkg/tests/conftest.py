import logging

import pytest

from picrom.driver import RunConfig, preset, run

logging.getLogger("picrom").setLevel(logging.ERROR)


def _desk_config(name, model, **kwargs):
    return RunConfig(benchmark=preset(name), model=model, snapshot_stride=100,
                     metric_stride=20, **kwargs)


@pytest.fixture(scope="session")
def nlld_desk_runs():
    """FOM, ROM and hROM on the NLLD desk preset (shared by several suites)."""
    results = {}
    results["fom"] = run(_desk_config("nlld-desk", "fom"))
    results["rom"] = run(_desk_config("nlld-desk", "rom", n=3))
    results["hrom"] = run(_desk_config("nlld-desk", "hrom", n=3))
    return results


@pytest.fixture(scope="session")
def tsi_desk_runs():
    results = {}
    results["fom"] = run(_desk_config("tsi-desk", "fom"))
    results["hrom"] = run(_desk_config("tsi-desk", "hrom", n=3))
    return results
