"""Shared fixtures: a small generated dataset for training-dependent tests.

Everything lands in pytest temp directories so the repo tree stays
untouched.
"""

import re

import numpy as np
import pytest


def pytest_runtest_makereport(item, call):
    # one visible PASS/FAIL line per acceptance criterion
    match = re.match(r"test_criterion_(\d+)", item.name)
    if not match or "test_acceptance" not in item.nodeid:
        return
    if call.when == "setup" and call.excinfo is None:
        return
    if call.when not in ("setup", "call"):
        return
    num = int(match.group(1))
    outcome = "PASS" if call.excinfo is None else "FAIL"
    detail = getattr(item.module, "DETAILS", {}).get(num, "")
    reporter = item.config.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        line = f"CRITERION {num}: {outcome}"
        reporter.write_line("\n" + line + (f" - {detail}" if detail else ""))

from versadepth.rng import Rng
from versadepth.synth import default_profiles, generate_dataset, load_manifest


@pytest.fixture(scope="session")
def toy_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_data")
    generate_dataset(default_profiles(), out, scenes_per_camera=20, seed=11,
                     test_scenes=6)
    return out


@pytest.fixture(scope="session")
def toy_train(toy_data_dir):
    return load_manifest(toy_data_dir / "manifest.csv", split="train")


@pytest.fixture(scope="session")
def toy_test(toy_data_dir):
    return load_manifest(toy_data_dir / "manifest.csv", split="test")


@pytest.fixture()
def rng():
    return Rng(0)


@pytest.fixture()
def np_rng():
    return np.random.default_rng(0)
