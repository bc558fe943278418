import numpy as np
import pytest
import torch

from lesioncascade.synthgen import SynthConfig, generate_cls_dataset, generate_seg_dataset

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion of the build")
    config._acceptance = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        item.config._acceptance.append((number, title, status))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config._acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status in sorted(config._acceptance):
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def seg_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("seg")
    return generate_seg_dataset(SynthConfig(n_samples=10, image_size=(32, 32), seed=3), root)


@pytest.fixture(scope="session")
def cls_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cls")
    return generate_cls_dataset(SynthConfig(n_samples=14, image_size=(32, 32), seed=5), root)
