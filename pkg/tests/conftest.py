import os
from collections import OrderedDict

import numpy as np
import pytest
import torch

from perceptlab.backbones import BackboneSpec
from perceptlab.core import DTYPE, RngSeed
from perceptlab.toydata import distort, make_fr_toy, make_nr_toy, make_sr_toy, toy_image

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

_ACCEPTANCE = OrderedDict()


def pytest_addoption(parser):
    parser.addoption(
        "--integration",
        action="store_true",
        default=False,
        help="run full-scale reproduction targets (pretrained weights and public datasets required)",
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "integration: full-scale targets, enabled by --integration")
    config.addinivalue_line("markers", "slow: smoke runs taking more than a few seconds")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--integration"):
        return
    skip = pytest.mark.skip(reason="needs --integration")
    for item in items:
        if "integration" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL/SKIP line per acceptance criterion."""

    def record(number, description, status, detail=""):
        _ACCEPTANCE[number] = (description, status, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        description, status, detail = _ACCEPTANCE[number]
        line = f"criterion {number}: {status}: {description}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    return BackboneSpec("tiny")


def random_pair(rng, size=32, channels=3):
    """A toy image and a distorted copy."""
    ref = toy_image(rng, size)
    if channels == 1:
        ref = ref[:1]
    kind = ("noise", "blur", "contrast")[int(rng.integers(3))]
    return distort(ref, kind, float(rng.uniform(0.1, 1.0)), rng), ref


def random_image(rng, size=32, channels=3):
    return torch.from_numpy(rng.uniform(0, 1, size=(channels, size, size))).to(DTYPE)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_sr_toy(root / "sr", n_train=8, n_val=4, size=32, seed=0)
    make_fr_toy(root / "fr", seed=0)
    make_nr_toy(root / "nr", n=60, seed=0)
    return root


@pytest.fixture(scope="session")
def seed():
    return RngSeed(7)
