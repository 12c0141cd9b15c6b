r"""Allows for command line arguments controlling property test effort and desk-scale runs.

Examples
--------

pytest --seeds=50 --run-slow
"""

import numpy
import pandas
import pytest

from trip_attention import TRIP
from trip_attention.core.synthetic import SyntheticConfig, generate_synthetic_sample
from trip_attention.package import config_path

# define options for both pytest conftest.py and argparse
options = {
    "--seeds": {
        "action": "store",
        "type": int,
        "default": 20,
        "help": "Number of random seeds for property tests.",
    },
    "--run-slow": {
        "action": "store_true",
        "default": False,
        "help": "Run desk-scale training tests marked slow.",
    },
}


# add options defined above as an option to pytest
def pytest_addoption(parser):
    for opt in options:
        parser.addoption(opt, **options[opt])


# skip slow tests unless requested
def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="desk-scale run, use --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def seeds(request):
    return list(range(request.config.getoption("--seeds")))


# create namespace functions for testing docstrings
@pytest.fixture(autouse=True, scope="session")
def add_docstring_namespace(doctest_namespace):
    doctest_namespace["np"] = numpy
    doctest_namespace["pd"] = pandas

    trip = TRIP(config_path("desk.net"), seed=0)
    doctest_namespace["models"] = trip.models
    doctest_namespace["samples"] = [generate_synthetic_sample(1, SyntheticConfig(timebins=2))[0]]
