import os

import numpy as np
import pytest

from src.grid_case import Branch, Bus, BusKind, Gen, GridCase, load_case
from src.vae import Architecture, build_vae

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CASE14_PATH = os.path.join(REPO_ROOT, "data", "case14.m")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def case14():
    return load_case(CASE14_PATH)


def make_two_bus(p_load=0.0, q_load=0.0, x=0.1, r=0.01):
    buses = (
        Bus(1, BusKind.SLACK, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        Bus(2, BusKind.PQ, p_load, q_load, 0.0, 0.0, 1.0, 0.0),
    )
    gens = (Gen(bus=1, p_out=0.0, q_out=0.0, q_max=999.0, q_min=-999.0, v_set=1.0),)
    branches = (Branch(1, 2, r, x),)
    return GridCase(base_mva=100.0, buses=buses, gens=gens, branches=branches, name="two_bus")


@pytest.fixture
def two_bus():
    return make_two_bus()


@pytest.fixture
def tiny_arch():
    return Architecture(encoder_hidden=(8,), latent_dim=2, decoder_hidden=(8,), input_dim=4)


@pytest.fixture
def tiny_model(tiny_arch):
    return build_vae(tiny_arch, rng=np.random.default_rng(7))
