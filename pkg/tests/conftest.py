import os
from importlib import resources

import numpy as np
import pytest
from hypothesis import settings

from impulse_qvi.model import load_config, load_spec, spec_from_dict

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

CATALOG = resources.files("impulse_qvi") / "catalog"


def catalog_path(name: str) -> str:
    return os.fspath(CATALOG / name)


def make_spec(actions=((0.0,),), **problem):
    """Small 1-D spec: Brownian state, linear payoff, no driver unless overridden."""
    base = dict(
        n=1,
        d=1,
        T=1.0,
        drift=["0"],
        vol=[["1"]],
        driver="0",
        terminal="x1",
        impulse=["x1"],
        cost="1",
        delta=1.0,
        box=[[-2.0, 2.0]],
    )
    base.update(problem)
    return spec_from_dict(base, {"points": [list(a) for a in actions]})


def catalog_variant(name: str = "reset1d.cfg", **problem):
    """A catalog problem with some ``[problem]`` fields replaced."""
    sections = load_config(catalog_path(name))
    table = {**sections["problem"], **problem}
    return spec_from_dict(table, sections["actions"])


@pytest.fixture(scope="session")
def reset_spec():
    return load_spec(catalog_path("reset1d.cfg"))


@pytest.fixture(scope="session")
def reset_nonlocal_spec():
    return load_spec(catalog_path("reset1d_nonlocal.cfg"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
