"""Shared fixtures: built-in systems, light probe settings, seeded generators"""

from pathlib import Path

import numpy as np
import pytest

from dynamics import ProbeSettings
from modelspec import builtin_lotka_volterra, builtin_mass_spring, mass_spring_positions, parse_model
from system import box_xi_sampler, build_system

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240517)


@pytest.fixture
def lv_spec():
    return builtin_lotka_volterra()


@pytest.fixture
def lv_system(lv_spec):
    return build_system(lv_spec)


@pytest.fixture
def spring_spec():
    return builtin_mass_spring(2)


@pytest.fixture
def spring_system(spring_spec):
    return build_system(spring_spec)


@pytest.fixture
def position_sampler():
    """Clamp sampler for mass-spring chains: random positions, zero momenta"""
    def make(spec):
        return box_xi_sampler(spec, random_coords=mass_spring_positions(spec))
    return make


@pytest.fixture
def fast_probe() -> ProbeSettings:
    return ProbeSettings(n_trials=3, xi_draws=2, t_max=200.0)


@pytest.fixture
def decay_system():
    """x' = -x on the real line"""
    return build_system(parse_model("var X in (-inf,inf)\ndyn X = -X\ninit X = 1.0", name="decay"))
