"""Shared fixtures: the two-zone plant, desk-scale controller settings and a small CKKS context."""

import numpy as np
import pytest

from cipherctl.modules.ckks import CKKSContext, Evaluator
from cipherctl.modules.controller import make_streams, prepare_offline
from cipherctl.modules.plant import load_preset
from cipherctl.modules.ring import gen_params
from cipherctl.utils.settings import CtlConfig, HEConfig

DESK_RING = 1024


@pytest.fixture(scope="session")
def plant():
    return load_preset("thermal_2zone")


@pytest.fixture(scope="session")
def quiet_plant(plant):
    return plant.noiseless()


@pytest.fixture(scope="session")
def desk_cfg():
    """M = N = 2 and T = 20 give 17 offline columns; two columns are collected online."""
    return CtlConfig(M=2, N=2, T=20, T_bar=2, refresh_period=1)


@pytest.fixture(scope="session")
def desk_he():
    return HEConfig(ring_dim=DESK_RING, moduli=8)


@pytest.fixture(scope="session")
def desk_offline(quiet_plant, desk_cfg):
    return prepare_offline(quiet_plant, desk_cfg, make_streams(7).offline)


@pytest.fixture(scope="session")
def he_pair():
    """CKKS context with rotation keys for every index of a 512-slot vector that the tests use."""
    ctx = CKKSContext(gen_params(DESK_RING, 5))
    rng = np.random.default_rng(2024)
    keys = ctx.keygen(rng, rotations=range(-16, 17))
    ctx.add_rotation_keys(keys, [32, 64, 128, 256, -32, -64], rng)
    return ctx, keys, Evaluator(ctx, keys.public()), rng


@pytest.fixture
def rng():
    return np.random.default_rng(11)
