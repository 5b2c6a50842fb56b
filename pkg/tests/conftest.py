import numpy as np
import pytest

from app.services.simgen import Family, SimConfig, simulate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def bn_dataset():
    """Tres subpoblaciones discretas, chico para tests rapidos."""
    config = SimConfig(family=Family.BN_SURROGATE, M=300, N=80, n_causal=5)
    return simulate_dataset(config, seed=3)


def write_config(path, **values) -> str:
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
    return str(path)
