import numpy as np
import pandas as pd
import pytest

from ipdcate.data_model import from_frame
from ipdcate.simulation import ScenarioConfig, generate_dataset


@pytest.fixture(scope="session")
def small_data():
    """Deterministic J=10 simulated dataset shared by slow-ish tests."""
    cfg = ScenarioConfig(j_studies=10, study_size=120, replications=1, seed=2024)
    return generate_dataset(cfg, np.random.SeedSequence((2024, 0, 0)))


@pytest.fixture()
def toy_frame():
    """Six records, two studies, two treatments; small enough to check by hand."""
    return pd.DataFrame({
        "study_id": ["s1", "s1", "s1", "s2", "s2", "s2"],
        "y": [1.0, 0.0, 1.0, 0.0, 1.0, 1.0],
        "a_t1": [1, 0, 1, 0, 0, 0],
        "a_t2": [1, 1, 0, 0, 1, 0],
        "s_year": [1999, 1999, 1999, 2004, 2004, 2004],
        "w_age": [30.0, 40.0, 50.0, 35.0, 45.0, 55.0],
        "w_hiv": [0, 1, 0, 0, 1, 1],
        "r_t1": [0, 0, 1, 0, 1, 0],
    })


@pytest.fixture()
def toy_data(toy_frame):
    return from_frame(toy_frame)
