import math

import numpy as np
import pytest
from hypothesis import settings

from seqsafety.simulation import ScenarioConfig, seasonal_curve, seasonal_uptake

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def small_config():
    return ScenarioConfig(
        n_subjects=400, baseline_log_rate=seasonal_curve(math.log(0.01), 0.3),
        uptake_curve=seasonal_uptake(0.7, 0.0), true_log_rr=math.log(2.0),
        historical_rate_multiplier=0.8, master_seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
