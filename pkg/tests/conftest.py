"""
Shared fixtures and hypothesis profiles
"""
import os

import hypothesis
import numpy as np
import pytest

from models.data import DataConfig
from models.experiment import FrequencyConfig
from services.rope_core import build_frequencies, classic_frequencies

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("dev", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=500, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))

def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")

@pytest.fixture
def rng():
    return np.random.default_rng(20240601)

@pytest.fixture
def small_data():
    """Gradient-check dimensions: K=2, N_in=4 (N=9), d_X=4, d_b=20"""
    return DataConfig(K=2, N_in=4, d_X=4, d_b=20)

@pytest.fixture
def small_freqs(small_data):
    return build_frequencies(FrequencyConfig(), small_data)

@pytest.fixture
def tiny_data():
    """N_in=3 (N=7) with a pulse band of 8 frequencies"""
    return DataConfig(K=2, N_in=3, d_X=2, d_b=16)

@pytest.fixture
def tiny_freqs(tiny_data):
    return build_frequencies(FrequencyConfig(), tiny_data)

@pytest.fixture
def classic16():
    return classic_frequencies(16)
