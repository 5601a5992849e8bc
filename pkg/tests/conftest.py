import numpy as np
import pytest

import config
import downstream
import logging_setup
import phantom


def small_scenario(**overrides) -> phantom.Scenario:
    """64px scenario with few subjects; fast enough for unit tests."""
    fields = dict(canvas=64, n_target_train=2, n_source_labeled=1,
                  n_eval_travel_pairs=2, slices_per_subject=2)
    fields.update(overrides)
    return config.ScenarioConfig(**fields).to_scenario()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ramp():
    return np.tile(np.linspace(0.0, 1.0, 32), (32, 1))


@pytest.fixture
def random_image(rng):
    return rng.uniform(0.0, 1.0, size=(24, 20))


@pytest.fixture(scope="session")
def small_bundle():
    return phantom.build_scenario(small_scenario(), master_seed=7)


@pytest.fixture(scope="session")
def small_model(small_bundle):
    return downstream.train(phantom.training_pairs(small_bundle.target_train), iterations=300)


@pytest.fixture(scope="session")
def phantom_slice():
    labels, base = phantom.generate_anatomy(small_scenario().anatomy)
    return labels, base


@pytest.fixture
def loaded_config():
    config.load_config()
    yield config.CONFIG


@pytest.fixture
def clean_error_flag():
    logging_setup.reset_error_flag()
    yield
    logging_setup.reset_error_flag()
