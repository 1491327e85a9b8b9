"""Shared fixtures: thread caps, deterministic RNGs, and a small on-disk dataset."""

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from smokeplume import catalog
from smokeplume.synth import generate_dataset

torch.set_num_threads(2)

settings.register_profile(
    "suite",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """A 24-scene synthetic dataset (8 masked positives, 4 unmasked, 12 negatives)."""
    out = tmp_path_factory.mktemp("data")
    generate_dataset(out, n_positive=12, n_negative=12, n_sites=6,
                     masked_fraction=2 / 3, seed=1234)
    return out


@pytest.fixture(scope="session")
def dataset_records(dataset_dir):
    return catalog.build_catalog(dataset_dir / "manifest.csv")


@pytest.fixture(autouse=True)
def _fresh_scene_cache():
    """Loader caches key on absolute paths; clear between tests that delete files."""
    yield
    catalog.clear_scene_cache()
