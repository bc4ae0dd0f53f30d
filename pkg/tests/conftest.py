import numpy as np
import pytest

from fewcache.dataset import SynthSpec, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """Tiny but nondegenerate dataset shared by read-only tests."""
    return synth_generate(
        SynthSpec(
            num_classes=2,
            dim=8,
            bags_per_class=4,
            instances_per_bag=30,
            positive_fraction=0.3,
            noise_sigma=0.2,
            seed=7,
        )
    )
