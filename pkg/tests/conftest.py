import numpy as np
import pytest

from seqbridge.bridge import NoiseSchedule, make_cosine_schedule
from seqbridge.predictor import init_params, init_prior_head
from seqbridge.world import gen_structure, make_world


@pytest.fixture(scope="session")
def tiny_structure():
    """Six positions, two chains, a handful of contacts, f=9 features."""
    return gen_structure(11, L=6, num_chains=2, contact_density=0.4,
                         num_classes=4, noise_channels=3)


@pytest.fixture(scope="session")
def tiny_schedule():
    return make_cosine_schedule(5)


@pytest.fixture(scope="session")
def hand_schedule():
    """T=3 with betas (1, 0.5, 0): survival (1, 1, 0.5, 0)."""
    return NoiseSchedule(T=3, betas=np.array([1.0, 0.5, 0.0]))


@pytest.fixture()
def tiny_params(tiny_structure):
    return init_params(5, d=4, K=3, T=5, f=tiny_structure.feature_width)


@pytest.fixture()
def tiny_prior(tiny_structure):
    return init_prior_head(6, f=tiny_structure.feature_width, K=3)


@pytest.fixture(scope="session")
def micro_world():
    """Small but complete two-chain world for pipeline-level tests."""
    return make_world(seed=21, n_structures=6, L_range=(10, 14), num_chains=2,
                      K=6, contact_density=0.25, n_mutants=12, max_mutations=2,
                      anneal_steps=600, num_classes=4, noise_channels=3)
