import numpy as np
import pytest
import torch

from antrip.candidates import CandidateRetriever, build_hypergraph
from antrip.dataset import SyntheticWorldConfig, generate_synthetic_world
from antrip.discriminator import DiscriminatorConfig, TripDiscriminator
from antrip.generator import GeneratorConfig, TripGenerator
from antrip.training import make_examples

TINY_GEN = GeneratorConfig(d_model=8, n_heads=2, n_layers=2, d_ffn=8, poi_dim=6, category_dim=3, user_dim=4, max_len=12)


@pytest.fixture(scope="session")
def small_world():
    return generate_synthetic_world(SyntheticWorldConfig(n_pois=40, n_trips=300, n_users=10, rng_seed=7))


@pytest.fixture(scope="session")
def small_retriever(small_world):
    return CandidateRetriever(build_hypergraph(small_world.train), small_world.pois, 12)


@pytest.fixture(scope="session")
def small_examples(small_world, small_retriever):
    return make_examples(small_world.train[:64], small_retriever, small_world.time_model)


def tiny_generator(world, seed=0, cfg=TINY_GEN):
    torch.manual_seed(seed)
    return TripGenerator(cfg, {p.id: p.category for p in world.pois}, world.users)


def tiny_discriminator(world, seed=0):
    torch.manual_seed(seed)
    return TripDiscriminator(DiscriminatorConfig(poi_dim=6, hidden=5, head_inner=4), [p.id for p in world.pois])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
