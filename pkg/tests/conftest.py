"""Shared fixtures.

Trained models are session-scoped: the acceptance suite and the unit tests
that need a trained network use the same instances, so each model is
trained once per pytest run.
"""

import time

import numpy as np
import pytest
import torch

from diffkillr.benchmarks import archetype_entries, ellipse_archetypes, rotation_augmentation
from diffkillr.diffeo_gen import AugmentationConfig
from diffkillr.invariant_net import InvariantTrainConfig, embed_bank, train_invariant
from diffkillr.mapping_net import MappingTrainConfig, train_mapping
from diffkillr.patch_bank import CellBank, build_augmented_bank, sample_background
from diffkillr.synth import default_archetypes, gen_scene

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def shapes():
    return default_archetypes(4)


@pytest.fixture(scope="session")
def entries(shapes):
    return archetype_entries(shapes)


@pytest.fixture(scope="session")
def bank(entries, shapes):
    """Four archetypes, m = 16 mixed augmentations, 16 background patches from a separate scene."""
    scene = gen_scene(shapes, 25, "random", seed=100)
    background = sample_background(scene.image, 32, 16, seed=0)
    return build_augmented_bank(CellBank(entries, background=background), 16, AugmentationConfig(), seed=0)


@pytest.fixture(scope="session")
def train_seconds():
    """Wall-clock training time of each session model, filled in as the fixtures are built."""
    return {}


@pytest.fixture(scope="session")
def encoder(bank, train_seconds):
    start = time.perf_counter()
    model = train_invariant(bank, InvariantTrainConfig(epochs=200, seed=0))
    train_seconds["encoder"] = time.perf_counter() - start
    return model


@pytest.fixture(scope="session")
def embedded_bank(encoder, bank):
    return embed_bank(encoder, bank)


@pytest.fixture(scope="session")
def mapper(bank, train_seconds):
    start = time.perf_counter()
    model = train_mapping(bank, MappingTrainConfig(seed=0))
    train_seconds["mapper"] = time.perf_counter() - start
    return model


@pytest.fixture(scope="session")
def orientation_models():
    """Per seed: rotation-only ellipse bank, its encoder, and mappers trained at rho = 0 and 0.25."""
    cache = {}

    def get(seed):
        if seed not in cache:
            ell = archetype_entries(ellipse_archetypes())
            bank = build_augmented_bank(CellBank(ell), 16, rotation_augmentation(32), seed=seed)
            enc = train_invariant(bank, InvariantTrainConfig(seed=seed))
            mappers = {rho: train_mapping(bank, MappingTrainConfig(seed=seed, epochs=30, hard_mining_ratio=rho))
                       for rho in (0.0, 0.25)}
            cache[seed] = (embed_bank(enc, bank), enc, mappers)
        return cache[seed]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(0)
