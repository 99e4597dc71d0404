"""Shared fixtures: small deterministic datasets and matching configs."""

from __future__ import annotations

import numpy as np
import pytest

from eegmatch.featurize import FeaturizeConfig, assemble_samples
from eegmatch.model import ModelConfig
from eegmatch.recordings import SynthConfig, generate_synthetic
from eegmatch.training import RunConfig


@pytest.fixture(scope="session")
def tiny_synth_cfg() -> SynthConfig:
    return SynthConfig(n_subjects=2, n_sessions=1, trials_per_class=2,
                       trial_seconds=4.0, seed=3)


@pytest.fixture(scope="session")
def tiny_rec(tiny_synth_cfg):
    return generate_synthetic(tiny_synth_cfg)


@pytest.fixture(scope="session")
def tiny_featurize_cfg() -> FeaturizeConfig:
    return FeaturizeConfig(out_h=16, out_w=16, frames_per_sample=2)


@pytest.fixture(scope="session")
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(in_h=16, in_w=16, n_bands=6, n_frames=2, embed_dim=16,
                       heads=2, patch_channels=(8, 12, 16, 16),
                       patch_strides=(2, 2, 2, 1), proj_dim=16)


@pytest.fixture(scope="session")
def tiny_run_cfg(tiny_model_cfg, tiny_featurize_cfg) -> RunConfig:
    return RunConfig(lr0=5e-3, batch_size=8, max_epochs=3, patience=3, seed=1,
                     model=tiny_model_cfg, featurize=tiny_featurize_cfg)


@pytest.fixture(scope="session")
def tiny_samples(tiny_rec, tiny_featurize_cfg):
    return assemble_samples(tiny_rec, tiny_featurize_cfg)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(1234)))
