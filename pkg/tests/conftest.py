from __future__ import annotations

import numpy as np
import pytest
import torch

from asdkit.corpus import SynthSpec, synth_corpus
from asdkit.encoder import EncoderConfig
from asdkit.frontend import FrontendParams

torch.set_num_threads(2)


TINY_SPEC = SynthSpec(
    n_machines=2,
    attrs_per_machine=2,
    clips_per_attr_train=6,
    clips_per_attr_test=4,
    unattributed_machines=1,
    clip_seconds=1.0,
    seed=1234,
    target_fraction=0.25,
)

# 1 s at 16 kHz: 98 raw frames, padded to 112 -> (32/16) * (112/16) = 14 patches
TINY_FPARAMS = FrontendParams(clip_seconds=1.0, n_mels=32, padded_frames=112)

TINY_ENCODER = EncoderConfig(depth=2, dim=32, heads=2, mlp_ratio=2,
                             patch_dim=256, n_patches=14)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small synthetic corpus shared across tests: (manifest, truth_csv path)."""
    base = tmp_path_factory.mktemp("tiny")
    manifest = synth_corpus(TINY_SPEC, base / "corpus", base / "latent_attributes.csv")
    return manifest, base / "latent_attributes.csv"


@pytest.fixture(scope="session")
def tiny_fparams():
    TINY_FPARAMS.validate()
    return TINY_FPARAMS


@pytest.fixture(scope="session")
def tiny_encoder_config():
    TINY_ENCODER.validate()
    return TINY_ENCODER


@pytest.fixture()
def rng():
    return np.random.default_rng(7)
