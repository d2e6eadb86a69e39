"""Shared fixtures: tiny corpora, configurations and models."""

import numpy as np
import pytest

from src.config import DataConfig, ModelConfig, RunConfig, StftConfig, TaskConfig, TrainConfig
from src.network import AGNModel
from src.synth_corpus import synthesize_utterance, voice_for
from src.types import Corpus, CorpusRole, SpeakerProfile

TINY_STFT = StftConfig(window_len_samples=32, hop_samples=16)
TINY_MODEL = ModelConfig(
    num_freq_bins=TINY_STFT.num_freq_bins,
    embedding_dim=4,
    num_blstm_layers=1,
    num_fc_layers=1,
    hidden_units=6,
)


def make_corpus(num_speakers=6, seconds=1.0, utterances=2, seed=0, prefix="spk", role=CorpusRole.WELL_KNOWN):
    """In-memory corpus of continuous synthetic voices, so short crops are never silent."""
    profiles = []
    for index in range(num_speakers):
        rng = np.random.default_rng([seed, index])
        voice = voice_for(index, num_speakers, rng)
        profiles.append(
            SpeakerProfile(
                speaker_id=index,
                utterances=[synthesize_utterance(voice, seconds, rng, gated=False) for _ in range(utterances)],
                name=f"{prefix}{index}",
            )
        )
    return Corpus(profiles, role)


@pytest.fixture(scope="session")
def corpus():
    """Six well-known synthetic speakers, two one-second utterances each."""
    return make_corpus()


@pytest.fixture(scope="session")
def new_corpus():
    """Four new synthetic speakers."""
    return make_corpus(num_speakers=4, seed=7, prefix="new", role=CorpusRole.NEW)


@pytest.fixture
def run_config():
    """Tiny run: 17 frequency bins, 480-sample examples, a few steps."""
    return RunConfig(
        stft=TINY_STFT,
        task=TaskConfig(tau=480, g_max=2, h_max=2),
        model=TINY_MODEL,
        train=TrainConfig(
            base_lr=3e-3,
            batch_size=2,
            max_steps=4,
            eval_every=2,
            eval_examples=2,
            probe_batch_size=2,
            checkpoint_every=2,
        ),
        data=DataConfig(head_seconds=1.0),
    )


@pytest.fixture
def model(corpus):
    """Freshly initialised tiny model over the well-known speakers."""
    return AGNModel.initialize(TINY_MODEL, corpus.speaker_names)
