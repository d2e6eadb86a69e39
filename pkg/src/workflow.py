"""Module defining the speaker-set extraction pipeline.

superpose -> forward -> apply_mask -> reconstruct, plus the featurisation and
speaker-id plumbing shared by training, evaluation and the CLI.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from src.config import StftConfig
from src.dsp import ComplexSpectrogram, CompressedMagnitude, compress, reconstruct, stft
from src.errors import InvalidInputError
from src.network import AGNModel, EmbeddingTable, apply_mask, forward, superpose
from src.types import Corpus, MixtureExample, Waveform

logger = logging.getLogger(__name__)

# Training, evaluation and separation all run the additive-bias path; it is
# equivalent to per-frame concatenation and projects the embedding once.
PIPELINE_GATING = "bias"


@dataclass(frozen=True, eq=False)
class Features:
    """Network input for one mixture."""

    spectrogram: ComplexSpectrogram
    compressed: CompressedMagnitude


def featurize(x: Waveform, stft_cfg: StftConfig, p: float) -> Features:
    spectrogram = stft(x, stft_cfg)
    return Features(spectrogram, compress(spectrogram.magnitude(), p))


def corpus_rows(table: EmbeddingTable, corpus: Corpus) -> np.ndarray:
    """Embedding-table row of every corpus speaker, indexed by dense corpus id.

    Raises:
        InvalidInputError: If a corpus speaker has no embedding row
    """
    missing = [name for name in corpus.speaker_names if name not in set(table.speaker_ids)]
    if missing:
        raise InvalidInputError(
            f"Corpus speakers without embeddings: {missing}; checkpoint knows {table.speaker_ids}"
        )
    return np.array([table.row_of(name) for name in corpus.speaker_names], dtype=np.int64)


def table_indicator(table: EmbeddingTable, rows: np.ndarray, example: MixtureExample) -> np.ndarray:
    """Lift an example's corpus-level G-hot vector onto embedding-table rows."""
    indicator = np.zeros(table.num_speakers, dtype=np.uint8)
    indicator[rows[np.flatnonzero(example.indicator)]] = 1
    return indicator


def extract(model: AGNModel, mixture: Waveform, indicator: np.ndarray, stft_cfg: StftConfig) -> Waveform:
    """Estimate the sum of the speakers selected by ``indicator`` from ``mixture``."""
    features = featurize(mixture, stft_cfg, model.config.compression_exponent)
    embedding = superpose(model.embeddings, indicator)
    mask, _ = forward(features.compressed, embedding, model.params, PIPELINE_GATING)
    estimate = apply_mask(mask, features.compressed)
    return reconstruct(estimate, features.spectrogram)


def separate_speakers(model: AGNModel, mixture: Waveform, speaker_ids: Sequence[str], stft_cfg: StftConfig) -> Waveform:
    """Extract the named speakers; the order of ``speaker_ids`` does not matter.

    Raises:
        InvalidInputError: On an empty, duplicated or unknown speaker list
    """
    if not speaker_ids:
        raise InvalidInputError("Name at least one speaker to extract")
    indicator = model.embeddings.indicator_for(speaker_ids)
    logger.info(f"Extracting {len(speaker_ids)} speaker(s) from {mixture.duration:.2f} s of audio")
    return extract(model, mixture, indicator, stft_cfg)
