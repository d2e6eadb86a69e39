"""Module containing shared type definitions."""

from dataclasses import dataclass, field
from enum import Enum
from typing import List

import numpy as np

from src.errors import InvalidInputError

PIPELINE_SAMPLE_RATE = 8000


class CorpusRole(str, Enum):
    """Whether a corpus holds well-known (pre-training) or new (fine-tuning) speakers."""

    WELL_KNOWN = "well-known"
    NEW = "new"


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio signal.

    Attributes:
        samples: Float64 amplitudes, nominally in [-1, 1]
        sample_rate: Sample rate in Hz
    """

    samples: np.ndarray
    sample_rate: int = PIPELINE_SAMPLE_RATE

    def __post_init__(self):
        """Validate and normalise the sample buffer."""
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"Waveform must be one-dimensional, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("Waveform contains NaN or Inf samples")
        if int(self.sample_rate) <= 0:
            raise InvalidInputError(f"Sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """Duration in seconds."""
        return len(self) / self.sample_rate

    @property
    def energy(self) -> float:
        """Squared L2 norm of the samples."""
        return float(np.dot(self.samples, self.samples))


@dataclass
class SpeakerProfile:
    """All utterances of one speaker.

    Attributes:
        speaker_id: Dense index in [0, N) within its corpus
        utterances: Non-empty list of 8 kHz waveforms
        name: External speaker id as written in the manifest
    """

    speaker_id: int
    utterances: List[Waveform]
    name: str = ""

    def __post_init__(self):
        """Validate profile attributes."""
        if not self.utterances:
            raise InvalidInputError(f"Speaker {self.label} has no utterances")
        for utterance in self.utterances:
            if utterance.sample_rate != PIPELINE_SAMPLE_RATE:
                raise InvalidInputError(
                    f"Speaker {self.label} has a {utterance.sample_rate} Hz utterance; "
                    f"expected {PIPELINE_SAMPLE_RATE} Hz"
                )
        if not self.name:
            self.name = str(self.speaker_id)

    @property
    def label(self) -> str:
        return self.name or str(self.speaker_id)

    @property
    def num_samples(self) -> int:
        return sum(len(u) for u in self.utterances)


@dataclass
class Corpus:
    """A set of speaker profiles with dense ids 0..N-1."""

    profiles: List[SpeakerProfile]
    role: CorpusRole = CorpusRole.WELL_KNOWN

    def __post_init__(self):
        ids = [p.speaker_id for p in self.profiles]
        if sorted(ids) != list(range(len(ids))):
            raise InvalidInputError(f"Speaker ids must be dense and unique 0..N-1, got {ids}")
        names = [p.name for p in self.profiles]
        if len(set(names)) != len(names):
            raise InvalidInputError("Speaker names must be unique within a corpus")
        self.profiles = sorted(self.profiles, key=lambda p: p.speaker_id)

    @property
    def num_speakers(self) -> int:
        return len(self.profiles)

    @property
    def speaker_names(self) -> List[str]:
        return [p.name for p in self.profiles]


@dataclass(frozen=True, eq=False)
class MixtureExample:
    """One training or evaluation task.

    The mixture is built as ``x = t + alpha * d`` where ``d`` is the unscaled
    interferer, so ``x - (t + alpha * d)`` is exactly zero samplewise.

    Attributes:
        x: Mixture waveform
        t: Target waveform (sum of the G target speakers)
        d: Unscaled interferer waveform (sum of the H interfering speakers)
        alpha: Interferer gain realising ``snr_db``
        indicator: G-hot vector B over the corpus speakers
        num_targets: G
        num_interferers: H
        speaker_ids: z, the G+H distinct speaker ids, targets first
        snr_db: Mixing SNR in dB
    """

    x: Waveform
    t: Waveform
    d: Waveform
    alpha: float
    indicator: np.ndarray
    num_targets: int
    num_interferers: int
    speaker_ids: tuple
    snr_db: float

    @property
    def target_ids(self) -> tuple:
        return self.speaker_ids[: self.num_targets]

    @property
    def interferer_ids(self) -> tuple:
        return self.speaker_ids[self.num_targets:]


@dataclass
class TrainingLog:
    """In-memory mirror of the append-only training log."""

    steps: List[int] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    evals: List[tuple] = field(default_factory=list)
    probes: List[tuple] = field(default_factory=list)
