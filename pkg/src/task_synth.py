"""Stochastic speaker-set task generator.

Every example is drawn from its own counter-based generator keyed by
``(seed, stream, index)``, so an example stream is identical no matter how
many producers build it or in which order.
"""

import logging
from enum import IntEnum
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from src.config import TaskConfig
from src.errors import InvalidInputError
from src.types import Corpus, CorpusRole, MixtureExample, SpeakerProfile, Waveform

logger = logging.getLogger(__name__)

# Redraws of an all-zero crop or conversation before giving up on the speaker
MAX_CROP_ATTEMPTS = 32


class Stream(IntEnum):
    """Independent example streams derived from one seed."""

    TRAIN = 0
    PROBE = 1
    EVAL = 2


def task_rng(seed: int, index: int, stream: Stream = Stream.TRAIN) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream, index)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream), int(index)])))


def _crop(utterance: Waveform, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random ``length``-sample crop, zero-padded at the end when the utterance is shorter."""
    samples = utterance.samples
    if len(samples) >= length:
        start = int(rng.integers(0, len(samples) - length + 1))
        return samples[start : start + length].copy()
    out = np.zeros(length)
    out[: len(samples)] = samples
    return out


def _draw(profile: SpeakerProfile, length: int, rng: np.random.Generator) -> np.ndarray:
    utterance = profile.utterances[int(rng.integers(0, len(profile.utterances)))]
    return _crop(utterance, length, rng)


def _voiced(draw: Callable[[], np.ndarray], who: str, tau: int) -> np.ndarray:
    for _ in range(MAX_CROP_ATTEMPTS):
        samples = draw()
        if np.any(samples):
            return samples
    raise InvalidInputError(f"{who} gave {MAX_CROP_ATTEMPTS} silent {tau}-sample draws")


def sample_utterance(profile: SpeakerProfile, tau: int, rng: np.random.Generator) -> np.ndarray:
    """Random utterance of the speaker, randomly cropped or padded to ``tau`` samples.

    All-zero crops are redrawn from ``rng`` up to ``MAX_CROP_ATTEMPTS`` times.

    Raises:
        InvalidInputError: Naming the speaker if every attempt was silent
    """
    return _voiced(lambda: _draw(profile, tau, rng), f"Speaker {profile.label}", tau)


def _segment_lengths(num_segments: int, tau: int, min_len: int, rng: np.random.Generator) -> np.ndarray:
    slack = tau - num_segments * min_len
    cuts = np.sort(rng.integers(0, slack + 1, size=num_segments - 1))
    extra = np.diff(np.concatenate(([0], cuts, [slack])))
    return min_len + extra


def conversation_tracks(speakers: Sequence[SpeakerProfile], tau: int, rng: np.random.Generator) -> np.ndarray:
    """Per-speaker contributions to a single-active-speaker conversation.

    The timeline is cut into ``2 * len(speakers)`` contiguous segments of at
    least ``tau // (4 * len(speakers))`` samples, assigned round-robin from a
    random first speaker. Each segment is filled from a random position of a
    random utterance of its speaker.

    Returns:
        Array of shape ``(len(speakers), tau)``; at each sample index at most one
        row is non-zero

    Raises:
        InvalidInputError: If ``speakers`` is empty
    """
    n = len(speakers)
    if n == 0:
        raise InvalidInputError("A conversation needs at least one speaker")
    tracks = np.zeros((n, tau))
    if n == 1:
        tracks[0] = sample_utterance(speakers[0], tau, rng)
        return tracks

    num_segments = 2 * n
    lengths = _segment_lengths(num_segments, tau, tau // (4 * n), rng)
    first = int(rng.integers(0, n))
    start = 0
    for segment, length in enumerate(lengths):
        owner = (first + segment) % n
        tracks[owner, start : start + length] = _draw(speakers[owner], int(length), rng)
        start += int(length)
    return tracks


def build_conversation(speakers: Sequence[SpeakerProfile], tau: int, rng: np.random.Generator) -> Waveform:
    """Single-active-speaker conversation of ``tau`` samples."""
    return Waveform(conversation_tracks(speakers, tau, rng).sum(axis=0))


def mix_at_snr(t: Waveform, d: Waveform, snr_db: float) -> Tuple[Waveform, float]:
    """Scale ``d`` so that ``10 log10(|t|^2 / |alpha d|^2) == snr_db`` and add it to ``t``.

    Raises:
        InvalidInputError: On unequal lengths or a silent signal
    """
    if len(t) != len(d):
        raise InvalidInputError(f"Cannot mix signals of length {len(t)} and {len(d)}")
    target_energy, interferer_energy = t.energy, d.energy
    if target_energy <= 0.0 or interferer_energy <= 0.0:
        raise InvalidInputError("SNR is undefined for a silent target or interferer")
    alpha = float(np.sqrt(target_energy / (interferer_energy * 10.0 ** (snr_db / 10.0))))
    return Waveform(t.samples + alpha * d.samples, t.sample_rate), alpha


def build_indicator(z: Sequence[int], num_targets: int, num_speakers: int) -> np.ndarray:
    """G-hot vector with ones at ``z[:num_targets]``.

    Raises:
        InvalidInputError: On duplicate or out-of-range ids, or G > len(z)
    """
    ids = [int(k) for k in z]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"Speaker ids must be distinct, got {ids}")
    bad = [k for k in ids if not 0 <= k < num_speakers]
    if bad:
        raise InvalidInputError(f"Speaker ids {bad} out of range [0, {num_speakers})")
    if not 0 <= num_targets <= len(ids):
        raise InvalidInputError(f"G={num_targets} must lie in [0, {len(ids)}]")
    indicator = np.zeros(num_speakers, dtype=np.uint8)
    indicator[ids[:num_targets]] = 1
    return indicator


def _names(speakers: Sequence[SpeakerProfile]) -> str:
    return "Conversation of " + ", ".join(p.label for p in speakers)


def check_task_config(corpus: Corpus, cfg: TaskConfig) -> None:
    """Raise InvalidInputError if ``corpus`` cannot host ``cfg``'s largest task."""
    if cfg.g_max + cfg.h_max > corpus.num_speakers:
        raise InvalidInputError(
            f"Corpus has {corpus.num_speakers} speakers but tasks need up to "
            f"g_max + h_max = {cfg.g_max + cfg.h_max}"
        )


def sample_task(corpus: Corpus, cfg: TaskConfig, rng: np.random.Generator) -> MixtureExample:
    """Draw one speaker-set extraction task.

    Raises:
        InvalidInputError: If the corpus has fewer than g_max + h_max speakers, or a chosen
            speaker keeps yielding silent crops
    """
    check_task_config(corpus, cfg)
    num_targets = int(rng.integers(cfg.g_min, cfg.g_max + 1))
    num_interferers = int(rng.integers(cfg.h_min, cfg.h_max + 1))
    z = rng.choice(corpus.num_speakers, size=num_targets + num_interferers, replace=False)
    speakers = [corpus.profiles[int(k)] for k in z]
    targets, interferers = speakers[:num_targets], speakers[num_targets:]

    if cfg.conversation_mode:
        t = Waveform(_voiced(lambda: build_conversation(targets, cfg.tau, rng).samples, _names(targets), cfg.tau))
        d = Waveform(_voiced(lambda: build_conversation(interferers, cfg.tau, rng).samples, _names(interferers), cfg.tau))
    else:
        t = Waveform(np.sum([sample_utterance(p, cfg.tau, rng) for p in targets], axis=0))
        d = Waveform(np.sum([sample_utterance(p, cfg.tau, rng) for p in interferers], axis=0))

    snr_db = float(rng.uniform(cfg.snr_min_db, cfg.snr_max_db)) if cfg.snr_max_db > cfg.snr_min_db else cfg.snr_min_db
    x, alpha = mix_at_snr(t, d, snr_db)
    return MixtureExample(
        x=x,
        t=t,
        d=d,
        alpha=alpha,
        indicator=build_indicator(z, num_targets, corpus.num_speakers),
        num_targets=num_targets,
        num_interferers=num_interferers,
        speaker_ids=tuple(int(k) for k in z),
        snr_db=snr_db,
    )


def sample_task_at(corpus: Corpus, cfg: TaskConfig, index: int, stream: Stream = Stream.TRAIN) -> MixtureExample:
    """The ``index``-th example of ``stream`` for ``cfg.seed``."""
    return sample_task(corpus, cfg, task_rng(cfg.seed, index, stream))


def split_profile(profile: SpeakerProfile, head_samples: int) -> Tuple[SpeakerProfile, SpeakerProfile]:
    """Split one speaker's audio at ``head_samples``, truncating the crossing utterance.

    Raises:
        InvalidInputError: If the speaker has no audio beyond the head
    """
    if profile.num_samples <= head_samples:
        raise InvalidInputError(
            f"Speaker {profile.label} has {profile.num_samples} samples; "
            f"more than {head_samples} required for the head split"
        )
    head: List[Waveform] = []
    tail: List[Waveform] = []
    remaining = head_samples
    for utterance in profile.utterances:
        if remaining <= 0:
            tail.append(utterance)
        elif len(utterance) <= remaining:
            head.append(utterance)
            remaining -= len(utterance)
        else:
            head.append(Waveform(utterance.samples[:remaining], utterance.sample_rate))
            tail.append(Waveform(utterance.samples[remaining:], utterance.sample_rate))
            remaining = 0
    return (
        SpeakerProfile(profile.speaker_id, head, profile.name),
        SpeakerProfile(profile.speaker_id, tail, profile.name),
    )


def split_corpus(profiles: Sequence[SpeakerProfile], seconds_head: float = 100.0) -> Tuple[List[SpeakerProfile], List[SpeakerProfile]]:
    """Per speaker, the first ``seconds_head`` seconds go to the head split and the rest to the tail."""
    head_split, tail_split = [], []
    for profile in profiles:
        sample_rate = profile.utterances[0].sample_rate
        head, tail = split_profile(profile, int(round(seconds_head * sample_rate)))
        head_split.append(head)
        tail_split.append(tail)
    return head_split, tail_split


def assign_splits(corpus: Corpus, seconds_head: float = 100.0) -> Dict[str, Corpus]:
    """Train/eval corpora by role.

    Well-known speakers evaluate on the head and train on the tail; new
    speakers train on the head and evaluate on the tail.
    """
    head, tail = split_corpus(corpus.profiles, seconds_head)
    head_corpus, tail_corpus = Corpus(head, corpus.role), Corpus(tail, corpus.role)
    if corpus.role == CorpusRole.WELL_KNOWN:
        splits = {"train": tail_corpus, "eval": head_corpus}
    else:
        splits = {"train": head_corpus, "eval": tail_corpus}
    logger.info(
        f"Split {corpus.num_speakers} {corpus.role.value} speakers at {seconds_head:g} s "
        f"(train={'tail' if corpus.role == CorpusRole.WELL_KNOWN else 'head'})"
    )
    return splits
