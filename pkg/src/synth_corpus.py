"""Synthetic speakers for desk-scale experiments.

Each speaker is a fixed comb of three harmonics over a speaker-specific
fundamental plus band-passed noise in a speaker-specific band, gated by a
random on/off envelope that mimics utterances. Fundamentals and noise bands
are laid out on disjoint per-speaker slots, so spectral centroids increase
with the speaker index.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
from scipy.signal import butter, sosfilt

from src.corpus import MANIFEST_NAME, ManifestRow, write_manifest
from src.errors import InvalidInputError
from src.persistence import write_wav
from src.types import PIPELINE_SAMPLE_RATE, Waveform

logger = logging.getLogger(__name__)

F0_RANGE_HZ = (90.0, 330.0)
NOISE_RANGE_HZ = (300.0, 3600.0)
TARGET_RMS = 0.1
RAMP_SECONDS = 0.01


@dataclass(frozen=True)
class SpeakerVoice:
    """Spectral signature of one synthetic speaker."""

    f0: float
    harmonic_gains: tuple
    noise_band: tuple
    noise_gain: float
    vibrato_hz: float


def voice_for(index: int, num_speakers: int, rng: np.random.Generator) -> SpeakerVoice:
    """Signature of speaker ``index`` in its own slot of the f0 and noise-band ranges."""
    position = (index + rng.uniform(0.3, 0.7)) / num_speakers
    f0 = F0_RANGE_HZ[0] + position * (F0_RANGE_HZ[1] - F0_RANGE_HZ[0])
    slot = (NOISE_RANGE_HZ[1] - NOISE_RANGE_HZ[0]) / num_speakers
    centre = NOISE_RANGE_HZ[0] + position * (NOISE_RANGE_HZ[1] - NOISE_RANGE_HZ[0])
    half_width = 0.35 * slot
    return SpeakerVoice(
        f0=f0,
        harmonic_gains=tuple(rng.uniform(0.3, 1.0, size=3)),
        noise_band=(centre - half_width, centre + half_width),
        noise_gain=float(rng.uniform(0.5, 1.0)),
        vibrato_hz=float(rng.uniform(3.0, 6.0)),
    )


def _envelope(num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Alternating on/off gate with raised-cosine ramps, starting 'on'."""
    envelope = np.zeros(num_samples)
    ramp = int(RAMP_SECONDS * PIPELINE_SAMPLE_RATE)
    fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    position = 0
    while position < num_samples:
        on = int(rng.uniform(0.3, 1.0) * PIPELINE_SAMPLE_RATE)
        off = int(rng.uniform(0.05, 0.25) * PIPELINE_SAMPLE_RATE)
        end = min(position + on, num_samples)
        segment = np.ones(end - position)
        n = min(ramp, len(segment) // 2)
        segment[:n] *= fade[:n]
        segment[len(segment) - n :] *= fade[:n][::-1]
        envelope[position:end] = segment
        position = end + off
    return envelope


def synthesize_utterance(voice: SpeakerVoice, seconds: float, rng: np.random.Generator, gated: bool = True) -> Waveform:
    """One utterance of ``seconds`` seconds in the given voice; ``gated=False`` gives continuous sound."""
    n = int(round(seconds * PIPELINE_SAMPLE_RATE))
    t = np.arange(n) / PIPELINE_SAMPLE_RATE
    pitch = voice.f0 * (1.0 + 0.02 * np.sin(2 * np.pi * voice.vibrato_hz * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(pitch) / PIPELINE_SAMPLE_RATE
    harmonics = sum(
        gain * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        for k, gain in enumerate(voice.harmonic_gains, start=1)
    )
    sos = butter(4, voice.noise_band, btype="bandpass", fs=PIPELINE_SAMPLE_RATE, output="sos")
    noise = sosfilt(sos, rng.standard_normal(n))
    harmonics /= np.sqrt(np.mean(harmonics**2)) + 1e-12
    noise /= np.sqrt(np.mean(noise**2)) + 1e-12
    signal = harmonics + voice.noise_gain * noise
    if gated:
        signal *= _envelope(n, rng)
    rms = np.sqrt(np.mean(signal**2))
    if rms > 0:
        signal *= TARGET_RMS / rms
    return Waveform(np.clip(signal, -0.99, 0.99))


def generate_corpus(
    out_dir: str | Path,
    num_speakers: int,
    seconds: float,
    seed: int,
    utterance_seconds: float = 10.0,
    prefix: str = "spk",
    force: bool = False,
) -> Path:
    """Write ``num_speakers`` synthetic speakers of ``seconds`` seconds each plus a manifest.

    Returns:
        Path of the written manifest

    Raises:
        InvalidInputError: If ``out_dir`` is a non-empty directory (unless ``force``)
            or ``seconds`` is shorter than one utterance
    """
    out_dir = Path(out_dir)
    if num_speakers < 1:
        raise InvalidInputError("Need at least one speaker")
    if seconds < utterance_seconds:
        raise InvalidInputError(
            f"{seconds:g} s per speaker is shorter than one {utterance_seconds:g} s utterance"
        )
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise InvalidInputError(f"Output directory {out_dir} is not empty; pass force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: List[ManifestRow] = []
    for index in range(num_speakers):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), index])))
        voice = voice_for(index, num_speakers, rng)
        name = f"{prefix}{index:03d}"
        durations = [utterance_seconds] * int(seconds // utterance_seconds)
        remainder = seconds - sum(durations)
        if remainder * PIPELINE_SAMPLE_RATE >= 1:
            durations.append(remainder)
        for number, duration in enumerate(durations):
            utterance = synthesize_utterance(voice, duration, rng)
            relative = f"{name}/{name}_{number:03d}.wav"
            write_wav(utterance, out_dir / relative)
            rows.append(ManifestRow(name, relative, len(utterance)))
        logger.debug(f"{name}: f0={voice.f0:.1f} Hz, noise band {voice.noise_band[0]:.0f}-{voice.noise_band[1]:.0f} Hz")

    manifest = out_dir / MANIFEST_NAME
    write_manifest(rows, manifest)
    logger.info(f"Synthesised {num_speakers} speakers x {seconds:g} s into {out_dir}")
    return manifest
