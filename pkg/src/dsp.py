"""Signal front-end: STFT/iSTFT, power-law compression and phase-based reconstruction.

Framing has no centre padding: a signal of ``n`` samples yields
``floor((n - window) / hop) + 1`` frames and trailing samples that do not fill
a frame are dropped. Synthesis divides the overlap-added frames by the summed
squared window envelope, floored at ``ENVELOPE_RELATIVE_FLOOR`` times its
peak; the partially overlapped first and last hop taper towards zero.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window, resample_poly

from src.config import StftConfig
from src.errors import DimensionMismatchError, InvalidInputError
from src.types import PIPELINE_SAMPLE_RATE, Waveform

ENVELOPE_RELATIVE_FLOOR = 1e-2
DEFAULT_COMPRESSION = 0.3


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """STFT of a waveform.

    Attributes:
        bins: F x T complex grid, non-negative frequencies only
        config: Framing used to compute it
        source_len: Length in samples of the analysed signal
        sample_rate: Sample rate of the analysed signal
    """

    bins: np.ndarray
    config: StftConfig
    source_len: int
    sample_rate: int = PIPELINE_SAMPLE_RATE

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 2 or bins.shape[0] != self.config.num_freq_bins:
            raise DimensionMismatchError(
                f"Spectrogram shape {bins.shape} inconsistent with "
                f"{self.config.num_freq_bins} frequency bins"
            )
        if not np.all(np.isfinite(bins)):
            raise InvalidInputError("Spectrogram contains NaN or Inf entries")
        if self.source_len < self.config.window_len_samples:
            raise InvalidInputError(
                f"source_len {self.source_len} is shorter than one window"
            )
        object.__setattr__(self, "bins", bins)

    @property
    def shape(self) -> tuple:
        return self.bins.shape

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


@dataclass(frozen=True, eq=False)
class CompressedMagnitude:
    """Power-law compressed magnitude grid, ``values = |S| ** p``."""

    values: np.ndarray
    p: float = DEFAULT_COMPRESSION

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidInputError(f"Compressed magnitude must be F x T, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise InvalidInputError("Compressed magnitude entries must be finite and non-negative")
        if not 0.0 < self.p <= 1.0:
            raise InvalidInputError(f"Compression exponent must be in (0, 1], got {self.p}")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple:
        return self.values.shape


@lru_cache(maxsize=8)
def _analysis_window(kind: str, length: int) -> np.ndarray:
    # get_window defaults to the periodic (DFT-even) convention
    window = get_window(kind, length, fftbins=True).astype(np.float64)
    window.setflags(write=False)
    return window


def num_frames(num_samples: int, cfg: StftConfig) -> int:
    """Number of full frames that fit into ``num_samples``."""
    if num_samples < cfg.window_len_samples:
        return 0
    return (num_samples - cfg.window_len_samples) // cfg.hop_samples + 1


def stft(w: Waveform, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    """Hann-windowed short-time Fourier transform without centre padding.

    Raises:
        InvalidInputError: If the signal is shorter than one window
    """
    cfg = cfg or StftConfig()
    n = len(w)
    if n < cfg.window_len_samples:
        raise InvalidInputError(
            f"Signal of {n} samples is shorter than one {cfg.window_len_samples}-sample window"
        )
    window = _analysis_window(cfg.window, cfg.window_len_samples)
    frames = sliding_window_view(w.samples, cfg.window_len_samples)[:: cfg.hop_samples]
    bins = np.fft.rfft(frames * window, axis=1).T
    return ComplexSpectrogram(bins=bins, config=cfg, source_len=n, sample_rate=w.sample_rate)


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Overlap-add synthesis with squared-window compensation, trimmed to ``source_len``.

    Raises:
        DimensionMismatchError: If the frame count disagrees with ``source_len``
    """
    cfg = spec.config
    n_fft, hop = cfg.window_len_samples, cfg.hop_samples
    n_bins, n_frames = spec.shape
    if n_frames != num_frames(spec.source_len, cfg):
        raise DimensionMismatchError(
            f"{n_frames} frames inconsistent with source_len {spec.source_len} "
            f"(expected {num_frames(spec.source_len, cfg)})"
        )
    window = _analysis_window(cfg.window, n_fft)
    frames = np.fft.irfft(spec.bins.T, n=n_fft, axis=1) * window

    out_len = (n_frames - 1) * hop + n_fft
    index = hop * np.arange(n_frames)[:, None] + np.arange(n_fft)[None, :]
    signal = np.zeros(out_len)
    envelope = np.zeros(out_len)
    np.add.at(signal, index, frames)
    np.add.at(envelope, index, np.broadcast_to(window**2, frames.shape))

    signal = signal / np.maximum(envelope, ENVELOPE_RELATIVE_FLOOR * envelope.max())

    samples = np.zeros(spec.source_len)
    samples[:out_len] = signal[: spec.source_len]
    return Waveform(samples, spec.sample_rate)


def compress(mag: np.ndarray, p: float = DEFAULT_COMPRESSION) -> CompressedMagnitude:
    """Elementwise power law ``u ** p``.

    Raises:
        InvalidInputError: On negative or non-finite entries
    """
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise InvalidInputError("Cannot compress negative magnitudes")
    if not 0.0 < p <= 1.0:
        raise InvalidInputError(f"Compression exponent must be in (0, 1], got {p}")
    return CompressedMagnitude(np.power(mag, p), p)


def decompress(cm: CompressedMagnitude) -> np.ndarray:
    """Inverse power law ``u ** (1 / p)``."""
    return np.power(cm.values, 1.0 / cm.p)


def compressed_magnitude(w: Waveform, cfg: StftConfig | None = None, p: float = DEFAULT_COMPRESSION) -> CompressedMagnitude:
    """``compress(|stft(w)|)``, the network's input/target representation."""
    return compress(stft(w, cfg).magnitude(), p)


def reconstruct(est: CompressedMagnitude, mixture_spec: ComplexSpectrogram) -> Waveform:
    """Invert an estimated compressed magnitude using the mixture phase.

    Raises:
        DimensionMismatchError: If ``est`` and ``mixture_spec`` disagree in shape
    """
    if est.shape != mixture_spec.shape:
        raise DimensionMismatchError(
            f"Estimate shape {est.shape} does not match mixture spectrogram {mixture_spec.shape}"
        )
    phase = np.angle(mixture_spec.bins)
    bins = decompress(est) * np.exp(1j * phase)
    return istft(
        ComplexSpectrogram(
            bins=bins,
            config=mixture_spec.config,
            source_len=mixture_spec.source_len,
            sample_rate=mixture_spec.sample_rate,
        )
    )


def downsample_2x(w: Waveform) -> Waveform:
    """Decimate a 16 kHz waveform to 8 kHz behind a Kaiser windowed-sinc low-pass.

    The anti-aliasing cutoff sits at the output Nyquist frequency (4 kHz).

    Raises:
        InvalidInputError: If the input is not sampled at 16 kHz
    """
    if w.sample_rate != 2 * PIPELINE_SAMPLE_RATE:
        raise InvalidInputError(
            f"downsample_2x expects {2 * PIPELINE_SAMPLE_RATE} Hz input, got {w.sample_rate} Hz"
        )
    samples = resample_poly(w.samples, up=1, down=2, window=("kaiser", 8.0))
    return Waveform(samples, PIPELINE_SAMPLE_RATE)
