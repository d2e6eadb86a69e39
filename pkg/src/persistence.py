"""Checkpoint and audio file I/O.

Checkpoint layout (all integers and floats little-endian, see docs/formats.md):

    magic         8 bytes  b"AGNCKPT1"
    header        struct _HEADER
    theta         float64 arrays in ``expected_shapes`` order
    embeddings    float64 N x K
    trainable     N bytes (0/1)
    optimizer     int64 rows, then float64 mean-square arrays (if present)
    manifest      N x (uint32 length + UTF-8 speaker id)
    checksum      8-byte BLAKE2b digest of every preceding byte

Files are written to a temporary sibling and renamed into place, so a reader
sees either the previous file or the complete new one.
"""

import hashlib
import logging
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np
import soundfile as sf

from src.config import ModelConfig, StftConfig, TrainingMode
from src.dsp import downsample_2x
from src.errors import (
    CheckpointFormatError,
    ChecksumError,
    DimensionMismatchError,
    PersistenceError,
    UnsupportedFormatError,
)
from src.network import AGNModel, EmbeddingTable, ModelParams, expected_shapes
from src.optim import EMBEDDING_KEY, OptimizerState, ParameterPartition
from src.types import PIPELINE_SAMPLE_RATE, Waveform

logger = logging.getLogger(__name__)

MAGIC = b"AGNCKPT1"
FORMAT_VERSION = 1
CHECKSUM_SIZE = 8
PCM_SCALE = 32768.0
SUPPORTED_RATES = (PIPELINE_SAMPLE_RATE, 2 * PIPELINE_SAMPLE_RATE)

# version, F, K, blstm layers, fc layers, hidden, window, hop, p, init seed,
# rows, step, train seed, mode, has optimizer, optimizer step, optimizer theta,
# optimizer rows
_HEADER = struct.Struct("<IIIIIIIIdQIQQBBQBI")
_MODES = [None, TrainingMode.PRETRAIN, TrainingMode.FINETUNE_CONVENTIONAL, TrainingMode.FINETUNE_ROBUST]


# --------------------------------------------------------------------------- #
# Atomic writes
# --------------------------------------------------------------------------- #
@contextmanager
def atomic_path(path: str | Path) -> Iterator[Path]:
    """Yield a temporary path next to ``path``; rename it over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp_name)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def write_bytes_atomic(path: str | Path, payload: bytes) -> None:
    try:
        with atomic_path(path) as tmp:
            tmp.write_bytes(payload)
    except OSError as e:
        raise PersistenceError(f"Failed to write {path}: {e}") from e


def write_text_atomic(path: str | Path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


# --------------------------------------------------------------------------- #
# Audio
# --------------------------------------------------------------------------- #
def read_wav(path: str | Path) -> Waveform:
    """Read mono 16-bit PCM WAV at 8 or 16 kHz; 16 kHz audio is decimated to 8 kHz.

    Raises:
        UnsupportedFormatError: For stereo, compressed or non-16-bit files, or other rates
        PersistenceError: If the file cannot be read
    """
    path = Path(path)
    try:
        info = sf.info(str(path))
    except (RuntimeError, OSError) as e:
        raise PersistenceError(f"Cannot read audio file {path}: {e}") from e
    if info.format != "WAV" or info.subtype != "PCM_16":
        raise UnsupportedFormatError(f"{path}: expected 16-bit PCM WAV, got {info.format}/{info.subtype}")
    if info.channels != 1:
        raise UnsupportedFormatError(f"{path}: expected mono audio, got {info.channels} channels")
    if info.samplerate not in SUPPORTED_RATES:
        raise UnsupportedFormatError(f"{path}: unsupported sample rate {info.samplerate} Hz")
    pcm, sample_rate = sf.read(str(path), dtype="int16", always_2d=False)
    waveform = Waveform(pcm.astype(np.float64) / PCM_SCALE, sample_rate)
    if sample_rate != PIPELINE_SAMPLE_RATE:
        logger.debug(f"Downsampling {path} from {sample_rate} Hz")
        waveform = downsample_2x(waveform)
    return waveform


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    """Round-to-nearest 16-bit quantisation with clipping."""
    return np.clip(np.rint(np.asarray(samples) * PCM_SCALE), -32768, 32767).astype(np.int16)


def write_wav(w: Waveform, path: str | Path) -> None:
    """Write mono 16-bit PCM WAV; exact inverse of ``read_wav`` for in-range audio."""
    if w.sample_rate not in SUPPORTED_RATES:
        raise UnsupportedFormatError(f"Cannot write {w.sample_rate} Hz audio")
    try:
        with atomic_path(path) as tmp:
            sf.write(str(tmp), to_pcm16(w.samples), w.sample_rate, subtype="PCM_16", format="WAV")
    except (RuntimeError, OSError) as e:
        raise PersistenceError(f"Failed to write {path}: {e}") from e


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #
@dataclass(eq=False)
class Checkpoint:
    """Everything needed to resume training or run inference.

    Attributes:
        model: Architecture, network weights and embedding table
        stft: Framing the model was trained with
        optimizer: RMSProp state, absent for freshly initialised models
        step: Optimisation steps taken so far
        seed: Training stream seed; with ``step`` it fixes the next example
        mode: Regime that produced the checkpoint
    """

    model: AGNModel
    stft: StftConfig
    optimizer: Optional[OptimizerState] = None
    step: int = 0
    seed: int = 0
    mode: Optional[TrainingMode] = None


def _f8(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialise a checkpoint to its on-disk byte layout."""
    config, table, opt = ckpt.model.config, ckpt.model.embeddings, ckpt.optimizer
    parts: List[bytes] = [MAGIC]
    parts.append(
        _HEADER.pack(
            FORMAT_VERSION,
            config.num_freq_bins,
            config.embedding_dim,
            config.num_blstm_layers,
            config.num_fc_layers,
            config.hidden_units,
            ckpt.stft.window_len_samples,
            ckpt.stft.hop_samples,
            config.compression_exponent,
            config.init_seed,
            table.num_speakers,
            ckpt.step,
            ckpt.seed,
            _MODES.index(ckpt.mode),
            int(opt is not None),
            opt.step if opt else 0,
            int(opt.partition.theta) if opt else 0,
            len(opt.partition.embedding_rows) if opt else 0,
        )
    )
    for name, _ in ckpt.model.params.items():
        parts.append(_f8(ckpt.model.params[name]))
    parts.append(_f8(table.E))
    parts.append(table.trainable.astype(np.uint8).tobytes())
    if opt is not None:
        parts.append(np.ascontiguousarray(opt.partition.embedding_rows, dtype="<i8").tobytes())
        for name in opt.partition.theta_names(ckpt.model.params):
            parts.append(_f8(opt.mean_square[name]))
        parts.append(_f8(opt.mean_square[EMBEDDING_KEY]))
    for speaker_id in table.speaker_ids:
        encoded = speaker_id.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
    body = b"".join(parts)
    return body + hashlib.blake2b(body, digest_size=CHECKSUM_SIZE).digest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write a checkpoint atomically.

    Raises:
        PersistenceError: On I/O failure
    """
    if ckpt.optimizer is not None:
        ckpt.optimizer.check_congruent(ckpt.model.params, ckpt.model.embeddings)
    write_bytes_atomic(path, checkpoint_bytes(ckpt))
    logger.info(f"Checkpoint written to {path} (step {ckpt.step})")


class _Reader:
    """Bounds-checked cursor over checkpoint bytes."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(f"{self.source}: truncated checkpoint")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    def f8(self, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def checkpoint_from_bytes(data: bytes, source: str = "<bytes>", expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Parse checkpoint bytes; see ``load_checkpoint``."""
    if len(data) < len(MAGIC) + CHECKSUM_SIZE or data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{source}: not a checkpoint (bad magic)")
    body, digest = data[:-CHECKSUM_SIZE], data[-CHECKSUM_SIZE:]
    if hashlib.blake2b(body, digest_size=CHECKSUM_SIZE).digest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch, file is corrupt or incomplete")

    reader = _Reader(body, source)
    reader.take(len(MAGIC))
    (
        version, F, K, n_blstm, n_fc, hidden, window, hop, p, init_seed,
        rows, step, seed, mode_code, has_opt, opt_step, opt_theta, opt_rows,
    ) = reader.unpack(_HEADER)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported checkpoint version {version}")
    if mode_code >= len(_MODES):
        raise CheckpointFormatError(f"{source}: unknown training mode code {mode_code}")

    config = ModelConfig(
        num_freq_bins=F,
        embedding_dim=K,
        num_blstm_layers=n_blstm,
        num_fc_layers=n_fc,
        hidden_units=hidden,
        compression_exponent=p,
        init_seed=init_seed,
    )
    if expected is not None:
        check_dimensions(config, expected, source)

    arrays = {name: reader.f8(shape) for name, shape in expected_shapes(config).items()}
    params = ModelParams(config, arrays)
    E = reader.f8((rows, K))
    trainable = np.frombuffer(reader.take(rows), dtype=np.uint8).astype(bool)

    optimizer = None
    if has_opt:
        partition = ParameterPartition(
            theta=bool(opt_theta),
            embedding_rows=np.frombuffer(reader.take(8 * opt_rows), dtype="<i8").astype(np.int64),
        )
        mean_square: Dict[str, np.ndarray] = {
            name: reader.f8(params[name].shape) for name in partition.theta_names(params)
        }
        mean_square[EMBEDDING_KEY] = reader.f8((opt_rows, K))
        optimizer = OptimizerState(partition, mean_square, opt_step)

    speaker_ids = []
    length_fmt = struct.Struct("<I")
    for _ in range(rows):
        (length,) = reader.unpack(length_fmt)
        speaker_ids.append(reader.take(length).decode("utf-8"))
    if reader.offset != len(body):
        raise CheckpointFormatError(f"{source}: {len(body) - reader.offset} unexpected trailing bytes")

    table = EmbeddingTable(E, speaker_ids, trainable)
    model = AGNModel(config, params, table)
    if optimizer is not None:
        optimizer.check_congruent(params, table)
    return Checkpoint(
        model=model,
        stft=StftConfig(window_len_samples=window, hop_samples=hop),
        optimizer=optimizer,
        step=step,
        seed=seed,
        mode=_MODES[mode_code],
    )


def load_checkpoint(path: str | Path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read and verify a checkpoint.

    Args:
        path: Checkpoint file
        expected: If given, architecture dimensions the checkpoint must match

    Raises:
        ChecksumError: If the trailing checksum does not match
        CheckpointFormatError: On unknown magic/version or a malformed layout
        DimensionMismatchError: If dimensions differ from ``expected``
        PersistenceError: If the file cannot be read
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise PersistenceError(f"Cannot read checkpoint {path}: {e}") from e
    return checkpoint_from_bytes(data, str(path), expected)


_ARCH_FIELDS = ("num_freq_bins", "embedding_dim", "num_blstm_layers", "num_fc_layers", "hidden_units")


def check_dimensions(actual: ModelConfig, expected: ModelConfig, source: str = "checkpoint") -> None:
    """Raise DimensionMismatchError listing every architecture field that differs."""
    diffs = [
        f"{name}: {getattr(actual, name)} != {getattr(expected, name)}"
        for name in _ARCH_FIELDS
        if getattr(actual, name) != getattr(expected, name)
    ]
    if diffs:
        raise DimensionMismatchError(f"{source}: dimensions differ from configuration ({'; '.join(diffs)})")


@dataclass
class CheckpointDiff:
    """Differences between two checkpoints of the same architecture."""

    changed_params: List[str]
    changed_rows: List[str]
    added_rows: List[str]
    removed_rows: List[str]

    @property
    def identical(self) -> bool:
        return not (self.changed_params or self.changed_rows or self.added_rows or self.removed_rows)


def diff_checkpoints(base: Checkpoint, other: Checkpoint) -> CheckpointDiff:
    """Byte-level comparison of weights and embedding rows, rows matched by speaker id."""
    check_dimensions(other.model.config, base.model.config, "compared checkpoint")
    changed = [
        name
        for name, array in base.model.params.items()
        if array.tobytes() != other.model.params[name].tobytes()
    ]
    base_table, other_table = base.model.embeddings, other.model.embeddings
    base_ids, other_ids = set(base_table.speaker_ids), set(other_table.speaker_ids)
    changed_rows = [
        s
        for s in base_table.speaker_ids
        if s in other_ids
        and base_table.E[base_table.row_of(s)].tobytes() != other_table.E[other_table.row_of(s)].tobytes()
    ]
    return CheckpointDiff(
        changed_params=changed,
        changed_rows=changed_rows,
        added_rows=[s for s in other_table.speaker_ids if s not in base_ids],
        removed_rows=[s for s in base_table.speaker_ids if s not in other_ids],
    )
