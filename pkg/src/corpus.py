"""Corpus manifests, corpus loading and the directory-tree indexer.

A manifest is a plain-text table with one row per utterance::

    speaker_id<TAB>relative_wav_path<TAB>num_samples

Paths resolve against a corpus root directory (by default the manifest's
directory). ``num_samples`` is the utterance length at the 8 kHz pipeline
rate, i.e. after 16 kHz files have been decimated.
"""

import logging
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import soundfile as sf

from src.errors import InvalidInputError, PersistenceError, UnsupportedFormatError
from src.persistence import SUPPORTED_RATES, read_wav, write_text_atomic
from src.types import PIPELINE_SAMPLE_RATE, Corpus, CorpusRole, SpeakerProfile

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"


class CorpusIndexerError(PersistenceError):
    """Base exception class for CorpusIndexer errors."""
    pass


class InvalidCorpusTreeError(CorpusIndexerError):
    """Raised when the corpus root is missing or has no speaker directories."""
    pass


@dataclass(frozen=True)
class ManifestRow:
    """One utterance entry of a corpus manifest."""

    speaker_id: str
    path: str
    num_samples: int

    def __post_init__(self):
        if not self.speaker_id or "\t" in self.speaker_id:
            raise InvalidInputError(f"Invalid speaker id {self.speaker_id!r}")
        if not self.path or "\t" in self.path:
            raise InvalidInputError(f"Invalid utterance path {self.path!r}")
        if self.num_samples <= 0:
            raise InvalidInputError(f"{self.path}: num_samples must be positive")

    def to_line(self) -> str:
        return f"{self.speaker_id}\t{self.path}\t{self.num_samples}"


def read_manifest(path: str | Path) -> List[ManifestRow]:
    """Parse a manifest file.

    Raises:
        InvalidInputError: On malformed rows (reported with line numbers)
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise PersistenceError(f"Cannot read manifest {path}: {e}") from e
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise InvalidInputError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        try:
            rows.append(ManifestRow(fields[0], fields[1], int(fields[2])))
        except ValueError as e:
            raise InvalidInputError(f"{path}:{lineno}: {e}") from e
    return rows


def write_manifest(rows: Sequence[ManifestRow], path: str | Path) -> None:
    """Write manifest rows atomically."""
    write_text_atomic(path, "".join(row.to_line() + "\n" for row in rows))
    logger.info(f"Wrote manifest with {len(rows)} utterances to {path}")


def _natural_key(text: str):
    return [int(part) if part.isdigit() else part for part in re.split(r"(\d+)", text)]


def load_corpus(manifest_path: str | Path, role: CorpusRole = CorpusRole.WELL_KNOWN, root: Optional[str | Path] = None) -> Corpus:
    """Load every utterance listed in a manifest into a Corpus.

    Speakers get dense ids in natural sort order of their external ids;
    utterances keep manifest order.

    Raises:
        InvalidInputError: If the manifest is empty or a length disagrees with the audio
    """
    manifest_path = Path(manifest_path)
    root = Path(root) if root is not None else manifest_path.parent
    rows = read_manifest(manifest_path)
    if not rows:
        raise InvalidInputError(f"Manifest {manifest_path} lists no utterances")

    by_speaker: Dict[str, list] = {}
    for row in rows:
        waveform = read_wav(root / row.path)
        if len(waveform) != row.num_samples:
            raise InvalidInputError(
                f"{row.path}: manifest says {row.num_samples} samples, file has {len(waveform)}"
            )
        by_speaker.setdefault(row.speaker_id, []).append(waveform)

    profiles = [
        SpeakerProfile(speaker_id=index, utterances=by_speaker[name], name=name)
        for index, name in enumerate(sorted(by_speaker, key=_natural_key))
    ]
    corpus = Corpus(profiles, role)
    logger.info(
        f"Loaded {role.value} corpus from {manifest_path}: {corpus.num_speakers} speakers, {len(rows)} utterances"
    )
    return corpus


class CorpusIndexer:
    """Builds a manifest from a directory tree laid out ``root/<speaker>/<...>.wav``."""

    def __init__(self, root: str | Path):
        """Initialize the indexer.

        Args:
            root: Corpus root; each immediate subdirectory is one speaker

        Raises:
            InvalidCorpusTreeError: If ``root`` is not a directory
        """
        self.root = Path(root).resolve()
        if not self.root.is_dir():
            raise InvalidCorpusTreeError(f"Corpus root {self.root} is not a directory")

    def pipeline_length(self, path: Path) -> int:
        """Length in 8 kHz samples of a WAV file, from its header.

        Raises:
            UnsupportedFormatError: If the file is not mono 16-bit PCM at 8/16 kHz
        """
        try:
            info = sf.info(str(path))
        except (RuntimeError, OSError) as e:
            raise UnsupportedFormatError(f"Cannot read {path}: {e}") from e
        if info.subtype != "PCM_16" or info.channels != 1 or info.samplerate not in SUPPORTED_RATES:
            raise UnsupportedFormatError(
                f"{path}: {info.channels} ch {info.subtype} at {info.samplerate} Hz is not supported"
            )
        return math.ceil(info.frames * PIPELINE_SAMPLE_RATE / info.samplerate)

    def index(self) -> List[ManifestRow]:
        """Walk the tree and describe every WAV file.

        Unsupported files are logged and skipped.

        Raises:
            InvalidCorpusTreeError: If no speaker directory holds a usable WAV file
        """
        rows: List[ManifestRow] = []
        files_skipped = 0
        speakers = sorted((d for d in self.root.iterdir() if d.is_dir()), key=lambda d: _natural_key(d.name))
        for speaker_dir in speakers:
            wavs = sorted(
                (Path(dirpath) / name
                 for dirpath, _, names in os.walk(speaker_dir)
                 for name in names if name.lower().endswith(".wav")),
                key=lambda p: _natural_key(str(p.relative_to(self.root))),
            )
            for wav in wavs:
                relative = wav.relative_to(self.root).as_posix()
                try:
                    rows.append(ManifestRow(speaker_dir.name, relative, self.pipeline_length(wav)))
                    logger.debug(f"Indexed: {relative}")
                except (UnsupportedFormatError, InvalidInputError) as e:
                    logger.warning(f"Skipping {relative}: {e}")
                    files_skipped += 1
        if not rows:
            raise InvalidCorpusTreeError(f"No usable WAV files under {self.root}")

        logger.info("=== Indexing Summary ===")
        logger.info(f"Corpus root: {self.root}")
        logger.info(f"Speakers: {len({r.speaker_id for r in rows})}")
        logger.info(f"Utterances indexed: {len(rows)}")
        logger.info(f"Files skipped: {files_skipped}")
        return rows

    def write(self, manifest_path: Optional[str | Path] = None) -> Path:
        """Index the tree and write the manifest (default ``root/manifest.tsv``)."""
        manifest_path = Path(manifest_path) if manifest_path else self.root / MANIFEST_NAME
        write_manifest(self.index(), manifest_path)
        return manifest_path
