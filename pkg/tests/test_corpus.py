"""Tests for manifests, corpus loading, the tree indexer and the synthetic corpus."""

import numpy as np
import pytest
import soundfile as sf

from src.corpus import (
    MANIFEST_NAME,
    CorpusIndexer,
    InvalidCorpusTreeError,
    ManifestRow,
    load_corpus,
    read_manifest,
    write_manifest,
)
from src.errors import InvalidInputError
from src.persistence import write_wav
from src.synth_corpus import generate_corpus
from src.types import CorpusRole, Waveform


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    """Three synthetic speakers of 25 s in 10 s utterances."""
    out = tmp_path_factory.mktemp("synthetic")
    return generate_corpus(out, num_speakers=3, seconds=25, seed=11)


def spectral_centroid(samples):
    spectrum = np.abs(np.fft.rfft(samples)) ** 2
    freqs = np.fft.rfftfreq(len(samples), d=1 / 8000)
    return float(np.sum(freqs * spectrum) / np.sum(spectrum))


def test_generated_manifest_lists_every_utterance(synthetic):
    """25 s per speaker gives two 10 s and one 5 s utterance each."""
    rows = read_manifest(synthetic)

    assert len(rows) == 9
    assert [r.num_samples for r in rows[:3]] == [80000, 80000, 40000]
    assert sorted({r.speaker_id for r in rows}) == ["spk000", "spk001", "spk002"]
    assert len(list(synthetic.parent.rglob("*.wav"))) == len(rows)


def test_generation_is_deterministic(tmp_path, synthetic):
    """The same seed reproduces every file byte for byte."""
    again = generate_corpus(tmp_path / "again", num_speakers=3, seconds=25, seed=11)

    assert again.read_bytes() == synthetic.read_bytes()
    for row in read_manifest(synthetic):
        assert (again.parent / row.path).read_bytes() == (synthetic.parent / row.path).read_bytes()


def test_speakers_have_distinct_centroids(synthetic):
    """Spectral signatures differ between speakers."""
    corpus = load_corpus(synthetic)
    centroids = [spectral_centroid(np.concatenate([u.samples for u in p.utterances])) for p in corpus.profiles]

    assert len(set(np.round(centroids, 1))) == len(centroids)


def test_generation_refuses_bad_requests(tmp_path, synthetic):
    """Non-empty targets need force; speakers need one full utterance."""
    with pytest.raises(InvalidInputError):
        generate_corpus(synthetic.parent, num_speakers=3, seconds=25, seed=11)
    with pytest.raises(InvalidInputError):
        generate_corpus(tmp_path / "short", num_speakers=2, seconds=5, seed=0)


def test_load_corpus_assigns_dense_ids_in_natural_order(tmp_path):
    """spk2 sorts before spk10; names are kept."""
    rows = []
    for name in ("spk10", "spk2"):
        write_wav(Waveform(np.full(800, 0.25)), tmp_path / name / "a.wav")
        rows.append(ManifestRow(name, f"{name}/a.wav", 800))
    write_manifest(rows, tmp_path / MANIFEST_NAME)

    corpus = load_corpus(tmp_path / MANIFEST_NAME, CorpusRole.NEW)
    assert corpus.speaker_names == ["spk2", "spk10"]
    assert [p.speaker_id for p in corpus.profiles] == [0, 1]
    assert corpus.role == CorpusRole.NEW


def test_manifest_length_mismatch_rejected(tmp_path):
    """num_samples must match the audio."""
    write_wav(Waveform(np.zeros(800)), tmp_path / "s" / "a.wav")
    write_manifest([ManifestRow("s", "s/a.wav", 900)], tmp_path / MANIFEST_NAME)

    with pytest.raises(InvalidInputError):
        load_corpus(tmp_path / MANIFEST_NAME)


def test_malformed_manifest_reports_line(tmp_path):
    """Rows need three tab-separated fields."""
    (tmp_path / MANIFEST_NAME).write_text("s\ta.wav\t10\nbroken line\n")

    with pytest.raises(InvalidInputError, match=":2:"):
        read_manifest(tmp_path / MANIFEST_NAME)


def test_indexer_skips_unsupported_files(tmp_path):
    """Stereo files are skipped; 16 kHz files are measured at 8 kHz."""
    write_wav(Waveform(np.zeros(1000)), tmp_path / "alice" / "one.wav")
    sf.write(str(tmp_path / "alice" / "wide.wav"), np.zeros(2001, dtype=np.int16), 16000, subtype="PCM_16")
    write_wav(Waveform(np.zeros(500)), tmp_path / "bob" / "two.wav")
    sf.write(str(tmp_path / "bob" / "stereo.wav"), np.zeros((10, 2), dtype=np.int16), 8000, subtype="PCM_16")

    manifest = CorpusIndexer(tmp_path).write()
    rows = read_manifest(manifest)

    assert [(r.speaker_id, r.path, r.num_samples) for r in rows] == [
        ("alice", "alice/one.wav", 1000),
        ("alice", "alice/wide.wav", 1001),
        ("bob", "bob/two.wav", 500),
    ]
    assert len(load_corpus(manifest).profiles) == 2


def test_indexer_needs_audio(tmp_path):
    """An empty tree is an error."""
    (tmp_path / "nobody").mkdir()
    with pytest.raises(InvalidCorpusTreeError):
        CorpusIndexer(tmp_path).index()
    with pytest.raises(InvalidCorpusTreeError):
        CorpusIndexer(tmp_path / "missing")
