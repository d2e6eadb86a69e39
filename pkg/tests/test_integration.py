"""Integration tests for the complete extraction workflow.

The desk-scale runs train real models for minutes and are marked ``slow``;
run them with ``pytest -m slow``.
"""

import numpy as np
import pytest

from src.config import DataConfig, RunConfig, TaskConfig, TrainConfig, TrainingMode
from src.corpus import load_corpus
from src.metrics import evaluate
from src.network import AGNModel
from src.persistence import Checkpoint, load_checkpoint, read_wav, save_checkpoint, write_wav
from src.synth_corpus import generate_corpus
from src.task_synth import Stream, assign_splits, sample_task_at
from src.training import finetune, pretrain
from src.types import CorpusRole
from src.workflow import separate_speakers
from tests.conftest import TINY_MODEL, TINY_STFT


def with_train(config, **updates):
    return config.model_copy(update={"train": config.train.model_copy(update=updates)})


def with_task(config, **updates):
    return config.model_copy(update={"task": config.task.model_copy(update=updates)})


def test_end_to_end_extraction(tmp_path):
    """Generate, train, checkpoint, reload, evaluate and separate."""
    manifest = generate_corpus(tmp_path / "corpus", num_speakers=4, seconds=4, seed=3, utterance_seconds=2)
    splits = assign_splits(load_corpus(manifest), seconds_head=2.0)
    config = RunConfig(
        stft=TINY_STFT,
        task=TaskConfig(tau=2400, g_max=1, h_max=1),
        model=TINY_MODEL,
        train=TrainConfig(base_lr=3e-3, batch_size=2, max_steps=3, eval_every=3, eval_examples=2, probe_batch_size=2),
    )
    model = AGNModel.initialize(TINY_MODEL, splits["train"].speaker_names)

    result = pretrain(splits["train"], model, config, eval_corpus=splits["eval"])
    save_checkpoint(Checkpoint(result.model, TINY_STFT, result.optimizer, result.step, 0, TrainingMode.PRETRAIN), tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt", expected=TINY_MODEL)

    report = evaluate(loaded.model, splits["eval"], config.task, 4, seed=1, stft_cfg=loaded.stft)
    assert report.count == 4
    assert report.scores == evaluate(result.model, splits["eval"], config.task, 4, seed=1, stft_cfg=TINY_STFT).scores
    assert all(np.isfinite(report.scores))

    example = sample_task_at(splits["eval"], config.task, 0, Stream.EVAL)
    write_wav(example.x, tmp_path / "mix.wav")
    estimate = separate_speakers(loaded.model, read_wav(tmp_path / "mix.wav"), ["spk000"], loaded.stft)
    write_wav(estimate, tmp_path / "out.wav")
    assert len(read_wav(tmp_path / "out.wav")) == len(example.x)


def test_robust_freeze_over_200_steps(corpus, new_corpus, model, run_config):
    """Two hundred robust steps leave theta, old rows and old-speaker scores bit-identical."""
    config = with_train(run_config, mode=TrainingMode.FINETUNE_ROBUST, max_steps=200, eval_every=1000)
    before = evaluate(model, corpus, run_config.task, 8, seed=4, stft_cfg=TINY_STFT)

    result = finetune(new_corpus, model, config)

    for name in model.params.names():
        assert result.model.params[name].tobytes() == model.params[name].tobytes()
    assert result.model.embeddings.E[: corpus.num_speakers].tobytes() == model.embeddings.E.tobytes()
    after = evaluate(result.model, corpus, run_config.task, 8, seed=4, stft_cfg=TINY_STFT)
    assert after.scores == before.scores
    assert after.mixture_scores == before.mixture_scores


# --------------------------------------------------------------------------- #
# Desk-scale acceptance runs
# --------------------------------------------------------------------------- #
DESK_STEPS = 5000
EVAL_EXAMPLES = 100


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Eight well-known speakers of 120 s and four new ones, split 20 s head / 100 s tail."""
    root = tmp_path_factory.mktemp("desk")
    well_known = load_corpus(generate_corpus(root / "known", 8, 120, seed=0))
    new = load_corpus(generate_corpus(root / "new", 4, 120, seed=1, prefix="new"), CorpusRole.NEW)
    config = RunConfig(
        task=TaskConfig(g_max=1, h_max=1),
        train=TrainConfig(
            base_lr=1e-3,
            max_steps=DESK_STEPS,
            eval_every=250,
            eval_examples=0,
            patience=8,
            clip_norm=5.0,
        ),
        data=DataConfig(head_seconds=20),
    )
    return {
        "config": config,
        "known": assign_splits(well_known, config.data.head_seconds),
        "new": assign_splits(new, config.data.head_seconds),
    }


@pytest.fixture(scope="module")
def single_speaker_model(desk):
    """Desk-scale model pre-trained on the G = H = 1 task."""
    config, known = desk["config"], desk["known"]
    model = AGNModel.initialize(config.model, known["train"].speaker_names)
    return pretrain(known["train"], model, config).model


@pytest.mark.slow
def test_desk_single_speaker_improvement(desk, single_speaker_model):
    """Extraction beats the raw mixture by at least 8 dB on held-out tasks."""
    config = desk["config"]
    report = evaluate(single_speaker_model, desk["known"]["eval"], config.task, EVAL_EXAMPLES, seed=0)

    assert report.mean_improvement >= 8.0


@pytest.mark.slow
def test_desk_speaker_set_improvement(desk):
    """Stochastic G, H training still improves by 5 dB and stays within 3 dB of the single-speaker task."""
    config = with_task(desk["config"], g_max=3, h_max=3, conversation_mode=True)
    known = desk["known"]
    model = AGNModel.initialize(config.model, known["train"].speaker_names)
    trained = pretrain(known["train"], model, config).model

    speaker_set = evaluate(trained, known["eval"], config.task, EVAL_EXAMPLES, seed=0)
    single = evaluate(
        trained, known["eval"], config.task.model_copy(update={"g_max": 1, "h_max": 1, "conversation_mode": False}),
        EVAL_EXAMPLES, seed=0,
    )
    assert speaker_set.mean_improvement >= 5.0
    assert single.mean - speaker_set.mean <= 3.0


@pytest.mark.slow
def test_desk_finetuning_parity(desk, single_speaker_model):
    """Conventional and robust fine-tuning end within 1.5 dB on the new speakers."""
    new = desk["new"]
    means = {}
    for mode in (TrainingMode.FINETUNE_CONVENTIONAL, TrainingMode.FINETUNE_ROBUST):
        config = with_train(desk["config"], mode=mode, max_steps=1000)
        model = finetune(new["train"], single_speaker_model, config).model
        means[mode] = evaluate(model, new["eval"], config.task, EVAL_EXAMPLES, seed=0).mean

    assert abs(means[TrainingMode.FINETUNE_CONVENTIONAL] - means[TrainingMode.FINETUNE_ROBUST]) <= 1.5
