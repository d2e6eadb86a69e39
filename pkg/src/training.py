"""Pre-training and fine-tuning loops.

One optimiser thread owns the parameters. Examples for a step are drawn from
the TRAIN stream at indices ``step * batch_size + i``, optionally built by a
thread pool; the fixed probe batch comes from the PROBE stream.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from src.config import RunConfig, TrainingMode
from src.dsp import compressed_magnitude
from src.errors import DimensionMismatchError, InvalidConfigError, TrainingDivergenceError
from src.metrics import evaluate
from src.network import AGNModel, backward, batch_loss, clip_by_global_norm, forward_batch, superpose_batch
from src.optim import OptimizerState, ParameterPartition, apply_rmsprop, lr_schedule
from src.persistence import Checkpoint, save_checkpoint
from src.report_writer import TrainingLogWriter
from src.task_synth import Stream, check_task_config, sample_task, task_rng
from src.types import Corpus, MixtureExample, TrainingLog
from src.workflow import PIPELINE_GATING, corpus_rows, table_indicator

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Batch:
    """Stacked network inputs and targets, (B, F, T) each, plus (B, N) indicators."""

    features: np.ndarray
    targets: np.ndarray
    indicators: np.ndarray


@dataclass(eq=False)
class TrainingResult:
    model: AGNModel
    optimizer: OptimizerState
    log: TrainingLog
    step: int
    stopped_early: bool = False


class Trainer:
    """Runs the sample -> forward -> loss -> backward -> RMSProp loop for one regime."""

    def __init__(
        self,
        model: AGNModel,
        corpus: Corpus,
        config: RunConfig,
        optimizer: Optional[OptimizerState] = None,
        start_step: int = 0,
        eval_corpus: Optional[Corpus] = None,
        log_path: Optional[str | Path] = None,
        checkpoint_path: Optional[str | Path] = None,
        num_workers: int = 1,
        progress: bool = False,
    ):
        """Initialize the trainer.

        Args:
            model: Starting weights and embedding table; the table's trainable
                flags must match ``config.train.mode``
            corpus: Training speakers, all present in the embedding table
            config: Run configuration
            optimizer: RMSProp state to resume from; fresh zeros when None
            start_step: Step counter to resume from
            eval_corpus: Corpus for periodic SI-SNR evaluation, optional
            log_path: Append-only training log file, optional
            checkpoint_path: Target of periodic checkpoints, optional
            num_workers: Threads building training examples
            progress: Show a progress bar

        Raises:
            InvalidConfigError: If the table's trainable rows contradict the mode
            InvalidInputError: If the corpus cannot host the task or lacks embeddings
        """
        self.config = config
        self.train_cfg = config.train
        self.corpus = corpus
        self.eval_corpus = eval_corpus
        check_task_config(corpus, config.task)
        self.rows = corpus_rows(model.embeddings, corpus)

        partition = ParameterPartition.for_mode(self.train_cfg.mode, model.embeddings)
        if optimizer is None:
            optimizer = OptimizerState.zeros(partition, model.params, model.embeddings)
        elif optimizer.partition.theta != partition.theta or not np.array_equal(
            optimizer.partition.embedding_rows, partition.embedding_rows
        ):
            raise InvalidConfigError(f"Resumed optimizer state does not match the {self.train_cfg.mode.value} partition")
        optimizer.check_congruent(model.params, model.embeddings)

        self.model = model
        self.optimizer = optimizer
        self.step = start_step
        self.log = TrainingLog()
        self.log_writer = TrainingLogWriter(log_path)
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.last_checkpoint: Optional[str] = None
        self.num_workers = num_workers
        self.progress = progress
        self._probe: Optional[Batch] = None

    # ------------------------------------------------------------------ #
    def _example(self, index: int, stream: Stream) -> MixtureExample:
        return sample_task(self.corpus, self.config.task, task_rng(self.train_cfg.seed, index, stream))

    def build_batch(self, indices: Sequence[int], stream: Stream = Stream.TRAIN) -> Batch:
        """Examples ``indices`` of ``stream`` as stacked compressed magnitudes."""
        if self.num_workers > 1:
            with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                examples: List[MixtureExample] = list(pool.map(lambda i: self._example(i, stream), indices))
        else:
            examples = [self._example(i, stream) for i in indices]
        stft_cfg, p = self.config.stft, self.model.config.compression_exponent
        table = self.model.embeddings
        return Batch(
            features=np.stack([compressed_magnitude(e.x, stft_cfg, p).values for e in examples]),
            targets=np.stack([compressed_magnitude(e.t, stft_cfg, p).values for e in examples]),
            indicators=np.stack([table_indicator(table, self.rows, e) for e in examples]),
        )

    @property
    def probe_batch(self) -> Batch:
        if self._probe is None:
            self._probe = self.build_batch(range(self.train_cfg.probe_batch_size), Stream.PROBE)
        return self._probe

    def batch_loss(self, batch: Batch) -> float:
        """Summed loss of the current model on ``batch``."""
        embeddings = superpose_batch(self.model.embeddings, batch.indicators)
        masks, _ = forward_batch(batch.features, embeddings, self.model.params, PIPELINE_GATING)
        return batch_loss(masks, batch.features, batch.targets)

    # ------------------------------------------------------------------ #
    def train_step(self) -> float:
        """One optimisation step; returns the pre-update batch loss.

        Raises:
            TrainingDivergenceError: On a non-finite loss or gradient; the model is left unchanged
        """
        cfg = self.train_cfg
        lr = lr_schedule(self.step, cfg)
        start = self.step * cfg.batch_size
        batch = self.build_batch(range(start, start + cfg.batch_size))
        model = self.model

        embeddings = superpose_batch(model.embeddings, batch.indicators)
        masks, cache = forward_batch(batch.features, embeddings, model.params, PIPELINE_GATING)
        value = batch_loss(masks, batch.features, batch.targets)
        if not np.isfinite(value):
            raise TrainingDivergenceError(
                f"Loss became {value} at step {self.step}", step=self.step, last_checkpoint=self.last_checkpoint
            )
        grads = backward(cache, batch.targets, model.params)
        grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
        try:
            params, table, self.optimizer = apply_rmsprop(
                model.params,
                model.embeddings,
                grads.params,
                grads.embedding_table(batch.indicators),
                self.optimizer,
                lr,
                cfg,
            )
        except TrainingDivergenceError as e:
            raise TrainingDivergenceError(
                f"{e} at step {self.step}", step=self.step, last_checkpoint=self.last_checkpoint
            ) from e
        self.model = AGNModel(model.config, params, table)

        self.log.steps.append(self.step)
        self.log.learning_rates.append(lr)
        self.log.losses.append(value)
        self.log_writer.step(self.step, lr, value)
        logger.debug(f"step {self.step}: lr={lr:.3g} loss={value:.6g} grad_norm={norm:.4g}")
        self.step += 1
        return value

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model=self.model,
            stft=self.config.stft,
            optimizer=self.optimizer,
            step=self.step,
            seed=self.train_cfg.seed,
            mode=self.train_cfg.mode,
        )

    def save(self) -> None:
        if self.checkpoint_path is None:
            return
        save_checkpoint(self.checkpoint(), self.checkpoint_path)
        self.last_checkpoint = str(self.checkpoint_path)

    def _evaluate(self) -> bool:
        """Probe loss (and SI-SNR when an eval corpus is set); True if the probe improved."""
        cfg = self.train_cfg
        probe = self.batch_loss(self.probe_batch)
        self.log.probes.append((self.step, probe))
        improved = probe < self._best_probe
        if improved:
            self._best_probe = probe
        if self.eval_corpus is not None and cfg.eval_examples > 0:
            report = evaluate(
                self.model,
                self.eval_corpus,
                self.config.task,
                cfg.eval_examples,
                cfg.seed,
                self.config.stft,
            )
            self.log.evals.append((self.step, report.mean))
            self.log_writer.eval(self.step, report.mean)
        logger.info(f"step {self.step}: probe loss {probe:.6g}{' (best)' if improved else ''}")
        return improved

    def run(self) -> TrainingResult:
        """Train until ``max_steps`` or until the probe loss stalls for ``patience`` evaluations."""
        cfg = self.train_cfg
        total = max(cfg.max_steps - self.step, 0)
        logger.info(
            f"{cfg.mode.value}: {total} steps from step {self.step}, batch {cfg.batch_size}, "
            f"{self.model.params.num_parameters():,} network parameters, "
            f"{len(self.optimizer.partition.embedding_rows)} trainable embedding rows"
        )
        self._best_probe = float("inf")
        stale = 0
        stopped_early = False
        if total:
            self._evaluate()
        with tqdm(total=total, desc=cfg.mode.value, disable=not self.progress, unit="step") as bar:
            while self.step < cfg.max_steps:
                loss = self.train_step()
                bar.update(1)
                bar.set_postfix(loss=f"{loss:.4g}")
                if self.step % cfg.checkpoint_every == 0:
                    self.save()
                if self.step % cfg.eval_every == 0:
                    stale = 0 if self._evaluate() else stale + 1
                    if stale >= cfg.patience:
                        logger.warning(f"Probe loss did not improve in {stale} evaluations; stopping at step {self.step}")
                        stopped_early = True
                        break
        return TrainingResult(self.model, self.optimizer, self.log, self.step, stopped_early)


def _check_speakers(model: AGNModel, corpus: Corpus) -> None:
    if sorted(model.embeddings.speaker_ids) != sorted(corpus.speaker_names):
        raise DimensionMismatchError(
            f"Embedding table holds {model.embeddings.num_speakers} speakers but the corpus has "
            f"{corpus.num_speakers}; pre-training needs one row per well-known speaker"
        )


def pretrain(
    corpus: Corpus,
    model: AGNModel,
    config: RunConfig,
    eval_corpus: Optional[Corpus] = None,
    optimizer: Optional[OptimizerState] = None,
    start_step: int = 0,
    **trainer_kwargs,
) -> TrainingResult:
    """Jointly train the network and the well-known speaker embeddings.

    Raises:
        InvalidConfigError: If ``config.train.mode`` is not pretrain
        DimensionMismatchError: If the table does not hold exactly the corpus speakers
        TrainingDivergenceError: If the loss or a gradient stops being finite
    """
    if config.train.mode != TrainingMode.PRETRAIN:
        raise InvalidConfigError(f"pretrain needs train.mode = pretrain, got {config.train.mode.value}")
    _check_speakers(model, corpus)
    trainer = Trainer(model, corpus, config, optimizer, start_step, eval_corpus, **trainer_kwargs)
    return trainer.run()


def finetune(
    corpus_new: Corpus,
    model: AGNModel,
    config: RunConfig,
    eval_corpus: Optional[Corpus] = None,
    **trainer_kwargs,
) -> TrainingResult:
    """Adapt a pre-trained model to new speakers.

    New embedding rows are appended for every speaker of ``corpus_new`` and
    drawn from ``train.new_embedding_seed``. Conventional mode also updates
    the network; robust mode updates the new rows only.

    Raises:
        InvalidConfigError: If ``config.train.mode`` is not a fine-tuning mode
        InvalidInputError: If a new speaker already has an embedding row
    """
    mode = config.train.mode
    if mode not in (TrainingMode.FINETUNE_CONVENTIONAL, TrainingMode.FINETUNE_ROBUST):
        raise InvalidConfigError(f"finetune needs a fine-tuning mode, got {mode.value}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.train.new_embedding_seed)))
    table = model.embeddings.extended(corpus_new.speaker_names, rng)
    logger.info(
        f"Appended {corpus_new.num_speakers} new speaker rows to {model.embeddings.num_speakers} pre-trained rows"
    )
    extended = AGNModel(model.config, model.params, table)
    trainer = Trainer(extended, corpus_new, config, None, 0, eval_corpus, **trainer_kwargs)
    return trainer.run()
