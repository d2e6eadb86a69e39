"""SI-SNR and dataset-level evaluation."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.config import StftConfig, TaskConfig
from src.dsp import compressed_magnitude, reconstruct
from src.errors import DimensionMismatchError, InvalidInputError
from src.network import AGNModel, apply_mask, forward, superpose
from src.task_synth import Stream, check_task_config, sample_task, task_rng
from src.types import Corpus, Waveform
from src.workflow import PIPELINE_GATING, corpus_rows, featurize, table_indicator

logger = logging.getLogger(__name__)

SISNR_CAP_DB = 120.0
_DEGENERATE_RATIO = 1e-30


def si_snr(estimate: Waveform | np.ndarray, target: Waveform | np.ndarray) -> float:
    """Scale-invariant SNR in dB, capped to +-120 dB for degenerate cases.

    Raises:
        InvalidInputError: If the target is silent or the lengths differ
    """
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    ref = np.asarray(getattr(target, "samples", target), dtype=np.float64)
    if est.shape != ref.shape:
        raise DimensionMismatchError(f"Estimate length {est.shape} differs from target {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0.0:
        raise InvalidInputError("SI-SNR is undefined for a silent target")
    projection = (float(np.dot(est, ref)) / ref_energy) * ref
    noise = est - projection
    proj_energy = float(np.dot(projection, projection))
    noise_energy = float(np.dot(noise, noise))
    if proj_energy == 0.0:
        return -SISNR_CAP_DB
    if noise_energy < _DEGENERATE_RATIO * proj_energy:
        return SISNR_CAP_DB
    return float(10.0 * np.log10(proj_energy / noise_energy))


class EvalReport(BaseModel):
    """Per-example SI-SNR of the separated output and of the raw mixture.

    Scores are clamped to +-120 dB for degenerate projections. ``mean`` and
    ``median`` are None for an empty report.
    """

    scores: List[float] = Field(default_factory=list, description="SI-SNR of each separated example, dB")
    mixture_scores: List[float] = Field(default_factory=list, description="SI-SNR of each raw mixture, dB")
    count: int = Field(default=0, description="Number of examples")
    mean: Optional[float] = Field(default=None, description="Mean separated SI-SNR, dB")
    median: Optional[float] = Field(default=None, description="Median separated SI-SNR, dB")
    mean_mixture: Optional[float] = Field(default=None, description="Mean mixture SI-SNR, dB")
    mean_improvement: Optional[float] = Field(default=None, description="Mean SI-SNR improvement, dB")
    oracle: bool = Field(default=False, description="Scores use the true target magnitude")
    checkpoint_id: str = Field(default="", description="Checkpoint the report was computed from")
    config: Dict[str, Any] = Field(default_factory=dict, description="Task parameters echo")

    @model_validator(mode="after")
    def _check_lengths(self) -> "EvalReport":
        if len(self.scores) != self.count or len(self.mixture_scores) != self.count:
            raise ValueError("scores, mixture_scores and count disagree")
        return self

    @classmethod
    def from_scores(cls, scores: List[float], mixture_scores: List[float], **extra) -> "EvalReport":
        if not scores:
            return cls(**extra)
        return cls(
            scores=scores,
            mixture_scores=mixture_scores,
            count=len(scores),
            mean=float(np.mean(scores)),
            median=float(np.median(scores)),
            mean_mixture=float(np.mean(mixture_scores)),
            mean_improvement=float(np.mean(np.subtract(scores, mixture_scores))),
            **extra,
        )


def _score_example(
    model: AGNModel,
    corpus: Corpus,
    rows: np.ndarray,
    task_cfg: TaskConfig,
    stft_cfg: StftConfig,
    seed: int,
    index: int,
    oracle: bool,
) -> Tuple[float, float]:
    example = sample_task(corpus, task_cfg, task_rng(seed, index, Stream.EVAL))
    p = model.config.compression_exponent
    features = featurize(example.x, stft_cfg, p)
    if oracle:
        estimate = compressed_magnitude(example.t, stft_cfg, p)
    else:
        embedding = superpose(model.embeddings, table_indicator(model.embeddings, rows, example))
        mask, _ = forward(features.compressed, embedding, model.params, PIPELINE_GATING)
        estimate = apply_mask(mask, features.compressed)
    separated = reconstruct(estimate, features.spectrogram)
    return si_snr(separated, example.t), si_snr(example.x, example.t)


def evaluate(
    model: AGNModel,
    corpus: Corpus,
    task_cfg: TaskConfig,
    num_examples: int,
    seed: int,
    stft_cfg: Optional[StftConfig] = None,
    oracle: bool = False,
    num_workers: int = 1,
    checkpoint_id: str = "",
) -> EvalReport:
    """Score the full separation pipeline on ``num_examples`` deterministic tasks.

    Examples come from the EVAL stream of ``seed``; results are aggregated in
    example-index order regardless of ``num_workers``. Any failing example
    aborts the evaluation.

    Raises:
        InvalidInputError: If the corpus cannot host the task or a speaker has no embedding
    """
    stft_cfg = stft_cfg or StftConfig()
    extra = dict(
        oracle=oracle,
        checkpoint_id=checkpoint_id,
        config={**task_cfg.model_dump(mode="json"), "seed": seed, "num_examples": num_examples},
    )
    if num_examples <= 0:
        logger.warning("Evaluation requested with no examples; mean SI-SNR is undefined")
        return EvalReport.from_scores([], [], **extra)
    check_task_config(corpus, task_cfg)
    rows = corpus_rows(model.embeddings, corpus)

    def score(index: int) -> Tuple[float, float]:
        return _score_example(model, corpus, rows, task_cfg, stft_cfg, seed, index, oracle)

    if num_workers > 1:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            results = list(pool.map(score, range(num_examples)))
    else:
        results = [score(index) for index in range(num_examples)]

    report = EvalReport.from_scores([r[0] for r in results], [r[1] for r in results], **extra)
    logger.info(
        f"Evaluated {report.count} examples: mean SI-SNR {report.mean:.2f} dB "
        f"(mixture {report.mean_mixture:.2f} dB, improvement {report.mean_improvement:.2f} dB)"
    )
    return report
