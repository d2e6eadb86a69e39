"""RMSProp, the staircase learning-rate schedule and parameter partitions."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from src.config import TrainConfig, TrainingMode
from src.errors import DimensionMismatchError, InvalidConfigError, TrainingDivergenceError
from src.network import EmbeddingTable, ModelParams

logger = logging.getLogger(__name__)

EMBEDDING_KEY = "embedding"


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """``base_lr * decay_rate ** floor(step / decay_every_steps)``."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    return cfg.base_lr * cfg.decay_rate ** (step // cfg.decay_every_steps)


@dataclass
class ParameterPartition:
    """Trainable set: the network weights (all or nothing) plus some embedding rows."""

    theta: bool
    embedding_rows: np.ndarray

    def __post_init__(self):
        self.embedding_rows = np.unique(np.asarray(self.embedding_rows, dtype=np.int64))

    @classmethod
    def for_mode(cls, mode: TrainingMode, table: EmbeddingTable) -> "ParameterPartition":
        """Partition for a regime, read off the table's per-row trainable flags.

        Raises:
            InvalidConfigError: If the flags contradict the mode
        """
        rows = np.flatnonzero(table.trainable)
        if mode == TrainingMode.PRETRAIN:
            if len(rows) != table.num_speakers:
                raise InvalidConfigError(
                    f"Pre-training updates every embedding row, but {table.num_speakers - len(rows)} rows are frozen"
                )
            return cls(theta=True, embedding_rows=rows)
        if len(rows) == 0 or len(rows) == table.num_speakers:
            raise InvalidConfigError(
                f"{mode.value} needs new trainable speaker rows next to frozen pre-trained rows "
                f"({len(rows)} of {table.num_speakers} rows trainable)"
            )
        return cls(theta=mode == TrainingMode.FINETUNE_CONVENTIONAL, embedding_rows=rows)

    def theta_names(self, params: ModelParams) -> List[str]:
        return params.names() if self.theta else []


@dataclass
class OptimizerState:
    """RMSProp running mean of squared gradients for exactly the trainable set.

    ``mean_square`` holds one array per trainable network parameter plus an
    ``embedding`` array of shape (len(partition.embedding_rows), K).
    """

    partition: ParameterPartition
    mean_square: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, partition: ParameterPartition, params: ModelParams, table: EmbeddingTable) -> "OptimizerState":
        mean_square = {name: np.zeros_like(params[name]) for name in partition.theta_names(params)}
        mean_square[EMBEDDING_KEY] = np.zeros((len(partition.embedding_rows), table.dim))
        return cls(partition, mean_square, 0)

    def check_congruent(self, params: ModelParams, table: EmbeddingTable) -> None:
        """Raise DimensionMismatchError unless the state mirrors the trainable shapes."""
        expected = {name: params[name].shape for name in self.partition.theta_names(params)}
        expected[EMBEDDING_KEY] = (len(self.partition.embedding_rows), table.dim)
        actual = {name: array.shape for name, array in self.mean_square.items()}
        if expected != actual:
            raise DimensionMismatchError(f"Optimizer state shapes {actual} do not mirror trainable shapes {expected}")
        if len(self.partition.embedding_rows) and self.partition.embedding_rows.max() >= table.num_speakers:
            raise DimensionMismatchError("Optimizer partition addresses rows beyond the embedding table")


def rmsprop_step(
    values: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    mean_square: Dict[str, np.ndarray],
    lr: float,
    rho: float = 0.9,
    epsilon: float = 1e-8,
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """One RMSProp update of the arrays in ``mean_square``.

    ``s <- rho * s + (1 - rho) * g^2`` and ``p <- p - lr * g / (sqrt(s) + eps)``.

    Returns:
        New value arrays and new mean-square arrays, keyed like ``mean_square``

    Raises:
        TrainingDivergenceError: If any gradient is NaN or Inf; nothing is updated
    """
    for name in mean_square:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDivergenceError(f"Non-finite gradient for {name}")
    new_values, new_state = {}, {}
    for name, s in mean_square.items():
        g = grads[name]
        if g.shape != s.shape or values[name].shape != s.shape:
            raise DimensionMismatchError(f"{name}: gradient {g.shape}, value {values[name].shape}, state {s.shape}")
        s = rho * s + (1.0 - rho) * g * g
        new_values[name] = values[name] - lr * g / (np.sqrt(s) + epsilon)
        new_state[name] = s
    return new_values, new_state


def apply_rmsprop(
    params: ModelParams,
    table: EmbeddingTable,
    param_grads: Dict[str, np.ndarray],
    table_grad: np.ndarray,
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> Tuple[ModelParams, EmbeddingTable, OptimizerState]:
    """Update the partition's parameters; everything outside it is returned untouched."""
    rows = state.partition.embedding_rows
    values = {name: params[name] for name in state.partition.theta_names(params)}
    grads = {name: param_grads[name] for name in values}
    values[EMBEDDING_KEY] = table.E[rows]
    grads[EMBEDDING_KEY] = table_grad[rows]

    new_values, new_state = rmsprop_step(values, grads, state.mean_square, lr, cfg.rms_decay, cfg.rms_epsilon)

    E = table.E.copy()
    E[rows] = new_values.pop(EMBEDDING_KEY)
    new_params = params.replace(new_values) if new_values else params
    return new_params, table.with_rows(E), OptimizerState(state.partition, new_state, state.step + 1)
