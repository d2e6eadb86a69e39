"""Attentional gating network: speaker embeddings, BLSTM-FC mask estimator,
loss and reverse-mode gradients.

The network is a stack of bidirectional LSTM layers followed by fully
connected layers (ReLU on hidden layers, linear last layer) and an elementwise
sigmoid producing the mask. The speaker-set embedding enters the first LSTM
layer only, either appended to every input frame (``gating="concat"``) or as
the equivalent additive bias ``W_eh @ emb`` where ``W_eh`` is the trailing
``K`` columns of the first layer's input weights (``gating="bias"``).

Arrays inside the network are laid out batch x time x feature; the public
single-example API takes and returns F x T grids.
"""

import itertools
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from src.config import ModelConfig
from src.dsp import CompressedMagnitude
from src.errors import DimensionMismatchError, InvalidInputError, InvalidStateError

logger = logging.getLogger(__name__)

Gating = Literal["concat", "bias"]
DIRECTIONS = ("fwd", "bwd")
EMBEDDING_INIT_STD = 0.1
# expit saturates to exactly 0 or 1 in float64; masks stay strictly inside
MASK_EPS = 1e-12

_tokens = itertools.count(1)


# --------------------------------------------------------------------------- #
# Embeddings
# --------------------------------------------------------------------------- #
@dataclass(eq=False)
class EmbeddingTable:
    """Per-speaker embeddings E (N x K).

    Attributes:
        E: Embedding rows, one per speaker
        speaker_ids: External speaker id of each row
        trainable: Per-row flag marking rows the current regime may update
    """

    E: np.ndarray
    speaker_ids: List[str]
    trainable: np.ndarray = None

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=np.float64)
        if self.E.ndim != 2:
            raise InvalidInputError(f"Embedding table must be N x K, got shape {self.E.shape}")
        if len(self.speaker_ids) != self.E.shape[0]:
            raise DimensionMismatchError(
                f"{len(self.speaker_ids)} speaker ids for {self.E.shape[0]} embedding rows"
            )
        if len(set(self.speaker_ids)) != len(self.speaker_ids):
            raise InvalidInputError("Embedding speaker ids must be unique")
        if not np.all(np.isfinite(self.E)):
            raise InvalidInputError("Embedding table contains NaN or Inf")
        if self.trainable is None:
            self.trainable = np.ones(self.E.shape[0], dtype=bool)
        self.trainable = np.asarray(self.trainable, dtype=bool)
        self.speaker_ids = [str(s) for s in self.speaker_ids]

    @classmethod
    def initialize(cls, speaker_ids: Sequence[str], dim: int, rng: np.random.Generator) -> "EmbeddingTable":
        """Rows drawn i.i.d. from N(0, 0.1^2)."""
        E = rng.normal(0.0, EMBEDDING_INIT_STD, size=(len(speaker_ids), dim))
        return cls(E, list(speaker_ids))

    @property
    def num_speakers(self) -> int:
        return self.E.shape[0]

    @property
    def dim(self) -> int:
        return self.E.shape[1]

    def row_of(self, speaker_id: str) -> int:
        """Row index of an external speaker id."""
        try:
            return self.speaker_ids.index(str(speaker_id))
        except ValueError:
            raise InvalidInputError(
                f"Unknown speaker {speaker_id!r}; known speakers: {', '.join(self.speaker_ids)}"
            ) from None

    def indicator_for(self, speaker_ids: Sequence[str]) -> np.ndarray:
        """G-hot vector over table rows for a set of external speaker ids.

        Raises:
            InvalidInputError: On duplicate or unknown ids
        """
        ids = [str(s) for s in speaker_ids]
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"Duplicate speaker ids in {ids}")
        indicator = np.zeros(self.num_speakers, dtype=np.uint8)
        indicator[[self.row_of(s) for s in ids]] = 1
        return indicator

    def extended(self, new_speaker_ids: Sequence[str], rng: np.random.Generator) -> "EmbeddingTable":
        """Copy with randomly initialised rows appended; only the new rows are trainable."""
        clash = sorted(set(map(str, new_speaker_ids)) & set(self.speaker_ids))
        if clash:
            raise InvalidInputError(f"Speakers already present in the embedding table: {clash}")
        new_rows = rng.normal(0.0, EMBEDDING_INIT_STD, size=(len(new_speaker_ids), self.dim))
        return EmbeddingTable(
            np.vstack([self.E, new_rows]),
            self.speaker_ids + [str(s) for s in new_speaker_ids],
            np.concatenate([np.zeros(self.num_speakers, dtype=bool), np.ones(len(new_speaker_ids), dtype=bool)]),
        )

    def with_rows(self, E: np.ndarray) -> "EmbeddingTable":
        return EmbeddingTable(E, list(self.speaker_ids), self.trainable.copy())


def superpose(table: EmbeddingTable, indicator: np.ndarray) -> np.ndarray:
    """Speaker-set embedding ``E^T B``, the sum of the selected rows.

    Raises:
        InvalidInputError: If ``indicator`` selects no speaker
        DimensionMismatchError: If its length differs from the table's row count
    """
    indicator = np.asarray(indicator)
    if indicator.shape != (table.num_speakers,):
        raise DimensionMismatchError(
            f"Indicator of shape {indicator.shape} for a table of {table.num_speakers} speakers"
        )
    if not np.any(indicator):
        raise InvalidInputError("Indicator selects no target speaker")
    return table.E[np.flatnonzero(indicator)].sum(axis=0)


def superpose_batch(table: EmbeddingTable, indicators: np.ndarray) -> np.ndarray:
    """Row-wise ``superpose`` for a (B, N) stack of indicators."""
    return np.stack([superpose(table, indicator) for indicator in np.asarray(indicators)])


# --------------------------------------------------------------------------- #
# Parameters
# --------------------------------------------------------------------------- #
def lstm_name(layer: int, direction: str, kind: str) -> str:
    return f"blstm{layer}.{direction}.{kind}"


def fc_name(layer: int, kind: str) -> str:
    return f"fc{layer}.{kind}"


def expected_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Name -> shape of every network parameter, in the fixed serialisation order."""
    F, K, H = config.num_freq_bins, config.embedding_dim, config.hidden_units
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for layer in range(config.num_blstm_layers):
        width = F + K if layer == 0 else 2 * H
        for direction in DIRECTIONS:
            shapes[lstm_name(layer, direction, "W_ih")] = (4 * H, width)
            shapes[lstm_name(layer, direction, "W_hh")] = (4 * H, H)
            shapes[lstm_name(layer, direction, "b")] = (4 * H,)
    for layer in range(config.num_fc_layers):
        width = 2 * H if layer == 0 else H
        out = F if layer == config.num_fc_layers - 1 else H
        shapes[fc_name(layer, "W")] = (out, width)
        shapes[fc_name(layer, "b")] = (out,)
    return shapes


class ModelParams:
    """Immutable snapshot of the network weights (theta).

    Every snapshot carries a unique token; forward caches remember the token
    of the snapshot that produced them.
    """

    def __init__(self, config: ModelConfig, arrays: Dict[str, np.ndarray]):
        shapes = expected_shapes(config)
        missing = set(shapes) - set(arrays)
        extra = set(arrays) - set(shapes)
        if missing or extra:
            raise DimensionMismatchError(
                f"Parameter names disagree with the architecture (missing={sorted(missing)}, extra={sorted(extra)})"
            )
        self.config = config
        self._arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shape in shapes.items():
            array = np.array(arrays[name], dtype=np.float64)
            if array.shape != shape:
                raise DimensionMismatchError(f"{name} has shape {array.shape}, expected {shape}")
            if not np.all(np.isfinite(array)):
                raise InvalidInputError(f"{name} contains NaN or Inf")
            array.setflags(write=False)
            self._arrays[name] = array
        self.token = next(_tokens)

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1."""
        H = config.hidden_units
        arrays = {}
        for name, shape in expected_shapes(config).items():
            if name.endswith(".b"):
                bias = np.zeros(shape)
                if name.startswith("blstm"):
                    bias[H : 2 * H] = 1.0
                arrays[name] = bias
            else:
                bound = 1.0 / np.sqrt(shape[1])
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, arrays)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(config, {name: np.zeros(shape) for name, shape in expected_shapes(config).items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> List[str]:
        return list(self._arrays)

    def as_dict(self) -> Dict[str, np.ndarray]:
        """Writable copies of every array."""
        return {name: array.copy() for name, array in self._arrays.items()}

    def replace(self, updates: Dict[str, np.ndarray]) -> "ModelParams":
        """New snapshot with some arrays replaced."""
        arrays = dict(self._arrays)
        arrays.update(updates)
        return ModelParams(self.config, arrays)

    def num_parameters(self) -> int:
        return sum(a.size for a in self._arrays.values())


@dataclass(eq=False)
class AGNModel:
    """Network weights plus the speaker embedding table they were trained with."""

    config: ModelConfig
    params: ModelParams
    embeddings: EmbeddingTable

    def __post_init__(self):
        if self.embeddings.dim != self.config.embedding_dim:
            raise DimensionMismatchError(
                f"Embedding dim {self.embeddings.dim} differs from model K={self.config.embedding_dim}"
            )

    @classmethod
    def initialize(cls, config: ModelConfig, speaker_ids: Sequence[str]) -> "AGNModel":
        rng = np.random.default_rng(config.init_seed)
        params = ModelParams.initialize(config, rng)
        embeddings = EmbeddingTable.initialize(speaker_ids, config.embedding_dim, rng)
        return cls(config, params, embeddings)


# --------------------------------------------------------------------------- #
# Forward
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class Mask:
    """Sigmoid-valued F x T gain grid."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidInputError(f"Mask must be F x T, got shape {values.shape}")
        if not (np.all(np.isfinite(values)) and np.all(values > 0.0) and np.all(values < 1.0)):
            raise InvalidInputError("Mask entries must lie in (0, 1)")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class _DirectionCache:
    preact: np.ndarray
    gates: np.ndarray
    cells: np.ndarray
    tanh_cells: np.ndarray
    hidden: np.ndarray
    reverse: bool


@dataclass
class _LayerCache:
    inputs: np.ndarray
    directions: Dict[str, _DirectionCache] = field(default_factory=dict)


@dataclass
class ForwardCache:
    """Activations kept by ``forward_batch`` for ``backward``."""

    token: int
    gating: str
    features: np.ndarray
    embeddings: np.ndarray
    layers: List[_LayerCache]
    fc_inputs: List[np.ndarray]
    fc_preacts: List[np.ndarray]
    mask: np.ndarray


def _matmul_last(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w.T`` over the last axis of a batch x time x feature array."""
    b, t, d = x.shape
    return (x.reshape(b * t, d) @ w.T).reshape(b, t, w.shape[0])


def _lstm_scan(projected: np.ndarray, W_hh: np.ndarray, reverse: bool) -> _DirectionCache:
    """Run the LSTM recurrence over precomputed input projections (gate order i, f, g, o)."""
    if reverse:
        projected = projected[:, ::-1]
    batch, steps, gates_width = projected.shape
    H = gates_width // 4
    preact = np.empty_like(projected)
    gates = np.empty_like(projected)
    cells = np.empty((batch, steps, H))
    tanh_cells = np.empty((batch, steps, H))
    hidden = np.empty((batch, steps, H))
    h = np.zeros((batch, H))
    c = np.zeros((batch, H))
    W_hh_T = W_hh.T
    for t in range(steps):
        z = projected[:, t] + h @ W_hh_T
        preact[:, t] = z
        a = gates[:, t]
        a[:, : 2 * H] = expit(z[:, : 2 * H])
        a[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        a[:, 3 * H :] = expit(z[:, 3 * H :])
        c = a[:, H : 2 * H] * c + a[:, :H] * a[:, 2 * H : 3 * H]
        tc = np.tanh(c)
        h = a[:, 3 * H :] * tc
        cells[:, t] = c
        tanh_cells[:, t] = tc
        hidden[:, t] = h
    return _DirectionCache(preact, gates, cells, tanh_cells, hidden, reverse)


def _natural_order(array: np.ndarray, reverse: bool) -> np.ndarray:
    return array[:, ::-1] if reverse else array


def _check_inputs(features: np.ndarray, embeddings: np.ndarray, config: ModelConfig) -> None:
    if features.ndim != 3 or features.shape[1] != config.num_freq_bins:
        raise DimensionMismatchError(
            f"Features of shape {features.shape} do not match F={config.num_freq_bins}"
        )
    if features.shape[2] < 1:
        raise InvalidInputError("Need at least one frame")
    if embeddings.shape != (features.shape[0], config.embedding_dim):
        raise DimensionMismatchError(
            f"Embeddings of shape {embeddings.shape}, expected ({features.shape[0]}, {config.embedding_dim})"
        )


def forward_batch(
    features: np.ndarray,
    embeddings: np.ndarray,
    params: ModelParams,
    gating: Gating = "concat",
) -> Tuple[np.ndarray, ForwardCache]:
    """Masks for a batch of compressed mixtures.

    Args:
        features: Compressed mixture magnitudes, shape (B, F, T)
        embeddings: Speaker-set embeddings, shape (B, K)
        params: Network weights
        gating: How the embedding enters layer 1 ("concat" or "bias")

    Returns:
        Masks of shape (B, F, T) and the activation cache

    Raises:
        DimensionMismatchError: If shapes disagree with the architecture
    """
    config = params.config
    features = np.asarray(features, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    _check_inputs(features, embeddings, config)
    F, K = config.num_freq_bins, config.embedding_dim
    frames = np.ascontiguousarray(features.transpose(0, 2, 1))
    batch, steps, _ = frames.shape

    layer_input = np.concatenate([frames, np.broadcast_to(embeddings[:, None, :], (batch, steps, K))], axis=2)
    layers: List[_LayerCache] = []
    for layer in range(config.num_blstm_layers):
        cache = _LayerCache(inputs=layer_input)
        outputs = []
        for direction in DIRECTIONS:
            W_ih = params[lstm_name(layer, direction, "W_ih")]
            b = params[lstm_name(layer, direction, "b")]
            if layer == 0 and gating == "bias":
                gate_bias = b + embeddings @ W_ih[:, F:].T
                projected = _matmul_last(frames, W_ih[:, :F]) + gate_bias[:, None, :]
            elif gating in ("concat", "bias"):
                projected = _matmul_last(layer_input, W_ih) + b
            else:
                raise InvalidInputError(f"Unknown gating {gating!r}")
            scanned = _lstm_scan(projected, params[lstm_name(layer, direction, "W_hh")], direction == "bwd")
            cache.directions[direction] = scanned
            outputs.append(_natural_order(scanned.hidden, scanned.reverse))
        layers.append(cache)
        layer_input = np.concatenate(outputs, axis=2)

    fc_inputs, fc_preacts = [], []
    activation = layer_input
    for layer in range(config.num_fc_layers):
        fc_inputs.append(activation)
        preact = _matmul_last(activation, params[fc_name(layer, "W")]) + params[fc_name(layer, "b")]
        fc_preacts.append(preact)
        activation = preact if layer == config.num_fc_layers - 1 else np.maximum(preact, 0.0)

    mask = np.clip(expit(activation), MASK_EPS, 1.0 - MASK_EPS)
    cache = ForwardCache(
        token=params.token,
        gating=gating,
        features=frames,
        embeddings=embeddings,
        layers=layers,
        fc_inputs=fc_inputs,
        fc_preacts=fc_preacts,
        mask=mask,
    )
    return mask.transpose(0, 2, 1), cache


def forward(
    features: CompressedMagnitude,
    embedding: np.ndarray,
    params: ModelParams,
    gating: Gating = "concat",
) -> Tuple[Mask, ForwardCache]:
    """Mask for one compressed mixture and speaker-set embedding."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.ndim != 1:
        raise DimensionMismatchError(f"Embedding must be a K-vector, got shape {embedding.shape}")
    masks, cache = forward_batch(features.values[None], embedding[None], params, gating)
    return Mask(masks[0]), cache


def apply_mask(mask: Mask, features: CompressedMagnitude) -> CompressedMagnitude:
    """Elementwise ``M * X``."""
    if mask.shape != features.shape:
        raise DimensionMismatchError(f"Mask shape {mask.shape} does not match features {features.shape}")
    return CompressedMagnitude(mask.values * features.values, features.p)


def loss(target: CompressedMagnitude, estimate: CompressedMagnitude) -> float:
    """Squared Frobenius norm of ``target - estimate``."""
    if target.shape != estimate.shape:
        raise DimensionMismatchError(f"Target shape {target.shape} does not match estimate {estimate.shape}")
    diff = target.values - estimate.values
    return float(np.sum(diff * diff))


def batch_loss(mask: np.ndarray, features: np.ndarray, targets: np.ndarray) -> float:
    """Summed loss over a batch of (B, F, T) masks, mixtures and targets."""
    diff = targets - mask * features
    return float(np.sum(diff * diff))


# --------------------------------------------------------------------------- #
# Backward
# --------------------------------------------------------------------------- #
@dataclass
class Gradients:
    """Loss gradients for one forward pass.

    Attributes:
        params: Gradient for every network parameter, keyed like ModelParams
        embeddings: Gradient w.r.t. each example's speaker-set embedding, (B, K)
    """

    params: Dict[str, np.ndarray]
    embeddings: np.ndarray

    def embedding_table(self, indicators: np.ndarray) -> np.ndarray:
        """Route per-example embedding gradients to table rows: ``B^T dEmb``."""
        return np.asarray(indicators, dtype=np.float64).T @ self.embeddings

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.params.values()) + np.sum(self.embeddings**2)))


def _lstm_scan_backward(cache: _DirectionCache, d_hidden: np.ndarray, W_hh: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Backpropagation through time for one direction, in processing order."""
    batch, steps, H = cache.hidden.shape
    d_preact = np.empty_like(cache.preact)
    dh_next = np.zeros((batch, H))
    dc_next = np.zeros((batch, H))
    zeros = np.zeros((batch, H))
    for t in reversed(range(steps)):
        a = cache.gates[:, t]
        i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        tc = cache.tanh_cells[:, t]
        c_prev = cache.cells[:, t - 1] if t > 0 else zeros
        dh = d_hidden[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = d_preact[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ W_hh
    G = 4 * H
    dW_hh = d_preact[:, 1:].reshape(-1, G).T @ cache.hidden[:, :-1].reshape(-1, H)
    return d_preact, dW_hh


def backward(
    cache: Optional[ForwardCache],
    targets: np.ndarray,
    params: ModelParams,
) -> Gradients:
    """Exact gradients of the summed loss w.r.t. every parameter and embedding.

    Args:
        cache: Cache returned by ``forward_batch``/``forward`` with ``params``
        targets: Compressed target magnitudes, (B, F, T) or a CompressedMagnitude
        params: The snapshot that produced ``cache``

    Raises:
        InvalidStateError: If the cache is missing or came from another snapshot
        DimensionMismatchError: If targets disagree with the cached batch
    """
    if cache is None:
        raise InvalidStateError("backward called without a forward cache")
    if cache.token != params.token:
        raise InvalidStateError("Forward cache is stale: it was produced by a different parameter snapshot")
    if isinstance(targets, CompressedMagnitude):
        targets = targets.values[None]
    targets = np.asarray(targets, dtype=np.float64).transpose(0, 2, 1)
    if targets.shape != cache.features.shape:
        raise DimensionMismatchError(
            f"Targets of shape {targets.shape[::-1]} do not match cached features"
        )
    config = params.config
    F, H = config.num_freq_bins, config.hidden_units
    grads: Dict[str, np.ndarray] = {}

    mask, frames = cache.mask, cache.features
    d_estimate = 2.0 * (mask * frames - targets)
    d_out = d_estimate * frames * mask * (1.0 - mask)

    last = config.num_fc_layers - 1
    for layer in reversed(range(config.num_fc_layers)):
        if layer != last:
            d_out = d_out * (cache.fc_preacts[layer] > 0.0)
        inputs = cache.fc_inputs[layer]
        W = params[fc_name(layer, "W")]
        grads[fc_name(layer, "W")] = d_out.reshape(-1, W.shape[0]).T @ inputs.reshape(-1, W.shape[1])
        grads[fc_name(layer, "b")] = d_out.sum(axis=(0, 1))
        d_out = _matmul_last(d_out, W.T)

    for layer in reversed(range(config.num_blstm_layers)):
        layer_cache = cache.layers[layer]
        d_inputs = np.zeros_like(layer_cache.inputs)
        for k, direction in enumerate(DIRECTIONS):
            scanned = layer_cache.directions[direction]
            d_hidden = _natural_order(d_out[:, :, k * H : (k + 1) * H], scanned.reverse)
            W_hh = params[lstm_name(layer, direction, "W_hh")]
            W_ih = params[lstm_name(layer, direction, "W_ih")]
            d_preact, dW_hh = _lstm_scan_backward(scanned, d_hidden, W_hh)
            d_preact = _natural_order(d_preact, scanned.reverse)
            grads[lstm_name(layer, direction, "W_ih")] = (
                d_preact.reshape(-1, 4 * H).T @ layer_cache.inputs.reshape(-1, W_ih.shape[1])
            )
            grads[lstm_name(layer, direction, "W_hh")] = dW_hh
            grads[lstm_name(layer, direction, "b")] = d_preact.sum(axis=(0, 1))
            d_inputs += _matmul_last(d_preact, W_ih.T)
        d_out = d_inputs

    d_embeddings = d_out[:, :, F:].sum(axis=1)
    ordered = {name: grads[name] for name in params.names()}
    return Gradients(params=ordered, embeddings=d_embeddings)


def clip_by_global_norm(grads: Gradients, max_norm: Optional[float]) -> Tuple[Gradients, float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = grads.global_norm()
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return (
        Gradients({k: g * scale for k, g in grads.params.items()}, grads.embeddings * scale),
        norm,
    )
