"""Tests for embeddings, the BLSTM-FC forward pass and its gradients."""

import numpy as np
import pytest

from src.config import ModelConfig
from src.dsp import CompressedMagnitude
from src.errors import DimensionMismatchError, InvalidInputError, InvalidStateError
from src.network import (
    EmbeddingTable,
    Gradients,
    ModelParams,
    apply_mask,
    backward,
    batch_loss,
    clip_by_global_norm,
    expected_shapes,
    forward,
    forward_batch,
    loss,
    superpose,
)

GRAD_CONFIG = ModelConfig(num_freq_bins=8, embedding_dim=4, num_blstm_layers=1, num_fc_layers=1, hidden_units=6)


@pytest.fixture
def grad_problem():
    """Tiny model, one example of 5 frames, random features and targets."""
    rng = np.random.default_rng(0)
    params = ModelParams.initialize(GRAD_CONFIG, rng)
    features = rng.uniform(0.0, 1.0, size=(1, 8, 5))
    targets = rng.uniform(0.0, 1.0, size=(1, 8, 5))
    embeddings = rng.normal(0.0, 0.5, size=(1, 4))
    return params, features, targets, embeddings


def total_loss(params, features, targets, embeddings):
    masks, _ = forward_batch(features, embeddings, params, "concat")
    return batch_loss(masks, features, targets)


def close_enough(analytic, numeric):
    return abs(analytic - numeric) <= max(1e-4 * max(abs(analytic), abs(numeric)), 1e-6)


def test_gradients_match_central_differences(grad_problem):
    """200 sampled parameters agree with central differences."""
    params, features, targets, embeddings = grad_problem
    _, cache = forward_batch(features, embeddings, params, "concat")
    grads = backward(cache, targets, params)

    rng = np.random.default_rng(1)
    names = params.names()
    sizes = np.array([params[name].size for name in names])
    h = 1e-5
    for _ in range(200):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = int(rng.integers(0, params[name].size))
        plus, minus = params[name].copy().ravel(), params[name].copy().ravel()
        plus[flat] += h
        minus[flat] -= h
        shape = params[name].shape
        numeric = (
            total_loss(params.replace({name: plus.reshape(shape)}), features, targets, embeddings)
            - total_loss(params.replace({name: minus.reshape(shape)}), features, targets, embeddings)
        ) / (2 * h)
        analytic = grads.params[name].ravel()[flat]
        assert close_enough(analytic, numeric), f"{name}[{flat}]: analytic {analytic}, numeric {numeric}"


def test_embedding_gradients_match_central_differences(grad_problem):
    """Gradients w.r.t. the speaker-set embedding are exact too."""
    params, features, targets, embeddings = grad_problem
    _, cache = forward_batch(features, embeddings, params, "concat")
    grads = backward(cache, targets, params)

    h = 1e-5
    for k in range(embeddings.shape[1]):
        plus, minus = embeddings.copy(), embeddings.copy()
        plus[0, k] += h
        minus[0, k] -= h
        numeric = (total_loss(params, features, targets, plus) - total_loss(params, features, targets, minus)) / (2 * h)
        assert close_enough(grads.embeddings[0, k], numeric)


def test_additive_bias_matches_concatenation():
    """Both gating paths give the same gate pre-activations and masks."""
    rng = np.random.default_rng(2)
    for _ in range(20):
        config = ModelConfig(
            num_freq_bins=int(rng.integers(2, 12)),
            embedding_dim=int(rng.integers(1, 8)),
            num_blstm_layers=int(rng.integers(1, 3)),
            num_fc_layers=int(rng.integers(1, 3)),
            hidden_units=int(rng.integers(1, 8)),
        )
        params = ModelParams.initialize(config, rng)
        batch, frames = int(rng.integers(1, 4)), int(rng.integers(1, 7))
        features = rng.uniform(0, 2, size=(batch, config.num_freq_bins, frames))
        embeddings = rng.normal(size=(batch, config.embedding_dim))

        concat_masks, concat = forward_batch(features, embeddings, params, "concat")
        bias_masks, bias = forward_batch(features, embeddings, params, "bias")

        for layer_concat, layer_bias in zip(concat.layers, bias.layers):
            for direction in ("fwd", "bwd"):
                np.testing.assert_allclose(
                    layer_bias.directions[direction].preact,
                    layer_concat.directions[direction].preact,
                    rtol=0,
                    atol=1e-12,
                )
        np.testing.assert_allclose(bias_masks, concat_masks, rtol=0, atol=1e-12)


def test_bias_path_gradients_equal_concat_path(grad_problem):
    """backward gives the same gradients for either gating path."""
    params, features, targets, embeddings = grad_problem
    _, concat = forward_batch(features, embeddings, params, "concat")
    _, bias = forward_batch(features, embeddings, params, "bias")
    a, b = backward(concat, targets, params), backward(bias, targets, params)

    for name in params.names():
        np.testing.assert_allclose(b.params[name], a.params[name], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(b.embeddings, a.embeddings, rtol=1e-10, atol=1e-12)


def test_stale_cache_rejected(grad_problem):
    """A cache from another parameter snapshot cannot be used."""
    params, features, targets, embeddings = grad_problem
    _, cache = forward_batch(features, embeddings, params)
    updated = params.replace({"fc0.b": params["fc0.b"] + 0.1})

    with pytest.raises(InvalidStateError):
        backward(cache, targets, updated)
    with pytest.raises(InvalidStateError):
        backward(None, targets, params)


def test_mask_is_a_gain_in_unit_interval(grad_problem):
    """forward returns an F x T mask in (0, 1) and apply_mask multiplies elementwise."""
    params, features, targets, embeddings = grad_problem
    compressed = CompressedMagnitude(features[0])
    mask, _ = forward(compressed, embeddings[0], params)
    estimate = apply_mask(mask, compressed)

    assert mask.shape == (8, 5)
    assert np.all((mask.values > 0) & (mask.values < 1))
    np.testing.assert_array_equal(estimate.values, mask.values * features[0])
    assert loss(CompressedMagnitude(targets[0]), estimate) == pytest.approx(
        float(np.sum((targets[0] - estimate.values) ** 2))
    )


def test_forward_rejects_wrong_dimensions(grad_problem):
    """Feature and embedding sizes must match the architecture."""
    params, features, _, embeddings = grad_problem
    with pytest.raises(DimensionMismatchError):
        forward_batch(features[:, :6], embeddings, params)
    with pytest.raises(DimensionMismatchError):
        forward_batch(features, embeddings[:, :3], params)


def test_expected_shapes_first_layer_takes_embedding():
    """Layer-1 input weights span F + K columns."""
    shapes = expected_shapes(GRAD_CONFIG)
    assert shapes["blstm0.fwd.W_ih"] == (24, 12)
    assert shapes["fc0.W"] == (8, 12)
    assert sum(int(np.prod(s)) for s in shapes.values()) == ModelParams.zeros(GRAD_CONFIG).num_parameters()


def test_superpose_sums_selected_rows():
    """The speaker-set embedding is the sum of the selected rows."""
    table = EmbeddingTable(np.arange(12.0).reshape(4, 3), ["a", "b", "c", "d"])
    np.testing.assert_array_equal(superpose(table, np.array([0, 1, 0, 1])), [12.0, 14.0, 16.0])

    with pytest.raises(InvalidInputError):
        superpose(table, np.zeros(4))
    with pytest.raises(DimensionMismatchError):
        superpose(table, np.ones(3))


def test_indicator_for_rejects_duplicates_and_unknown_ids():
    """Speaker sets are sets of known ids."""
    table = EmbeddingTable(np.zeros((3, 2)), ["a", "b", "c"])
    assert table.indicator_for(["c", "a"]).tolist() == [1, 0, 1]

    with pytest.raises(InvalidInputError):
        table.indicator_for(["a", "a"])
    with pytest.raises(InvalidInputError, match="known speakers: a, b, c"):
        table.indicator_for(["z"])


def test_extended_table_marks_only_new_rows_trainable():
    """Appended rows are trainable, pre-trained rows are frozen and unchanged."""
    table = EmbeddingTable.initialize(["a", "b"], 3, np.random.default_rng(0))
    extended = table.extended(["c"], np.random.default_rng(1))

    assert extended.speaker_ids == ["a", "b", "c"]
    assert extended.trainable.tolist() == [False, False, True]
    np.testing.assert_array_equal(extended.E[:2], table.E)
    with pytest.raises(InvalidInputError):
        extended.extended(["a"], np.random.default_rng(2))


def test_embedding_table_gradient_routes_to_selected_rows():
    """B^T dEmb sends each example's gradient to its speakers' rows."""
    grads = Gradients(params={}, embeddings=np.array([[1.0, 2.0], [10.0, 20.0]]))
    indicators = np.array([[1, 1, 0], [0, 1, 0]], dtype=np.uint8)

    np.testing.assert_array_equal(grads.embedding_table(indicators), [[1, 2], [11, 22], [0, 0]])


def test_clip_by_global_norm():
    """Gradients are scaled to the max norm only when they exceed it."""
    grads = Gradients(params={"w": np.array([3.0])}, embeddings=np.array([[4.0]]))

    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert clipped.global_norm() == pytest.approx(1.0)
    unchanged, _ = clip_by_global_norm(grads, None)
    assert unchanged is grads


def test_zero_parameters_give_half_mask():
    """With every weight and bias at zero the sigmoid output is exactly 0.5."""
    params = ModelParams.zeros(GRAD_CONFIG)
    features = CompressedMagnitude(np.random.default_rng(2).uniform(0.0, 1.0, size=(8, 9)))
    mask, _ = forward(features, np.ones(4), params)

    np.testing.assert_array_equal(mask.values, np.full((8, 9), 0.5))


@pytest.mark.parametrize("num_frames", [1, 7, 311])
def test_forward_keeps_frame_count(grad_problem, num_frames):
    """The mask has one column per input frame, including a single frame."""
    params, _, _, embeddings = grad_problem
    features = CompressedMagnitude(np.random.default_rng(3).uniform(0.0, 1.0, size=(8, num_frames)))
    mask, _ = forward(features, embeddings[0], params)

    assert mask.shape == (8, num_frames)
    assert np.all((mask.values > 0) & (mask.values < 1))


def test_speaker_set_result_ignores_row_order(grad_problem):
    """Permuting the table rows and ids leaves the embedding and the mask unchanged."""
    params, features, _, _ = grad_problem
    ids = ["a", "b", "c", "d", "e"]
    table = EmbeddingTable.initialize(ids, 4, np.random.default_rng(4))
    order = [3, 0, 4, 2, 1]
    permuted = EmbeddingTable(table.E[order], [ids[k] for k in order])
    chosen = ["e", "b", "c"]

    embedding = superpose(table, table.indicator_for(chosen))
    permuted_embedding = superpose(permuted, permuted.indicator_for(chosen))
    np.testing.assert_allclose(permuted_embedding, embedding, rtol=1e-12, atol=1e-15)

    compressed = CompressedMagnitude(features[0])
    mask, _ = forward(compressed, embedding, params)
    permuted_mask, _ = forward(compressed, permuted_embedding, params)
    np.testing.assert_allclose(permuted_mask.values, mask.values, rtol=0, atol=1e-12)


@pytest.mark.parametrize("bias", [1000.0, -1000.0])
def test_saturated_output_stays_strictly_inside_unit_interval(bias):
    """A huge output bias saturates the sigmoid but the mask never reaches 0 or 1."""
    params = ModelParams.zeros(GRAD_CONFIG).replace({"fc0.b": np.full(8, bias)})
    features = CompressedMagnitude(np.ones((8, 4)))
    mask, _ = forward(features, np.zeros(4), params)

    assert np.all(mask.values > 0.0)
    assert np.all(mask.values < 1.0)
