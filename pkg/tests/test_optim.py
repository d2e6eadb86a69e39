"""Tests for RMSProp, the learning-rate schedule and parameter partitions."""

import numpy as np
import pytest

from src.config import TrainConfig, TrainingMode
from src.errors import DimensionMismatchError, InvalidConfigError, TrainingDivergenceError
from src.network import EmbeddingTable, ModelParams
from src.optim import (
    EMBEDDING_KEY,
    OptimizerState,
    ParameterPartition,
    apply_rmsprop,
    lr_schedule,
    rmsprop_step,
)
from tests.conftest import TINY_MODEL


@pytest.fixture
def params():
    return ModelParams.initialize(TINY_MODEL, np.random.default_rng(0))


@pytest.fixture
def extended_table():
    """Two frozen pre-trained rows and two new trainable rows."""
    table = EmbeddingTable.initialize(["a", "b"], TINY_MODEL.embedding_dim, np.random.default_rng(1))
    return table.extended(["c", "d"], np.random.default_rng(2))


def random_grads(params, table, seed=3):
    rng = np.random.default_rng(seed)
    return {name: rng.normal(size=array.shape) for name, array in params.items()}, rng.normal(size=table.E.shape)


def test_staircase_schedule():
    """Decay applies once per completed block of 3000 steps."""
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 3e-4
    assert lr_schedule(1500, cfg) == 3e-4
    assert lr_schedule(3000, cfg) == pytest.approx(2.85e-4)

    rates = [lr_schedule(step, cfg) for step in range(0, 30000, 500)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_zero_gradient_leaves_values_unchanged():
    """g = 0 keeps every parameter."""
    values = {"w": np.array([1.0, -2.0])}
    new, state = rmsprop_step(values, {"w": np.zeros(2)}, {"w": np.zeros(2)}, lr=0.1)

    np.testing.assert_array_equal(new["w"], values["w"])
    np.testing.assert_array_equal(state["w"], np.zeros(2))


def test_first_step_magnitude():
    """From a fresh state the step is lr / sqrt(1 - rho) for large gradients."""
    lr = 3e-4
    new, state = rmsprop_step({"w": np.array([0.0])}, {"w": np.array([2.0])}, {"w": np.array([0.0])}, lr)

    assert state["w"][0] == pytest.approx(0.1 * 4.0)
    assert -new["w"][0] == pytest.approx(lr / np.sqrt(0.1), rel=1e-6)


def test_non_finite_gradient_aborts_step():
    """NaN gradients raise and nothing is returned."""
    with pytest.raises(TrainingDivergenceError):
        rmsprop_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, {"w": np.zeros(1)}, lr=0.1)


def test_partitions_per_mode(params, extended_table):
    """Each regime trains its own parameter set."""
    conventional = ParameterPartition.for_mode(TrainingMode.FINETUNE_CONVENTIONAL, extended_table)
    robust = ParameterPartition.for_mode(TrainingMode.FINETUNE_ROBUST, extended_table)

    assert conventional.theta and conventional.embedding_rows.tolist() == [2, 3]
    assert not robust.theta and robust.embedding_rows.tolist() == [2, 3]
    assert robust.theta_names(params) == []

    with pytest.raises(InvalidConfigError):
        ParameterPartition.for_mode(TrainingMode.PRETRAIN, extended_table)
    fresh = EmbeddingTable.initialize(["a", "b"], 4, np.random.default_rng(0))
    assert ParameterPartition.for_mode(TrainingMode.PRETRAIN, fresh).embedding_rows.tolist() == [0, 1]
    with pytest.raises(InvalidConfigError):
        ParameterPartition.for_mode(TrainingMode.FINETUNE_ROBUST, fresh)


def test_robust_update_touches_new_rows_only(params, extended_table):
    """Frozen weights and rows keep their exact bytes across many steps."""
    partition = ParameterPartition.for_mode(TrainingMode.FINETUNE_ROBUST, extended_table)
    state = OptimizerState.zeros(partition, params, extended_table)
    new_params, table = params, extended_table
    for seed in range(10):
        param_grads, table_grad = random_grads(new_params, table, seed)
        new_params, table, state = apply_rmsprop(new_params, table, param_grads, table_grad, state, 1e-2, TrainConfig())

    for name in params.names():
        assert new_params[name].tobytes() == params[name].tobytes()
    assert table.E[:2].tobytes() == extended_table.E[:2].tobytes()
    assert not np.array_equal(table.E[2:], extended_table.E[2:])
    assert state.step == 10


def test_conventional_update_changes_theta(params, extended_table):
    """Conventional fine-tuning moves the network weights but not the old rows."""
    partition = ParameterPartition.for_mode(TrainingMode.FINETUNE_CONVENTIONAL, extended_table)
    state = OptimizerState.zeros(partition, params, extended_table)
    param_grads, table_grad = random_grads(params, extended_table)
    new_params, table, state = apply_rmsprop(params, extended_table, param_grads, table_grad, state, 1e-2, TrainConfig())

    assert any(new_params[name].tobytes() != params[name].tobytes() for name in params.names())
    assert table.E[:2].tobytes() == extended_table.E[:2].tobytes()
    assert set(state.mean_square) == set(params.names()) | {EMBEDDING_KEY}


def test_state_congruence_check(params, extended_table):
    """Mean-square arrays must mirror the trainable shapes."""
    partition = ParameterPartition.for_mode(TrainingMode.FINETUNE_ROBUST, extended_table)
    state = OptimizerState.zeros(partition, params, extended_table)
    state.check_congruent(params, extended_table)

    state.mean_square[EMBEDDING_KEY] = np.zeros((3, TINY_MODEL.embedding_dim))
    with pytest.raises(DimensionMismatchError):
        state.check_congruent(params, extended_table)
