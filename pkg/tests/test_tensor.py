import os
import sys

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import numpy as np
import pytest

from topodispatch import tensor as T
from topodispatch.errors import ShapeError, TapeError, TrainingFault
from topodispatch.tensor import (
    Parameter,
    ParameterStore,
    Tape,
    numerical_gradient,
    optimizer_step,
    relative_error,
)


def test_elementwise_values():
    x = T.constant([-1.0, 0.0, 2.0])
    assert T.relu(x).value.tolist() == [0.0, 0.0, 2.0]
    assert T.leaky_relu(x).value.tolist() == [-0.2, 0.0, 2.0]
    assert np.allclose(T.tanh(x).value, np.tanh([-1.0, 0.0, 2.0]))
    assert T.minimum(x, T.constant([0.0, 0.0, 0.0])).value.tolist() == [-1.0, 0.0, 0.0]


def test_relu_gradient_zero_at_zero():
    p = Parameter([0.0, 1.0], name="p")
    with Tape() as tape:
        loss = T.reduce_sum(T.relu(p))
    tape.backward(loss)
    assert p.grad.tolist() == [0.0, 1.0]


def test_masked_softmax_uniform_over_admissible():
    scores = T.constant([[1.0, 1.0, 1.0, 5.0]])
    y = T.masked_softmax(scores, np.array([[True, True, True, False]]))
    assert np.allclose(y.value, [[1 / 3, 1 / 3, 1 / 3, 0.0]])
    with pytest.raises(ShapeError):
        T.masked_softmax(scores, np.zeros((1, 4), dtype=bool))


def test_segment_softmax_sums_to_one_per_segment():
    y = T.segment_softmax(T.constant([0.0, 1.0, 2.0, 3.0]), np.array([0, 0, 1, 1]), 2)
    assert y.value[:2].sum() == pytest.approx(1.0)
    assert y.value[2:].sum() == pytest.approx(1.0)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    w1 = Parameter(rng.normal(size=(3, 4)), name="w1")
    b1 = Parameter(rng.normal(size=(4,)), name="b1")
    w2 = Parameter(rng.normal(size=(4, 1)), name="w2")
    x = T.constant(rng.normal(size=(5, 3)))

    def forward():
        h = T.tanh(T.add(T.matmul(x, w1), b1))
        return T.mean(T.square(T.matmul(h, w2)))

    with Tape() as tape:
        loss = forward()
    tape.backward(loss)
    numeric = numerical_gradient(lambda: forward().item(), [w1, b1, w2])
    for p in (w1, b1, w2):
        assert np.allclose(p.grad, numeric[p.name], rtol=1e-5, atol=1e-8)
    assert relative_error(w1.grad, numeric["w1"]) < 1e-3


def test_mean_pool_gradient_is_uniform():
    h = Parameter(np.ones((4, 2)), name="h")
    with Tape() as tape:
        loss = T.reduce_sum(T.row_mean(h))
    tape.backward(loss)
    assert np.allclose(h.grad, 0.25)


def test_gather_scatter_gradients():
    a = Parameter(np.arange(6.0).reshape(3, 2), name="a")
    with Tape() as tape:
        picked = T.gather_rows(a, [0, 0, 2])
        loss = T.reduce_sum(T.scatter_rows(picked, [1, 1, 0], 2))
    tape.backward(loss)
    assert a.grad.tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]


def test_backward_restricted_to_wrt():
    a = Parameter([1.0], name="a")
    b = Parameter([2.0], name="b")
    with Tape() as tape:
        loss = T.reduce_sum(T.mul(a, b))
    tape.backward(loss, wrt=[a])
    assert a.grad.tolist() == [2.0]
    assert b.grad.tolist() == [0.0]


def test_nothing_recorded_outside_tape():
    p = Parameter([1.0], name="p")
    with Tape() as tape:
        pass
    T.square(p)
    assert len(tape) == 0


def test_tape_errors():
    p = Parameter([1.0, 2.0], name="p")
    with Tape() as tape:
        vec = T.square(p)
    with pytest.raises(TapeError):
        tape.backward(vec)

    with Tape() as tape:
        loss = T.reduce_sum(T.square(p))
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.add(T.constant(np.ones(2)), T.constant(np.ones(3)))
    with pytest.raises(ShapeError):
        T.reshape(T.constant(np.ones(4)), (3,))


def test_adam_first_step_moves_by_lr():
    store = ParameterStore()
    p = store.create("p", [1.0, -1.0])
    p.grad = np.array([0.5, -3.0])
    optimizer_step(store, 0.01)
    assert np.allclose(p.value, [0.99, -0.99], atol=1e-6)
    assert store.step_count == 1
    assert np.all(p.grad == 0.0)


def test_adam_rejects_nan_gradient():
    store = ParameterStore()
    p = store.create("p", [1.0])
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingFault):
        optimizer_step(store, 0.01)
    assert p.value.tolist() == [1.0]


def test_parameter_store_bookkeeping():
    store = ParameterStore()
    store.create("w", np.zeros((2, 3)))
    with pytest.raises(ValueError):
        store.create("w", np.zeros(1))
    assert store.count() == 6
    with pytest.raises(ShapeError):
        store.load_values({"w": np.zeros((3, 2))})
    store.load_values({"w": np.ones((2, 3))})
    assert store["w"].value.sum() == 6.0
