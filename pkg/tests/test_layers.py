import numpy as np
import pytest

from mclkit import tensor
from mclkit.errors import ShapeMismatchError, StateError
from mclkit.layers import (
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    LayerStack,
    MaxPool2,
    ModeProjection,
    ReLU,
    Upsample2,
)
from mclkit.losses import grad_check


def test_empty_stack_is_identity():
    stack = LayerStack([], (3, 3, 1))
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 1))
    assert np.array_equal(stack.forward(x), x)


def test_relu_definition():
    stack = LayerStack([ReLU()], (2,))
    out = stack.forward(np.array([[-1.0, 2.0]]))
    assert np.array_equal(out, [[0.0, 2.0]])


def test_relu_zero_gradient_at_negative_input():
    stack = LayerStack([ReLU()], (3,))
    x = np.array([[-1.0, 0.5, -2.0]])
    stack.forward(x, training=True)
    gin = stack.backward(np.ones((1, 3)))
    assert np.array_equal(gin, [[0.0, 1.0, 0.0]])


def test_mode_projection_identity_factors():
    proj = ModeProjection((3, 4, 2), (3, 4, 2),
                          factors=[np.eye(3), np.eye(4), np.eye(2)],
                          dtype=np.float64)
    stack = LayerStack([proj], (3, 4, 2))
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 2))
    assert np.array_equal(stack.forward(x), x)


def test_mode_projection_matches_tensor_op_bitwise():
    rng = np.random.default_rng(2)
    proj = ModeProjection((4, 5, 2), (2, 3, 1), rng=rng, dtype=np.float64)
    stack = LayerStack([proj], (4, 5, 2))
    x = rng.normal(size=(5, 4, 5, 2))
    out = stack.forward(x)
    for i in range(len(x)):
        direct = tensor.multi_mode_product(x[i], proj.factors)
        assert np.array_equal(out[i], direct)


def test_linear_stack_input_gradient_is_transpose():
    rng = np.random.default_rng(3)
    dense = Dense(5, 3, rng, dtype=np.float64)
    stack = LayerStack([dense], (5,))
    x = rng.normal(size=(2, 5))
    stack.forward(x, training=True)
    g = rng.normal(size=(2, 3))
    gin = stack.backward(g)
    assert np.array_equal(gin, g @ dense.w.value)


def test_backward_without_forward_raises():
    stack = LayerStack([ReLU()], (2,))
    with pytest.raises(StateError):
        stack.backward(np.ones((1, 2)))


def test_forward_shape_error_names_layer():
    rng = np.random.default_rng(4)
    stack = LayerStack([Dense(4, 2, rng)], (4,), name="head")
    with pytest.raises(ShapeMismatchError, match="head"):
        stack.forward(np.zeros((1, 5)))


def test_forward_rerun_is_idempotent():
    rng = np.random.default_rng(5)
    stack = LayerStack(
        [Conv2d(1, 3, rng=rng, dtype=np.float64), ReLU(), MaxPool2()], (8, 8, 1)
    )
    x = rng.normal(size=(2, 8, 8, 1))
    first = stack.forward(x, training=True)
    stack.backward(np.ones_like(first))
    second = stack.forward(x, training=True)
    stack.backward(np.ones_like(second))
    assert np.array_equal(first, second)


def test_maxpool_odd_dims_drop_edge():
    stack = LayerStack([MaxPool2()], (5, 5, 1))
    x = np.arange(25.0).reshape(1, 5, 5, 1)
    out = stack.forward(x, training=True)
    assert out.shape == (1, 2, 2, 1)
    gin = stack.backward(np.ones_like(out))
    assert gin.shape == x.shape
    assert np.all(gin[:, 4, :, :] == 0) and np.all(gin[:, :, 4, :] == 0)


def test_upsample_then_pool_identity_shape():
    stack = LayerStack([Upsample2(), MaxPool2()], (3, 3, 2))
    x = np.random.default_rng(6).normal(size=(2, 3, 3, 2))
    assert np.array_equal(stack.forward(x), x)  # nearest blocks are constant


def _fd_cases(rng):
    dt = np.float64
    return [
        ("dense", LayerStack([Dense(6, 4, rng, dtype=dt)], (6,)),
         (2, 6), ("l1", (2, 4)), 1e-6),
        ("conv2d", LayerStack([Conv2d(2, 3, rng=rng, dtype=dt)], (6, 6, 2)),
         (2, 6, 6, 2), ("l1", (2, 6, 6, 3)), 1e-4),
        ("relu", LayerStack([Dense(5, 5, rng, dtype=dt), ReLU()], (5,)),
         (2, 5), ("l1", (2, 5)), 1e-4),
        ("maxpool2", LayerStack([MaxPool2()], (6, 6, 2)),
         (2, 6, 6, 2), ("l1", (2, 3, 3, 2)), 1e-4),
        ("upsample2", LayerStack([Upsample2()], (3, 4, 2)),
         (2, 3, 4, 2), ("l1", (2, 6, 8, 2)), 1e-6),
        ("mode_projection", LayerStack(
            [ModeProjection((4, 5, 2), (2, 3, 1), rng=rng, dtype=dt)], (4, 5, 2)),
         (2, 4, 5, 2), ("l1", (2, 2, 3, 1)), 1e-6),
        ("global_avg_pool", LayerStack([GlobalAvgPool()], (4, 4, 3)),
         (2, 4, 4, 3), ("l1", (2, 3)), 1e-6),
        ("flatten", LayerStack([Flatten(), Dense(12, 3, rng, dtype=dt)], (3, 4, 1)),
         (2, 3, 4, 1), ("cross_entropy", None), 1e-6),
    ]


@pytest.mark.parametrize("seed", range(3))
def test_every_layer_kind_passes_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    for name, stack, x_shape, (loss_kind, t_shape), tol in _fd_cases(rng):
        x = rng.normal(size=x_shape)
        if loss_kind == "cross_entropy":
            target = rng.integers(0, stack.out_shape[0], size=x_shape[0])
        else:
            target = rng.normal(size=t_shape)
        err = grad_check(stack, loss_kind, x, target)
        assert err < tol, f"{name}: finite-difference error {err}"


def test_conv_stack_cross_entropy_finite_differences():
    rng = np.random.default_rng(7)
    stack = LayerStack(
        [Conv2d(2, 3, rng=rng, dtype=np.float64), ReLU(), MaxPool2(),
         GlobalAvgPool(), Dense(3, 4, rng, dtype=np.float64)],
        (8, 8, 2),
    )
    x = rng.normal(size=(2, 8, 8, 2))
    assert grad_check(stack, "cross_entropy", x, np.array([0, 3])) < 1e-4


def test_param_names_are_stable_and_prefixed():
    rng = np.random.default_rng(8)
    stack = LayerStack([Conv2d(1, 2, rng=rng), ReLU(), GlobalAvgPool(),
                        Dense(2, 3, rng)], (2, 2, 1), name="head")
    assert [p.name for p in stack.params] == [
        "head.0.w", "head.0.b", "head.3.w", "head.3.b",
    ]


def test_load_param_values_roundtrip_and_mismatch():
    rng = np.random.default_rng(9)
    stack = LayerStack([Dense(3, 2, rng)], (3,), name="s")
    values = stack.param_values()
    values["s.0.w"] = values["s.0.w"] + 1
    stack.load_param_values(values)
    assert np.array_equal(stack.params[0].value, values["s.0.w"])
    values["s.0.w"] = np.zeros((9, 9))
    with pytest.raises(ShapeMismatchError):
        stack.load_param_values(values)
