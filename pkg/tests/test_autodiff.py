import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcvs.autodiff import (
    MLP,
    AdamState,
    Linear,
    MlpSpec,
    ResBlockStack,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    default_dtype,
    grad_check,
    no_grad,
    ops,
)

shapes = st.tuples(st.integers(1, 4), st.integers(1, 4))


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def test_matmul_dot_product():
    a = Tensor(np.array([[1.0, 2.0]]))
    b = Tensor(np.array([[3.0], [4.0]]))
    assert float((a @ b).data[0, 0]) == 11.0


def test_relu_values():
    out = ops.relu(Tensor(np.array([-5.0, 5.0])))
    assert out.data.tolist() == [0.0, 5.0]


def test_conv_average_keeps_constant_interior():
    img = Tensor(np.full((5, 5, 1), 0.7))
    w = Tensor(np.full((3, 3, 1, 1), 1.0 / 9.0))
    out = ops.conv2d(img, w).data[..., 0]
    assert out.shape == (5, 5)
    np.testing.assert_allclose(out[1:-1, 1:-1], 0.7, atol=1e-6)
    # zero padding pulls the border down
    assert out[0, 0] < 0.7


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    backward(x * x)
    assert float(x.grad) == 6.0


def test_softmax_rows_have_zero_gradient_sum(f64):
    rng = np.random.default_rng(0)
    x = _leaf(rng, (4, 6))
    c = Tensor(rng.normal(size=(4, 6)))
    backward(ops.sum(ops.softmax(x, axis=1) * c))
    np.testing.assert_allclose(x.grad.sum(axis=1), 0.0, atol=1e-12)


def test_gradients_accumulate_until_zeroed():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ops.sum(x * 2.0))
    backward(ops.sum(x * 2.0))
    assert x.grad.tolist() == [4.0, 4.0]


def test_nonscalar_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError) as err:
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    assert "add" in str(err.value)
    assert "(2, 3)" in str(err.value)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_default_dtype_switch():
    assert Tensor(np.ones(2)).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor(np.ones(2)).dtype == np.float64
    assert Tensor(np.ones(2)).dtype == np.float32


def test_linear_layer_gradcheck(f64):
    rng = np.random.default_rng(1)
    lin = Linear(4, 3, rng)
    lin.bias.data = rng.normal(size=3)
    x = _leaf(rng, (5, 4))
    R = Tensor(rng.normal(size=(5, 3)))
    assert grad_check(lambda: ops.sum(lin(x) * R), {"x": x, **lin.parameters()}) < 1e-7


def test_three_layer_mlp_gradcheck(f64):
    rng = np.random.default_rng(2)
    mlp = MLP(MlpSpec((5, 8, 8, 1)), rng)
    for p in mlp.parameters().values():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    x = Tensor(rng.normal(size=(7, 5)))
    R = Tensor(rng.normal(size=(7, 1)))
    assert grad_check(lambda: ops.sum(mlp(x) * R), mlp.parameters()) < 1e-4


def test_zero_initialised_resblocks_are_identity():
    rng = np.random.default_rng(3)
    stack = ResBlockStack(3, 4, rng)
    x = Tensor(rng.normal(size=(6, 5, 4)))
    np.testing.assert_array_equal(stack(x).data, x.data)


def test_backward_is_bit_deterministic(f64):
    rng = np.random.default_rng(4)
    mlp = MLP(MlpSpec((3, 6, 1)), rng)
    x = Tensor(rng.normal(size=(10, 3)))
    grads = []
    for _ in range(2):
        mlp.zero_grad()
        backward(ops.sum(ops.square(mlp(x))))
        grads.append({k: p.grad.copy() for k, p in mlp.parameters().items()})
    for k in grads[0]:
        np.testing.assert_array_equal(grads[0][k], grads[1][k])


# -- op-level finite-difference properties ------------------------------------------

UNARY = {
    "exp": lambda a: ops.exp(a),
    "log": lambda a: ops.log(ops.abs(a) + 0.5),
    "sqrt": lambda a: ops.sqrt(ops.abs(a) + 0.5),
    "square": ops.square,
    "leaky_relu": ops.leaky_relu,
    "softmax": lambda a: ops.softmax(a, axis=-1),
    "mean": lambda a: ops.mean(a, axis=0, keepdims=True),
    "transpose": ops.transpose,
    "power": lambda a: ops.power(ops.abs(a) + 0.5, 1.5),
}


@given(shape=shapes, seed=st.integers(0, 10_000), name=st.sampled_from(sorted(UNARY)))
def test_unary_ops_match_finite_differences(shape, seed, name):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        # keep values off the |x| kink so the difference quotient is smooth
        x = Tensor(rng.uniform(0.2, 1.0, shape) * rng.choice([-1.0, 1.0], shape), requires_grad=True)
        out = UNARY[name](x)
        R = Tensor(rng.normal(size=out.shape))
        assert grad_check(lambda: ops.sum(UNARY[name](x) * R), [x]) < 1e-4


BINARY = {
    "add": ops.add,
    "sub": ops.sub,
    "mul": ops.mul,
    "div": lambda a, b: ops.div(a, ops.abs(b) + 0.5),
    "maximum": ops.maximum,
    "concat": lambda a, b: ops.concat([a, b], axis=0),
}


@given(shape=shapes, seed=st.integers(0, 10_000), name=st.sampled_from(sorted(BINARY)))
def test_binary_ops_match_finite_differences(shape, seed, name):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        a = _leaf(rng, shape)
        b = Tensor(a.data + rng.choice([-1.0, 1.0], shape) * rng.uniform(0.1, 1.0, shape), requires_grad=True)
        out = BINARY[name](a, b)
        R = Tensor(rng.normal(size=out.shape))
        assert grad_check(lambda: ops.sum(BINARY[name](a, b) * R), [a, b]) < 1e-4


@given(n=st.integers(1, 4), k=st.integers(1, 4), m=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_matmul_and_linear_match_finite_differences(n, k, m, seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        a, w, b = _leaf(rng, (n, k)), _leaf(rng, (k, m)), _leaf(rng, (m,))
        R = Tensor(rng.normal(size=(n, m)))
        assert grad_check(lambda: ops.sum((a @ w) * R) + ops.sum(ops.linear(a, w, b) * R), [a, w, b]) < 1e-4


@given(h=st.integers(3, 6), w=st.integers(3, 6), cin=st.integers(1, 3), cout=st.integers(1, 3),
       stride=st.sampled_from([1, 2]), padding=st.sampled_from(["zeros", "edge"]), seed=st.integers(0, 10_000))
def test_conv2d_matches_finite_differences(h, w, cin, cout, stride, padding, seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        x, k, b = _leaf(rng, (h, w, cin)), _leaf(rng, (3, 3, cin, cout)), _leaf(rng, (cout,))
        out = ops.conv2d(x, k, b, stride=stride, padding=padding)
        R = Tensor(rng.normal(size=out.shape))
        assert grad_check(lambda: ops.sum(ops.conv2d(x, k, b, stride=stride, padding=padding) * R),
                          [x, k, b]) < 1e-4


@given(n=st.integers(2, 8), seed=st.integers(0, 10_000))
def test_gather_ops_match_finite_differences(n, seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(5,))
    with default_dtype(np.float64):
        x = _leaf(rng, (n, 3))
        R = Tensor(rng.normal(size=(5, 3)))
        R2 = Tensor(rng.normal(size=(2, 3)))

        def fn():
            return (ops.sum(ops.take(x, idx) * R) + ops.sum(ops.index(x, slice(0, 2)) * R2)
                    + ops.sum(ops.reshape(x, (3, n)) * Tensor(R.data[:3, :1].repeat(n, 1))))

        assert grad_check(fn, [x]) < 1e-4


# -- Adam ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step({"p": p}, AdamState(lr=0.1))
    assert p.data.tolist() == [1.0, -2.0]
    assert p.grad is None


def test_adam_first_step_has_lr_magnitude():
    with default_dtype(np.float64):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.array([0.5, -3.0, 1e-3])
        adam_step({"p": p}, AdamState(lr=0.01))
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_missing_gradient_names_parameter():
    with pytest.raises(ValueError, match="'w'"):
        adam_step({"w": Tensor(np.ones(2), requires_grad=True)}, AdamState())


def test_adam_converges_on_quadratic():
    with default_dtype(np.float64):
        x = Tensor(np.array(0.0), requires_grad=True)
        state = AdamState(lr=1e-2)
        for _ in range(5000):
            backward(ops.square(x - 2.0))
            adam_step({"x": x}, state)
        assert abs(float(x.data) - 2.0) < 1e-2
