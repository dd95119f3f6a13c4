import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from oracles import autodiff_grad, gradcheck, numeric_grad, rel_error, scalar_fn
from vidalign import tensor as T
from vidalign.tensor import NonFiniteError, Tape, Tensor, TensorError


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_add_and_mul_basics():
    assert np.array_equal(T.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        out = T.mul(x, 0.0).sum()
    tape.backward(out)
    assert np.array_equal(T.mul(x, 0.0).data, np.zeros(3))
    assert np.array_equal(x.grad, np.zeros(3))


def test_gelu_zero():
    assert T.gelu(Tensor(0.0)).item() == 0.0


def test_elementwise_dispatch_and_errors():
    assert T.elementwise("scale", Tensor([1.0, 2.0]), 3.0).data.tolist() == [3.0, 6.0]
    assert T.elementwise("sqrt", Tensor([4.0])).item() == 2.0
    with pytest.raises(TensorError):
        T.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(TensorError):
        T.log(Tensor([-1.0]))
    with pytest.raises(TensorError):
        T.sqrt(Tensor([-1.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))


def test_matmul_examples():
    m = rand(2, 2)
    assert np.allclose(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m, atol=0)
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    assert out.data.tolist() == [[17], [39]]
    with pytest.raises(TensorError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_grad_is_ones_bt():
    a, b = rand(3, 4), rand(4, 5, seed=1)
    A = Tensor(a, requires_grad=True)
    with Tape() as tape:
        loss = T.matmul(A, Tensor(b)).sum()
    tape.backward(loss)
    assert np.allclose(A.grad, np.ones((3, 5)) @ b.T, atol=1e-13)
    assert gradcheck(lambda x, y: T.matmul(x, y).sum(), [a, b]) < 1e-6


def test_reductions():
    assert T.reduce("mean", Tensor([1.0, 2.0, 3.0])).item() == 2.0
    assert T.reduce("norm", Tensor([3.0, 4.0])).item() == 5.0
    assert T.reduce("sum", Tensor(np.ones((4, 3))), axis=0).data.tolist() == [4, 4, 4]
    assert T.reduce("max", Tensor([[1.0, 5.0], [7.0, 2.0]]), axis=1).data.tolist() == [5, 7]
    with pytest.raises(TensorError):
        T.reduce("sum", Tensor(np.ones((2, 3))), axis=3)
    with pytest.raises(TensorError):
        T.reduce("sum", Tensor(np.ones((0, 3))), axis=0)


def test_layernorm_examples():
    out = T.layernorm(Tensor(np.full((2, 5), 3.0)))
    assert np.array_equal(out.data, np.zeros((2, 5)))
    out = T.layernorm(Tensor([1.0, -1.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-14)
    assert np.allclose(out.data, [1.0, -1.0], atol=1e-12)
    x = rand(6, 8)
    mean = T.layernorm(Tensor(x)).data
    assert np.allclose(mean.mean(axis=-1), 0, atol=1e-12)
    assert np.allclose(mean.var(axis=-1), 1, atol=1e-4)


def test_attention_examples():
    v = rand(1, 4)
    out = T.softmax_attention(Tensor(rand(1, 4, seed=1)), Tensor(rand(1, 4, seed=2)), Tensor(v))
    assert np.allclose(out.data, v, atol=0)
    q = np.array([[1.0, 0.0]])
    k = np.array([[0.0, 1.0], [0.0, -1.0]])
    v = rand(2, 3)
    out = T.softmax_attention(Tensor(q), Tensor(k), Tensor(v))
    assert np.allclose(out.data, v.mean(axis=0, keepdims=True), atol=1e-15)
    with pytest.raises(TensorError):
        T.softmax_attention(Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))))


def test_softmax_rows_sum_to_one():
    w = T.attention_weights(rand(5, 7, 4), rand(5, 9, 4, seed=3) * 10)
    assert np.abs(w.sum(axis=-1) - 1).max() < 1e-12
    p = T.softmax(Tensor(rand(3, 6) * 30)).data
    assert np.abs(p.sum(axis=-1) - 1).max() < 1e-12


def test_backward_examples():
    x = Tensor(rand(5), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones(5))
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    assert np.allclose(x.grad, 2 * x.data, atol=0)


def test_backward_errors():
    x = Tensor(rand(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(TensorError):
        tape.backward(y)
    with pytest.raises(TensorError):
        Tape().backward((x * 1.0).sum())
    with Tape() as tape:
        s = x.sum()
    tape.backward(s)
    with pytest.raises(TensorError):
        tape.backward(s)


UNARY = {
    "gelu": T.gelu, "silu": T.silu, "exp": T.exp,
    "log": lambda x: T.log(T.add(T.mul(x, x), 0.5)),
    "sqrt": lambda x: T.sqrt(T.add(T.mul(x, x), 0.5)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    x = rand(8, seed=4)
    w = rand(8, seed=5)
    assert gradcheck(lambda a: (UNARY[name](a) * Tensor(w)).sum(), [x]) < 1e-6


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_binary_gradients(kind):
    a, b = rand(6, seed=1), rand(6, seed=2) + 3.0
    w = rand(6, seed=3)
    assert gradcheck(lambda x, y: (T.elementwise(kind, x, y) * Tensor(w)).sum(), [a, b]) < 1e-6
    # scalar operand
    assert gradcheck(lambda x, s: (T.elementwise(kind, x, s) * Tensor(w)).sum(), [a, np.array(2.5)]) < 1e-6


@pytest.mark.parametrize("kind", ["sum", "mean", "max", "norm"])
def test_reduce_gradients(kind):
    x = rand(3, 5, seed=7)
    w = rand(3, seed=8)
    assert gradcheck(lambda a: (T.reduce(kind, a, axis=1) * Tensor(w)).sum(), [x]) < 1e-6


def test_layernorm_gradient():
    for seed in range(3):
        x, g, b = rand(8, seed=seed), rand(8, seed=seed + 10), rand(8, seed=seed + 20)
        w = rand(8, seed=seed + 30)
        err = gradcheck(lambda a, s, t: (T.layernorm(a, s, t) * Tensor(w)).sum(), [x, g, b])
        assert err < 1e-6


def test_attention_gradient():
    q, k, v = rand(3, 4, seed=1), rand(3, 4, seed=2), rand(3, 4, seed=3)
    w = rand(3, 4, seed=4)
    assert gradcheck(lambda a, b, c: (T.softmax_attention(a, b, c) * Tensor(w)).sum(), [q, k, v]) < 1e-4


def test_shape_op_gradients():
    x = rand(2, 3, 4)
    w = rand(4, 3, 2, seed=1)
    assert gradcheck(lambda a: (T.transpose(a, (2, 1, 0)) * Tensor(w)).sum(), [x]) < 1e-6
    b = rand(4, seed=2)
    w2 = rand(2, 3, 4, seed=3)
    assert gradcheck(lambda a: (T.broadcast_to(a, (2, 3, 4)) * Tensor(w2)).sum(), [b]) < 1e-6
    wi = rand(2, 4, seed=4)
    assert gradcheck(lambda a: (T.index(a, (slice(None), 1)) * Tensor(wi)).sum(), [x]) < 1e-6
    y = rand(2, 3, 2, seed=5)
    assert gradcheck(lambda a, c: (T.concat([a, c], axis=-1) * Tensor(rand(2, 3, 6, seed=6))).sum(), [x, y]) < 1e-6


def test_linearity_of_backward():
    x0 = rand(5)
    f = lambda x: T.reduce("sum", T.gelu(x))
    g = lambda x: T.reduce("sum", T.mul(x, x))

    def grad_of(build):
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            out = build(x)
        tape.backward(out)
        return x.grad

    a, b = 0.7, -1.3
    combined = grad_of(lambda x: T.add(T.scale(f(x), a), T.scale(g(x), b)))
    assert np.allclose(combined, a * grad_of(f) + b * grad_of(g), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
@example(1, 1, 3)
def test_elementwise_grad_property(m, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, n)), rng.standard_normal((m, n))
    w = rng.standard_normal((m, n))
    f = lambda x, y: (T.gelu(T.mul(x, y)) * Tensor(w)).sum()
    # deep in gelu's left tail the gradient is ~1e-7 and central differences lose
    # relative accuracy to cancellation, hence the absolute floor
    for ad, nd in zip(autodiff_grad(f, [a, b]), numeric_grad(scalar_fn(f), [a, b], 1e-5)):
        np.testing.assert_allclose(ad, nd, rtol=1e-6, atol=1e-10)


def test_determinism():
    def run():
        x = Tensor(rand(4, 6), requires_grad=True)
        w = Tensor(rand(6, 3, seed=1), requires_grad=True)
        with Tape() as tape:
            out = T.reduce("mean", T.gelu(T.matmul(x, w)))
        tape.backward(out)
        return out.data, x.grad, w.grad

    r1, r2 = run(), run()
    for a, b in zip(r1, r2):
        assert np.array_equal(a, b)


def test_rel_error_helper_sanity():
    assert rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0
