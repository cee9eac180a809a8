import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcl_lab import diffcore as dc
from tcl_lab.diffcore import Node, ParamStore


def _fd_grad(f, x, h=1e-5):
    """Plain central differences of scalar f at array x (independent of grad_check)."""
    g = np.zeros_like(x)
    for i in range(x.size):
        hi, lo = x.copy().reshape(-1), x.copy().reshape(-1)
        hi[i] += h
        lo[i] -= h
        g.reshape(-1)[i] = (f(hi.reshape(x.shape)) - f(lo.reshape(x.shape))) / (2 * h)
    return g


def _rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


# -- construction ----------------------------------------------------------

@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_array_rejects_non_finite(bad):
    with pytest.raises(dc.NonFiniteError):
        Node([1.0, bad])


def test_values_are_float64():
    assert Node([1, 2, 3]).value.dtype == np.float64


# -- matmul ----------------------------------------------------------------

def test_matmul_identity():
    a = Node([[1.0, 0.0], [0.0, 1.0]])
    b = Node([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal((a @ b).value, [[5, 6], [7, 8]])


def test_matmul_row_by_column():
    out = dc.matmul(Node([[1.0, 2.0]]), Node([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.value, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(Node(np.ones((2, 3))), Node(np.ones((2, 3))))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    W = rng.normal(size=(3, 2))  # fixed projection to get a scalar

    a, b = Node(A), Node(B)
    dc.backward(dc.sum_(dc.matmul(a, b) * W))
    fa = _fd_grad(lambda x: float(((x @ B) * W).sum()), A)
    fb = _fd_grad(lambda x: float(((A @ x) * W).sum()), B)
    assert _rel(a.grad, fa) < 1e-6
    assert _rel(b.grad, fb) < 1e-6


# -- elementwise -----------------------------------------------------------

def test_tanh_at_zero():
    assert dc.tanh(Node(0.0)).value == 0.0


def test_log_of_one():
    assert dc.log(Node(1.0)).value == 0.0


def test_relu_gradients():
    x = Node([2.0, -3.0, 0.0])
    dc.backward(dc.sum_(dc.relu(x)))
    # subgradient at 0 is 0
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])


def test_log_domain_error_reports_index():
    with pytest.raises(dc.DomainError) as info:
        dc.log(Node([[1.0, 2.0], [0.5, -1.0]]))
    assert info.value.index == (1, 1)


def test_elementwise_dispatch():
    x = Node([1.0, 2.0])
    np.testing.assert_array_equal(dc.elementwise("scalar-scale", x, factor=3).value, [3, 6])
    np.testing.assert_array_equal(dc.elementwise("mul", x, x).value, [1, 4])
    with pytest.raises(ValueError):
        dc.elementwise("cosh", x)


def test_no_broadcasting_beyond_scalars():
    with pytest.raises(dc.ShapeError):
        dc.add(Node(np.ones((2, 3))), Node(np.ones(3)))
    out = dc.add(Node(np.ones((2, 3))), Node(2.0))
    assert out.shape == (2, 3)


def test_scalar_broadcast_gradient_sums():
    s = Node(2.0)
    x = Node(np.arange(6.0).reshape(2, 3))
    dc.backward(dc.sum_(s * x))
    assert s.grad == pytest.approx(15.0)
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))


UNARY = {
    "tanh": (dc.tanh, np.tanh),
    "sigmoid": (dc.sigmoid, lambda v: 1 / (1 + np.exp(-v))),
    "square": (dc.square, np.square),
    "log": (lambda n: dc.log(n), np.log),
    "relu": (dc.relu, lambda v: np.maximum(v, 0)),
}


@settings(max_examples=25, deadline=None)
@given(
    name=st.sampled_from(sorted(UNARY)),
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 10_000),
)
def test_unary_ops_match_finite_differences(name, rows, cols, seed):
    op, ref = UNARY[name]
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.2, 2.0, size=(rows, cols)) if name == "log" else rng.normal(size=(rows, cols))
    if name == "relu":
        # stay away from the kink
        x0 = np.where(np.abs(x0) < 1e-3, 0.5, x0)
    w = rng.normal(size=(rows, cols))
    x = Node(x0)
    dc.backward(dc.sum_(op(x) * w))
    numeric = _fd_grad(lambda v: float((ref(v) * w).sum()), x0)
    assert _rel(x.grad, numeric) < 1e-4


@settings(max_examples=20, deadline=None)
@given(rows=st.integers(1, 5), cols=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_structural_ops_match_finite_differences(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x0, b0 = rng.normal(size=(rows, cols)), rng.normal(size=cols)
    w = rng.normal(size=(rows,))

    def ref(xv, bv):
        y = (xv + bv)[:, ::-1].reshape(rows * cols).reshape(rows, cols)
        return float((y.sum(axis=1) * w).sum() + y[:, :1].mean())

    x, b = Node(x0), Node(b0)
    y = dc.reshape(dc.reshape(dc.add_bias(x, b)[:, ::-1], (rows * cols,)), (rows, cols))
    root = dc.sum_(dc.sum_(y, axis=1) * w) + dc.mean(y[:, :1])
    dc.backward(root)
    assert _rel(x.grad, _fd_grad(lambda v: ref(v, b0), x0)) < 1e-4
    assert _rel(b.grad, _fd_grad(lambda v: ref(x0, v), b0)) < 1e-4


# -- backward --------------------------------------------------------------

def test_backward_sum_of_vector():
    p = Node([4.0, -1.0])
    dc.backward(dc.sum_(p))
    np.testing.assert_array_equal(p.grad, [1.0, 1.0])


def test_backward_square():
    x = Node(3.0)
    dc.backward(x * x)
    assert x.grad == 6.0


def test_backward_requires_scalar_root():
    with pytest.raises(dc.ShapeError):
        dc.backward(Node([1.0, 2.0]))


def test_backward_accumulates_and_is_deterministic():
    x = Node([1.5, -0.5])
    root = dc.sum_(dc.tanh(x) * x)
    dc.backward(root)
    first = x.grad.copy()
    dc.backward(root)
    np.testing.assert_array_equal(x.grad, 2 * first)
    x.zero_grad()
    dc.backward(root)
    np.testing.assert_array_equal(x.grad, first)


def test_shared_subexpression_visited_once():
    x = Node(2.0)
    y = x * x
    dc.backward(y + y)  # d/dx 2x^2 = 4x
    assert x.grad == 8.0


def test_forward_unaffected_by_backward():
    x = Node([0.3, 0.7])
    before = dc.tanh(x).value.copy()
    dc.backward(dc.sum_(dc.tanh(x)))
    np.testing.assert_array_equal(dc.tanh(x).value, before)


# -- ParamStore ------------------------------------------------------------

def test_param_store_order_and_uniqueness():
    store = ParamStore()
    store.add("b", [1.0])
    store.add("a", [2.0])
    assert list(store) == ["b", "a"]
    with pytest.raises(KeyError):
        store.add("a", [0.0])
    assert store.num_values() == 2


def test_param_store_load_values_checks_shapes():
    store = ParamStore()
    store.add("w", np.zeros((2, 2)))
    with pytest.raises(dc.ShapeError):
        store.load_values({"w": np.zeros(3)})


# -- grad_check ------------------------------------------------------------

def test_grad_check_linear_is_exact():
    store = ParamStore()
    store.add("x", [0.7, -1.3, 2.1])
    coef = np.array([3.0, -2.0, 0.5])
    report = dc.grad_check(lambda s: dc.sum_(s["x"] * coef), store, tolerance=1e-10)
    assert report.max_rel_error < 1e-10
    assert report.passed


def test_grad_check_quadratic_matches_closed_form():
    # f(w) = (w x)^2 -> df/dw = 2 w x^2
    w0, x = 0.8, 1.7
    store = ParamStore()
    store.add("w", [w0])
    f = lambda s: dc.sum_(dc.square(dc.scale(s["w"], x)))
    report = dc.grad_check(f, store)
    store.zero_grad()
    dc.backward(f(store))
    assert store["w"].grad[0] == pytest.approx(2 * w0 * x**2, rel=1e-14)
    assert report.passed


def test_grad_check_flags_wrong_gradient():
    store = ParamStore()
    store.add("x", [0.5, 1.0])

    def broken(s):
        x = s["x"]
        # value of x^2 but backward of x
        return dc.sum_(Node(x.value**2, (x,), "bad", lambda g: (g,)))

    report = dc.grad_check(broken, store)
    assert not report.passed


def test_grad_check_non_finite_names_parameter():
    store = ParamStore()
    store.add("x", [1e-6])

    def f(s):
        x = s["x"]
        # log becomes undefined once the probe pushes x below zero
        return dc.sum_(dc.log(x) * 0.0 + x) if x.value[0] > 0 else Node(np.inf)

    with pytest.raises(dc.NonFiniteError, match=r"x\[0\]"):
        dc.grad_check(f, store)
