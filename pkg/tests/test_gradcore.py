import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import REL_TOL, check_op, numeric_grad, rel_error
from gctflow import gradcore as gc
from gctflow.errors import OptimizerError, ShapeError
from gctflow.gradcore import Tensor


def leaf(rng, *shape, low=-1.0, high=1.0, away=0.0):
    x = rng.uniform(low, high, size=shape)
    if away:
        x = np.where(np.abs(x) < away, np.sign(x + 1e-12) * away, x)
    return Tensor(x, requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def weighted_sum(y):
    """Scalar loss with random weights so every output element matters."""
    w = np.random.default_rng(y.size).normal(size=y.shape)
    return gc.sum_(gc.hadamard(y, w))


OPS = {
    "add": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 4)), lambda: weighted_sum(gc.add(a, b))),
    "sub": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 3, 1)), lambda: weighted_sum(gc.sub(a, b))),
    "hadamard": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 1, 4)), lambda: weighted_sum(gc.hadamard(a, b))),
    "matmul": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 4, 5)), lambda: weighted_sum(gc.matmul(a, b))),
    "concat": lambda r: ((a := leaf(r, 2, 3)), (b := leaf(r, 2, 2)),
                         lambda: weighted_sum(gc.concat([a, b], axis=1))),
    "slice": lambda r: ((a := leaf(r, 3, 6)), None, lambda: weighted_sum(gc.slice_(a, 1, 2, 5))),
    "reshape": lambda r: ((a := leaf(r, 2, 6)), None, lambda: weighted_sum(gc.reshape(a, (3, 4)))),
    "transpose": lambda r: ((a := leaf(r, 2, 3, 4)), None, lambda: weighted_sum(gc.transpose(a, (2, 0, 1)))),
    "pad_left": lambda r: ((a := leaf(r, 2, 3)), None, lambda: weighted_sum(gc.pad_left(a, -1, 2))),
    "sum": lambda r: ((a := leaf(r, 3, 4)), None, lambda: weighted_sum(gc.sum_(a, axis=0))),
    "mean": lambda r: ((a := leaf(r, 3, 4)), None, lambda: weighted_sum(gc.mean(a, axis=1, keepdims=True))),
    "relu": lambda r: ((a := leaf(r, 3, 4, away=0.05)), None, lambda: weighted_sum(gc.relu(a))),
    "leaky_relu": lambda r: ((a := leaf(r, 3, 4, away=0.05)), None, lambda: weighted_sum(gc.leaky_relu(a, 0.2))),
    "elu": lambda r: ((a := leaf(r, 3, 4, away=0.05)), None, lambda: weighted_sum(gc.elu(a))),
    "sigmoid": lambda r: ((a := leaf(r, 3, 4, low=-4, high=4)), None, lambda: weighted_sum(gc.sigmoid(a))),
    "tanh": lambda r: ((a := leaf(r, 3, 4, low=-2, high=2)), None, lambda: weighted_sum(gc.tanh(a))),
    "abs": lambda r: ((a := leaf(r, 3, 4, away=0.05)), None, lambda: weighted_sum(gc.abs_(a))),
    "softmax": lambda r: ((a := leaf(r, 3, 5, low=-2, high=2)), None, lambda: weighted_sum(gc.softmax(a, axis=-1))),
    "softmax_weighted": lambda r: ((a := leaf(r, 2, 4, 4, low=-2, high=2)), None,
                                   lambda: weighted_sum(gc.softmax(a, -1, weights=np.tril(np.ones((4, 4))) + np.eye(4)))),
    "conv_time": lambda r: ((a := leaf(r, 2, 3, 7, 2)), (k := leaf(r, 4, 3, 3)),
                            lambda: weighted_sum(gc.conv_time(a, k))),
    "conv_time_1x1": lambda r: ((a := leaf(r, 3, 4, 2)), (k := leaf(r, 5, 3, 1)),
                                lambda: weighted_sum(gc.conv_time(a, k))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name, rng):
    a, b, loss = OPS[name](rng)
    tensors = [t for t in (a, b) if t is not None]
    assert check_op(loss, tensors) < REL_TOL


def test_conv_bias_gradient(rng):
    x, k, bias = leaf(rng, 2, 3, 6, 2), leaf(rng, 4, 3, 2), leaf(rng, 4)
    assert check_op(lambda: weighted_sum(gc.conv_time(x, k, bias)), [x, k, bias]) < REL_TOL


def test_shared_input_accumulates(rng):
    a = leaf(rng, 3)
    assert check_op(lambda: gc.sum_(gc.hadamard(a, gc.add(a, a))), [a]) < REL_TOL


def test_conv_time_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 6, 4))
    k = rng.normal(size=(5, 3, 2))
    b = rng.normal(size=5)
    out = gc.conv_time(Tensor(x), Tensor(k), Tensor(b)).data
    ref = np.zeros((2, 5, 5, 4))
    for o in range(5):
        for t in range(5):
            ref[:, o, t, :] = b[o] + np.einsum("bcks,ck->bs", x[:, :, t:t + 2, :], k[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_softmax_weights_match_renormalised_product(rng):
    x = rng.normal(size=(3, 4))
    w = rng.uniform(0, 1, size=(3, 4)) * (rng.random((3, 4)) > 0.3)
    w[:, 0] += 0.1
    got = gc.softmax(Tensor(x), -1, weights=w).data
    plain = np.exp(x) / np.exp(x).sum(-1, keepdims=True)
    ref = plain * w / (plain * w).sum(-1, keepdims=True)
    np.testing.assert_allclose(got, ref, atol=1e-12)
    assert (got[w == 0] == 0).all()


def test_softmax_rejects_empty_slice():
    with pytest.raises(ShapeError):
        gc.softmax(Tensor(np.zeros((2, 3))), -1, weights=np.array([[1, 0, 0], [0, 0, 0]]))


def test_sigmoid_is_stable_for_large_inputs():
    y = gc.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


def test_backward_requires_scalar(rng):
    a = leaf(rng, 3)
    with gc.tape_scope() as tape:
        y = gc.relu(a)
        with pytest.raises(ShapeError):
            gc.backward(y, tape)


def test_shape_errors():
    with pytest.raises(ShapeError):
        gc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ShapeError):
        gc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        gc.conv_time(Tensor(np.zeros((1, 3, 2, 1))), Tensor(np.zeros((1, 3, 5))))


def test_no_grad_records_nothing(rng):
    a = leaf(rng, 3)
    with gc.tape_scope() as tape:
        with gc.no_grad():
            gc.relu(a)
        assert len(tape) == 0
        gc.relu(a)
        assert len(tape) == 1


def test_backward_clears_tape_and_accumulates(rng):
    a = leaf(rng, 3)
    for _ in range(2):
        with gc.tape_scope() as tape:
            gc.backward(gc.sum_(a), tape)
            assert len(tape) == 0
    np.testing.assert_array_equal(a.grad, 2 * np.ones(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 1000))
def test_unbroadcast_roundtrip(rows, cols, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=(rows, cols)), requires_grad=True)
    b = Tensor(r.normal(size=(cols,)), requires_grad=True)
    with gc.tape_scope() as tape:
        gc.backward(gc.sum_(gc.add(a, b)), tape)
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_array_equal(b.grad, np.full(cols, rows))


def test_numeric_grad_oracle_on_polynomial():
    x = np.array([1.5, -2.0])
    num = numeric_grad(lambda: float(np.sum(x ** 3)), x)
    assert rel_error(num, 3 * np.array([1.5, -2.0]) ** 2) < 1e-8


# -- optimiser -------------------------------------------------------------------

def test_adam_first_step_moves_by_lr(rng):
    p = Tensor(rng.normal(size=5), requires_grad=True)
    start = p.data.copy()
    p.grad = rng.normal(size=5)
    opt = gc.Adam([p], lr=0.01)
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps) ~ lr * sign(g)
    np.testing.assert_allclose(start - p.data, 0.01 * np.sign(p.grad), rtol=1e-6)


def test_adam_matches_reference_sequence(rng):
    p = Tensor(rng.normal(size=3), requires_grad=True)
    ref = p.data.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    lr, wd, b1, b2, eps = 1e-3, 1e-2, 0.9, 0.999, 1e-8
    opt = gc.Adam([p], lr=lr, weight_decay=wd)
    for t in range(1, 6):
        g = rng.normal(size=3)
        p.grad = g.copy()
        opt.step()
        ref = ref - lr * wd * ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p.data, ref, atol=1e-14)


def test_adam_weight_decay_shrinks_with_zero_gradient():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = gc.Adam([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)])


def test_adam_missing_gradient_names_parameter():
    p = Tensor(np.zeros(2), requires_grad=True, name="w_enc")
    with pytest.raises(OptimizerError, match="w_enc"):
        gc.Adam([p]).step()


def test_adam_rejects_duplicate_parameters():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(OptimizerError):
        gc.Adam([p, p])


@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"weight_decay": -1.0}])
def test_adam_state_validation(kw):
    with pytest.raises(OptimizerError):
        gc.Adam([Tensor(np.zeros(1), requires_grad=True)], **kw)


def test_adam_minimises_quadratic():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = gc.Adam([p], lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        with gc.tape_scope() as tape:
            gc.backward(gc.sum_(gc.hadamard(p, p)), tape)
        opt.step()
    assert np.abs(p.data).max() < 1e-2


# -- modules and checkpoints --------------------------------------------------------

class Pair(gc.Module):
    def __init__(self, rng):
        self.w = gc.param(rng.normal(size=(3, 2)), "w")
        self.b = gc.param(rng.normal(size=2), "b")


def test_module_state_roundtrip(rng):
    m = Pair(rng)
    state = m.state_dict()
    assert list(state) == ["w", "b"] and m.n_parameters() == 8
    other = Pair(np.random.default_rng(99))
    other.load_state_dict(state)
    np.testing.assert_array_equal(other.w.data, m.w.data)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, rng):
    params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4), "c": np.array(np.pi)}
    gc.save_checkpoint(tmp_path, params)
    manifest = __import__("json").loads((tmp_path / "manifest.json").read_text())
    assert [e["name"] for e in manifest] == ["a", "b", "c"]
    assert manifest[1]["byte_offset"] == 48 and manifest[1]["byte_len"] == 32
    assert all(e["dtype"] == "f64" for e in manifest)
    back = gc.load_checkpoint(tmp_path)
    for k, v in params.items():
        assert back[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()
        assert back[k].shape == np.shape(v)


def test_he_uniform_bound(rng):
    w = gc.he_uniform(rng, (200, 50), 50)
    assert np.abs(w).max() <= np.sqrt(6 / 50)
