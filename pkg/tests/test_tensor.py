import numpy as np
import pytest

from conftest import central_diff, rel_err
from mcadv import nn
from mcadv import tensor as T
from mcadv.errors import ContractError, DimensionError, NonFiniteError
from mcadv.tensor import Tensor

RNG = np.random.default_rng(0)


def check_grad(build, *arrays, tol=1e-6):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(build(*leaves))
    for leaf, arr in zip(leaves, arrays):
        work = arr.copy()
        def f():
            others = [Tensor(a) if a is not arr else Tensor(work) for a in arrays]
            return build(*others).item()
        num = central_diff(f, work)
        assert rel_err(leaf.grad, num) < tol


@pytest.mark.parametrize("op", [T.relu, T.sigmoid, T.exp, T.square, T.neg, T.softmax, T.log_softmax])
def test_unary_ops_match_finite_differences(op):
    x = RNG.normal(size=(3, 5)) + 0.05  # keep relu away from its kink
    w = RNG.normal(size=(3, 5))
    check_grad(lambda a: T.tensor_sum(T.mul(op(a), w)), x)


def test_log_of_probabilities():
    p = RNG.uniform(0.1, 1.0, size=(4, 3))
    check_grad(lambda a: T.tensor_sum(T.log(a)), p)


def test_matmul_and_broadcast_add():
    a, b, c = RNG.normal(size=(4, 3)), RNG.normal(size=(3, 5)), RNG.normal(size=5)
    check_grad(lambda x, y, z: T.tensor_sum(T.square(T.add(T.matmul(x, y), z))), a, b, c)


def test_row_ops():
    a = RNG.normal(size=(3, 4))
    check_grad(lambda x: T.tensor_sum(T.square(T.row_sum(x))), a)
    check_grad(lambda x: T.mean(T.square(T.repeat_rows(x, 3))), a)


def test_fused_cross_entropy_gradient_is_p_minus_onehot():
    z = RNG.normal(size=(6, 4))
    y = np.array([0, 1, 2, 3, 0, 1])
    zt = Tensor(z, requires_grad=True)
    T.backward(T.softmax_cross_entropy(zt, y, reduction="sum"))
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    assert np.allclose(zt.grad, p - np.eye(4)[y], atol=1e-14)
    check_grad(lambda a: T.softmax_cross_entropy(a, y), z)


def test_bce_with_logits_gradient():
    z, t = RNG.normal(size=(3, 4)) * 3, RNG.random((3, 4))
    check_grad(lambda a: T.bce_with_logits(a, t), z)


def test_softmax_extreme_logits_are_stable():
    p = T.softmax(Tensor(np.array([[1000.0, 0.0]]))).data
    # extended-precision oracle: exp(-1000) ~ 5e-435, far below float64 resolution
    ref = np.exp(np.longdouble(-1000.0))
    assert p[0, 0] == 1.0
    assert abs(p[0, 1] - float(ref)) < 1e-300
    # the picked probability underflows and is clamped at 1e-12 before the log
    ce = T.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [1]).item()
    assert ce == pytest.approx(-np.log(T.PROB_FLOOR))


def test_cross_entropy_of_single_distribution():
    assert T.cross_entropy(Tensor(np.array([0.25, 0.75])), 1).item() == pytest.approx(-np.log(0.75))
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.array([0.5, 0.5])), 2)


def test_shared_node_accumulates_gradient():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.tensor_sum(T.add(y, y)))
    assert np.array_equal(x.grad, 4 * x.data)


def test_mismatched_matmul_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractError):
        T.backward(Tensor(np.ones(3), requires_grad=True))


def test_nan_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))


def test_backward_is_bit_reproducible():
    m = nn.init_classifier([10, 8, 3], [0.0, 0.0], seed=1)
    x = RNG.random((5, 10))
    grads = []
    for _ in range(2):
        ws = [Tensor(w, requires_grad=True) for w in m.weights]
        loss = T.softmax_cross_entropy(nn.forward(ws, m.biases, Tensor(x)), [0, 1, 2, 0, 1])
        T.backward(loss)
        grads.append(np.concatenate([w.grad.ravel() for w in ws]))
    assert grads[0].tobytes() == grads[1].tobytes()


def test_full_mlp_with_masks_against_finite_differences():
    m = nn.init_classifier([6, 5, 4, 3], [0.0, 0.5, 0.5], seed=2)
    x = RNG.random((4, 6))
    y = np.array([0, 1, 2, 1])
    masks = nn.draw_masks(m, 0, range(4), [0])
    # nonzero biases keep fully-masked rows off the ReLU kink
    params = [w.copy() for w in m.weights] + [RNG.normal(size=b.shape) for b in m.biases]
    check_grad(lambda *ps: T.softmax_cross_entropy(nn.forward(ps[:3], ps[3:], Tensor(x), masks), y), *params)
