import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from syncmatrix import autodiff as ad
from syncmatrix.autodiff import Tensor, grad_check
from syncmatrix.exceptions import DegenerateInputError, DimensionError, NumericError

SEEDS = range(20)


def test_matmul_identity_and_hand_product():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(ad.matmul(np.eye(2), m).data, m)
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_backward_rules():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = rng.normal(size=(3, 2))
    ad.matmul(a, b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_conv2d_identity_kernel():
    x = np.random.default_rng(1).normal(size=(1, 4, 6))
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)), padding=0)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_full_kernel_gives_single_position():
    n = 7
    out = ad.conv2d(np.ones((2, n, n)), np.ones((3, 2, n, n)), padding=0)
    assert out.shape == (3, 1, 1)
    np.testing.assert_allclose(out.data.ravel(), 2 * n * n)


def test_conv2d_output_size_and_errors():
    out = ad.conv2d(np.zeros((1, 5, 6)), np.zeros((4, 1, 3, 3)), padding=1)
    assert out.shape == (4, 5, 6)
    with pytest.raises(DimensionError):
        ad.conv2d(np.zeros((1, 3, 3)), np.zeros((1, 1, 5, 5)), padding=0)
    with pytest.raises(DimensionError):
        ad.conv2d(np.zeros((2, 3, 3)), np.zeros((1, 1, 3, 3)), padding=0)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 4))
    k = rng.normal(size=(3, 2, 3, 2))
    out = ad.conv2d(x, k, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    expected = np.zeros_like(out)
    for o in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                expected[o, i, j] = np.sum(xp[:, i : i + 3, j : j + 2] * k[o])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_softmax_uniform_and_cross_entropy():
    p = ad.softmax(np.zeros(11)).data
    np.testing.assert_allclose(p, np.full(11, 1 / 11))
    for c in (0, 5, 10):
        assert ad.cross_entropy(np.zeros(11), c).item() == pytest.approx(np.log(11))
    assert np.log(11) == pytest.approx(2.3979, abs=1e-4)
    with pytest.raises(ValueError):
        ad.cross_entropy(np.zeros(11), 11)
    with pytest.raises(ValueError):
        ad.cross_entropy(np.zeros(11), -1)


def test_batchnorm_training_needs_two_items():
    with pytest.raises(DimensionError):
        ad.batch_norm(np.ones((1, 2, 3, 3)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=True)


def test_batchnorm_running_stats_and_eval():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 3.0, size=(8, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    out = ad.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    n = 8 * 9
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    ev = ad.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=False).data
    np.testing.assert_allclose(ev, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))


def test_l2_normalize_examples():
    np.testing.assert_allclose(ad.l2_normalize(np.array([3.0, 4.0])).data, [0.6, 0.8])
    u = np.array([0.6, 0.0, -0.8])
    np.testing.assert_allclose(ad.l2_normalize(u).data, u)
    with pytest.raises(DegenerateInputError):
        ad.l2_normalize(np.zeros(3))


def test_grad_check_examples():
    assert grad_check(lambda x: x * x, np.array(3.0)) < 1e-8
    w = np.array([1.5, -2.0, 0.5])
    assert grad_check(lambda x: ad.tsum(x * w) + 7.0, np.array([0.3, 0.1, -4.0])) < 1e-10


def test_grad_check_non_finite_raises():
    with pytest.raises(NumericError):
        grad_check(lambda x: ad.log(x), np.array(-1.0))


def test_backward_visits_each_node_once_and_zero_for_unused():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    unused = Tensor(np.array([5.0]), requires_grad=True)
    y = x * 2.0
    z = y + y * y  # y reused: gradients must accumulate, not double-run
    _ = unused * 3.0
    zero_path = ad.tsum(unused * 0.0)
    loss = ad.tsum(z) + zero_path
    tape = loss.backward()
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    np.testing.assert_allclose(x.grad, 2.0 * (1 + 2 * y.data))
    np.testing.assert_allclose(unused.grad, [0.0])


def test_tape_topological_order():
    a = Tensor(np.ones(2), requires_grad=True)
    b = ad.exp(a)
    c = ad.tsum(b * a)
    nodes = ad.Tape.record(c).nodes
    pos = {id(n): k for k, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


# -- randomized finite-difference checks, 20 seeds per op ---------------------
def _w(rng, shape):
    return rng.normal(size=shape)


OPS = {
    "matmul": lambda rng: (lambda a, b: ad.tsum(ad.matmul(a, b)), [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]),
    "matmul_weighted": lambda rng: (
        (lambda W: (lambda a, b: ad.tsum(ad.matmul(a, b) * W)))(_w(rng, (3, 2))),
        [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
    ),
    "conv2d": lambda rng: (
        (lambda W: (lambda x, k: ad.tsum(ad.conv2d(x, k, 1) * W)))(_w(rng, (2, 5, 5))),
        [rng.normal(size=(1, 5, 5)), rng.normal(size=(2, 1, 3, 3))],
    ),
    "conv2d_full": lambda rng: (
        (lambda W: (lambda x, k: ad.tsum(ad.conv2d(x, k, 0) * W)))(_w(rng, (2, 3, 1, 1))),
        [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 4, 4))],
    ),
    "relu": lambda rng: ((lambda W: (lambda x: ad.tsum(ad.relu(x) * W)))(_w(rng, (4, 3))), [rng.normal(size=(4, 3))]),
    "batchnorm": lambda rng: (
        (lambda W: (lambda x, g, b: ad.tsum(ad.batch_norm(x, g, b, np.zeros(3), np.ones(3), True) * W)))(
            _w(rng, (4, 3, 2, 2))
        ),
        [rng.normal(size=(4, 3, 2, 2)), rng.normal(size=3), rng.normal(size=3)],
    ),
    "batchnorm_eval": lambda rng: (
        (lambda W, rm, rv: (lambda x, g, b: ad.tsum(ad.batch_norm(x, g, b, rm, rv, False) * W)))(
            _w(rng, (3, 2, 2, 2)), rng.normal(size=2), rng.uniform(0.5, 2, size=2)
        ),
        [rng.normal(size=(3, 2, 2, 2)), rng.normal(size=2), rng.normal(size=2)],
    ),
    "softmax": lambda rng: ((lambda W: (lambda x: ad.tsum(ad.softmax(x) * W)))(_w(rng, 11)), [rng.normal(size=11)]),
    "log_softmax": lambda rng: (
        (lambda W: (lambda x: ad.tsum(ad.log_softmax(x) * W)))(_w(rng, (3, 5))),
        [rng.normal(size=(3, 5))],
    ),
    "cross_entropy": lambda rng: (
        (lambda c: (lambda x: ad.cross_entropy(x, c)))(int(rng.integers(11))),
        [rng.normal(size=11)],
    ),
    "cross_entropy_batch": lambda rng: (
        (lambda c: (lambda x: ad.cross_entropy(x, c)))(rng.integers(0, 11, size=4)),
        [rng.normal(size=(4, 11))],
    ),
    "l2_normalize": lambda rng: (
        (lambda W: (lambda x: ad.tsum(ad.l2_normalize(x) * W)))(_w(rng, 8)),
        [rng.normal(size=8)],
    ),
    "elementwise": lambda rng: (
        lambda a, b: ad.tsum(ad.exp(a * 0.3) / (b * b + 1.0) - ad.sqrt(b * b + 2.0) + ad.log(a * a + 1.0)),
        [rng.normal(size=5), rng.normal(size=5)],
    ),
    "reduce_reshape": lambda rng: (
        (lambda W: (lambda a: ad.tsum(ad.mean(ad.transpose(ad.reshape(a, (3, 4)), (1, 0)), axis=1) * W)))(_w(rng, 4)),
        [rng.normal(size=12)],
    ),
    "index_concat": lambda rng: (
        (lambda W: (lambda a, b: ad.tsum(ad.concat([a[1:, :], b[[0, 0, 2]]], axis=0) * W)))(_w(rng, (5, 3))),
        [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))],
    ),
    "unfold_time": lambda rng: (
        (lambda W: (lambda x: ad.tsum(ad.unfold_time(x, 3) * W)))(_w(rng, (2, 4, 6))),
        [rng.normal(size=(2, 6, 2))],
    ),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", sorted(OPS))
def test_randomized_grad_check(op, seed):
    rng = np.random.default_rng(1000 + seed)
    f, points = OPS[op](rng)
    assert grad_check(f, *points) < 1e-5


def test_composite_conv_relu_sum():
    rng = np.random.default_rng(7)
    k = rng.normal(size=(3, 1, 3, 3))
    assert grad_check(lambda x: ad.tsum(ad.relu(ad.conv2d(x, k, 1))), rng.normal(size=(1, 6, 6))) < 1e-5


# -- properties -----------------------------------------------------------------
finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite))
def test_relu_idempotent(x):
    once = ad.relu(x).data
    np.testing.assert_array_equal(ad.relu(once).data, once)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 11, elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(ad.softmax(x).data, ad.softmax(x + c).data, atol=1e-9)
    assert ad.softmax(x).data.sum() == pytest.approx(1.0, abs=1e-9)
