import numpy as np
import pytest

from src.errors import ContractError, DimensionError
from src.nn import functional as F
from src.nn.tensor import Tensor, no_grad

H = 1e-4
INSTANCES = 20


def numeric_grads(fn, arrays):
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            values = []
            for sign in (1.0, -1.0):
                shifted = [a.copy() for a in arrays]
                shifted[k][idx] += sign * H
                with no_grad():
                    values.append(fn(*[Tensor(a) for a in shifted]).item())
            g[idx] = (values[0] - values[1]) / (2 * H)
        grads.append(g)
    return grads


def check_grads(fn, arrays):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    for t, expected in zip(tensors, numeric_grads(fn, arrays)):
        err = np.linalg.norm(t.grad - expected) / (np.linalg.norm(expected) + 1e-6)
        assert err < 1e-3


def away_from_zero(rng, shape):
    """Uniform on [-1, -0.05] U [0.05, 1]; keeps |x| and l1 kinks out of the difference stencil."""
    return rng.uniform(0.05, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def weighted(out: Tensor, seed: int) -> Tensor:
    """Random linear functional of `out`, so no output gradient is trivially uniform."""
    w = np.random.default_rng([seed, 99]).uniform(-1, 1, size=out.shape)
    return (out * Tensor(w)).sum()


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (3, 4)]),
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)]),
    "scalar_div": (lambda a: a / 3.0, [(2, 5)]),
    "neg": (lambda a: -a, [(4,)]),
    "abs": (lambda a: a.abs(), [(3, 4)]),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "transpose": (lambda a: a.T, [(3, 4)]),
    "sum_axis0": (lambda a: a.sum(axis=0), [(3, 4)]),
    "sum_axis1_keepdims": (lambda a: a.sum(axis=1, keepdims=True), [(3, 4)]),
    "getitem": (lambda a: a[1:3], [(4, 3)]),
    "reshape": (lambda a: a.reshape(2, 6), [(3, 4)]),
    "softmax": (lambda a: F.softmax(a, axis=-1), [(3, 5)]),
    "softmax_axis0": (lambda a: F.softmax(a, axis=0), [(3, 5)]),
    "layer_norm": (lambda x, g, b: F.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "gelu": (lambda a: F.gelu(a), [(3, 4)]),
    "concat": (lambda a, b: F.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "linear": (lambda x, w, b: F.linear(x, w, b), [(3, 4), (4, 2), (2,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    op, shapes = OPS[name]
    for seed in range(INSTANCES):
        rng = np.random.default_rng([seed, len(name)])
        arrays = [away_from_zero(rng, s) for s in shapes]
        check_grads(lambda *ts: weighted(op(*ts), seed), arrays)


def test_embedding_gradient_matches_finite_differences():
    for seed in range(INSTANCES):
        rng = np.random.default_rng(seed)
        ids = rng.integers(0, 5, size=4)
        check_grads(lambda table: weighted(F.embedding(table, ids), seed), [rng.uniform(-1, 1, size=(5, 3))])


def test_cross_entropy_gradient_matches_finite_differences():
    for seed in range(INSTANCES):
        rng = np.random.default_rng(seed)
        targets = rng.integers(0, 5, size=4)
        mask = np.array([True, False, True, True])
        check_grads(lambda logits: F.cross_entropy(logits, targets, mask), [rng.uniform(-1, 1, size=(4, 5))])


def test_l1_loss_gradient_matches_finite_differences():
    for seed in range(INSTANCES):
        rng = np.random.default_rng(seed)
        mask = np.array([True, True, False])
        pred = rng.uniform(-1, 1, size=(3, 4))
        check_grads(lambda p, t: F.l1_loss(p, t, mask), [pred, pred + away_from_zero(rng, (3, 4))])


def test_composite_attention_gradient():
    def attention(q, k, v):
        scores = F.softmax((q @ k.T) * 0.5, axis=-1)
        return weighted(F.layer_norm(scores @ v + q, Tensor(np.ones(4)), Tensor(np.zeros(4))), 7)

    for seed in range(INSTANCES):
        rng = np.random.default_rng(seed)
        check_grads(attention, [rng.uniform(-1, 1, size=(3, 4)), rng.uniform(-1, 1, size=(5, 4)),
                                rng.uniform(-1, 1, size=(5, 4))])


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_sum_of_squares():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0, -6.0])


def test_shared_leaf_accumulates_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 2.0 + x).sum().backward()
    np.testing.assert_allclose(x.grad, [3.0, 3.0])


def test_backward_on_non_scalar_raises():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert y.is_leaf


def test_float32_is_default_and_float64_is_kept():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
