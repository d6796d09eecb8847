import math

import numpy as np
import pytest

from crossseq import autodiff as ad
from crossseq.autodiff import (
    InvalidMaskError,
    ShapeError,
    Tensor,
    ValidationError,
    clip_min,
    concat,
    dropout,
    gather_rows,
    grad_reverse,
    gradient_check,
    kl_categorical,
    kl_diag_gaussian_to_std,
    layer_norm,
    log_softmax,
    masked_softmax,
    matmul,
    multiply,
    narrow,
    parameter,
    prefix_mean,
    reduce_mean,
    reduce_sum,
    relu,
    reparameterize,
    reshape,
    select_positions,
    sigmoid,
    stop_gradient,
    swish,
    transpose,
)


def test_matmul_identity():
    x = np.array([[1.5, -2.0], [0.25, 3.0]])
    out = matmul(Tensor(np.eye(2)), Tensor(x))
    np.testing.assert_array_equal(out.values, x)


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_allclose(out.values, [[3.0], [7.0]])


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((3, 4))
    a = parameter(rng.standard_normal((2, 3)))
    err = gradient_check(lambda t: reduce_sum(matmul(t, Tensor(b))), a)
    assert err < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_masked_softmax_symmetry():
    for c in (-3.0, 0.0, 7.5):
        p = masked_softmax(Tensor([c, c, c]), np.array([1, 1, 1]))
        np.testing.assert_allclose(p.values, [1 / 3, 1 / 3, 1 / 3])


def test_masked_softmax_two_entries():
    p = masked_softmax(Tensor([1.0, 2.0]), np.array([1, 1]))
    np.testing.assert_allclose(p.values, [0.26894, 0.73106], atol=5e-6)


def test_masked_softmax_masked_entry_exact_zero():
    p = masked_softmax(Tensor([5.0, 9.0, 2.0]), np.array([1, 0, 1]))
    expected = 1.0 / (1.0 + math.exp(-3.0))  # two-entry softmax, sigma(5-2)
    assert p.values[1] == 0.0
    np.testing.assert_allclose(p.values[0], expected, atol=5e-6)
    np.testing.assert_allclose(p.values[0], 0.95257, atol=5e-6)
    np.testing.assert_allclose(p.values.sum(), 1.0, atol=1e-12)


def test_masked_softmax_all_zero_mask_rejected():
    with pytest.raises(InvalidMaskError):
        masked_softmax(Tensor([1.0, 2.0]), np.array([0, 0]))


def test_masked_softmax_zero_gradient_at_masked_scores():
    s = parameter([5.0, 9.0, 2.0])
    p = masked_softmax(s, np.array([1, 0, 1]))
    reduce_sum(multiply(p, np.array([1.0, 3.0, -2.0]))).backward()
    assert s.grad[1] == 0.0
    assert s.grad[0] != 0.0


def test_swish_values():
    assert swish(Tensor(0.0)).item() == 0.0
    np.testing.assert_allclose(swish(Tensor(1.0)).item(), 0.7310586, atol=1e-7)
    assert abs(swish(Tensor(20.0)).item() - 20.0) < 1e-6


def test_grad_reverse_forward_identity_backward_negation():
    x = parameter([1.0, -2.0, 3.0])
    y = grad_reverse(x, 1.0)
    np.testing.assert_array_equal(y.values, x.values)
    upstream = np.array([0.5, 1.5, -1.0])
    reduce_sum(multiply(y, upstream)).backward()
    np.testing.assert_array_equal(x.grad, -upstream)


def test_grad_reverse_lambda_zero():
    x = parameter([1.0, 2.0])
    reduce_sum(grad_reverse(x, 0.0)).backward()
    np.testing.assert_array_equal(x.grad, np.zeros(2))


def test_stop_gradient_contracts():
    x = parameter([1.0, 2.0, 3.0])
    y = stop_gradient(x)
    np.testing.assert_array_equal(y.values, x.values)

    out = reduce_sum(stop_gradient(x))
    assert not out.requires_grad

    z = reduce_sum(x + stop_gradient(x))
    z.backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_kl_categorical_oracles():
    assert kl_categorical(Tensor([0.3, 0.7]), Tensor([0.3, 0.7])).item() == 0.0
    got = kl_categorical(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item()
    np.testing.assert_allclose(got, 0.14384, atol=5e-6)
    got = kl_categorical(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).item()
    np.testing.assert_allclose(got, math.log(2.0), atol=1e-9)


def test_kl_categorical_validation():
    with pytest.raises(ValidationError):
        kl_categorical(Tensor([0.5, 0.6]), Tensor([0.5, 0.5]))
    with pytest.raises(ValidationError):
        kl_categorical(Tensor([1.2, -0.2]), Tensor([0.5, 0.5]))


def test_kl_diag_gaussian_oracles():
    assert kl_diag_gaussian_to_std(Tensor([0.0]), Tensor([0.0])).item() == 0.0
    np.testing.assert_allclose(
        kl_diag_gaussian_to_std(Tensor([1.0]), Tensor([0.0])).item(), 0.5
    )
    got = kl_diag_gaussian_to_std(Tensor([0.0]), Tensor([math.log(4.0)])).item()
    np.testing.assert_allclose(got, 0.5 * (4.0 - 1.0 - math.log(4.0)), atol=1e-12)
    np.testing.assert_allclose(got, 0.80685, atol=5e-6)


def test_reparameterize_eps_hook_and_moments():
    mu = Tensor([1.0, -1.0])
    lv = Tensor([0.3, -0.4])
    z = reparameterize(mu, lv, eps=np.zeros(2))
    np.testing.assert_array_equal(z.values, mu.values)

    rng = np.random.default_rng(7)
    draws = reparameterize(Tensor(np.ones(100_000)), Tensor(np.zeros(100_000)), rng=rng)
    assert abs(draws.values.mean() - 1.0) < 0.02

    rng = np.random.default_rng(8)
    draws = reparameterize(
        Tensor(np.zeros(100_000)), Tensor(np.full(100_000, math.log(4.0))), rng=rng
    )
    assert abs(draws.values.var() - 4.0) < 0.1


def test_reparameterize_gradient_does_not_reach_eps():
    mu = parameter([0.5, 0.5])
    lv = parameter([0.1, 0.2])
    eps = np.array([0.3, -0.7])
    reduce_sum(reparameterize(mu, lv, eps=eps)).backward()
    np.testing.assert_array_equal(mu.grad, np.ones(2))
    np.testing.assert_allclose(lv.grad, 0.5 * np.exp(0.5 * lv.values) * eps)


def test_gradient_check_analytic_quadratic():
    x = parameter([1.0, 2.0, 3.0])
    err = gradient_check(lambda t: reduce_sum(multiply(t, t)), x)
    assert err < 1e-7
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_gradient_check_chained_ops():
    rng = np.random.default_rng(3)
    gain = Tensor(rng.standard_normal(6))
    bias = Tensor(rng.standard_normal(6))
    mask = np.array([1, 1, 0, 1, 1, 1])

    def f(t):
        y = layer_norm(swish(t), gain, bias)
        return reduce_sum(multiply(masked_softmax(y, mask), np.arange(6.0)))

    x = parameter(rng.standard_normal(6))
    assert gradient_check(f, x) < 1e-4


def test_gradient_check_constant_function():
    x = parameter([1.0, 2.0])
    assert gradient_check(lambda t: Tensor(3.14), x) == 0.0


def test_dropout_identity_cases():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert dropout(x, 0.0, train=True) is x
    assert dropout(x, 0.5, train=False) is x


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((400, 50)))
    out = dropout(x, 0.25, rng=rng, train=True)
    kept = out.values != 0.0
    np.testing.assert_allclose(out.values[kept], 1.0 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.01


def test_layer_norm_normalizes_last_axis():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 8)))
    out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_allclose(out.values.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.values.std(axis=-1), 1.0, atol=1e-6)


def test_gather_rows_scatter_add_backward():
    table = parameter(np.arange(12.0).reshape(4, 3))
    ids = np.array([0, 2, 2])
    out = gather_rows(table, ids)
    reduce_sum(out).backward()
    expected = np.zeros((4, 3))
    expected[0] = 1.0
    expected[2] = 2.0
    np.testing.assert_array_equal(table.grad, expected)


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        gather_rows(Tensor(np.ones((3, 2))), np.array([3]))


def test_select_positions_roundtrip():
    x = parameter(np.arange(24.0).reshape(2, 3, 4))
    idx = (np.array([0, 1, 1]), np.array([2, 0, 0]))
    out = select_positions(x, idx)
    assert out.shape == (3, 4)
    reduce_sum(out).backward()
    assert x.grad[1, 0, 0] == 2.0  # repeated index accumulates
    assert x.grad[0, 2, 0] == 1.0
    assert x.grad[0, 0, 0] == 0.0


def test_no_grad_context():
    x = parameter([1.0, 2.0])
    with ad.no_grad():
        y = reduce_sum(multiply(x, x))
    assert not y.requires_grad


def test_debug_checks_flag():
    ad.set_debug_checks(True)
    try:
        with np.errstate(invalid="ignore"):
            with pytest.raises(ad.NumericsError):
                ad.log(Tensor([-1.0]))
    finally:
        ad.set_debug_checks(False)


def test_backward_requires_scalar_or_grad():
    x = parameter(np.ones((2, 2)))
    y = multiply(x, 2.0)
    with pytest.raises(ShapeError):
        y.backward()
    y.backward(np.ones((2, 2)))
    np.testing.assert_array_equal(x.grad, 2.0 * np.ones((2, 2)))


def test_prefix_mean_forward_and_grad():
    x = parameter(np.array([[[1.0], [2.0], [3.0]]]))
    valid = np.array([[1, 1, 1]])
    out = prefix_mean(x, valid)
    np.testing.assert_allclose(out.values[0, :, 0], [1.0, 1.5, 2.0])
    err = gradient_check(
        lambda t: reduce_sum(multiply(prefix_mean(t, valid), np.array([[[1.0], [2.0], [0.5]]]))),
        x,
    )
    assert err < 1e-6


# --- invariant: every differentiable op passes a finite-difference check on
# --- randomized small shapes (grad_reverse / stop_gradient excluded: their
# --- backward is deliberately not the forward's derivative).

def _random_shape(rng):
    return tuple(int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 3))))


OP_CASES = {
    "add": lambda t, aux: ad.add(t, aux),
    "mul": lambda t, aux: multiply(t, aux),
    "relu": lambda t, aux: relu(ad.add(t, 0.05)),  # keep away from the kink
    "sigmoid": lambda t, aux: sigmoid(t),
    "swish": lambda t, aux: swish(t),
    "exp": lambda t, aux: ad.exp(t),
    "log": lambda t, aux: ad.log(ad.add(multiply(t, t), 0.5)),
    "sum": lambda t, aux: reduce_sum(t),
    "mean": lambda t, aux: multiply(reduce_mean(t), 3.0),
    "log_softmax": lambda t, aux: reduce_sum(multiply(log_softmax(ad.reshape(t, (t.size,))), aux.reshape(-1))),
    "reshape": lambda t, aux: reduce_sum(multiply(reshape(t, (t.size,)), aux.reshape(-1))),
    "concat": lambda t, aux: reduce_sum(multiply(concat([t, Tensor(aux)], axis=0), 1.5)),
    "clip_min": lambda t, aux: reduce_sum(clip_min(multiply(t, 3.0), 0.4)),
}


@pytest.mark.parametrize("opname", sorted(OP_CASES))
def test_randomized_gradient_checks(opname):
    fn = OP_CASES[opname]
    rng = np.random.default_rng(abs(hash(opname)) % 2**32)
    for _ in range(100):
        shape = _random_shape(rng)
        aux = rng.standard_normal(shape)
        x = parameter(rng.standard_normal(shape) + 0.1)

        def scalar(t):
            out = fn(t, aux)
            return out if out.values.size == 1 else reduce_sum(out)

        assert gradient_check(scalar, x, h=1e-6) < 1e-4


def test_randomized_gradient_checks_structured_ops():
    rng = np.random.default_rng(99)
    for _ in range(100):
        t_len, width = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        x = parameter(rng.standard_normal((t_len, width)))
        other = rng.standard_normal((width, t_len))
        gain = Tensor(rng.standard_normal(width))
        bias = Tensor(rng.standard_normal(width))
        mask = rng.integers(0, 2, size=width)
        if mask.sum() == 0:
            mask[int(rng.integers(width))] = 1
        weights = rng.standard_normal((t_len, width))

        def f(t):
            a = matmul(t, Tensor(other))          # (t_len, t_len)
            b = layer_norm(t, gain, bias)
            c = masked_softmax(b, mask)
            d = transpose(a, (1, 0))
            pieces = concat([c, multiply(c, weights)], axis=0)
            e = narrow(pieces, 0, 1, pieces.shape[0] - 1)
            return ad.add(reduce_mean(multiply(e, e)), reduce_mean(d))

        assert gradient_check(f, x, h=1e-6) < 1e-4


def test_kl_nonnegative_on_random_inputs():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        p = rng.random(n) + 1e-3
        q = rng.random(n) + 1e-3
        p, q = p / p.sum(), q / q.sum()
        assert kl_categorical(Tensor(p), Tensor(q)).item() >= 0.0
        mu = rng.standard_normal(n)
        lv = rng.standard_normal(n)
        assert kl_diag_gaussian_to_std(Tensor(mu), Tensor(lv)).item() >= 0.0


def test_default_dtype_switch():
    ad.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).values.dtype == np.float32
    finally:
        ad.set_default_dtype(np.float64)
    assert Tensor([1.0]).values.dtype == np.float64
