import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amcrobust import autodiff as ad


# ---------------------------------------------------------------------------
# independent oracle: central finite differences on the forward pass only


def fd_grads(f, arrays, h=1e-3):
    """Central finite differences of scalar f(*arrays) w.r.t. each array."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (f(*plus) - f(*minus)) / (2 * h)
        grads.append(g)
    return grads


def assert_close_grads(got, want, rel=1e-4, floor=1e-6):
    for g, w in zip(got, want):
        err = np.abs(g - w)
        tol = np.maximum(rel * np.abs(w), floor)
        assert np.all(err <= tol), f"max err {err.max()} vs tol {tol[err.argmax() // 1]}"


def run_fd_check(build, arrays, rel=1e-4):
    """build(tensors) -> scalar Tensor; checks reverse-mode grads against FD."""

    def forward_value(*arrs):
        ts = [ad.tensor(a, dtype=np.float64) for a in arrs]
        return float(build(*ts).data)

    ts = [ad.tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build(*ts)
    ad.backward(loss)
    got = [t.grad for t in ts]
    want = fd_grads(forward_value, [np.asarray(a, dtype=np.float64) for a in arrays])
    assert_close_grads(got, want, rel=rel)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    b = rng(1).uniform(-2, 2, (3, 4))
    out = ad.matmul(ad.tensor(np.eye(3)), ad.tensor(b))
    np.testing.assert_allclose(out.data, b, rtol=1e-6)


def test_matmul_zeros_grad():
    a = ad.tensor(rng(2).uniform(-2, 2, (3, 3)), requires_grad=True)
    z = ad.tensor(np.zeros((3, 2)))
    out = ad.matmul(a, z)
    assert np.all(out.data == 0)
    ad.backward(ad.tsum(out))
    assert np.all(a.grad == 0)


def test_matmul_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((4, 2))))


def test_matmul_fd():
    r = rng(3)
    run_fd_check(
        lambda a, b: ad.tsum(ad.mul(x := ad.matmul(a, b), x)),
        [r.uniform(-2, 2, (4, 5)), r.uniform(-2, 2, (5, 3))],
    )


def test_matmul_stacked_fd():
    r = rng(4)
    run_fd_check(
        lambda a, b: ad.tsum(ad.matmul(a, b)),
        [r.uniform(-2, 2, (2, 3, 4)), r.uniform(-2, 2, (2, 4, 2))],
    )


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetry():
    out = ad.softmax(ad.tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-7)


def test_softmax_analytic():
    out = ad.softmax(ad.tensor([math.log(2.0), 0.0], dtype=np.float64))
    np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-9)


def test_softmax_fd():
    x = rng(5).uniform(-2, 2, 5)
    w = rng(6).uniform(-1, 1, 5)  # random projection -> scalar
    run_fd_check(lambda t: ad.tsum(ad.mul(ad.softmax(t), ad.tensor(w, dtype=np.float64))), [x])
    s = ad.softmax(ad.tensor(x)).data
    assert abs(s.sum() - 1.0) < 1e-6


def test_softmax_extreme_stability():
    for scale in (1e2, 1e4):
        x = ad.tensor(rng(7).uniform(-scale, scale, (6, 8)))
        s = ad.softmax(x, axis=-1)
        assert np.all(np.isfinite(s.data))
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(s.data >= 0)


# ---------------------------------------------------------------------------
# layer_norm


def test_layer_norm_constant_row():
    x = ad.tensor(np.full((1, 8), 3.7))
    g = ad.tensor(np.ones(8))
    b = ad.tensor(np.zeros(8))
    out = ad.layer_norm(x, g, b)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-5)


def test_layer_norm_already_normalized():
    x = ad.tensor(np.array([[1.0, -1.0]]), dtype=np.float64)
    out = ad.layer_norm(x, ad.tensor(np.ones(2), dtype=np.float64), ad.tensor(np.zeros(2), dtype=np.float64))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-2)  # eps skews slightly


def test_layer_norm_fd():
    r = rng(8)
    run_fd_check(
        lambda x, g, b: ad.tsum(ad.mul(y := ad.layer_norm(x, g, b), y)),
        [r.uniform(-2, 2, (3, 6)), r.uniform(0.5, 1.5, 6), r.uniform(-0.5, 0.5, 6)],
    )


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform():
    out = ad.cross_entropy(ad.tensor(np.zeros(11)), 4)
    assert abs(float(out.data) - math.log(11)) < 1e-6


def test_cross_entropy_saturated():
    logits = np.zeros(11)
    logits[3] = 40.0
    out = ad.cross_entropy(ad.tensor(logits), 3)
    assert float(out.data) < 1e-6


def test_cross_entropy_matches_explicit_softmax_log():
    x = rng(9).uniform(-2, 2, 7)
    got = float(ad.cross_entropy(ad.tensor(x, dtype=np.float64), 2).data)
    probs = np.exp(x) / np.exp(x).sum()
    assert abs(got - (-np.log(probs[2]))) < 1e-10


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(ad.tensor(np.zeros(4)), 4)


def test_cross_entropy_fd():
    x = rng(10).uniform(-2, 2, 6)
    run_fd_check(lambda t: ad.cross_entropy(t, 3), [x])


def test_cross_entropy_batch_mean():
    lg = rng(11).uniform(-2, 2, (4, 5))
    labels = np.array([0, 2, 4, 1])
    per = [float(ad.cross_entropy(ad.tensor(lg[i], dtype=np.float64), labels[i]).data) for i in range(4)]
    batch = float(ad.cross_entropy(ad.tensor(lg, dtype=np.float64), labels).data)
    assert abs(batch - np.mean(per)) < 1e-10


# ---------------------------------------------------------------------------
# KL divergence


def simplex(r, k):
    p = r.uniform(0.05, 1.0, k)
    return p / p.sum()


def test_kl_identity():
    p = simplex(rng(12), 6)
    out = ad.kl_divergence(ad.tensor(p, dtype=np.float64), ad.tensor(p, dtype=np.float64))
    assert abs(float(out.data)) < 1e-9


def test_kl_hand_value():
    out = ad.kl_divergence(
        ad.tensor([0.5, 0.5], dtype=np.float64), ad.tensor([0.9, 0.1], dtype=np.float64)
    )
    want = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert abs(float(out.data) - want) < 1e-9
    assert abs(want - 0.5108) < 5e-4


def test_kl_nonnegative_random_pairs():
    r = rng(13)
    for _ in range(100):
        k = int(r.integers(2, 9))
        p, q = simplex(r, k), simplex(r, k)
        val = float(ad.kl_divergence(ad.tensor(p, dtype=np.float64), ad.tensor(q, dtype=np.float64)).data)
        assert val >= -1e-12


def test_kl_rejects_unnormalized():
    with pytest.raises(ad.ContractError):
        ad.kl_divergence(ad.tensor([0.5, 0.6]), ad.tensor([0.5, 0.5]))
    with pytest.raises(ad.ContractError):
        ad.kl_divergence(ad.tensor([0.5, 0.5]), ad.tensor([-0.1, 1.1]))


def test_kl_fd():
    r = rng(14)
    p, q = simplex(r, 5), simplex(r, 5)
    # perturb off-simplex: disable validation so FD probes are legal
    run_fd_check(
        lambda a, b: ad.kl_divergence(a, b, validate=False), [p, q], rel=2e-4
    )


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=30, deadline=None)
def test_kl_gibbs_property(seed):
    r = np.random.default_rng(seed)
    k = int(r.integers(2, 12))
    p, q = simplex(r, k), simplex(r, k)
    val = float(ad.kl_divergence(ad.tensor(p, dtype=np.float64), ad.tensor(q, dtype=np.float64)).data)
    assert val >= -1e-12


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_sum_gives_ones():
    x = ad.tensor(rng(15).uniform(-2, 2, (3, 4)), requires_grad=True)
    ad.backward(ad.tsum(x))
    np.testing.assert_allclose(x.grad, 1.0)


def test_backward_dot_gives_2x():
    v = rng(16).uniform(-2, 2, 5)
    x = ad.tensor(v, requires_grad=True, dtype=np.float64)
    loss = ad.tsum(ad.mul(x, x))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * v, rtol=1e-12)


def test_backward_requires_scalar():
    x = ad.tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ad.ContractError):
        ad.backward(ad.mul(x, x))


def test_backward_accumulates_without_zeroing():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    loss = ad.tsum(x)
    ad.backward(loss)
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0)


def test_backward_mlp_fd():
    r = rng(17)

    def mlp(x, w1, b1, w2):
        h = ad.gelu(ad.add_bias(ad.matmul(x, w1), b1))
        out = ad.matmul(h, w2)
        return ad.cross_entropy(ad.reshape(out, (out.shape[0], out.shape[1])), np.array([1, 0, 2]))

    run_fd_check(
        mlp,
        [r.uniform(-2, 2, (3, 4)), r.uniform(-1, 1, (4, 6)), r.uniform(-0.5, 0.5, 6), r.uniform(-1, 1, (6, 3))],
        rel=1e-3,
    )


def test_trace_reverse_construction_order():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    y = ad.mul(x, x)
    z = ad.tsum(y)
    g = ad.trace(z)
    seqs = [n.seq for n in g.nodes]
    assert seqs == sorted(seqs, reverse=True)
    assert g.nodes[0].tensor is z
    assert g.nodes[-1].tensor is x


def test_forward_bit_determinism():
    r = rng(18)
    a, b = r.uniform(-2, 2, (8, 8)).astype(np.float32), r.uniform(-2, 2, (8, 8)).astype(np.float32)

    def run():
        t = ad.softmax(ad.matmul(ad.tensor(a), ad.tensor(b)), axis=-1)
        return ad.layer_norm(t, ad.tensor(np.ones(8)), ad.tensor(np.zeros(8))).data.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# remaining differentiable ops, one FD check each


OP_CASES = {
    "add": (lambda a, b: ad.tsum(ad.mul(s := ad.add(a, b), s)), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: ad.tsum(ad.mul(s := ad.sub(a, b), s)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.tsum(ad.mul(a, b)), [(2, 5), (2, 5)]),
    "scale": (lambda a: ad.tsum(ad.scale(a, -2.5)), [(4,)]),
    "shift": (lambda a: ad.tsum(ad.mul(s := ad.shift(a, 1.5), s)), [(4,)]),
    "add_bias": (lambda x, b: ad.tsum(ad.mul(s := ad.add_bias(x, b), s)), [(3, 2, 4), (4,)]),
    "reshape": (lambda a: ad.tsum(ad.mul(s := ad.reshape(a, (6, 2)), s)), [(3, 4)]),
    "transpose": (lambda a: ad.tsum(ad.mul(s := ad.transpose(a, (1, 0, 2)), s)), [(2, 3, 4)]),
    "concat": (lambda a, b: ad.tsum(ad.mul(s := ad.concat([a, b], axis=1), s)), [(2, 3), (2, 2)]),
    "narrow": (lambda a: ad.tsum(ad.mul(s := ad.narrow(a, 1, 1, 2), s)), [(3, 4)]),
    "repeat_leading": (lambda a: ad.tsum(ad.mul(s := ad.repeat_leading(a, 3), s)), [(2, 4)]),
    "extract_patches": (
        lambda a: ad.tsum(ad.mul(s := ad.extract_patches(a, 3, 2), s)),
        [(2, 2, 9)],
    ),
    "gelu": (lambda a: ad.tsum(ad.gelu(a)), [(3, 5)]),
    "sqrt": (lambda a: ad.tsum(ad.sqrt(a)), [(6,)]),
    "sum_axis": (lambda a: ad.tsum(ad.mul(s := ad.tsum(a, axis=1), s)), [(3, 4)]),
    "mean": (lambda a: ad.tmean(ad.mul(a, a)), [(3, 4)]),
    "layer_norm_x": (
        lambda x, g, b: ad.tsum(ad.gelu(ad.layer_norm(x, g, b))),
        [(4, 5), (5,), (5,)],
    ),
    "softmax_axis0": (lambda a: ad.tsum(ad.mul(s := ad.softmax(a, axis=0), s)), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_fd(name):
    build, shapes = OP_CASES[name]
    r = rng(hash(name) % 2**32)
    arrays = [r.uniform(0.3 if name == "sqrt" else -2, 2, s) for s in shapes]
    run_fd_check(build, arrays)
