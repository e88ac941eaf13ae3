"""Autodiff engine: op anchors, finite-difference oracles for every op kind,
determinism, masking exactness and broadcast rules."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prunelab import autograd as ag
from prunelab.autograd import Graph, ShapeMismatchError, Tensor, OP_KINDS

from gradcheck import autodiff_grads, fd_grad, rel_err

RNG = np.random.default_rng(20240811)


def t(arr, rg=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# forward anchors


def test_matmul_identity():
    a = RNG.uniform(-1, 1, (2, 2))
    out = ag.matmul(t(np.eye(2)), t(a))
    assert np.array_equal(out.data, a)


def test_matmul_hand_expanded():
    out = ag.matmul(t([[1, 2], [3, 4]]), t([[5], [6]]))
    # 1*5+2*6 = 17, 3*5+4*6 = 39
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_softmax_symmetry():
    out = ag.softmax_lastdim(t([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeMismatchError) as e:
        ag.add(t(np.zeros((2, 3))), t(np.zeros((4,))))
    msg = str(e.value)
    assert "add" in msg and "(4,)" in msg and "(2, 3)" in msg


# ---------------------------------------------------------------------------
# backward anchors


def test_sum_gradient_is_ones():
    x = t(RNG.uniform(-1, 1, (3, 4)), rg=True)
    with Graph() as g:
        g.backward(ag.sum_all(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_quadratic_gradient_hand_value():
    # ||Ax - b||^2, A = diag(2, 3), x = [1, 1], b = 0 -> grad 2 A^T A x = [8, 18]
    a = t([[2.0, 0.0], [0.0, 3.0]])
    x = t([1.0, 1.0], rg=True)
    with Graph() as g:
        r = ag.matmul(t([[2.0, 0.0], [0.0, 3.0]]), ag.reshape(x, (2, 1)))
        loss = ag.sum_all(ag.mul(r, r))
        g.backward(loss)
    assert np.allclose(x.grad, [8.0, 18.0], atol=1e-12)


def test_backward_accumulates_across_graphs():
    x = t([1.0, 2.0], rg=True)
    for _ in range(2):
        with Graph() as g:
            g.backward(ag.sum_all(x))
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_nonscalar_root_rejected():
    x = t([1.0, 2.0], rg=True)
    with Graph() as g:
        y = ag.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            g.backward(y)


def test_three_layer_mlp_finite_differences():
    dims = [5, 7, 6, 4]
    ws = [RNG.uniform(-1, 1, (dims[i], dims[i + 1])) for i in range(3)]
    x0 = RNG.uniform(-1, 1, (3, 5))
    target = RNG.uniform(-1, 1, (3, 4))

    def value(arrays):
        h = x0
        for i, w in enumerate(arrays):
            h = h @ w
            if i < 2:
                from scipy.special import erf
                h = 0.5 * h * (1.0 + erf(h / np.sqrt(2.0)))
        return float(np.mean((h - target) ** 2))

    def build(tensors):
        h = t(x0)
        for i, w in enumerate(tensors):
            h = ag.matmul(h, w)
            if i < 2:
                h = ag.gelu(h)
        return ag.mse_loss(h, t(target))

    tensors = [t(w.copy(), rg=True) for w in ws]
    _, grads = autodiff_grads(build, tensors)
    arrays = [w.copy() for w in ws]
    for i in range(3):
        fd = fd_grad(value, arrays, i)
        assert rel_err(grads[i], fd) <= 1e-5


# ---------------------------------------------------------------------------
# finite-difference oracle for every op kind

# each case: (kind, input arrays, build(tensors) -> scalar root)
def _scalarize(x):
    return ag.mean_all(x)


def _op_cases():
    # constants are drawn once here; the lambdas must stay deterministic
    # because the FD oracle re-invokes them per perturbation
    r = np.random.default_rng(7)
    u = lambda *s: r.uniform(-1, 1, s)
    ids = np.array([[1, 0, 2], [2, 2, 1]])
    mask = Tensor((np.arange(16).reshape(4, 4) % 3 == 0).astype(float))
    c_tr, c_rs, c_sl = Tensor(u(3, 2, 4)), Tensor(u(2, 6)), Tensor(u(3, 3))
    c_em, c_sm = Tensor(u(2, 3, 5)), Tensor(u(3, 5))
    c_ln, c_rn = Tensor(u(4, 6)), Tensor(u(4, 6))
    c_ge, c_si = Tensor(u(4, 5)), Tensor(u(4, 5))
    ce_targets = np.array([[1, 4, 0], [2, 2, 3]])
    cases = {
        "matmul": ([u(3, 4), u(4, 2)],
                   lambda ts: _scalarize(ag.matmul(ts[0], ts[1]))),
        "add": ([u(3, 4), u(4)],
                lambda ts: _scalarize(ag.add(ts[0], ts[1]))),
        "sub": ([u(3, 4), u(4)],
                lambda ts: _scalarize(ag.sub(ts[0], ts[1]))),
        "mul": ([u(2, 3, 4), u(3, 4)],
                lambda ts: _scalarize(ag.mul(ts[0], ts[1]))),
        "mask-mul": ([u(4, 4)],
                     lambda ts: _scalarize(ag.mask_mul(ts[0], mask))),
        "transpose": ([u(2, 3, 4)],
                      lambda ts: _scalarize(ag.mul(
                          ag.transpose(ts[0], (1, 0, 2)), c_tr))),
        "reshape": ([u(3, 4)],
                    lambda ts: _scalarize(ag.mul(
                        ag.reshape(ts[0], (2, 6)), c_rs))),
        "slice": ([u(5, 6)],
                  lambda ts: _scalarize(ag.mul(
                      ag.slice_(ts[0], (slice(1, 4), slice(0, 3))), c_sl))),
        "embed-lookup": ([u(4, 5)],
                         lambda ts: _scalarize(ag.mul(
                             ag.embed_lookup(ts[0], ids), c_em))),
        "softmax-lastdim": ([u(3, 5)],
                            lambda ts: _scalarize(ag.mul(
                                ag.softmax_lastdim(ts[0]), c_sm))),
        "layernorm": ([u(4, 6), u(6), u(6)],
                      lambda ts: _scalarize(ag.mul(
                          ag.layernorm(ts[0], ts[1], ts[2]), c_ln))),
        "rmsnorm": ([u(4, 6), u(6)],
                    lambda ts: _scalarize(ag.mul(
                        ag.rmsnorm(ts[0], ts[1]), c_rn))),
        "gelu": ([u(4, 5)],
                 lambda ts: _scalarize(ag.mul(ag.gelu(ts[0]), c_ge))),
        "silu": ([u(4, 5)],
                 lambda ts: _scalarize(ag.mul(ag.silu(ts[0]), c_si))),
        "sum": ([u(3, 4)], lambda ts: ag.sum_all(ts[0])),
        "mean": ([u(3, 4)], lambda ts: ag.mean_all(ts[0])),
        "mse-loss": ([u(3, 4), u(3, 4)],
                     lambda ts: ag.mse_loss(ts[0], ts[1])),
        "cos-loss": ([u(4, 5) + 2.0, u(4, 5) + 2.0],
                     lambda ts: ag.cosine_loss(ts[0], ts[1])),
        "cross-entropy": ([u(2, 3, 5)],
                          lambda ts: ag.cross_entropy(ts[0], ce_targets)),
    }
    return cases


def test_every_op_kind_has_a_case():
    assert set(_op_cases()) == set(OP_KINDS)


@pytest.mark.parametrize("kind", sorted(_op_cases()))
def test_finite_difference_per_op(kind):
    arrays, build = _op_cases()[kind]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    _, grads = autodiff_grads(build, tensors)

    def value(arrs):
        ts = [Tensor(a) for a in arrs]
        return float(build(ts).data)

    work = [a.copy() for a in arrays]
    for i in range(len(arrays)):
        fd = fd_grad(value, work, i)
        assert grads[i] is not None, f"{kind}: missing grad for input {i}"
        err = rel_err(grads[i], fd)
        assert err <= 1e-5, f"{kind}: input {i} rel err {err}"


# ---------------------------------------------------------------------------
# determinism and masking exactness


def test_forward_backward_bit_determinism():
    def run():
        r = np.random.default_rng(11)
        x = Tensor(r.uniform(-1, 1, (4, 6)), requires_grad=True)
        w = Tensor(r.uniform(-1, 1, (6, 6)), requires_grad=True)
        with Graph() as g:
            y = ag.gelu(ag.matmul(x, w))
            y = ag.layernorm(y, Tensor(np.ones(6)), Tensor(np.zeros(6)))
            loss = ag.mse_loss(y, Tensor(r.uniform(-1, 1, (4, 6))))
            g.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_mask_mul_zero_propagation_is_exact():
    r = np.random.default_rng(3)
    w = Tensor(r.uniform(-1, 1, (6, 6)), requires_grad=True)
    mask = (r.uniform(0, 1, (6, 6)) > 0.5).astype(np.float64)
    with Graph() as g:
        y = ag.mask_mul(w, Tensor(mask))
        assert np.all(y.data[mask == 0.0] == 0.0)
        loss = ag.mse_loss(ag.matmul(y, Tensor(r.uniform(-1, 1, (6, 4)))),
                           Tensor(r.uniform(-1, 1, (6, 4))))
        g.backward(loss)
    assert np.all(w.grad[mask == 0.0] == 0.0)
    assert np.any(w.grad[mask == 1.0] != 0.0)


def test_mask_mul_rejects_differentiable_mask():
    w = Tensor(np.ones((2, 2)))
    m = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ag.mask_mul(w, m)


def test_no_graph_means_plain_evaluation():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ag.mul(x, x)
    assert x.grad is None and np.array_equal(y.data, np.ones((2, 2)))


@settings(max_examples=30, deadline=None)
@given(
    lead=st.lists(st.integers(1, 4), min_size=0, max_size=2),
    tail=st.lists(st.integers(1, 4), min_size=1, max_size=2),
    seed=st.integers(0, 2**31 - 1),
)
def test_suffix_broadcast_matches_numpy(lead, tail, seed):
    r = np.random.default_rng(seed)
    a = r.uniform(-1, 1, tuple(lead + tail))
    b = r.uniform(-1, 1, tuple(tail))
    assert np.array_equal(ag.add(Tensor(a), Tensor(b)).data, a + b)
    assert np.array_equal(ag.mul(Tensor(a), Tensor(b)).data, a * b)
    assert np.array_equal(ag.sub(Tensor(a), Tensor(b)).data, a - b)


def test_cosine_loss_zero_norm_counter():
    pred = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]))
    target = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
    out = ag.cosine_loss(pred, target)
    assert out.meta["zero_norm_positions"] == 1
    # degenerate row contributes 1, aligned row contributes 0
    assert np.isclose(float(out.data), 0.5)
