import numpy as np
import pytest

from gsavatar import autodiff as ad


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def check_grads(build, inputs, tol=1e-3, eps=1e-4):
    """Compare tape gradients against central finite differences (float64)."""

    def scalar_fn(*arrays):
        tape = ad.Tape(dtype=np.float64)
        vs = [tape.var(x) for x in arrays]
        return build(tape, *vs).value

    tape = ad.Tape(dtype=np.float64)
    vs = [tape.var(np.asarray(x, np.float64)) for x in inputs]
    loss = build(tape, *vs)
    grads = ad.backward(loss)
    fd = ad.finite_difference(scalar_fn, inputs, eps=eps)
    for v, g_fd in zip(vs, fd):
        assert rel_err(grads.wrt(v), g_fd) < tol


def test_sigmoid_derivative_at_zero():
    tape = ad.Tape(dtype=np.float64)
    x = tape.var(np.zeros(()))
    y = ad.sigmoid(x)
    g = ad.backward(y).wrt(x)
    assert abs(g - 0.25) < 1e-12


def test_quaternion_to_matrix_identity():
    tape = ad.Tape(dtype=np.float64)
    q = tape.var(np.array([1.0, 0.0, 0.0, 0.0]))
    m = ad.quaternion_to_matrix(q)
    assert np.allclose(m.value, np.eye(3))


def test_sum_gradient_is_ones():
    tape = ad.Tape()
    x = tape.var(np.array([1.0, 2.0, 3.0]))
    loss = ad.sum_(x)
    g = ad.backward(loss).wrt(x)
    assert np.array_equal(g, np.ones(3, dtype=np.float32))


def test_disconnected_graph_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.var(np.array([1.0, 2.0]))
    y = tape.var(np.array([3.0, 4.0]))
    _unused = ad.sum_(y * y)
    loss = ad.sum_(x)
    g = ad.backward(loss).wrt(y)
    assert np.array_equal(g, np.zeros(2, dtype=np.float32))


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    x = tape.var(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.backward(x)


def test_shape_mismatch_error_names_shapes():
    tape = ad.Tape()
    a = tape.var(np.ones((2, 3)))
    b = tape.var(np.ones((4, 5)))
    with pytest.raises(ad.ShapeError, match=r"add.*\(2, 3\).*\(4, 5\)"):
        ad.add(a, b)
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(a, b)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    b = rng.normal(size=(4, 4))
    check_grads(lambda t, x, y: ad.sum_(ad.matmul(x, y)), [a, b], tol=1e-5)


def test_chained_sigmoid_matmul_vs_finite_differences():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=(3, 3))
    check_grads(lambda t, x, y: ad.sum_(ad.sigmoid(ad.matmul(x, y))), [a, b], tol=1e-4)


def test_backward_is_deterministic():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(5, 5)).astype(np.float32)

    def run():
        tape = ad.Tape()
        x = tape.var(a)
        loss = ad.sum_(ad.sigmoid(ad.matmul(x, x)) * x)
        return ad.backward(loss).wrt(x)

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


PRIMITIVE_CASES = {
    "add": lambda t, x, y: ad.sum_(ad.add(x, y) * ad.add(x, y)),
    "sub": lambda t, x, y: ad.sum_(ad.sub(x, y) * x),
    "mul": lambda t, x, y: ad.sum_(ad.mul(x, y)),
    "div": lambda t, x, y: ad.sum_(ad.div(x, y)),
    "matmul": lambda t, x, y: ad.sum_(ad.sigmoid(ad.matmul(x, y))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_binary_primitives_fd(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 3))
    y = rng.normal(size=(3, 3)) + (3.0 if name == "div" else 0.0)
    check_grads(PRIMITIVE_CASES[name], [x, y])


UNARY_CASES = {
    "exp": (ad.exp, lambda r: r.normal(size=(4,))),
    "log": (ad.log, lambda r: r.uniform(0.5, 2.0, size=(4,))),
    "sqrt": (ad.sqrt, lambda r: r.uniform(0.5, 2.0, size=(4,))),
    "sigmoid": (ad.sigmoid, lambda r: r.normal(size=(4,))),
    "tanh": (ad.tanh, lambda r: r.normal(size=(4,))),
    "abs": (ad.absolute, lambda r: r.normal(size=(4,)) + 2.0),
    "softmax": (ad.softmax, lambda r: r.normal(size=(3, 4))),
    "normalize_rows": (ad.normalize_rows, lambda r: r.normal(size=(3, 4)) + 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_unary_primitives_fd(name, seed):
    op, sampler = UNARY_CASES[name]
    rng = np.random.default_rng(100 + seed)
    x = sampler(rng)
    check_grads(lambda t, v: ad.sum_(op(v) * op(v)), [x])


@pytest.mark.parametrize("seed", range(5))
def test_broadcasting_mul_fd(seed):
    rng = np.random.default_rng(200 + seed)
    x = rng.normal(size=(4, 1, 3))
    y = rng.normal(size=(2, 3))
    check_grads(lambda t, a, b: ad.sum_(ad.mul(a, b)), [x, y])


@pytest.mark.parametrize("seed", range(5))
def test_batched_matmul_broadcast_fd(seed):
    rng = np.random.default_rng(300 + seed)
    x = rng.normal(size=(5, 3, 3))
    y = rng.normal(size=(3, 3))
    check_grads(lambda t, a, b: ad.sum_(ad.matmul(a, b) * ad.matmul(a, b)), [x, y])


@pytest.mark.parametrize("seed", range(5))
def test_quaternion_to_matrix_fd(seed):
    rng = np.random.default_rng(400 + seed)
    q = rng.normal(size=(3, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)

    def build(t, v):
        m = ad.quaternion_to_matrix(ad.normalize_rows(v))
        w = t.const(np.arange(27, dtype=np.float64).reshape(3, 3, 3))
        return ad.sum_(m * w)

    check_grads(build, [q])


@pytest.mark.parametrize("seed", range(5))
def test_quat_multiply_fd(seed):
    rng = np.random.default_rng(500 + seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    check_grads(lambda t, x, y: ad.sum_(ad.quat_multiply(x, y) * x), [a, b])


@pytest.mark.parametrize("seed", range(5))
def test_quat_exp_fd(seed):
    rng = np.random.default_rng(600 + seed)
    v = rng.normal(size=(3, 3)) * 0.8

    def build(t, x):
        q = ad.quat_exp(x)
        w = t.const(np.arange(12, dtype=np.float64).reshape(3, 4))
        return ad.sum_(q * w)

    check_grads(build, [v])


def test_quat_exp_near_zero_branch():
    v = np.full((1, 3), 1e-7)

    def build(t, x):
        return ad.sum_(ad.quat_exp(x) * t.const(np.array([[1.0, 2.0, 3.0, 4.0]])))

    check_grads(build, [v], tol=1e-3, eps=1e-6)
    tape = ad.Tape(dtype=np.float64)
    q = ad.quat_exp(tape.var(np.zeros((1, 3))))
    assert np.array_equal(q.value, np.array([[1.0, 0.0, 0.0, 0.0]]))


@pytest.mark.parametrize("seed", range(3))
def test_gather_getitem_concat_fd(seed):
    rng = np.random.default_rng(700 + seed)
    x = rng.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4])

    def build(t, v):
        g = ad.gather(v, idx, axis=0)
        s = v[1:3, :2]
        joined = ad.concat([ad.reshape(g, (-1,)), ad.reshape(s, (-1,))], axis=0)
        return ad.sum_(joined * joined)

    check_grads(build, [x])


@pytest.mark.parametrize("seed", range(3))
def test_index_add_fd(seed):
    rng = np.random.default_rng(800 + seed)
    base = rng.normal(size=(5, 3))
    upd = rng.normal(size=(3, 3))
    idx = np.array([0, 2, 2])

    def build(t, b, u):
        out = ad.index_add(b, idx, u)
        return ad.sum_(out * out)

    check_grads(build, [base, upd])


@pytest.mark.parametrize("seed", range(3))
def test_unfold3x3_fd(seed):
    rng = np.random.default_rng(900 + seed)
    x = rng.normal(size=(4, 5, 2))
    w = rng.normal(size=(4, 5, 18))

    def build(t, v):
        u = ad.unfold3x3(v)
        return ad.sum_(u * t.const(w))

    check_grads(build, [x])


@pytest.mark.parametrize("seed", range(3))
def test_reductions_and_reshape_fd(seed):
    rng = np.random.default_rng(1000 + seed)
    x = rng.normal(size=(4, 6))

    def build(t, v):
        m = ad.mean(v, axis=1)
        s = ad.sum_(v, axis=0, keepdims=True)
        return ad.sum_(m * m) + ad.sum_(ad.transpose(s) * 0.5)

    check_grads(build, [x])
