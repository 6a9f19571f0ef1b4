"""Autodiff core: forward semantics and gradient checks against finite differences."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from polyckt import numcore as nc

RNG = np.random.default_rng(20240817)
FD_STEP = 1e-6
FD_RTOL = 1e-5


def fd_grad(fn, x, step=FD_STEP):
    """Central-difference gradient of a scalar fn at array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        fp = fn(x)
        xf[i] = orig - step
        fm = fn(x)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * step)
    return g


def check_grad(build_loss, arrays, rtol=FD_RTOL):
    """Compare tape gradients of a scalar loss against finite differences.

    build_loss receives Tensors (same order as arrays) and returns a scalar
    Tensor; it must be a pure function of its inputs.
    """
    tensors = [nc.Tensor(a.copy()) for a in arrays]
    with nc.Tape() as tape:
        loss = build_loss(*tensors)
    grads = tape.grad(loss, tensors)
    for k, a in enumerate(arrays):
        def scalar_fn(x, k=k):
            args = [arr.copy() for arr in arrays]
            args[k] = x
            ts = [nc.Tensor(arr) for arr in args]
            return build_loss(*ts).item()

        ref = fd_grad(scalar_fn, a.copy())
        got = grads[k].data
        denom = max(np.abs(ref).max(), 1.0)
        assert np.abs(got - ref).max() / denom < rtol, (
            f"gradient mismatch for input {k}: max dev "
            f"{np.abs(got - ref).max():.3e} vs scale {denom:.3e}"
        )


def conv2d_loops(x, w, stride=1, padding=0):
    """Six-nested-loop convolution reference, deliberately naive."""
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    p, s = padding, stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    out = np.zeros((bsz, cout, oh, ow))
    for b in range(bsz):
        for f in range(cout):
            for c in range(cin):
                for i in range(oh):
                    for j in range(ow):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, f, i, j] += (
                                    x if p == 0 else xp
                                )[b, c, i * s + u, j * s + v] * w[f, c, u, v]
    return out


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_matches_loop_reference(stride, padding):
    x = RNG.standard_normal((2, 3, 8, 8))
    w = RNG.standard_normal((4, 3, 3, 3))
    got = nc.conv2d(nc.Tensor(x), nc.Tensor(w), stride=stride, padding=padding).data
    ref = conv2d_loops(x, w, stride=stride, padding=padding)
    assert got.shape == ref.shape
    assert np.abs(got - ref).max() < 1e-12


def test_conv2d_1x1_kernel():
    x = RNG.standard_normal((2, 3, 5, 5))
    w = RNG.standard_normal((6, 3, 1, 1))
    got = nc.conv2d(nc.Tensor(x), nc.Tensor(w)).data
    ref = conv2d_loops(x, w)
    assert np.abs(got - ref).max() < 1e-12


def test_mean_pool_forward():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = nc.mean_pool2d(nc.Tensor(x), 2).data
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)


def test_mean_pool_rejects_indivisible():
    with pytest.raises(nc.ShapeError):
        nc.mean_pool2d(nc.Tensor(np.zeros((1, 1, 5, 4))), 2)


def test_relu_and_gelu_values():
    x = nc.Tensor(np.array([-2.0, 0.0, 1.0, 3.0]))
    assert nc.relu(x).data.tolist() == [0.0, 0.0, 1.0, 3.0]
    g = nc.gelu(x).data
    # Phi(1) from numerical quadrature of the Gaussian pdf, not erf
    phi1 = 0.5 + quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi), 0, 1)[0]
    assert abs(g[2] - 1.0 * phi1) < 1e-12
    assert abs(phi1 - 0.841345) < 5e-7
    assert g[1] == 0.0


def test_elementwise_poly_horner():
    coeffs = [2.0, -1.0, 0.5, 3.0]
    x = RNG.standard_normal((7,))
    got = nc.elementwise_poly(nc.Tensor(x), coeffs).data
    ref = 2.0 - x + 0.5 * x**2 + 3.0 * x**3
    assert np.abs(got - ref).max() < 1e-12


def test_add_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        nc.add(nc.Tensor(np.zeros(3)), nc.Tensor(np.zeros(4)))


def test_matmul_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        nc.matmul(nc.Tensor(np.zeros((2, 3))), nc.Tensor(np.zeros((4, 2))))


def test_non_finite_raises():
    x = nc.Tensor(np.array([1e200]))
    with np.errstate(over="ignore"), pytest.raises(nc.NonFiniteError):
        nc.mul(x, x)


def test_batch_norm_eval_uses_running_stats():
    x = RNG.standard_normal((4, 3, 2, 2))
    gamma = np.ones(3)
    beta = np.zeros(3)
    rm = np.array([1.0, -1.0, 0.5])
    rv = np.array([4.0, 1.0, 2.25])
    out = nc.batch_norm(
        nc.Tensor(x), nc.Tensor(gamma), nc.Tensor(beta), rm, rv, training=False
    ).data
    ref = (x - rm.reshape(1, 3, 1, 1)) / np.sqrt(rv.reshape(1, 3, 1, 1) + 1e-5)
    assert np.abs(out - ref).max() < 1e-12


def test_batch_norm_training_updates_running_stats():
    x = RNG.standard_normal((8, 3, 4, 4)) * 2.0 + 1.0
    rm = np.zeros(3)
    rv = np.ones(3)
    nc.batch_norm(
        nc.Tensor(x), nc.Tensor(np.ones(3)), nc.Tensor(np.zeros(3)),
        rm, rv, training=True, momentum=0.1,
    )
    expect_rm = 0.1 * x.mean(axis=(0, 2, 3))
    expect_rv = 0.9 + 0.1 * x.var(axis=(0, 2, 3))
    assert np.abs(rm - expect_rm).max() < 1e-12
    assert np.abs(rv - expect_rv).max() < 1e-12


def test_cross_entropy_matches_manual():
    logits = RNG.standard_normal((5, 4))
    labels = np.array([0, 3, 1, 2, 2])
    got = nc.cross_entropy(nc.Tensor(logits), labels).item()
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    ref = -np.log(p[np.arange(5), labels]).mean()
    assert abs(got - ref) < 1e-12


# ---------------------------------------------------------------- gradients


def _sum_sq(t):
    flat = nc.reshape(t, (1, t.size))
    return nc.matmul(flat, nc.reshape(t, (t.size, 1)))


def test_grad_matmul_and_add():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((4, 2))
    c = RNG.standard_normal((3, 2))
    check_grad(lambda A, B, C: _sum_sq(nc.add(nc.matmul(A, B), C)), [a, b, c])


def test_grad_conv2d():
    x = RNG.standard_normal((2, 2, 6, 6))
    w = RNG.standard_normal((3, 2, 3, 3))
    check_grad(lambda X, W: _sum_sq(nc.conv2d(X, W, stride=1, padding=1)), [x, w])


def test_grad_conv2d_strided():
    x = RNG.standard_normal((1, 2, 7, 7))
    w = RNG.standard_normal((2, 2, 3, 3))
    check_grad(lambda X, W: _sum_sq(nc.conv2d(X, W, stride=2, padding=0)), [x, w])


def test_grad_mean_pool():
    x = RNG.standard_normal((2, 3, 4, 4))
    check_grad(lambda X: _sum_sq(nc.mean_pool2d(X, 2)), [x])


def test_grad_batch_norm_training():
    x = RNG.standard_normal((6, 2, 3, 3))
    gamma = RNG.standard_normal(2) + 1.5
    beta = RNG.standard_normal(2)

    def loss(X, G, B):
        rm, rv = np.zeros(2), np.ones(2)
        return _sum_sq(nc.batch_norm(X, G, B, rm, rv, training=True))

    check_grad(loss, [x, gamma, beta], rtol=1e-4)


def test_grad_batch_norm_eval():
    x = RNG.standard_normal((4, 2, 3, 3))
    gamma = RNG.standard_normal(2) + 1.0
    beta = RNG.standard_normal(2)
    rm, rv = np.array([0.2, -0.3]), np.array([1.5, 0.8])

    def loss(X, G, B):
        return _sum_sq(nc.batch_norm(X, G, B, rm.copy(), rv.copy(), training=False))

    check_grad(loss, [x, gamma, beta])


def test_grad_relu_away_from_kink():
    x = RNG.standard_normal((4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    check_grad(lambda X: _sum_sq(nc.relu(X)), [x])


def test_relu_subgradient_at_zero_is_zero():
    with nc.Tape() as tape:
        x = nc.Tensor(np.array([0.0, -1.0, 2.0]))
        loss = _sum_sq(nc.add(nc.relu(x), nc.Tensor(np.ones(3))))
    g = tape.grad(loss, [x])[0].data
    assert g[0] == 0.0


def test_grad_gelu():
    x = RNG.standard_normal((3, 7)) * 2.0
    check_grad(lambda X: _sum_sq(nc.gelu(X)), [x])


def test_grad_elementwise_poly():
    x = RNG.standard_normal((4, 4))
    coeffs = RNG.standard_normal(7)
    check_grad(lambda X: _sum_sq(nc.elementwise_poly(X, coeffs)), [x])


def test_grad_cross_entropy():
    logits = RNG.standard_normal((6, 4))
    labels = RNG.integers(0, 4, size=6)
    check_grad(lambda L: nc.cross_entropy(L, labels), [logits])


def test_grad_max_abs_unique_argmax():
    x = RNG.standard_normal((3, 3))
    x[1, 2] = 5.0  # unique maximal magnitude, negative sign below
    check_grad(lambda X: nc.max_abs(X), [x], rtol=1e-4)
    x[1, 2] = -5.0
    check_grad(lambda X: nc.max_abs(X), [x], rtol=1e-4)


def test_max_abs_tie_routes_to_first():
    with nc.Tape() as tape:
        x = nc.Tensor(np.array([2.0, -2.0, 1.0]))
        m = nc.max_abs(x)
    g = tape.grad(m, [x])[0].data
    assert g.tolist() == [1.0, 0.0, 0.0]


def test_grad_scale_mul_maximum_sqrt():
    a = np.abs(RNG.standard_normal((5,))) + 0.5
    b = RNG.standard_normal((5,))

    def loss(A, B):
        s = nc.scale(A, 0.7)
        m = nc.maximum(nc.mul(s, B), nc.sqrt(A))
        return _sum_sq(m)

    check_grad(loss, [a, b], rtol=1e-4)


def test_grad_add_bias():
    x = RNG.standard_normal((3, 4, 2, 2))
    b = RNG.standard_normal(4)
    check_grad(lambda X, B: _sum_sq(nc.add_bias(X, B, axis=1)), [x, b])


def test_grad_randomized_compositions():
    """100 random small compositions of primitives vs finite differences."""
    rng = np.random.default_rng(7)
    for trial in range(100):
        n = int(rng.integers(2, 6))
        x = rng.standard_normal((n, n))
        w = rng.standard_normal((n, n))
        coeffs = rng.standard_normal(int(rng.integers(2, 5)))
        pick = trial % 4

        def loss(X, W):
            h = nc.matmul(X, W)
            if pick == 0:
                h = nc.gelu(h)
            elif pick == 1:
                h = nc.elementwise_poly(h, coeffs)
            elif pick == 2:
                h = nc.relu(nc.add(h, nc.scale(X, -0.3)))
            else:
                h = nc.mul(h, h)
            return _sum_sq(h)

        check_grad(loss, [x, w])


# ---------------------------------------------------------------- tape mechanics


def test_parameter_not_on_tape_errors():
    with nc.Tape() as tape:
        x = nc.Tensor(np.ones(3))
        loss = _sum_sq(x)
    stranger = nc.Tensor(np.ones(3))
    with pytest.raises(nc.TapeError):
        tape.grad(loss, [stranger])


def test_unused_parameter_gets_zero_grad():
    with nc.Tape() as tape:
        x = nc.Tensor(np.ones(3))
        unused = nc.Tensor(np.ones(2))
        tape._register(unused)
        loss = _sum_sq(x)
    g = tape.grad(loss, [unused])[0].data
    assert g.tolist() == [0.0, 0.0]


def test_tapes_do_not_nest():
    with nc.Tape():
        with pytest.raises(nc.TapeError):
            with nc.Tape():
                pass


def test_records_visited_once_fan_out():
    # y feeds two consumers; its record must accumulate both adjoints
    with nc.Tape() as tape:
        x = nc.Tensor(np.array([1.0, 2.0]))
        y = nc.scale(x, 3.0)
        z = nc.add(y, y)
        loss = _sum_sq(z)
    g = tape.grad(loss, [x])[0].data
    # z = 6x, loss = sum(36 x^2), dloss/dx = 72x
    assert np.abs(g - 72.0 * np.array([1.0, 2.0])).max() < 1e-9
