import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedqklstm.numerics import ParamTree, finite_diff_grad, relative_error
from fedqklstm.qkernel import (
    KernelConfig,
    KernelConfigError,
    closed_form_grads,
    encode_block,
    gate_kernel_grads,
    gate_kernels,
    gate_kernels_backward,
    gate_kernels_cached,
    gram_matrix,
    kernel_grad,
    kernel_value,
    shift_grads,
    statevector_kernel,
)

angle = st.floats(-4.0, 4.0, allow_nan=False)


# -----------------------------------------------------------------------------
# Dense-matrix oracle: one 2^q x 2^q unitary per gate, qubit 0 most significant
# -----------------------------------------------------------------------------


def _ry(theta):
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]])


def _on_qubit(gate, k, q):
    out = np.eye(1)
    for j in range(q):
        out = np.kron(out, gate if j == k else np.eye(2))
    return out


def _cnot(ctrl, tgt, q):
    dim = 2**q
    U = np.zeros((dim, dim))
    for i in range(dim):
        bits = [(i >> (q - 1 - j)) & 1 for j in range(q)]
        if bits[ctrl]:
            bits[tgt] ^= 1
        U[sum(b << (q - 1 - j) for j, b in enumerate(bits)), i] = 1.0
    return U


def dense_state(x, w, depth):
    q = len(x)
    ry_layer = np.eye(2**q)
    for k in range(q):
        ry_layer = _on_qubit(_ry(w[k] * x[k]), k, q) @ ry_layer
    ring = np.eye(2**q)
    if q > 1:
        for k in range(q):
            ring = _cnot(k, (k + 1) % q, q) @ ring
    U = ry_layer
    for _ in range(depth):
        U = ry_layer @ ring @ U
    psi = np.zeros(2**q)
    psi[0] = 1.0
    return U @ psi


def dense_kernel(a, b, w, q, depth):
    pad = (-len(a)) % q
    a, b, w = (np.concatenate([v, np.zeros(pad)]) for v in (a, b, w))
    value = 1.0
    for s in range(0, len(a), q):
        sa = dense_state(a[s:s + q], w[s:s + q], depth)
        sb = dense_state(b[s:s + q], w[s:s + q], depth)
        value *= abs(np.vdot(sb, sa)) ** 2
    return value


# -----------------------------------------------------------------------------
# encode_block
# -----------------------------------------------------------------------------


@pytest.mark.parametrize("depth", [0, 1, 3])
def test_zero_input_gives_ground_state(depth):
    psi = encode_block(np.zeros(3), np.array([0.7, -2.0, 5.0]), depth)
    expected = np.zeros(8)
    expected[0] = 1.0
    np.testing.assert_array_equal(psi, expected)


def test_single_qubit_pi_rotation_flips():
    psi = encode_block([np.pi], [1.0], 0)
    assert abs(psi[0]) < 1e-15
    assert abs(abs(psi[1]) - 1.0) < 1e-15


def test_encode_unit_norm():
    rng = np.random.default_rng(0)
    psi = encode_block(rng.normal(size=2), rng.normal(size=2), 2)
    assert abs(np.linalg.norm(psi) - 1.0) <= 1e-12


@pytest.mark.parametrize("q,depth", [(1, 2), (2, 1), (3, 2), (4, 1), (4, 3)])
def test_encode_matches_dense_simulator(q, depth):
    rng = np.random.default_rng(q * 10 + depth)
    x, w = rng.normal(size=(2, q))
    np.testing.assert_allclose(encode_block(x, w, depth).real, dense_state(x, w, depth),
                               atol=1e-12, rtol=0)


def test_encode_block_size_limits():
    with pytest.raises(KernelConfigError):
        encode_block(np.zeros(11), np.zeros(11))
    with pytest.raises(KernelConfigError):
        KernelConfig(4, block_size=0)


# -----------------------------------------------------------------------------
# kernel_value
# -----------------------------------------------------------------------------


def test_kernel_orthogonal_single_qubit():
    assert kernel_value([np.pi], [0.0], [1.0], KernelConfig(1)) == pytest.approx(0.0, abs=1e-30)


def test_kernel_quarter_turns():
    cfg = KernelConfig(2)
    value = kernel_value([np.pi / 2, np.pi / 2], [0.0, 0.0], [1.0, 1.0], cfg)
    assert value == pytest.approx(0.25, abs=1e-15)
    value = kernel_value([np.pi / 2, np.pi / 2], [0.0, 0.0], [1.0, 1.0], cfg, method="statevector")
    assert value == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("depth", [0, 1, 2])
def test_self_kernel_is_exactly_one(depth):
    rng = np.random.default_rng(depth)
    for _ in range(20):
        a, w = rng.normal(size=(2, 7))
        assert kernel_value(a, a, w, KernelConfig(7, 4, depth), method="statevector") == 1.0


def test_statevector_matches_dense_oracle_depth_one():
    rng = np.random.default_rng(11)
    cfg = KernelConfig(8, 4, 1)
    for _ in range(10):
        a, b, w = rng.normal(size=(3, 8))
        assert abs(kernel_value(a, b, w, cfg) - dense_kernel(a, b, w, 4, 1)) <= 1e-10


def test_statevector_matches_closed_form_at_depth_zero():
    rng = np.random.default_rng(5)
    for dim in range(1, 17):
        cfg = KernelConfig(dim)
        a, b = rng.uniform(-np.pi, np.pi, (2, dim))
        w = rng.uniform(0.1, 2.0, dim)
        assert abs(kernel_value(a, b, w, cfg, "statevector") - kernel_value(a, b, w, cfg)) <= 1e-10


def test_kernel_dimension_and_method_errors():
    cfg = KernelConfig(3, 4, 1)
    with pytest.raises(KernelConfigError):
        kernel_value(np.zeros(2), np.zeros(2), np.ones(2), cfg)
    with pytest.raises(KernelConfigError):
        kernel_value(np.zeros(3), np.zeros(3), np.ones(3), cfg, method="closed_form")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2), st.integers(1, 4), st.integers(0, 2**31))
def test_kernel_bounded_and_symmetric(dim, depth, q, seed):
    rng = np.random.default_rng(seed)
    a, b, w = rng.uniform(-3, 3, (3, dim))
    cfg = KernelConfig(dim, q, depth)
    ab = kernel_value(a, b, w, cfg, "statevector")
    ba = kernel_value(b, a, w, cfg, "statevector")
    assert ab == ba
    assert 0.0 <= ab <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2), st.integers(0, 2**31))
def test_zero_padding_does_not_change_kernel(dim, depth, seed):
    rng = np.random.default_rng(seed)
    a, b, w = rng.uniform(-3, 3, (3, dim))
    padded = 4 * -(-dim // 4)
    ext = [np.concatenate([v, np.zeros(padded - dim)]) for v in (a, b)]
    w_ext = np.concatenate([w, rng.uniform(0.5, 2.0, padded - dim)])
    small = kernel_value(a, b, w, KernelConfig(dim, 4, depth), "statevector")
    big = kernel_value(*ext, w_ext, KernelConfig(padded, 4, depth), "statevector")
    assert abs(small - big) <= 1e-12


# -----------------------------------------------------------------------------
# Gradients
# -----------------------------------------------------------------------------


def _fd_kernel_grads(a, b, w, cfg):
    tree = ParamTree({"a": a, "b": b, "w": w})
    fd = finite_diff_grad(lambda p: kernel_value(p["a"], p["b"], p["w"], cfg, "statevector"), tree)
    return fd["a"], fd["b"], fd["w"]


def test_gradients_vanish_at_identical_inputs():
    rng = np.random.default_rng(1)
    a, w = rng.normal(size=(2, 6))
    for depth in (0, 1):
        da, db, _ = kernel_grad(a, a.copy(), w, KernelConfig(6, 4, depth), method="shift")
        assert np.max(np.abs(da)) < 1e-12 and np.max(np.abs(db)) < 1e-12


def test_analytic_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    cfg = KernelConfig(6)
    for _ in range(20):
        a, b, w = rng.uniform(-1.5, 1.5, (3, 6))
        analytic = kernel_grad(a, b, w, cfg)
        for got, ref in zip(analytic, _fd_kernel_grads(a, b, w, cfg)):
            assert relative_error(got, ref) <= 1e-7


def test_shift_equals_analytic_at_depth_zero():
    rng = np.random.default_rng(3)
    cfg = KernelConfig(9)
    for _ in range(20):
        a, b, w = rng.uniform(-2, 2, (3, 9))
        for s, g in zip(kernel_grad(a, b, w, cfg, "shift"), kernel_grad(a, b, w, cfg, "analytic")):
            np.testing.assert_allclose(s, g, atol=1e-10, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 2), st.integers(1, 4), st.integers(0, 2**31))
def test_shift_gradient_matches_finite_differences(dim, depth, q, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1.5, 1.5, (2, dim))
    w = rng.uniform(0.3, 1.5, dim)
    cfg = KernelConfig(dim, q, depth)
    shifted = kernel_grad(a, b, w, cfg, "shift")
    for got, ref in zip(shifted, _fd_kernel_grads(a, b, w, cfg)):
        if max(np.linalg.norm(got), np.linalg.norm(ref)) > 1e-6:
            assert relative_error(got, ref) <= 1e-5


def test_closed_form_grads_survive_exact_zero_factor():
    # one factor is exactly cos^2(pi/2)=0 up to rounding: exclusive product must not divide
    a = np.array([np.pi, 0.3, -0.2])
    b = np.zeros(3)
    w = np.ones(3)
    kappa, da, _, _ = closed_form_grads(a, b, w)
    assert kappa < 1e-30
    assert np.all(np.isfinite(da))


# -----------------------------------------------------------------------------
# Gate-stacked helpers
# -----------------------------------------------------------------------------


def test_gate_kernels_match_pairwise_values():
    rng = np.random.default_rng(4)
    v, Z, W = rng.normal(size=(3, 5)), rng.normal(size=(2, 5)), rng.uniform(0.5, 1.5, (4, 5))
    for depth in (0, 1):
        cfg = KernelConfig(5, 4, depth)
        K = gate_kernels(v, Z, W, cfg)
        assert K.shape == (4, 3, 2)
        for g, i, j in [(0, 0, 0), (3, 2, 1), (1, 1, 0)]:
            assert abs(K[g, i, j] - kernel_value(v[i], Z[j], W[g], cfg)) <= 1e-12


def test_cached_backward_matches_dense_gradients():
    rng = np.random.default_rng(6)
    v, Z, W = rng.normal(size=(3, 5)), rng.normal(size=(2, 5)), rng.uniform(0.5, 1.5, (4, 5))
    up = rng.normal(size=(4, 3, 2))
    cache = gate_kernels_cached(v, Z, W)
    d_v, d_z, d_w = gate_kernels_backward(cache, up, W)
    _, ga, gb, gw = gate_kernel_grads(v, Z, W, KernelConfig(5))
    np.testing.assert_allclose(d_v, np.einsum("gbn,gbnd->bd", up, ga), atol=1e-13)
    np.testing.assert_allclose(d_z, np.einsum("gbn,gbnd->nd", up, gb), atol=1e-13)
    np.testing.assert_allclose(d_w, np.einsum("gbn,gbnd->gd", up, gw), atol=1e-13)


def test_statevector_kernel_broadcasts():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(3, 1, 6))
    b = rng.normal(size=(1, 4, 6))
    K = statevector_kernel(a, b, np.ones(6), KernelConfig(6, 4, 1))
    assert K.shape == (3, 4)
    assert K[2, 3] == pytest.approx(kernel_value(a[2, 0], b[0, 3], np.ones(6), KernelConfig(6, 4, 1)))


def test_shift_grads_batch_matches_single():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 3, 5))
    w = rng.normal(size=5)
    cfg = KernelConfig(5, 2, 1)
    _, da, db, dw = shift_grads(a, b, w, cfg)
    for i in range(3):
        single = kernel_grad(a[i], b[i], w, cfg)
        np.testing.assert_allclose(da[i], single[0], atol=1e-14)
        np.testing.assert_allclose(dw[i], single[2], atol=1e-14)


# -----------------------------------------------------------------------------
# Gram matrices
# -----------------------------------------------------------------------------


def test_gram_single_point():
    G = gram_matrix(np.array([[0.3, -1.0]]), np.ones(2), KernelConfig(2))
    assert G.tolist() == [[1.0]]


@pytest.mark.parametrize("depth", [0, 1])
def test_gram_is_symmetric_psd_with_unit_diagonal(depth):
    rng = np.random.default_rng(depth + 20)
    X = rng.normal(size=(32, 6))
    G = gram_matrix(X, rng.uniform(0.5, 1.5, 6), KernelConfig(6, 4, depth))
    np.testing.assert_array_equal(G, G.T)
    np.testing.assert_array_equal(np.diag(G), 1.0)
    assert np.linalg.eigvalsh(G).min() >= -1e-8


def test_gram_rejects_empty():
    with pytest.raises(KernelConfigError):
        gram_matrix(np.zeros((0, 3)), np.ones(3), KernelConfig(3))
