"""Block-product fidelity kernels over angle-encoded statevectors.

Features are split into blocks of ``block_size`` qubits (the last block is
zero padded). Each block is prepared by ``RY(w_k x_k)`` on qubit ``k`` and then
``depth`` repetitions of a CNOT ring followed by the same RY layer again. The
kernel is the product over blocks of ``|<psi(b)|psi(a)>|^2``.

At depth 0 every qubit is independent and the kernel collapses to
``prod_k cos^2(w_k (a_k - b_k) / 2)``, which is what the fast path evaluates.
All gates are real, so amplitudes stay real during simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_BLOCK_SIZE = 10


class KernelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    feature_dim: int
    block_size: int = 4
    depth: int = 0

    def __post_init__(self):
        if self.feature_dim < 1:
            raise KernelConfigError("feature_dim must be >= 1")
        if not 1 <= self.block_size <= MAX_BLOCK_SIZE:
            raise KernelConfigError(
                f"block_size must be in [1, {MAX_BLOCK_SIZE}], got {self.block_size}"
            )
        if self.depth < 0:
            raise KernelConfigError("depth must be >= 0")

    @property
    def num_blocks(self) -> int:
        return math.ceil(self.feature_dim / self.block_size)

    @property
    def padded_dim(self) -> int:
        return self.num_blocks * self.block_size


def _check_dims(cfg: KernelConfig, *arrays):
    for arr in arrays:
        if arr.shape[-1] != cfg.feature_dim:
            raise KernelConfigError(
                f"vector of dimension {arr.shape[-1]} does not match feature_dim {cfg.feature_dim}"
            )


# -----------------------------------------------------------------------------
# Statevector simulation
# -----------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _ring_permutation(q: int) -> np.ndarray:
    """Index map so that ``state[perm]`` applies CNOT(k -> k+1 mod q), k = 0..q-1.

    Qubit 0 is the most significant bit of the basis index.
    """
    idx = np.arange(2**q)
    if q == 1:
        return idx
    # track where each output amplitude comes from: apply the inverse gates in reverse
    src = idx.copy()
    for k in reversed(range(q)):
        ctrl = q - 1 - k
        tgt = q - 1 - ((k + 1) % q)
        flip = (src >> ctrl) & 1
        src = src ^ (flip << tgt)
    return src


def _apply_ry(state: np.ndarray, q: int, k: int, theta: np.ndarray) -> np.ndarray:
    """RY(theta) on qubit ``k`` of a batch of real states ``(M, 2**q)``."""
    m = state.shape[0]
    view = state.reshape(m, 2**k, 2, 2 ** (q - k - 1))
    c = np.cos(theta / 2.0)[:, None, None]
    s = np.sin(theta / 2.0)[:, None, None]
    s0 = view[:, :, 0, :]
    s1 = view[:, :, 1, :]
    out = np.empty_like(view)
    out[:, :, 0, :] = c * s0 - s * s1
    out[:, :, 1, :] = s * s0 + c * s1
    return out.reshape(m, 2**q)


def simulate_blocks(angles: np.ndarray) -> np.ndarray:
    """Prepare block states from per-layer angles.

    ``angles`` has shape ``(M, depth + 1, q)``: entry ``[m, l, k]`` is the RY
    angle on qubit ``k`` in upload layer ``l``. Returns real ``(M, 2**q)``.
    """
    m, layers, q = angles.shape
    state = np.zeros((m, 2**q))
    state[:, 0] = 1.0
    perm = _ring_permutation(q)
    for layer in range(layers):
        if layer > 0 and q > 1:
            state = state[:, perm]
        for k in range(q):
            state = _apply_ry(state, q, k, angles[:, layer, k])
    return state


def encode_block(x_block, w_block, depth: int = 0) -> np.ndarray:
    """Statevector of one block, as ``2**q`` complex amplitudes."""
    x = np.asarray(x_block, dtype=np.float64)
    w = np.asarray(w_block, dtype=np.float64)
    if x.ndim != 1 or x.shape != w.shape:
        raise KernelConfigError("x_block and w_block must be equal-length vectors")
    q = x.shape[0]
    if not 1 <= q <= MAX_BLOCK_SIZE:
        raise KernelConfigError(f"block of {q} qubits outside [1, {MAX_BLOCK_SIZE}]")
    if depth < 0:
        raise KernelConfigError("depth must be >= 0")
    angles = np.broadcast_to(w * x, (1, depth + 1, q))
    return simulate_blocks(np.ascontiguousarray(angles))[0].astype(np.complex128)


def _blocked_angles(x: np.ndarray, w: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    """``(..., D)`` features -> ``(..., num_blocks, depth + 1, q)`` angles."""
    theta = x * w
    pad = cfg.padded_dim - cfg.feature_dim
    if pad:
        theta = np.concatenate([theta, np.zeros(theta.shape[:-1] + (pad,))], axis=-1)
    theta = theta.reshape(theta.shape[:-1] + (cfg.num_blocks, 1, cfg.block_size))
    return np.repeat(theta, cfg.depth + 1, axis=-2)


def _block_fidelities(ang_a: np.ndarray, ang_b: np.ndarray) -> np.ndarray:
    """Per-block ``<psi_b|psi_a>^2`` for matching leading shapes ``(..., L+1, q)``."""
    lead = ang_a.shape[:-2]
    tail = ang_a.shape[-2:]
    psi_a = simulate_blocks(ang_a.reshape((-1,) + tail))
    psi_b = simulate_blocks(ang_b.reshape((-1,) + tail))
    # real amplitudes: the elementwise product is symmetric in (a, b) bit for bit.
    # Dividing by the squared norms makes identical inputs give exactly 1.
    overlap = np.sum(psi_a * psi_b, axis=-1)
    norms = np.sum(psi_a * psi_a, axis=-1) * np.sum(psi_b * psi_b, axis=-1)
    return (overlap * overlap / norms).reshape(lead)


# -----------------------------------------------------------------------------
# Kernel values
# -----------------------------------------------------------------------------


def closed_form_kernel(a, b, w) -> np.ndarray:
    """``prod_k cos^2(w_k (a_k - b_k) / 2)`` with broadcasting over leading axes."""
    half = 0.5 * np.asarray(w) * (np.asarray(a) - np.asarray(b))
    c = np.cos(half)
    return np.prod(c * c, axis=-1)


def statevector_kernel(a, b, w, cfg: KernelConfig) -> np.ndarray:
    """Kernel by block simulation; ``a`` and ``b`` broadcast over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_dims(cfg, a, b, w)
    a, b, w = np.broadcast_arrays(a, b, w)
    ang_a = _blocked_angles(a, w, cfg)
    ang_b = _blocked_angles(b, w, cfg)
    return np.prod(_block_fidelities(ang_a, ang_b), axis=-1)


def kernel_value(a, b, w, cfg: KernelConfig, method: str | None = None) -> float:
    """Fidelity kernel between two feature vectors.

    ``method`` is ``"closed_form"`` (depth 0 only) or ``"statevector"``; by
    default depth 0 uses the closed form and deeper circuits are simulated.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or w.ndim != 1:
        raise KernelConfigError("kernel_value expects 1-D vectors")
    _check_dims(cfg, a, b, w)
    method = method or ("closed_form" if cfg.depth == 0 else "statevector")
    if method == "closed_form":
        if cfg.depth != 0:
            raise KernelConfigError("closed form only holds at depth 0")
        return float(closed_form_kernel(a, b, w))
    if method == "statevector":
        return float(statevector_kernel(a, b, w, cfg))
    raise ValueError(f"unknown kernel method {method!r}")


def gram_matrix(X, w, cfg: KernelConfig, method: str | None = None) -> np.ndarray:
    """Symmetric Gram matrix; only the upper triangle is evaluated."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise KernelConfigError("X must be a non-empty (N, D) array")
    n = X.shape[0]
    G = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            G[i, j] = G[j, i] = kernel_value(X[i], X[j], w, cfg, method=method)
    return G


# -----------------------------------------------------------------------------
# Gradients
# -----------------------------------------------------------------------------


def _exclusive_prod(c: np.ndarray) -> np.ndarray:
    """``out[..., k] = prod_{j != k} c[..., j]`` without division."""
    ones = np.ones(c.shape[:-1] + (1,))
    before = np.cumprod(np.concatenate([ones, c[..., :-1]], axis=-1), axis=-1)
    after = np.cumprod(np.concatenate([ones, c[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return before * after


def closed_form_grads(a, b, w):
    """Analytic ``(kappa, dk/da, dk/db, dk/dw)`` of the depth-0 kernel.

    Broadcasts over leading axes; gradients have the broadcast shape of the
    inputs (``dk/dw`` is not reduced over leading axes).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    delta = a - b
    theta = w * delta
    half = 0.5 * theta
    c = np.cos(half)
    c2 = c * c
    kappa = np.prod(c2, axis=-1)
    # d cos^2(theta/2) / d theta = -sin(theta) / 2
    dk_dtheta = _exclusive_prod(c2) * (-0.5 * np.sin(theta))
    return kappa, dk_dtheta * w, -dk_dtheta * w, dk_dtheta * delta


def shift_grads(a, b, w, cfg: KernelConfig):
    """Parameter-shift ``(kappa, dk/da, dk/db, dk/dw)`` for any depth.

    Every RY occurrence is shifted by ``+-pi/2`` on its own; the per-occurrence
    derivatives are summed and chain-ruled through ``theta = w * x``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_dims(cfg, a, b, w)
    a, b, w = np.broadcast_arrays(a, b, w)
    lead = a.shape[:-1]
    ang_a = _blocked_angles(a, w, cfg)  # (..., nb, L+1, q)
    ang_b = _blocked_angles(b, w, cfg)
    fid = _block_fidelities(ang_a, ang_b)  # (..., nb)
    kappa = np.prod(fid, axis=-1)
    others = _exclusive_prod(fid)  # (..., nb)

    nb, layers, q = cfg.num_blocks, cfg.depth + 1, cfg.block_size
    # d fid / d theta for each occurrence, on each side
    d_a = np.zeros(lead + (nb, layers, q))
    d_b = np.zeros(lead + (nb, layers, q))
    for layer in range(layers):
        for k in range(q):
            for sign in (1.0, -1.0):
                shifted = ang_a.copy()
                shifted[..., layer, k] += sign * np.pi / 2
                d_a[..., layer, k] += sign * 0.5 * _block_fidelities(shifted, ang_b)
                shifted = ang_b.copy()
                shifted[..., layer, k] += sign * np.pi / 2
                d_b[..., layer, k] += sign * 0.5 * _block_fidelities(ang_a, shifted)

    def to_features(d_occ):
        # sum over upload layers, scale by the other blocks, drop padding
        per_block = d_occ.sum(axis=-2) * others[..., None]
        flat = per_block.reshape(lead + (cfg.padded_dim,))
        return flat[..., : cfg.feature_dim]

    dk_dtheta_a = to_features(d_a)
    dk_dtheta_b = to_features(d_b)
    dk_dw = dk_dtheta_a * a + dk_dtheta_b * b
    return kappa, dk_dtheta_a * w, dk_dtheta_b * w, dk_dw


def kernel_grad(a, b, w, cfg: KernelConfig, method: str | None = None):
    """``(dk/da, dk/db, dk/dw)`` for a single pair of vectors.

    Depth 0 defaults to the analytic form; ``method="shift"`` forces the
    parameter-shift route at any depth.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or w.ndim != 1:
        raise KernelConfigError("kernel_grad expects 1-D vectors")
    _check_dims(cfg, a, b, w)
    method = method or ("analytic" if cfg.depth == 0 else "shift")
    if method == "analytic":
        if cfg.depth != 0:
            raise KernelConfigError("analytic gradients only hold at depth 0")
        _, da, db, dw = closed_form_grads(a, b, w)
    elif method == "shift":
        _, da, db, dw = shift_grads(a, b, w, cfg)
    else:
        raise ValueError(f"unknown gradient method {method!r}")
    return da, db, dw


# -----------------------------------------------------------------------------
# Gate-stacked batch evaluation (used by the recurrent cell)
# -----------------------------------------------------------------------------


def _gate_operands(v, landmarks, scales):
    # v (B, D), landmarks (N, D), scales (G, D) -> broadcastable to (G, B, N, D)
    return v[None, :, None, :], landmarks[None, None, :, :], scales[:, None, None, :]


def gate_kernels(v, landmarks, scales, cfg: KernelConfig) -> np.ndarray:
    """Kernels of every row of ``v`` against every landmark, per gate: ``(G, B, N)``."""
    a, b, w = _gate_operands(v, landmarks, scales)
    if cfg.depth == 0:
        return closed_form_kernel(a, b, w)
    return statevector_kernel(a, b, w, cfg)


def gate_kernel_grads(v, landmarks, scales, cfg: KernelConfig):
    """``(kappa, dk/dv, dk/dlandmark, dk/dscale)``; gradients are ``(G, B, N, D)``."""
    a, b, w = _gate_operands(v, landmarks, scales)
    if cfg.depth == 0:
        return closed_form_grads(a, b, w)
    return shift_grads(a, b, w, cfg)


@dataclass
class GateKernelCache:
    delta: np.ndarray  # (B, N, D) feature minus landmark
    half: np.ndarray  # (G, B, N, D) half rotation angles
    c2: np.ndarray  # (G, B, N, D) per-qubit fidelities
    kappa: np.ndarray  # (G, B, N)


def gate_kernels_cached(v, landmarks, scales) -> GateKernelCache:
    """Depth-0 gate kernels keeping what the backward pass needs."""
    delta = v[:, None, :] - landmarks[None, :, :]
    half = 0.5 * scales[:, None, None, :] * delta[None]
    c = np.cos(half)
    c2 = c * c
    return GateKernelCache(delta, half, c2, np.prod(c2, axis=-1))


def gate_kernels_backward(cache: GateKernelCache, d_kappa, scales):
    """Pull ``d_kappa (G, B, N)`` back to ``(d_v, d_landmarks, d_scales)`` at depth 0."""
    c2 = cache.c2
    if np.min(c2) > 1e-100:
        others = cache.kappa[..., None] / c2
    else:
        others = _exclusive_prod(c2)
    # d cos^2(h) / d theta = -sin(2h) / 2 with h = theta / 2
    d_theta = (d_kappa[..., None] * others) * (-0.5 * np.sin(2.0 * cache.half))
    d_delta_g = d_theta * scales[:, None, None, :]
    d_delta = d_delta_g.sum(axis=0)
    d_v = d_delta.sum(axis=1)
    d_landmarks = -d_delta.sum(axis=0)
    d_scales = np.einsum("gbnd,bnd->gd", d_theta, cache.delta)
    return d_v, d_landmarks, d_scales
