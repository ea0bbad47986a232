"""Dense numeric substrate: parameter trees, activations, conv, loss, Adam, dropout.

Everything is float64 numpy. Functions accept optional leading batch axes
where that is natural, so the model can process a mini-batch in one call.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Iterator, Mapping, MutableMapping
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    pass


class WindowTooShortError(ValueError):
    pass


class IncongruentTreesError(ValueError):
    pass


# -----------------------------------------------------------------------------
# ParamTree
# -----------------------------------------------------------------------------


class ParamTree(MutableMapping):
    """Named float64 tensors, always iterated in lexicographic name order."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        self._data: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        if not isinstance(name, str):
            raise TypeError("parameter names must be str")
        arr = np.asarray(value, dtype=np.float64)
        self._data[name] = arr
        if list(self._data) != sorted(self._data):
            self._data = dict(sorted(self._data.items()))

    def __delitem__(self, name: str) -> None:
        del self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}: {v.shape}" for k, v in self._data.items())
        return f"ParamTree({body})"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._data.items()}

    def congruent(self, other: "ParamTree") -> bool:
        return self.shapes() == other.shapes()

    def copy(self) -> "ParamTree":
        return ParamTree({k: v.copy() for k, v in self._data.items()})

    def zeros_like(self) -> "ParamTree":
        return ParamTree({k: np.zeros_like(v) for k, v in self._data.items()})

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamTree":
        return ParamTree({k: fn(v) for k, v in self._data.items()})

    def size(self) -> int:
        return int(sum(v.size for v in self._data.values()))

    def flatten(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()])

    def bit_equal(self, other: "ParamTree") -> bool:
        if not self.congruent(other):
            return False
        return all(
            self[k].tobytes() == other[k].tobytes() for k in self._data
        )


def check_congruent(a: ParamTree, b: ParamTree) -> None:
    if not a.congruent(b):
        raise IncongruentTreesError(
            f"trees differ: {a.shapes()} vs {b.shapes()}"
        )


# -----------------------------------------------------------------------------
# Seeds and random streams
# -----------------------------------------------------------------------------


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _label_word(label: int | str) -> int:
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    return int(label) & _MASK64


def mix_seed(seed: int, *labels: int | str) -> int:
    """Derive a child 64-bit seed from ``seed`` and a path of labels.

    Each label is folded in as ``state = splitmix64(state ^ word(label))``,
    where ``word`` is the label itself for integers and the first 8 bytes of
    its BLAKE2b digest for strings. The result depends only on the inputs,
    never on how much of any other stream has been consumed.
    """
    state = _splitmix64(int(seed) & _MASK64)
    for label in labels:
        state = _splitmix64(state ^ _label_word(label))
    return state


def make_rng(seed: int, *labels: int | str) -> np.random.Generator:
    """PCG64 generator seeded with ``mix_seed(seed, *labels)``."""
    return np.random.Generator(np.random.PCG64(mix_seed(seed, *labels)))


# -----------------------------------------------------------------------------
# Activations and loss
# -----------------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # exp(-|x|) never overflows; branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": np.tanh, "relu": relu}


def activation(x, kind: str) -> np.ndarray:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return np.asarray(fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Return ``(loss, dloss/dlogits)`` for one example or a batch.

    For a batch (``logits`` of shape ``(B, C)``) the loss is the mean over
    the batch and the gradient is scaled by ``1/B`` accordingly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(label))
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    num_classes = z.shape[-1]
    if labels.shape[0] != z.shape[0]:
        raise ShapeError("label count does not match logits batch")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    labels = labels.astype(np.int64)
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, labels]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / z.shape[0]


# -----------------------------------------------------------------------------
# 1D convolution (valid padding, stride 1, fused ReLU)
# -----------------------------------------------------------------------------


@dataclass
class ConvCache:
    windows: np.ndarray  # (..., T_out, K, C_in) strided view of the input
    pre: np.ndarray  # (..., T_out, C_out) pre-ReLU activations
    weights: np.ndarray
    input_shape: tuple[int, ...]


def conv1d_forward(inputs, weights, bias, return_cache: bool = False):
    """``out[t, k] = relu(sum_{i<K, c} w[k, i, c] * x[t + i, c] + b[k])``.

    ``inputs`` is ``(T, C_in)`` or ``(B, T, C_in)``; weights ``(C_out, K, C_in)``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    if w.ndim != 3 or x.ndim < 2:
        raise ShapeError("expected inputs (..., T, C_in) and weights (C_out, K, C_in)")
    c_out, k, c_in = w.shape
    if x.shape[-1] != c_in or b.shape != (c_out,):
        raise ShapeError(
            f"input channels {x.shape[-1]} / bias {b.shape} incompatible with weights {w.shape}"
        )
    if k < 1 or x.shape[-2] < k:
        raise WindowTooShortError(f"sequence length {x.shape[-2]} shorter than filter width {k}")
    # (..., T_out, C_in, K) -> (..., T_out, K, C_in)
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=-2).swapaxes(-1, -2)
    t_out = x.shape[-2] - k + 1
    flat = windows.reshape(*x.shape[:-2], t_out, k * c_in)
    pre = flat @ w.reshape(c_out, k * c_in).T + b
    out = np.maximum(pre, 0.0)
    if return_cache:
        return out, ConvCache(windows, pre, w, x.shape)
    return out


def conv1d_backward(cache: ConvCache, upstream):
    """Gradients ``(d_input, d_weights, d_bias)``; ReLU subgradient at 0 is 0."""
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.pre.shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match output {cache.pre.shape}")
    w = cache.weights
    c_out, k, c_in = w.shape
    g_pre = np.where(cache.pre > 0.0, g, 0.0)
    t_out = g_pre.shape[-2]
    lead = g_pre.shape[:-2]
    g2 = g_pre.reshape(-1, t_out, c_out)
    win = cache.windows.reshape(-1, t_out, k * c_in)
    d_w = np.einsum("bto,btj->oj", g2, win).reshape(c_out, k, c_in)
    d_b = g2.sum(axis=(0, 1))
    d_x = np.zeros(cache.input_shape, dtype=np.float64).reshape(-1, cache.input_shape[-2], c_in)
    for i in range(k):
        d_x[:, i : i + t_out, :] += g2 @ w[:, i, :]
    return d_x.reshape(*lead, cache.input_shape[-2], c_in), d_w, d_b


# -----------------------------------------------------------------------------
# Adam
# -----------------------------------------------------------------------------


@dataclass
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class AdamState:
    t: int
    m: ParamTree
    v: ParamTree

    @classmethod
    def zeros(cls, params: ParamTree) -> "AdamState":
        return cls(0, params.zeros_like(), params.zeros_like())

    def copy(self) -> "AdamState":
        return AdamState(self.t, self.m.copy(), self.v.copy())


def adam_step(
    params: ParamTree, grads: ParamTree, state: AdamState, hyper: AdamHyper
) -> tuple[ParamTree, AdamState]:
    """One bias-corrected Adam step with coupled L2 weight decay.

    Returns new objects; inputs are left untouched.
    """
    check_congruent(params, grads)
    check_congruent(params, state.m)
    check_congruent(params, state.v)
    t = state.t + 1
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    new_p, new_m, new_v = ParamTree(), ParamTree(), ParamTree()
    for name in params:
        p = params[name]
        g = grads[name]
        if hyper.weight_decay:
            g = g + hyper.weight_decay * p
        m = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * (g * g)
        step = hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        new_p[name] = p - step
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(t, new_m, new_v)


# -----------------------------------------------------------------------------
# Dropout
# -----------------------------------------------------------------------------


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    return x * dropout_mask(x.shape, p, rng)


# -----------------------------------------------------------------------------
# Finite-difference oracle
# -----------------------------------------------------------------------------


def finite_diff_grad(
    f: Callable[[ParamTree], float], params: ParamTree, h: float = 1e-5
) -> ParamTree:
    """Central differences, one element at a time. Test oracle only."""
    out = params.zeros_like()
    for name in params:
        base = params[name]
        grad = out[name]
        for idx in np.ndindex(base.shape):
            probe = params.copy()
            probe[name][idx] = base[idx] + h
            f_plus = f(probe)
            probe[name][idx] = base[idx] - h
            f_minus = f(probe)
            grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return out


def relative_error(a, b) -> float:
    """``||a - b|| / max(||a||, ||b||)``; 0 when both are exactly zero."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
