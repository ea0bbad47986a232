"""DeepConv-QK-LSTM network and its classical LSTM baseline.

Layout: a stack of valid 1D convolutions with ReLU, then recurrent layers
(kernel-gated or classical), then an affine classifier over the last hidden
state. Everything is batched along a leading axis and differentiated by hand.

Parameter names in the tree::

    conv{l}.weight   (C_out, K, C_in)      conv{l}.bias  (C_out,)
    lstm{l}.landmarks (N, n + p)           shared by the four gates
    lstm{l}.beta      (4, N, n)            gate order f, i, C, o
    lstm{l}.scale     (4, n + p)           per-gate angle scalings
    lstm{l}.bias      (4, n)               optional for QK, always for classical
    lstm{l}.weight    (4, n, n + p)        classical baseline only
    head.weight (C_cls, n)                 head.bias (C_cls,)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qkernel
from .numerics import (
    ParamTree,
    ShapeError,
    WindowTooShortError,
    conv1d_backward,
    conv1d_forward,
    dropout_mask,
    make_rng,
    sigmoid,
    softmax_cross_entropy,
)

GATES = ("f", "i", "C", "o")
_SIGMOID_GATES = [0, 1, 3]
_CANDIDATE = 2


# -----------------------------------------------------------------------------
# Configuration
# -----------------------------------------------------------------------------


@dataclass
class ModelConfig:
    input_channels: int = 3
    window: int = 100
    conv_filters: int = 64
    conv_width: int = 11
    conv_layers: int = 1
    hidden: int = 64
    lstm_layers: int = 2
    landmarks: int = 16
    block_size: int = 4
    depth: int = 0
    num_classes: int = 8
    dropout: float = 0.5
    gate_bias: bool = False
    baseline: bool = False
    pooling: str = "last"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = (
            "input_channels", "window", "conv_filters", "conv_width",
            "hidden", "lstm_layers", "landmarks", "num_classes",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if not 0 <= self.conv_layers <= 4:
            raise ValueError("model.conv_layers must be in [0, 4]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("model.dropout must be in [0, 1)")
        if self.pooling not in ("last", "mean"):
            raise ValueError("model.pooling must be 'last' or 'mean'")
        if self.num_classes < 2:
            raise ValueError("model.num_classes must be >= 2")
        if self.seq_len < 1:
            raise WindowTooShortError(
                f"window {self.window} too short for {self.conv_layers} conv layers "
                f"of width {self.conv_width}"
            )
        qkernel.KernelConfig(1, self.block_size, self.depth)

    @property
    def seq_len(self) -> int:
        return self.window - self.conv_layers * (self.conv_width - 1)

    @property
    def feature_dim(self) -> int:
        return self.conv_filters if self.conv_layers else self.input_channels

    def layer_input_dim(self, layer: int) -> int:
        return self.feature_dim if layer == 0 else self.hidden


# -----------------------------------------------------------------------------
# Cell state and per-layer parameter views
# -----------------------------------------------------------------------------


@dataclass
class CellState:
    h: np.ndarray
    C: np.ndarray

    @classmethod
    def zeros(cls, hidden: int, batch: tuple[int, ...] = ()) -> "CellState":
        return cls(np.zeros(batch + (hidden,)), np.zeros(batch + (hidden,)))


@dataclass
class QKLSTMLayerParams:
    landmarks: np.ndarray  # (N, n + p)
    beta: np.ndarray  # (4, N, n)
    scale: np.ndarray  # (4, n + p)
    bias: np.ndarray | None = None  # (4, n)
    block_size: int = 4
    depth: int = 0

    @property
    def hidden(self) -> int:
        return self.beta.shape[-1]

    @property
    def kernel_config(self) -> qkernel.KernelConfig:
        return qkernel.KernelConfig(self.landmarks.shape[-1], self.block_size, self.depth)

    def check(self, v: np.ndarray) -> None:
        n_land, dim = self.landmarks.shape
        n = self.hidden
        if self.beta.shape != (4, n_land, n) or self.scale.shape != (4, dim):
            raise ShapeError("inconsistent QK-LSTM parameter shapes")
        if self.bias is not None and self.bias.shape != (4, n):
            raise ShapeError("gate bias must be (4, hidden)")
        if v.shape[-1] != dim:
            raise ShapeError(f"concatenated input has {v.shape[-1]} features, landmarks have {dim}")

    def preact(self, v: np.ndarray):
        """Gate pre-activations ``(4, B, n)`` for a batch ``v`` of shape ``(B, n + p)``."""
        self.check(v)
        if self.depth == 0:
            aux = qkernel.gate_kernels_cached(v, self.landmarks, self.scale)
            kappa = aux.kappa
        else:
            kappa = qkernel.gate_kernels(v, self.landmarks, self.scale, self.kernel_config)
            aux = kappa
        pre = np.matmul(kappa, self.beta)  # (4, B, N) @ (4, N, n)
        if self.bias is not None:
            pre = pre + self.bias[:, None, :]
        return pre, aux

    def preact_backward(self, v, aux, d_pre, grads: dict) -> np.ndarray:
        kappa = aux.kappa if self.depth == 0 else aux
        grads["beta"] += np.matmul(kappa.transpose(0, 2, 1), d_pre)
        if self.bias is not None:
            grads["bias"] += d_pre.sum(axis=1)
        d_kappa = np.matmul(d_pre, self.beta.transpose(0, 2, 1))  # (4, B, N)
        if self.depth == 0:
            d_v, d_z, d_w = qkernel.gate_kernels_backward(aux, d_kappa, self.scale)
        else:
            _, dk_dv, dk_dz, dk_dw = qkernel.gate_kernel_grads(
                v, self.landmarks, self.scale, self.kernel_config
            )
            d_kappa = d_kappa[..., None]
            d_v = (d_kappa * dk_dv).sum(axis=(0, 2))
            d_z = (d_kappa * dk_dz).sum(axis=(0, 1))
            d_w = (d_kappa * dk_dw).sum(axis=(1, 2))
        grads["landmarks"] += d_z
        grads["scale"] += d_w
        return d_v


@dataclass
class LSTMLayerParams:
    weight: np.ndarray  # (4, n, n + p)
    bias: np.ndarray  # (4, n)

    @property
    def hidden(self) -> int:
        return self.weight.shape[1]

    def preact(self, v: np.ndarray):
        if v.shape[-1] != self.weight.shape[-1]:
            raise ShapeError(
                f"concatenated input has {v.shape[-1]} features, weights expect {self.weight.shape[-1]}"
            )
        pre = np.matmul(self.weight, v.T).transpose(0, 2, 1) + self.bias[:, None, :]
        return pre, None

    def preact_backward(self, v, _aux, d_pre, grads: dict) -> np.ndarray:
        grads["weight"] += np.matmul(d_pre.transpose(0, 2, 1), v)
        grads["bias"] += d_pre.sum(axis=1)
        return np.einsum("gbh,ghd->bd", d_pre, self.weight)


def _zero_grads(layer) -> dict:
    if isinstance(layer, QKLSTMLayerParams):
        grads = {
            "landmarks": np.zeros_like(layer.landmarks),
            "beta": np.zeros_like(layer.beta),
            "scale": np.zeros_like(layer.scale),
        }
        if layer.bias is not None:
            grads["bias"] = np.zeros_like(layer.bias)
        return grads
    return {"weight": np.zeros_like(layer.weight), "bias": np.zeros_like(layer.bias)}


# -----------------------------------------------------------------------------
# Recurrent cell and layer
# -----------------------------------------------------------------------------


@dataclass
class CellCache:
    v: np.ndarray
    prev: CellState
    gates: np.ndarray  # activated gates (4, B, n)
    tanh_c: np.ndarray
    aux: object


def cell_forward(x_feat, prev: CellState, layer):
    """One LSTM step with the gate pre-activations supplied by ``layer``.

    Works for a single example (``x_feat`` of shape ``(p,)``) or a batch.
    """
    x = np.asarray(x_feat, dtype=np.float64)
    single = x.ndim == 1
    h_prev = np.atleast_2d(prev.h)
    c_prev = np.atleast_2d(prev.C)
    x2 = np.atleast_2d(x)
    if h_prev.shape[-1] != layer.hidden or c_prev.shape != h_prev.shape:
        raise ShapeError("previous state does not match layer hidden size")
    if x2.shape[0] != h_prev.shape[0]:
        raise ShapeError("batch size of input and state differ")
    v = np.concatenate([h_prev, x2], axis=-1)
    pre, aux = layer.preact(v)
    gates = np.empty_like(pre)
    gates[_SIGMOID_GATES] = sigmoid(pre[_SIGMOID_GATES])
    gates[_CANDIDATE] = np.tanh(pre[_CANDIDATE])
    f, i, g, o = gates
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = CellCache(v, CellState(h_prev, c_prev), gates, tanh_c, aux)
    if single:
        return CellState(h[0], c[0]), cache
    return CellState(h, c), cache


def cell_backward(cache: CellCache, layer, d_h, d_c, grads: dict):
    """Backprop one step. Returns ``(d_x, d_h_prev, d_c_prev)``; accumulates ``grads``."""
    f, i, g, o = cache.gates
    d_o = d_h * cache.tanh_c
    d_c = d_c + d_h * o * (1.0 - cache.tanh_c**2)
    d_pre = np.empty_like(cache.gates)
    d_pre[0] = d_c * cache.prev.C * f * (1.0 - f)
    d_pre[1] = d_c * g * i * (1.0 - i)
    d_pre[2] = d_c * i * (1.0 - g * g)
    d_pre[3] = d_o * o * (1.0 - o)
    d_v = layer.preact_backward(cache.v, cache.aux, d_pre, grads)
    n = layer.hidden
    return d_v[:, n:], d_v[:, :n], d_c * f


def qklstm_cell_forward(x_feat, prev: CellState, params: QKLSTMLayerParams):
    return cell_forward(x_feat, prev, params)


def classical_lstm_cell_forward(x_feat, prev: CellState, params: LSTMLayerParams):
    return cell_forward(x_feat, prev, params)


@dataclass
class LayerCache:
    cells: list[CellCache]
    batched: bool


def layer_forward(seq, layer, init: CellState | None = None):
    """Run the recurrence over ``seq`` of shape ``(T, p)`` or ``(B, T, p)``.

    Returns ``(hidden_seq, final_state, cache)`` with ``hidden_seq`` shaped
    like ``seq`` but with ``n`` features.
    """
    seq = np.asarray(seq, dtype=np.float64)
    batched = seq.ndim == 3
    s = seq if batched else seq[None]
    if s.shape[1] < 1:
        raise ValueError("empty sequence")
    b = s.shape[0]
    state = init if init is not None else CellState.zeros(layer.hidden, (b,))
    state = CellState(np.atleast_2d(state.h), np.atleast_2d(state.C))
    hs, cells = [], []
    for t in range(s.shape[1]):
        state, cache = cell_forward(s[:, t, :], state, layer)
        hs.append(state.h)
        cells.append(cache)
    hidden = np.stack(hs, axis=1)
    if not batched:
        return hidden[0], CellState(state.h[0], state.C[0]), LayerCache(cells, False)
    return hidden, state, LayerCache(cells, True)


def qklstm_layer_forward(seq, init: CellState | None, params: QKLSTMLayerParams):
    return layer_forward(seq, params, init)


def layer_backward(cache: LayerCache, layer, d_hidden):
    """BPTT over the full sequence. Returns ``(d_seq, grads)``."""
    d_hidden = np.asarray(d_hidden, dtype=np.float64)
    if not cache.batched:
        d_hidden = d_hidden[None]
    grads = _zero_grads(layer)
    steps = len(cache.cells)
    b, n = d_hidden.shape[0], layer.hidden
    d_h = np.zeros((b, n))
    d_c = np.zeros((b, n))
    d_xs = [None] * steps
    for t in reversed(range(steps)):
        d_x, d_h, d_c = cell_backward(cache.cells[t], layer, d_h + d_hidden[:, t, :], d_c, grads)
        d_xs[t] = d_x
    d_seq = np.stack(d_xs, axis=1)
    return (d_seq if cache.batched else d_seq[0]), grads


# -----------------------------------------------------------------------------
# Parameters
# -----------------------------------------------------------------------------


def init_params(config: ModelConfig, seed: int) -> ParamTree:
    """Fresh parameters; a deterministic function of ``(config, seed)``."""
    rng = make_rng(seed, "init")
    params = ParamTree()
    c_in = config.input_channels
    for l in range(config.conv_layers):
        bound = 1.0 / np.sqrt(config.conv_width * c_in)
        params[f"conv{l}.weight"] = rng.uniform(
            -bound, bound, (config.conv_filters, config.conv_width, c_in)
        )
        params[f"conv{l}.bias"] = rng.uniform(-bound, bound, config.conv_filters)
        c_in = config.conv_filters
    n = config.hidden
    for l in range(config.lstm_layers):
        dim = n + config.layer_input_dim(l)
        if config.baseline:
            bound = 1.0 / np.sqrt(n)
            params[f"lstm{l}.weight"] = rng.uniform(-bound, bound, (4, n, dim))
            params[f"lstm{l}.bias"] = rng.uniform(-bound, bound, (4, n))
        else:
            big_n = config.landmarks
            params[f"lstm{l}.landmarks"] = 0.5 * rng.standard_normal((big_n, dim))
            params[f"lstm{l}.beta"] = rng.standard_normal((4, big_n, n)) / np.sqrt(big_n)
            params[f"lstm{l}.scale"] = np.ones((4, dim))
            if config.gate_bias:
                params[f"lstm{l}.bias"] = np.zeros((4, n))
    bound = 1.0 / np.sqrt(n)
    params["head.weight"] = rng.uniform(-bound, bound, (config.num_classes, n))
    params["head.bias"] = rng.uniform(-bound, bound, config.num_classes)
    return params


def recurrent_layer(params: ParamTree, config: ModelConfig, l: int):
    prefix = f"lstm{l}."
    if config.baseline:
        return LSTMLayerParams(params[prefix + "weight"], params[prefix + "bias"])
    return QKLSTMLayerParams(
        params[prefix + "landmarks"],
        params[prefix + "beta"],
        params[prefix + "scale"],
        params.get(prefix + "bias") if config.gate_bias else None,
        block_size=config.block_size,
        depth=config.depth,
    )


def count_params(config: ModelConfig) -> dict:
    """Per-component trainable parameter counts plus ``"total"``."""
    table: dict[str, int] = {}
    c_in = config.input_channels
    for l in range(config.conv_layers):
        table[f"conv{l}"] = config.conv_filters * (config.conv_width * c_in + 1)
        c_in = config.conv_filters
    n = config.hidden
    for l in range(config.lstm_layers):
        m = config.layer_input_dim(l)
        if config.baseline:
            table[f"lstm{l}"] = 4 * (n * (m + n) + n)
        else:
            big_n = config.landmarks
            count = big_n * (m + n) + 4 * big_n * n + 4 * (m + n)
            if config.gate_bias:
                count += 4 * n
            table[f"lstm{l}"] = count
    table["head"] = n * config.num_classes + config.num_classes
    table["total"] = sum(table.values())
    return table


# -----------------------------------------------------------------------------
# Full network
# -----------------------------------------------------------------------------


@dataclass
class ForwardCache:
    config: ModelConfig
    params: ParamTree
    batched: bool
    conv: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    head_input: np.ndarray | None = None


def model_forward(window, config: ModelConfig, params: ParamTree,
                  rng: np.random.Generator | None = None, training: bool = False):
    """Logits for one window ``(T, d)`` or a batch ``(B, T, d)``."""
    x = np.asarray(window, dtype=np.float64)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    if x.shape[1:] != (config.window, config.input_channels):
        raise ShapeError(
            f"window shape {x.shape[1:]} != ({config.window}, {config.input_channels})"
        )
    if training and config.dropout > 0.0 and rng is None:
        raise ValueError("training-mode dropout needs an rng")
    cache = ForwardCache(config, params, batched)
    for l in range(config.conv_layers):
        x, conv_cache = conv1d_forward(
            x, params[f"conv{l}.weight"], params[f"conv{l}.bias"], return_cache=True
        )
        cache.conv.append(conv_cache)
    for l in range(config.lstm_layers):
        if training and config.dropout > 0.0:
            mask = dropout_mask(x.shape, config.dropout, rng)
            x = x * mask
        else:
            mask = None
        cache.masks.append(mask)
        x, _, layer_cache = layer_forward(x, recurrent_layer(params, config, l))
        cache.layers.append(layer_cache)
    feats = x[:, -1, :] if config.pooling == "last" else x.mean(axis=1)
    cache.head_input = feats
    logits = feats @ params["head.weight"].T + params["head.bias"]
    return (logits if batched else logits[0]), cache


def model_backward(cache: ForwardCache, d_logits) -> ParamTree:
    """Reverse-mode gradients of every trainable parameter."""
    if cache is None or cache.head_input is None:
        raise ValueError("missing or stale forward cache")
    config, params = cache.config, cache.params
    d = np.asarray(d_logits, dtype=np.float64)
    if not cache.batched:
        d = d[None]
    if d.shape != (cache.head_input.shape[0], config.num_classes):
        raise ShapeError("dlogits shape does not match forward pass")
    grads = params.zeros_like()
    grads["head.weight"] = d.T @ cache.head_input
    grads["head.bias"] = d.sum(axis=0)
    d_feat = d @ params["head.weight"]
    steps = config.seq_len
    d_hidden = np.zeros((d.shape[0], steps, config.hidden))
    if config.pooling == "last":
        d_hidden[:, -1, :] = d_feat
    else:
        d_hidden[:] = d_feat[:, None, :] / steps
    for l in reversed(range(config.lstm_layers)):
        layer = recurrent_layer(params, config, l)
        d_hidden, layer_grads = layer_backward(cache.layers[l], layer, d_hidden)
        for name, g in layer_grads.items():
            grads[f"lstm{l}.{name}"] = g
        if cache.masks[l] is not None:
            d_hidden = d_hidden * cache.masks[l]
    for l in reversed(range(config.conv_layers)):
        d_hidden, d_w, d_b = conv1d_backward(cache.conv[l], d_hidden)
        grads[f"conv{l}.weight"] = d_w
        grads[f"conv{l}.bias"] = d_b
    return grads


def loss_and_grads(params: ParamTree, config: ModelConfig, windows, labels,
                   rng: np.random.Generator | None = None, training: bool = True):
    """Mean cross-entropy over a batch and its gradient tree."""
    logits, cache = model_forward(windows, config, params, rng, training)
    loss, d_logits = softmax_cross_entropy(logits, labels)
    return loss, model_backward(cache, d_logits)


def predict(params: ParamTree, config: ModelConfig, windows, batch_size: int = 256) -> np.ndarray:
    """Eval-mode argmax predictions for ``(M, T, d)`` windows."""
    windows = np.asarray(windows, dtype=np.float64)
    out = []
    for start in range(0, windows.shape[0], batch_size):
        logits, _ = model_forward(windows[start : start + batch_size], config, params)
        out.append(np.argmax(logits, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
