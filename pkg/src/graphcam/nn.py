"""Chebyshev graph-convolutional classifier with hand-written backward passes.

Layer stack: ``[ChebConv -> ReLU (-> dropout)] * L -> global average pool ->
dense``. Tensors are laid out ``(batch, nodes, channels)``. Parameters are
exposed as a flat ``{name: array}`` dict (``conv0.coeffs``, ``conv0.bias``,
..., ``dense.weights``, ``dense.bias``); gradients use the same keys.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidStateError, NumericalError, ValidationError
from .spectral import ScaledLaplacian, cheb_adjoint, cheb_apply

DEFAULT_CHANNELS = (32, 32, 64, 64, 128)
DEFAULT_DROPOUT_LAYERS = (1, 3, 4)  # 0-based: conv layers 2, 4 and 5


@dataclass
class ModelConfig:
    channels: tuple = DEFAULT_CHANNELS
    num_coeffs: int = 9
    dropout_layers: tuple = DEFAULT_DROPOUT_LAYERS
    dropout_rate: float = 0.5
    num_classes: int = 2
    input_channels: int = 55

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.dropout_layers = tuple(sorted(int(i) for i in self.dropout_layers))
        if not self.channels or min(self.channels) < 1:
            raise ValidationError("channels must be a non-empty list of positive widths")
        if self.num_coeffs < 1:
            raise ValidationError("num_coeffs must be >= 1")
        bad = [i for i in self.dropout_layers if not 0 <= i < len(self.channels)]
        if bad:
            raise ValidationError(f"dropout layer indices out of range: {bad}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must lie in [0, 1)")
        if self.num_classes < 2 or self.input_channels < 1:
            raise ValidationError("need num_classes >= 2 and input_channels >= 1")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["dropout_layers"] = list(self.dropout_layers)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ChebConvParams:
    coeffs: np.ndarray  # (F_in, F_out, K)
    bias: np.ndarray  # (F_out,)


@dataclass
class DenseParams:
    weights: np.ndarray  # (F, C)
    bias: np.ndarray  # (C,)


@dataclass
class Model:
    config: ModelConfig
    conv_layers: list
    dense: DenseParams

    def __post_init__(self):
        cfg = self.config
        if len(self.conv_layers) != len(cfg.channels):
            raise ValidationError("number of conv layers does not match config.channels")
        f_in = cfg.input_channels
        for i, (layer, f_out) in enumerate(zip(self.conv_layers, cfg.channels)):
            want = (f_in, f_out, cfg.num_coeffs)
            if layer.coeffs.shape != want or layer.bias.shape != (f_out,):
                raise ValidationError(
                    f"conv{i}: expected coeffs {want} and bias ({f_out},), "
                    f"got {layer.coeffs.shape} and {layer.bias.shape}"
                )
            f_in = f_out
        if self.dense.weights.shape != (f_in, cfg.num_classes) or self.dense.bias.shape != (
            cfg.num_classes,
        ):
            raise ValidationError("dense layer shape does not match config")

    def parameters(self) -> dict:
        """Live references to every trainable array, keyed by name."""
        out = {}
        for i, layer in enumerate(self.conv_layers):
            out[f"conv{i}.coeffs"] = layer.coeffs
            out[f"conv{i}.bias"] = layer.bias
        out["dense.weights"] = self.dense.weights
        out["dense.bias"] = self.dense.bias
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "Model":
        return Model(
            self.config,
            [ChebConvParams(c.coeffs.copy(), c.bias.copy()) for c in self.conv_layers],
            DenseParams(self.dense.weights.copy(), self.dense.bias.copy()),
        )


def init_model(config: ModelConfig, seed=0) -> Model:
    """Glorot-uniform coefficients (fan-in ``F_in * K``), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    f_in = config.input_channels
    k = config.num_coeffs
    for f_out in config.channels:
        limit = np.sqrt(6.0 / (f_in * k + f_out))
        layers.append(ChebConvParams(rng.uniform(-limit, limit, (f_in, f_out, k)), np.zeros(f_out)))
        f_in = f_out
    limit = np.sqrt(6.0 / (f_in + config.num_classes))
    dense = DenseParams(rng.uniform(-limit, limit, (f_in, config.num_classes)), np.zeros(config.num_classes))
    return Model(config, layers, dense)


# --- layers ---------------------------------------------------------------


def cheb_conv_forward(params: ChebConvParams, ltilde, x):
    """Returns ``(out, cache)``; ``out[s, :, o] = sum_{i,k} theta[i,o,k] T_k(L) x[s, :, i] + b[o]``."""
    x = np.asarray(x, dtype=np.float64)
    f_in, _, k = params.coeffs.shape
    if x.ndim != 3 or x.shape[-1] != f_in:
        raise ValidationError(f"conv input shape {x.shape} does not match F_in={f_in}")
    tx = cheb_apply(ltilde, x, k)  # (K, B, N, F_in)
    out = np.einsum("kbni,iok->bno", tx, params.coeffs, optimize=True) + params.bias
    return out, (ltilde, tx)


def cheb_conv_backward(params: ChebConvParams, grad_out, cache):
    ltilde, tx = cache
    if grad_out.shape[:2] != tx.shape[1:3] or grad_out.shape[2] != params.coeffs.shape[1]:
        raise ValidationError(f"grad_out shape {grad_out.shape} does not match the cached forward")
    grad_coeffs = np.einsum("kbni,bno->iok", tx, grad_out, optimize=True)
    grad_bias = grad_out.sum(axis=(0, 1))
    per_k = np.einsum("bno,iok->kbni", grad_out, params.coeffs, optimize=True)
    grad_x = cheb_adjoint(ltilde, per_k)
    return grad_x, grad_coeffs, grad_bias


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(grad_out, mask):
    return np.where(mask, grad_out, 0.0)


def dropout_forward(x, rate, rng=None, train=True):
    """Inverted dropout. Returns ``(out, mask)``; the mask already carries the ``1/(1-p)`` scale."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError("dropout rate must lie in [0, 1)")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValidationError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def gap_forward(x):
    return x.mean(axis=1)


def gap_backward(grad_out, num_nodes):
    return np.repeat(grad_out[:, None, :] / num_nodes, num_nodes, axis=1)


def dense_forward(params: DenseParams, pooled):
    return pooled @ params.weights + params.bias


def dense_backward(params: DenseParams, grad_out, pooled):
    return grad_out @ params.weights.T, pooled.T @ grad_out, grad_out.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits")
    if labels.shape != logits.shape[:1]:
        raise ValidationError("labels must have one entry per logit row")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValidationError("label out of range")
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(b)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / b


def l2_penalty(model: Model, decay: float):
    """``decay * sum(w^2)`` over conv coefficients and dense weights; biases excluded."""
    if decay < 0:
        raise ValidationError("weight decay must be non-negative")
    loss = 0.0
    grads = {}
    for name, p in model.parameters().items():
        if name.endswith(".bias"):
            grads[name] = np.zeros_like(p)
            continue
        loss += decay * float(np.sum(p * p))
        grads[name] = 2.0 * decay * p
    return loss, grads


# --- full model -------------------------------------------------------------


@dataclass
class ForwardTrace:
    mode: str
    layer_caches: list = field(default_factory=list)
    last_conv_features: np.ndarray = None  # (B, N, F) post-ReLU, pre-dropout
    pooled: np.ndarray = None  # (B, F)
    logits: np.ndarray = None  # (B, C)


def _ltilde_nodes(ltilde):
    return (ltilde.matrix if isinstance(ltilde, ScaledLaplacian) else np.asarray(ltilde)).shape[0]


def model_forward(model: Model, ltilde, batch, mode="eval", rng=None):
    """Forward pass; returns ``(logits, trace)``.

    ``rng`` is a seed or ``numpy.random.Generator`` and only drives dropout
    in ``"train"`` mode. ``trace.last_conv_features`` are the final
    post-ReLU maps used for class activation mapping.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"unknown mode {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    cfg = model.config
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != _ltilde_nodes(ltilde) or x.shape[2] != cfg.input_channels:
        raise ValidationError(
            f"batch shape {x.shape} does not match ({_ltilde_nodes(ltilde)} nodes, "
            f"{cfg.input_channels} channels)"
        )
    train = mode == "train"
    if train and rng is not None and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    trace = ForwardTrace(mode)
    h = x
    for i, layer in enumerate(model.conv_layers):
        h, conv_cache = cheb_conv_forward(layer, ltilde, h)
        h, relu_mask = relu_forward(h)
        if i == len(model.conv_layers) - 1:
            trace.last_conv_features = h
        drop_mask = None
        if i in cfg.dropout_layers:
            h, drop_mask = dropout_forward(h, cfg.dropout_rate, rng, train)
        trace.layer_caches.append((conv_cache, relu_mask, drop_mask))
    trace.pooled = gap_forward(h)
    trace.logits = dense_forward(model.dense, trace.pooled)
    return trace.logits, trace


def model_backward(model: Model, trace: ForwardTrace, grad_logits) -> dict:
    if trace.mode != "train":
        raise InvalidStateError("backward needs a trace from a train-mode forward")
    grads = {}
    grad_pooled, grads["dense.weights"], grads["dense.bias"] = dense_backward(
        model.dense, grad_logits, trace.pooled
    )
    num_nodes = trace.last_conv_features.shape[1]
    g = gap_backward(grad_pooled, num_nodes)
    for i in range(len(model.conv_layers) - 1, -1, -1):
        conv_cache, relu_mask, drop_mask = trace.layer_caches[i]
        g = dropout_backward(g, drop_mask)
        g = relu_backward(g, relu_mask)
        g, grads[f"conv{i}.coeffs"], grads[f"conv{i}.bias"] = cheb_conv_backward(
            model.conv_layers[i], g, conv_cache
        )
    return grads


def loss_and_grads(model: Model, ltilde, batch, labels, weight_decay=0.0, rng=None):
    """Training objective (cross-entropy + L2) and its gradient in one pass."""
    logits, trace = model_forward(model, ltilde, batch, "train", rng)
    ce, grad_logits = softmax_cross_entropy(logits, labels)
    grads = model_backward(model, trace, grad_logits)
    penalty, penalty_grads = l2_penalty(model, weight_decay)
    for name, g in penalty_grads.items():
        grads[name] = grads[name] + g
    return ce + penalty, grads
