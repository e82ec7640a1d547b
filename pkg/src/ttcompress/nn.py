"""Layers, losses and a sequential model for desk-scale training.

Every layer exposes ``forward``, ``backprop`` (returns the input gradient and
stores parameter gradients), ``parameters`` and ``gradients``.  Tensorized
layers additionally expose ``trains()``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .embedding import TTMEmbedding
from .linear import TTLinear
from .tensor import as_tensor, einsum
from .tt import param_count, prune, ttm_to_matrix

__all__ = [
    "Activation",
    "Dense",
    "Embedding",
    "Model",
    "Residual",
    "bce_with_logits",
    "densify",
    "mse_loss",
    "softmax_cross_entropy",
]


class Dense:
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, seed=0):
        rng = np.random.default_rng(seed)
        self.in_features, self.out_features = in_features, out_features
        self.weight = rng.normal(0.0, math.sqrt(2.0 / in_features), (in_features, out_features))
        self.bias = np.zeros(out_features) if bias else None
        self._x = None

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected input (b, {self.in_features}), got {x.shape}")
        self._x = x
        y = einsum("bi,io->bo", x, self.weight)
        return y + self.bias if self.bias is not None else y

    def backprop(self, g):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self.g_weight = einsum("bi,bo->io", self._x, g)
        self.g_bias = g.sum(axis=0) if self.bias is not None else None
        return einsum("bo,io->bi", g, self.weight)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def gradients(self):
        return [self.g_weight] + ([self.g_bias] if self.bias is not None else [])

    def trains(self):
        return []

    def dense_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Embedding:
    """Plain lookup table, the dense counterpart of a TTM embedding."""

    kind = "embedding"

    def __init__(self, num_embeddings: int, embedding_dim: int, seed=0, init_std=None):
        rng = np.random.default_rng(seed)
        std = math.sqrt(2.0 / embedding_dim) if init_std is None else init_std
        self.weight = rng.normal(0.0, std, (num_embeddings, embedding_dim))
        self._idx = None

    def forward(self, ids):
        idx = np.asarray(ids, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.weight.shape[0]):
            raise IndexError("row id out of range")
        self._idx = idx
        return self.weight[idx]

    def backprop(self, g):
        self.g_weight = np.zeros_like(self.weight)
        np.add.at(self.g_weight, self._idx, g)
        return None

    def parameters(self):
        return [self.weight]

    def gradients(self):
        return [self.g_weight]

    def trains(self):
        return []

    def dense_params(self) -> int:
        return self.weight.size


class Activation:
    kind = "activation"

    def __init__(self, name: str = "gelu"):
        if name not in ("gelu", "identity", "relu"):
            raise ValueError(f"unknown activation {name!r}")
        self.name = name
        self._x = None

    def forward(self, x):
        self._x = x
        if self.name == "gelu":
            return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
        if self.name == "relu":
            return np.maximum(x, 0.0)
        return x

    def backprop(self, g):
        x = self._x
        if self.name == "gelu":
            cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
            pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            return g * (cdf + x * pdf)
        if self.name == "relu":
            return g * (x > 0)
        return g

    def parameters(self):
        return []

    def gradients(self):
        return []

    def trains(self):
        return []

    def dense_params(self) -> int:
        return 0


class Residual:
    """``y = x + scale * inner(x)``; ``scale = 0`` makes ``inner`` redundant."""

    kind = "residual"

    def __init__(self, inner, scale: float = 1.0):
        self.inner = inner
        self.scale = float(scale)

    def forward(self, x):
        return x + self.scale * self.inner.forward(x)

    def backprop(self, g):
        return g + _backprop(self.inner, self.scale * g)

    def parameters(self):
        return self.inner.parameters()

    def gradients(self):
        return self.inner.gradients()

    def trains(self):
        return self.inner.trains()

    def dense_params(self) -> int:
        return _dense_params(self.inner)


def _backprop(layer, g):
    if isinstance(layer, TTLinear):
        return layer.backward(g).g_x
    if isinstance(layer, TTMEmbedding):
        layer.backward(g)
        return None
    return layer.backprop(g)


def _dense_params(layer) -> int:
    """Parameters outside any TT/TTM train (biases, dense weights)."""
    if isinstance(layer, TTLinear):
        return layer.bias.size if layer.bias is not None else 0
    if isinstance(layer, TTMEmbedding):
        return 0
    return layer.dense_params()


def _dense_equivalent(layer) -> int:
    if isinstance(layer, TTLinear):
        return layer.in_features * layer.out_features + _dense_params(layer)
    if isinstance(layer, TTMEmbedding):
        return layer.num_embeddings * layer.embedding_dim
    if isinstance(layer, Residual):
        return _dense_equivalent(layer.inner)
    return layer.dense_params()


def _layer_trains(layer):
    if isinstance(layer, Residual):
        return _layer_trains(layer.inner)
    if isinstance(layer, (TTLinear, TTMEmbedding)):
        return [layer]
    return []


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred, target):
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def softmax_cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    b = logits.shape[0]
    loss = -float(log_p[np.arange(b), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def bce_with_logits(logits, targets):
    z = logits.reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    grad = (sig - t) / z.size
    return float(loss.mean()), grad.reshape(logits.shape)


HEADS = {
    "mse": mse_loss,
    "softmax_ce": softmax_cross_entropy,
    "bce": bce_with_logits,
}


class Model:
    """Sequential stack of layers with a loss head."""

    def __init__(self, layers, head: str = "mse"):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        self.layers = list(layers)
        self.head = head
        self._forwarded = False

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._forwarded = True
        return x

    def loss(self, pred, target):
        return HEADS[self.head](pred, target)

    def backward(self, loss_grad):
        if not self._forwarded:
            raise RuntimeError("backward called before forward")
        g = loss_grad
        for layer in reversed(self.layers):
            g = _backprop(layer, g)
            if g is None:
                break
        return g

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def gradients(self):
        return [g for layer in self.layers for g in layer.gradients()]

    def tensor_layers(self):
        return [t for layer in self.layers for t in _layer_trains(layer)]

    def trains(self):
        return [t for layer in self.tensor_layers() for t in layer.trains()]

    # accounting ---------------------------------------------------------

    def size_report(self, epsilon: float = 0.0):
        return param_count(self.trains(), epsilon)

    def dense_params(self) -> int:
        return sum(_dense_params(layer) for layer in self.layers)

    def compressed_size(self, epsilon: float = 0.0) -> int:
        return self.size_report(epsilon).exact_size + self.dense_params()

    def dense_equivalent_size(self) -> int:
        return sum(_dense_equivalent(layer) for layer in self.layers)

    def compression_ratio(self, epsilon: float = 0.0) -> float:
        return self.dense_equivalent_size() / max(self.compressed_size(epsilon), 1)

    def prune(self, epsilon: float = 0.0, fold: bool = True):
        """Prune every train in place; returns per-layer removed counts."""
        removed = []
        for layer in self.tensor_layers():
            if isinstance(layer, TTLinear):
                layer.weight, counts = prune(layer.weight, epsilon, fold=fold)
            else:
                layer.table, counts = prune(layer.table, epsilon, fold=fold)
            removed.append(counts)
        return removed

    def metric(self, pred, target) -> float:
        """Evaluation metric: accuracy for classification, the loss otherwise."""
        if self.head == "softmax_ce":
            return float(np.mean(pred.argmax(axis=1) == np.asarray(target)))
        return self.loss(pred, target)[0]

    @property
    def higher_is_better(self) -> bool:
        return self.head == "softmax_ce"


def _densify_layer(layer):
    if isinstance(layer, TTLinear):
        out = Dense(layer.in_features, layer.out_features, bias=layer.bias is not None)
        out.weight = layer.dense_weight()
        if layer.bias is not None:
            out.bias = layer.bias.copy()
        return out
    if isinstance(layer, TTMEmbedding):
        out = Embedding(layer.num_embeddings, layer.embedding_dim)
        out.weight = ttm_to_matrix(layer.table)
        return out
    if isinstance(layer, Residual):
        return Residual(_densify_layer(layer.inner), layer.scale)
    return layer


def densify(model: Model) -> Model:
    """The same network with every tensorized layer replaced by its dense matrix.

    Non-tensorized layers are shared with ``model``, not copied.
    """
    return Model([_densify_layer(layer) for layer in model.layers], model.head)
