"""Reference MLP trained with quantized activation storage.

The forward pass always computes layer outputs from the original inputs, so
enabling the store never changes them; each layer's input tensor is
separately quantized and parked in the store for the backward pass. Backward
uses

    grad_in = grad_out @ W            (independent of stored activations)
    grad_W  = grad_out^T @ x_hat      (x_hat = dequantized stored input)

so activation quantization perturbs only the weight gradients. A skipped or
evicted activation freezes its layer for the step (zero weight/bias update).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import policy, quant
from .errors import InvalidInput, TrainingDiverged

_F32 = np.float32


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in) float32
    bias: np.ndarray  # (out,) float32


@dataclass
class TapeSlot:
    """Backward-pass handle for one stored (or skipped) layer input."""

    act_id: int
    shape: tuple
    stored: bool
    tensor: np.ndarray = None  # live reference when no store is attached


def init_layers(rng, sizes):
    """He-style initialization, float32 throughout."""
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((n_out, n_in)).astype(_F32) * _F32(
            math.sqrt(2.0 / n_in)
        )
        layers.append(DenseLayer(weights=w, bias=np.zeros(n_out, dtype=_F32)))
    return layers


def dense_forward(layer, x):
    return x @ layer.weights.T + layer.bias


def forward(layer, x, controller=None, act_id=0):
    """Layer output from the original x; x itself goes to the store per the
    controller's decision. The output is bit-identical with or without a
    store (rejections degrade to a skip slot, never touch y)."""
    x = np.ascontiguousarray(x, dtype=_F32)
    if not np.isfinite(x).all():
        raise InvalidInput("forward: non-finite input")
    y = dense_forward(layer, x)
    if controller is None:
        return y, TapeSlot(act_id, x.shape, stored=False, tensor=x)
    decision = controller.store_activation(act_id, x)
    return y, TapeSlot(act_id, x.shape, stored=decision.action == "store")


def backward(layer, grad_out, slot, controller):
    """Gradients for one dense layer from its tape slot.

    grad_in is computed before any stored activation is touched; it depends
    only on the incoming gradient and the weights. A missing activation
    (skip or eviction) zeroes grad_w and grad_b for the step.
    """
    grad_out = np.ascontiguousarray(grad_out, dtype=_F32)
    grad_in = grad_out @ layer.weights
    if controller is None:
        x_hat = slot.tensor
    else:
        x_hat = controller.fetch_tensor(slot.act_id, slot.shape)
    if x_hat is None:
        grad_w = np.zeros_like(layer.weights)
        grad_b = np.zeros_like(layer.bias)
    else:
        grad_w = grad_out.T @ x_hat
        grad_b = grad_out.sum(axis=0)
    return grad_in, grad_w, grad_b


def relu(x):
    return np.maximum(x, _F32(0))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z, dtype=_F32)
    return e / e.sum(axis=1, keepdims=True)


def make_dataset(rng, n, dim, separation=3.2):
    """Two Gaussian blobs at +-separation/2 along a random unit direction."""
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    labels = rng.integers(0, 2, size=n)
    x = rng.standard_normal((n, dim)) + np.outer(labels * 2 - 1, direction * separation / 2)
    return x.astype(_F32), labels.astype(np.int64)


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    dim: int = 16
    hidden: int = 16
    n_train: int = 256
    n_test: int = 512
    separation: float = 3.2
    batch: int = 32
    lr: float = 0.1
    bitwidth: int = 4  # storage width of the quantized run; 0 disables storage
    mem_budget: int = 64 * 1024 * 1024
    metric: quant.ImportanceMetric = quant.ImportanceMetric.QUANT_ERROR


@dataclass
class TrainResult:
    fp32_acc: list = field(default_factory=list)
    quant_acc: list = field(default_factory=list)
    bitwidth_hist: list = field(default_factory=list)  # per-epoch {width: count}


class _MLP:
    """Two-layer ReLU classifier with the activation store in the loop."""

    def __init__(self, rng, dim, hidden, controller=None):
        self.layers = init_layers(rng, (dim, hidden, 2))
        self.controller = controller

    def logits(self, x):
        h = relu(dense_forward(self.layers[0], x))
        return dense_forward(self.layers[1], h)

    def train_batch(self, x, y, lr, width_counts=None):
        ctl = self.controller
        if ctl is not None:
            ctl.begin_iteration()
        y1, slot1 = forward(self.layers[0], x, ctl, act_id=0)
        h = relu(y1)
        y2, slot2 = forward(self.layers[1], h, ctl, act_id=1)
        probs = _softmax(y2)
        n = x.shape[0]
        loss = float(-np.log(probs[np.arange(n), y] + 1e-12).mean())
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss is {loss}")

        grad_logits = probs
        grad_logits[np.arange(n), y] -= 1
        grad_logits /= _F32(n)
        grad_h, gw2, gb2 = backward(self.layers[1], grad_logits, slot2, ctl)
        if ctl is not None:
            h_ref = ctl.fetch_tensor(slot2.act_id, slot2.shape)
            if h_ref is None:  # dropped: fall back to the live values
                h_ref = h
        else:
            h_ref = h
        grad_y1 = grad_h * (h_ref > 0)
        _, gw1, gb1 = backward(self.layers[0], grad_y1, slot1, ctl)

        if width_counts is not None and ctl is not None:
            for slot in (slot1, slot2):
                b = (
                    ctl.store.get_entry(slot.act_id).bitwidth
                    if ctl.store.contains(slot.act_id)
                    else 0
                )
                width_counts[b] = width_counts.get(b, 0) + 1
        if ctl is not None:
            ctl.end_iteration()

        self.layers[0].weights -= _F32(lr) * gw1
        self.layers[0].bias -= _F32(lr) * gb1
        self.layers[1].weights -= _F32(lr) * gw2
        self.layers[1].bias -= _F32(lr) * gb2
        return loss

    def accuracy(self, x, y):
        pred = self.logits(x).argmax(axis=1)
        return float((pred == y).mean())


def _run(config, controller, result_acc, hist_rows=None):
    rng = np.random.default_rng(config.seed)
    x_all, y_all = make_dataset(
        rng, config.n_train + config.n_test, config.dim, config.separation
    )
    x_train, y_train = x_all[: config.n_train], y_all[: config.n_train]
    x_test, y_test = x_all[config.n_train :], y_all[config.n_train :]
    net = _MLP(np.random.default_rng(config.seed + 1), config.dim, config.hidden, controller)
    order_rng = np.random.default_rng(config.seed + 2)
    for _ in range(config.epochs):
        order = order_rng.permutation(config.n_train)
        counts = {} if hist_rows is not None else None
        for lo in range(0, config.n_train, config.batch):
            idx = order[lo : lo + config.batch]
            net.train_batch(x_train[idx], y_train[idx], config.lr, counts)
        result_acc.append(net.accuracy(x_test, y_test))
        if hist_rows is not None:
            hist_rows.append(counts)
    return net


def train(config=TrainConfig()):
    """Train the same model twice from the same seed: once plain fp32, once
    with quantized activation storage. Returns both accuracy curves and the
    per-epoch histogram of storage widths used."""
    result = TrainResult()
    _run(config, None, result.fp32_acc)
    controller = None
    if config.bitwidth != 0:
        controller = policy.Controller(
            policy.ControllerConfig(
                mem_budget=config.mem_budget,
                metric=config.metric,
                uniform_bitwidth=config.bitwidth,
            )
        )
    _run(config, controller, result.quant_acc, result.bitwidth_hist)
    return result
