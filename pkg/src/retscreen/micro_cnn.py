"""Micro-CNN family: config, initialization, forward pass, SGD training step.

Architecture: ``stage_count`` repetitions of [3x3 conv -> relu -> 2x2
max-pool] with channels doubling from ``base_channels``, then global
average pooling and a single dense head. Heads are softmax over 2 units
(binary) or k units (multiclass).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HEADS = ("binary", "multiclass")


@dataclass(frozen=True)
class MicroCnnConfig:
    input_size: int
    stage_count: int
    base_channels: int
    head: str
    n_classes: int
    seed: int
    initial_learning_rate: float

    def __post_init__(self):
        if self.stage_count < 1:
            raise ValueError(f"stage_count must be >= 1, got {self.stage_count}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_size % (2 ** self.stage_count) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{self.stage_count}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head == "binary" and self.n_classes != 2:
            raise ValueError("binary head requires n_classes == 2")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if not self.initial_learning_rate > 0:
            raise ValueError(
                f"initial_learning_rate must be positive, got {self.initial_learning_rate}")

    def stage_channels(self):
        return [self.base_channels * (2 ** i) for i in range(self.stage_count)]

    def to_json_dict(self):
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d):
        return cls(**{k: d[k] for k in (
            "input_size", "stage_count", "base_channels", "head", "n_classes",
            "seed", "initial_learning_rate")})


@dataclass
class MicroCnnModel:
    config: MicroCnnConfig
    parameters: dict  # name -> Tensor, insertion-ordered
    training_meta: dict = field(default_factory=dict)

    def clone(self):
        params = {name: Tensor(t.values.copy()) for name, t in self.parameters.items()}
        return MicroCnnModel(self.config, params, copy.deepcopy(self.training_meta))


def parameter_shapes(config):
    """Parameter names and shapes, fully determined by the config."""
    shapes = {}
    prev = 3
    for i, ch in enumerate(config.stage_channels()):
        shapes[f"conv{i}.weight"] = (ch, prev, 3, 3)
        shapes[f"conv{i}.bias"] = (ch,)
        prev = ch
    shapes["head.weight"] = (config.n_classes, prev)
    shapes["head.bias"] = (config.n_classes,)
    return shapes


def init_model(config):
    """Fan-in-scaled uniform init, fully determined by config.seed."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = Tensor(np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = Tensor(
                rng.uniform(-bound, bound, size=shape).astype(np.float32))
    return MicroCnnModel(config, params)


def _check_parameters(model):
    for name, t in model.parameters.items():
        if np.isnan(t.values).any():
            raise ValueError(f"parameter {name!r} contains NaN")


def logits_graph(model, x):
    """Build the forward graph from an input Tensor to the logits Tensor."""
    cfg = model.config
    n = x.values.shape[0]
    if x.values.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise ValueError(
            f"input shape {x.values.shape[1:]} does not match configured "
            f"(3, {cfg.input_size}, {cfg.input_size})")
    h = x
    for i in range(cfg.stage_count):
        w = model.parameters[f"conv{i}.weight"]
        b = model.parameters[f"conv{i}.bias"]
        h = ad.conv2d(h, w, stride=1, padding=1)
        h = ad.add(h, ad.reshape(b, (1, -1, 1, 1)))
        h = ad.relu(h)
        h = ad.max_pool2x2(h)
    feats = ad.global_avg_pool(h)
    logits = ad.add(ad.matmul(feats, ad.transpose2d(model.parameters["head.weight"])),
                    model.parameters["head.bias"])
    assert logits.values.shape == (n, cfg.n_classes)
    return logits, feats


def forward_batch(model, images, return_features=False):
    """Probabilities for a batch of preprocessed images, no gradient tape.

    ``images`` is (N, 3, S, S); the result is (N, n_classes) rows summing
    to 1. Pure function of (parameters, input).
    """
    _check_parameters(model)
    x = Tensor(np.ascontiguousarray(images, dtype=np.float32))
    logits, feats = logits_graph(model, x)
    probs = ad.softmax(logits).values
    if return_features:
        return probs, feats.values
    return probs


def forward(model, image):
    """Probability vector for one preprocessed (3, S, S) image."""
    arr = image.values if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"expected a (3, S, S) image, got shape {arr.shape}")
    return forward_batch(model, arr[None])[0]


class SgdMomentum:
    """Gradient descent with momentum: v = mu*v + g, p -= lr*v."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity = {}

    def step(self, parameters, lr):
        for name, p in parameters.items():
            if p.grad is None:
                continue
            v = self.velocity.get(name)
            v = p.grad if v is None else self.momentum * v + p.grad
            self.velocity[name] = v
            p.values = p.values - np.float32(lr) * v


def sgd_epoch(model, examples, lr, batch_size=32, state=None):
    """One epoch of momentum SGD over ``examples`` in the given order.

    ``examples`` is a sequence of (image (3,S,S) float32, int label).
    Returns (mean cross-entropy loss, optimizer state). Deterministic for a
    fixed model, example order and state; lr = 0 leaves parameters intact.
    """
    if len(examples) == 0:
        raise ValueError("sgd_epoch requires at least one example")
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    _check_parameters(model)
    k = model.config.n_classes
    for _, label in examples:
        if not 0 <= int(label) < k:
            raise ValueError(f"label {label} invalid for a {k}-class head")
    if state is None:
        state = SgdMomentum()
    for p in model.parameters.values():
        p.requires_grad = True

    total = 0.0
    count = 0
    try:
        for start in range(0, len(examples), batch_size):
            batch = examples[start:start + batch_size]
            x = np.stack([img for img, _ in batch]).astype(np.float32, copy=False)
            y = np.array([int(lab) for _, lab in batch])
            for p in model.parameters.values():
                p.zero_grad()
            logits, _ = logits_graph(model, Tensor(x))
            loss = ad.softmax_cross_entropy(logits, y)
            loss.backward()
            state.step(model.parameters, lr)
            total += float(loss.values) * len(batch)
            count += len(batch)
    finally:
        for p in model.parameters.values():
            p.requires_grad = False
            p.zero_grad()
    return total / count, state
