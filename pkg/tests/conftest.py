"""Shared helpers: hand-weighted probe models with analytically known outputs.

A probe model has a single delta-kernel conv stage reading one input
channel, so for a constant-channel image with value c >= 0 its class-1
logit is weight * c + bias and its class-1 probability is
sigmoid(weight * c + bias). That makes per-image scores fully controllable
from test code.
"""

import numpy as np
import pytest

from retscreen.micro_cnn import MicroCnnConfig, init_model
from retscreen.preprocess import PreprocessedImage


def probe_model(channel=0, weight=1.0, bias=0.0, input_size=4, n_classes=2,
                class1_only=True):
    head = "binary" if n_classes == 2 else "multiclass"
    cfg = MicroCnnConfig(input_size=input_size, stage_count=1, base_channels=1,
                         head=head, n_classes=n_classes, seed=0,
                         initial_learning_rate=0.1)
    model = init_model(cfg)
    for t in model.parameters.values():
        t.values[:] = 0.0
    model.parameters["conv0.weight"].values[0, channel, 1, 1] = 1.0
    if class1_only:
        model.parameters["head.weight"].values[1, 0] = weight
        model.parameters["head.bias"].values[1] = bias
    return model


def bias_model(logits, input_size=4):
    """Input-independent model emitting softmax(logits) for any image."""
    logits = np.asarray(logits, dtype=np.float32)
    k = len(logits)
    head = "binary" if k == 2 else "multiclass"
    cfg = MicroCnnConfig(input_size=input_size, stage_count=1, base_channels=1,
                         head=head, n_classes=k, seed=0,
                         initial_learning_rate=0.1)
    model = init_model(cfg)
    for t in model.parameters.values():
        t.values[:] = 0.0
    model.parameters["head.bias"].values[:] = logits
    return model


def const_pre(c0, c1=0.0, c2=0.0, size=4, source_id=""):
    """PreprocessedImage with constant channels (values must be >= 0 for the
    probe models' relu to pass them through)."""
    t = np.zeros((3, size, size), dtype=np.float32)
    t[0], t[1], t[2] = c0, c1, c2
    return PreprocessedImage(tensor=t, source_id=source_id,
                             fov_bbox=(0, 0, size, size))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def bag_free_probe_select(n_transforms=50):
    """Assert em_select's argmax never moves under strictly increasing score
    transforms (each (w > 0, b) probe is one such transform)."""
    from retscreen.training import EyeBag, em_select
    rng = np.random.default_rng(700)
    grid = np.arange(0.2, 4.0, 0.2)
    for _ in range(n_transforms):
        values = rng.choice(grid, size=rng.integers(2, 6), replace=False)
        base = int(np.argmax(values))
        w = float(rng.uniform(0.3, 1.0))
        b = float(rng.uniform(-1.5, 1.5))
        eye_bag = EyeBag(("p", "e", "s"),
                         tuple(const_pre(v) for v in values), 1)
        assert em_select(probe_model(weight=w, bias=b), eye_bag) == base
