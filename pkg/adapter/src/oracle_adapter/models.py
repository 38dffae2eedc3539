"""Models the adapter can serve: analytic stubs and user-supplied modules.

A servable model is anything with ``shape`` (H, W, C), ``num_classes`` and
``predict(batch) -> (N, K)`` returning probability rows.  The two stubs are
closed-form on purpose — integration tests against them can be checked by
hand.
"""
from __future__ import annotations

import importlib.util
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class UniformStub:
    """Answers 1/K everywhere: the no-information classifier."""

    shape: tuple
    num_classes: int

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return np.full((len(batch), self.num_classes), 1.0 / self.num_classes)


@dataclass
class BrightnessStub:
    """Two classes; p(class 1) is the mean pixel value, clipped to [0, 1].

    An all-0.25 image therefore scores [0.75, 0.25].
    """

    shape: tuple
    num_classes: int = 2

    def predict(self, batch: np.ndarray) -> np.ndarray:
        p1 = np.clip(batch.reshape(len(batch), -1).mean(axis=1), 0.0, 1.0)
        return np.stack([1.0 - p1, p1], axis=1)


def load_user_model(path):
    """Import a .py file and call its ``build()`` hook.

    The hook must return a servable model (``shape``, ``num_classes``,
    ``predict``); anything else is rejected before serving starts.
    """
    p = Path(path)
    if not p.is_file():
        raise ValueError(f"user model module not found: {path}")
    spec = importlib.util.spec_from_file_location(p.stem, p)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    if not hasattr(module, "build"):
        raise ValueError(f"{path} does not define build()")
    model = module.build()
    for attr in ("shape", "num_classes", "predict"):
        if not hasattr(model, attr):
            raise ValueError(f"{path}: build() result lacks {attr!r}")
    return model


def resolve_model(source: str, shape=None, num_classes=None):
    """Turn a ``--model`` argument into a servable model.

    Stubs take their geometry from the flags; a user module brings its own,
    and any flags given besides must agree with it.
    """
    if source == "stub-uniform":
        if shape is None or num_classes is None:
            raise ValueError("stub-uniform needs --shape and --classes")
        return UniformStub(tuple(int(v) for v in shape), int(num_classes))
    if source == "stub-brightness":
        if shape is None:
            raise ValueError("stub-brightness needs --shape")
        if num_classes not in (None, 2):
            raise ValueError("stub-brightness is a 2-class model")
        return BrightnessStub(tuple(int(v) for v in shape))
    model = load_user_model(source)
    if shape is not None and tuple(int(v) for v in shape) != tuple(model.shape):
        raise ValueError(
            f"--shape {tuple(shape)} does not match model shape {tuple(model.shape)}")
    if num_classes is not None and int(num_classes) != int(model.num_classes):
        raise ValueError(
            f"--classes {num_classes} does not match model ({model.num_classes})")
    return model
