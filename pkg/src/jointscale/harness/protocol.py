"""Evaluation rules applied on top of raw pipeline predictions."""

from __future__ import annotations

import numpy as np

from ..classifier import Model, predict
from ..defenses import PreventionSpec, apply_prevention
from ..imagecore import clamp01
from ..scaling import ScalerSpec, scale

AGREEMENT = 0.9


def quantize_boundary(image: np.ndarray) -> np.ndarray:
    """Round to the nearest multiple of 1/255 (halves round up), as an 8-bit file would."""
    return np.floor(clamp01(np.asarray(image, dtype=np.float64)) * 255.0 + 0.5) / 255.0


def hr_predict(model: Model, scaler: ScalerSpec, defense: PreventionSpec | None, hr_image: np.ndarray,
               rng: np.random.Generator, repeats: int = 100) -> tuple[int, float]:
    """Majority label over ``repeats`` passes and the fraction of passes that agree with it.

    Deterministic pipelines are evaluated once regardless of ``repeats``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    randomized = defense is not None and defense.kind == "randomized"
    n = repeats if randomized else 1
    x = np.asarray(hr_image, dtype=np.float64)
    batch = np.broadcast_to(x, (n,) + x.shape)
    d = batch if defense is None else apply_prevention(defense, batch, rng)
    labels = np.atleast_1d(predict(model, scale(scaler, d)))
    counts = np.bincount(labels, minlength=model.class_count)
    top = int(np.argmax(counts))
    return top, float(counts[top] / n)


def vote_correct(label: int, agreement: float, y: int) -> bool:
    """Correct only when the majority is the truth and at least 90% of passes agree."""
    return label == y and agreement >= AGREEMENT


def hr_correct(model, scaler, defense, hr_image, y: int, rng, repeats: int = 100) -> bool:
    return vote_correct(*hr_predict(model, scaler, defense, hr_image, rng, repeats), y)
