"""Desk-scale experiment fixtures: data, HR sources, trained models, pipelines."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..classifier import Model, TrainConfig, init, load_model, save_model, train
from ..defenses import PreventionSpec
from ..imagecore import Dataset, clamp01, make_rng, split_seed, synth_dataset
from ..scaling import ScalerSpec, identify_mask, resize_bilinear

HR_NOISE = (0.01, 0.05)  # per-image sensor noise range for synthetic HR sources


@dataclass(frozen=True)
class DeskSetup:
    side: int = 32
    class_count: int = 3
    train_size: int = 1200
    test_size: int = 300
    seed: int = 0
    epochs: int = 8


def make_hr(lr_images: np.ndarray, beta: int, rng: np.random.Generator, noise=HR_NOISE) -> np.ndarray:
    """Bilinear upscale by ``beta`` plus per-image Gaussian noise of random strength."""
    lr_images = np.asarray(lr_images, dtype=np.float64)
    h, w = lr_images.shape[-3:-1]
    hr = resize_bilinear(lr_images, (h * beta, w * beta))
    sig = rng.uniform(noise[0], noise[1], size=hr.shape[:-3] + (1, 1, 1))
    return clamp01(hr + sig * rng.standard_normal(hr.shape))


def datasets(setup: DeskSetup) -> tuple[Dataset, Dataset]:
    tr = synth_dataset(make_rng(split_seed(setup.seed, 1)), setup.train_size, setup.side, setup.class_count)
    te = synth_dataset(make_rng(split_seed(setup.seed, 2)), setup.test_size, setup.side, setup.class_count)
    return tr, te


def cache_dir() -> Path:
    return Path(os.environ.get("JOINTSCALE_CACHE", Path.home() / ".cache" / "jointscale"))


def trained_model(setup: DeskSetup, adv_epsilon: float | None = None, cache: bool = True) -> Model:
    """Train (or load a cached copy of) the desk classifier."""
    key = hashlib.sha1(repr((setup, adv_epsilon)).encode()).hexdigest()[:16]
    path = cache_dir() / f"model-{key}.bin"
    if cache and path.exists():
        return load_model(path)
    tr, _ = datasets(setup)
    cfg = TrainConfig(epochs=setup.epochs, seed=setup.seed, adv_epsilon=adv_epsilon, adv_steps=5)
    model = train(init(setup.seed, tr.shape, setup.class_count), tr, cfg)
    if cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_model(model, path)
    return model


def prevention(kind: str, scaler: ScalerSpec, window: int = 5) -> PreventionSpec:
    return PreventionSpec(kind, (window, window), identify_mask(scaler))
