"""White-box attacks through the whole pipeline ``model(scale(defense(x)))``.

Every defense is reduced to a list of *views*: pairs ``(defended batch,
backward map)`` whose average is the attacker's model of the defense.

* no defense: one view, identity
* median: one view, gradient routed to each window's median element
* randomized, fresh EOT: ``N`` independent filter draws per gradient
* randomized, cached: window mean plus ``N`` cached noise fields, redrawn
  every ``tau`` gradient evaluations
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import Model, loss_and_input_gradient, predict
from .defenses import (
    CachedSampler,
    DetectionSpec,
    PreventionSpec,
    apply_prevention,
    apply_selection,
    detect_score,
    detect_score_grad,
    median_indices,
    random_choices,
    selection_adjoint,
    window_mean_adjoint,
)
from .imagecore import AttackResult, make_rng
from .scaling import ScalerSpec, adjoint_scale, scale


@dataclass
class Pipeline:
    model: Model
    scaler: ScalerSpec
    defense: PreventionSpec | None = None
    eot_samples: int = 20
    cache_interval: int = 20
    fresh_eot: bool = False  # randomized defense: redraw every step instead of caching
    expectation: bool = False  # forward pass averages eot_samples filter draws

    def __post_init__(self):
        h, w, _ = self.model.input_shape
        if self.scaler.out_shape != (h, w):
            raise ValueError(f"scaler output {self.scaler.out_shape} != model input {(h, w)}")
        if self.defense is not None and self.defense.shape != self.scaler.in_shape:
            raise ValueError("defense mask does not match the scaler input shape")
        if self.eot_samples < 1 or self.cache_interval < 1:
            raise ValueError("eot_samples and cache_interval must be positive")

    @property
    def hr_shape(self) -> tuple[int, int, int]:
        return self.scaler.in_shape + (self.model.input_shape[2],)

    @property
    def randomized(self) -> bool:
        return self.defense is not None and self.defense.kind == "randomized"


def identity_pipeline(model: Model) -> Pipeline:
    """Model alone, attacked directly in its own input space."""
    h, w, _ = model.input_shape
    return Pipeline(model, ScalerSpec("nearest", (h, w), (h, w)))


@dataclass
class SamplingState:
    """Per-run bookkeeping of randomized-filter draws."""

    draws: int = 0
    sampler: CachedSampler | None = None

    @property
    def total_draws(self) -> int:
        return self.draws + (self.sampler.draws if self.sampler else 0)


def _check_hr(pipe: Pipeline, x: np.ndarray) -> None:
    if tuple(x.shape[-3:]) != pipe.hr_shape:
        raise ValueError(f"input shape {x.shape[-3:]} != pipeline input {pipe.hr_shape}")


def defend(pipe: Pipeline, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply the pipeline's defense as deployed (one draw, or the expectation wrapper)."""
    if pipe.defense is None:
        return np.asarray(x, dtype=np.float64)
    if pipe.randomized and pipe.expectation:
        return np.mean([apply_prevention(pipe.defense, x, rng) for _ in range(pipe.eot_samples)], axis=0)
    return apply_prevention(pipe.defense, x, rng)


def pipeline_forward(pipe: Pipeline, hr_img: np.ndarray, rng: np.random.Generator | None = None):
    """``(low-resolution image, predicted label)`` for one image or a batch."""
    x = np.asarray(hr_img, dtype=np.float64)
    _check_hr(pipe, x)
    if rng is None:
        rng = make_rng(0)
    lr = scale(pipe.scaler, defend(pipe, x, rng))
    return lr, predict(pipe.model, lr)


def _views(pipe: Pipeline, x: np.ndarray, rng: np.random.Generator, state: SamplingState):
    spec = pipe.defense
    if spec is None:
        return [(x, lambda g: g)]
    if spec.kind == "median":
        idx = median_indices(spec, x)
        return [(apply_prevention(spec, x), lambda g: selection_adjoint(spec, g, idx))]
    if pipe.fresh_eot:
        out = []
        for _ in range(pipe.eot_samples):
            choice = random_choices(spec, rng, x.shape[:-3])
            out.append((apply_selection(spec, x, choice), lambda g, c=choice: selection_adjoint(spec, g, c)))
        state.draws += pipe.eot_samples
        return out
    if state.sampler is None:
        state.sampler = CachedSampler(spec, x, rng, pipe.eot_samples, pipe.cache_interval)
    state.sampler.tick(x)
    back = lambda g: window_mean_adjoint(spec, g)  # noqa: E731
    return [(d, back) for d in state.sampler.outputs(x)]


def loss_and_grad(pipe: Pipeline, x: np.ndarray, y, loss: str, rng: np.random.Generator,
                  state: SamplingState | None = None, kappa: float = 0.0):
    """Defense-averaged per-sample loss and its gradient w.r.t. the HR batch ``x``."""
    state = SamplingState() if state is None else state
    views = _views(pipe, x, rng, state)
    total, grad = 0.0, np.zeros_like(x)
    for d, back in views:
        val, _, dz = loss_and_input_gradient(pipe.model, scale(pipe.scaler, d), y, loss, kappa)
        total = total + val
        grad += back(adjoint_scale(pipe.scaler, dz))
    return total / len(views), grad / len(views)


def pipeline_input_grad(pipe: Pipeline, hr_img: np.ndarray, y: int, loss: str = "ce",
                        rng: np.random.Generator | None = None, kappa: float = 0.0) -> np.ndarray:
    x = np.asarray(hr_img, dtype=np.float64)
    _check_hr(pipe, x)
    rng = make_rng(0) if rng is None else rng
    return loss_and_grad(pipe, x[None], [y], loss, rng, kappa=kappa)[1][0]


# ---------------------------------------------------------------------------
# Detection-aware regularizer


def regularizer(detector: DetectionSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hinge ``max(score - 0.9 t, 0) / t`` per image and its gradient (batch input)."""
    t = detector.threshold
    if not np.isfinite(t) or t <= 0:
        raise ValueError("regularizer needs a calibrated finite threshold")
    vals = np.zeros(len(x))
    grads = np.zeros_like(x)
    for i, img in enumerate(x):
        excess = detect_score(detector, img) - 0.9 * t
        if excess > 0:
            vals[i] = excess / t
            grads[i] = detect_score_grad(detector, img) / t
    return vals, grads


def regularized_objective(base_loss, detector: DetectionSpec | None, gamma: float, hr_img: np.ndarray):
    """Attack objective to maximize: ``base - gamma * hinge(detector score)``."""
    if detector is None or gamma == 0:
        return base_loss
    x = np.asarray(hr_img, dtype=np.float64)
    single = x.ndim == 3
    vals, _ = regularizer(detector, x[None] if single else x)
    return base_loss - gamma * (vals[0] if single else vals)


# ---------------------------------------------------------------------------
# PGD


@dataclass
class PgdConfig:
    epsilon: float
    steps: int = 100
    step_size: float | None = None  # default 0.1 * epsilon
    seed: int = 0
    gamma: float = 0.0
    detector: DetectionSpec | None = None

    def __post_init__(self):
        if self.epsilon <= 0 or self.steps < 1:
            raise ValueError("epsilon must be positive and steps >= 1")
        if self.step_size is None:
            self.step_size = 0.1 * self.epsilon
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.gamma and self.detector is None:
            raise ValueError("gamma > 0 needs a detector")


def _norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a**2).sum(axis=(1, 2, 3), keepdims=True))


def predict_batch(pipe: Pipeline, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.atleast_1d(pipeline_forward(pipe, x, rng)[1])


def pgd_joint_batch(pipe: Pipeline, S: np.ndarray, y, cfg: PgdConfig, state: SamplingState | None = None,
                    trace: list | None = None) -> list[AttackResult]:
    """L2 PGD on a batch of HR images; one result per image."""
    S = np.asarray(S, dtype=np.float64)
    _check_hr(pipe, S[0])
    y = np.asarray(y, dtype=np.int64)
    rng = make_rng(cfg.seed)
    state = SamplingState() if state is None else state
    clean = predict_batch(pipe, S, rng) == y
    delta = np.zeros_like(S)
    kept = np.zeros_like(S)  # regularized runs: last iterate that fooled the pipeline
    fooled = np.zeros(len(S), dtype=bool)
    idx = np.flatnonzero(clean)
    for _ in range(cfg.steps if len(idx) else 0):
        x = S[idx] + delta[idx]
        val, g = loss_and_grad(pipe, x, y[idx], "ce", rng, state)
        if cfg.gamma:
            # once adversarial, stop climbing the loss and only shrink the detection score
            adv = predict_batch(pipe, x, rng) != y[idx]
            kept[idx[adv]] = delta[idx[adv]]
            fooled[idx[adv]] = True
            rv, rg = regularizer(cfg.detector, x)
            g = np.where(adv[:, None, None, None], 0.0, g)
            val, g = val - cfg.gamma * rv, g - cfg.gamma * rg
        if trace is not None:
            trace.append(float(np.mean(val)))
        d = delta[idx] + cfg.step_size * g / np.maximum(_norms(g), 1e-12)
        d = d * np.minimum(1.0, cfg.epsilon / np.maximum(_norms(d), 1e-12))
        delta[idx] = np.clip(S[idx] + d, 0.0, 1.0) - S[idx]
    if cfg.gamma and len(idx):
        still = predict_batch(pipe, S[idx] + delta[idx], rng) == y[idx]
        back = idx[still & fooled[idx]]
        delta[back] = kept[back]
    A = S + delta
    labels = predict_batch(pipe, A, rng)
    out = []
    for i in range(len(S)):
        out.append(AttackResult.from_images(S[i], A[i], pipe.scaler.beta, labels[i] != y[i], label=int(labels[i]),
                                            iterations=cfg.steps if clean[i] else 0,
                                            info={"clean_correct": bool(clean[i])}))
    return out


def pgd_joint(pipe: Pipeline, S: np.ndarray, y: int, cfg: PgdConfig) -> AttackResult:
    return pgd_joint_batch(pipe, np.asarray(S)[None], [y], cfg)[0]


# ---------------------------------------------------------------------------
# Carlini-Wagner (L2, clamp projection, binary search on c)


@dataclass
class CwConfig:
    kappa: float = 0.0
    binary_steps: int = 20
    max_iterations: int = 100
    learning_rate: float = 0.01
    seed: int = 0
    c_init: float = 1e-2
    c_range: tuple[float, float] = (1e-5, 1e4)

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.binary_steps < 1 or self.max_iterations < 1 or self.learning_rate <= 0:
            raise ValueError("binary_steps, max_iterations and learning_rate must be positive")


def cw_joint_batch(pipe: Pipeline, S: np.ndarray, y, cfg: CwConfig, state: SamplingState | None = None) -> list[AttackResult]:
    S = np.asarray(S, dtype=np.float64)
    _check_hr(pipe, S[0])
    y = np.asarray(y, dtype=np.int64)
    rng = make_rng(cfg.seed)
    state = SamplingState() if state is None else state
    B = len(S)
    c = np.full(B, cfg.c_init)
    lo, hi = np.zeros(B), np.full(B, np.inf)
    best = np.full(B, np.inf)
    best_x = S.copy()
    c_min, c_max = cfg.c_range
    # already adversarial with the required margin: zero perturbation
    f0, _ = loss_and_grad(pipe, S, y, "cw", rng, state, cfg.kappa)
    done0 = f0 <= 0
    best[done0] = 0.0
    for _ in range(cfg.binary_steps):
        idx = np.flatnonzero(~done0)
        if not len(idx):
            break
        delta = np.zeros_like(S[idx])
        m1, m2 = np.zeros_like(delta), np.zeros_like(delta)
        hit = np.zeros(len(idx), dtype=bool)
        cc = c[idx][:, None, None, None]
        for t in range(1, cfg.max_iterations + 1):
            x = S[idx] + delta
            f, gf = loss_and_grad(pipe, x, y[idx], "cw", rng, state, cfg.kappa)
            n = _norms(delta)
            ok = f <= 0
            dist = n[:, 0, 0, 0]
            better = ok & (dist < best[idx])
            best[idx[better]] = dist[better]
            best_x[idx[better]] = x[better]
            hit |= ok
            g = delta / np.maximum(n, 1e-12) + cc * gf
            m1 = 0.9 * m1 + 0.1 * g
            m2 = 0.999 * m2 + 0.001 * g**2
            step = (m1 / (1 - 0.9**t)) / (np.sqrt(m2 / (1 - 0.999**t)) + 1e-8)
            delta = np.clip(S[idx] + delta - cfg.learning_rate * step, 0.0, 1.0) - S[idx]
        x = S[idx] + delta
        f, _ = loss_and_grad(pipe, x, y[idx], "cw", rng, state, cfg.kappa)
        dist = _norms(delta)[:, 0, 0, 0]
        better = (f <= 0) & (dist < best[idx])
        best[idx[better]] = dist[better]
        best_x[idx[better]] = x[better]
        hit |= f <= 0
        for k, i in enumerate(idx):
            if hit[k]:
                hi[i] = min(hi[i], c[i])
                c[i] = (lo[i] + hi[i]) / 2 if lo[i] > 0 else c[i] / 2
            else:
                lo[i] = max(lo[i], c[i])
                c[i] = (lo[i] + hi[i]) / 2 if np.isfinite(hi[i]) else c[i] * 2
            c[i] = min(max(c[i], c_min), c_max)
    labels = predict_batch(pipe, best_x, rng)
    out = []
    for i in range(B):
        ok = np.isfinite(best[i])
        out.append(AttackResult.from_images(S[i], best_x[i], pipe.scaler.beta, ok, label=int(labels[i]),
                                            info={"c_lo": float(lo[i]), "c_hi": float(hi[i])}))
    return out


def cw_joint(pipe: Pipeline, S: np.ndarray, y: int, cfg: CwConfig) -> AttackResult:
    return cw_joint_batch(pipe, np.asarray(S)[None], [y], cfg)[0]
