"""Classic image-scaling attack: hide a target inside a high-resolution source.

Solves ``min |A - S|^2 + lam * |scale(A) - T|^2`` over ``A`` in [0, 1] by
projected gradient descent with backtracking. Success is judged by the hard
constraint ``max|scale(A) - T| <= epsilon``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import Model, predict
from .imagecore import AttackResult, clamp01, l2_norm, linf_norm, scaled_l2
from .scaling import ScalerSpec, adjoint_scale, build_matrices, scale


@dataclass
class ScalingAttackConfig:
    epsilon: float = 0.05
    lam: float = 10.0
    steps: int = 200
    learning_rate: float | None = None  # None: 1 / Lipschitz constant
    seed: int = 0
    escalate: bool = True  # multiply lam by 10 until the constraint holds
    max_lam: float = 1e6

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lam <= 0:
            raise ValueError("lam must be positive")


def _operator_norm_sq(spec: ScalerSpec) -> float:
    cm = build_matrices(spec)
    return float(np.linalg.norm(cm.L, 2) ** 2 * np.linalg.norm(cm.R, 2) ** 2)


def _objective(spec, A, S, T, lam) -> float:
    return float(np.sum((A - S) ** 2) + lam * np.sum((scale(spec, A) - T) ** 2))


def _descend(spec: ScalerSpec, A, S, T, lam, steps, lr):
    f = _objective(spec, A, S, T, lam)
    for it in range(steps):
        g = 2.0 * (A - S) + 2.0 * lam * adjoint_scale(spec, scale(spec, A) - T)
        step = lr
        for _ in range(31):  # at most 30 halvings
            cand = clamp01(A - step * g)
            fc = _objective(spec, cand, S, T, lam)
            if fc < f:
                break
            step *= 0.5
        else:
            return A, it
        if f - fc <= 1e-15 * max(f, 1.0):
            return cand, it + 1
        A, f = cand, fc
    return A, steps


def craft(spec: ScalerSpec, S: np.ndarray, T: np.ndarray, cfg: ScalingAttackConfig) -> AttackResult:
    S = np.asarray(S, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if S.shape[:2] != spec.in_shape or T.shape[:2] != spec.out_shape or S.shape[2] != T.shape[2]:
        raise ValueError("source / target shapes do not match the scaler")
    lr = cfg.learning_rate or 0.5 / (1.0 + cfg.lam * _operator_norm_sq(spec))
    A, lam, total = S.copy(), cfg.lam, 0
    lams = []
    while True:
        lams.append(lam)
        if linf_norm(scale(spec, A) - T) > cfg.epsilon:
            A, used = _descend(spec, A, S, T, lam, cfg.steps, lr)
            total += used
        resid = linf_norm(scale(spec, A) - T)
        if resid <= cfg.epsilon or not cfg.escalate or lam * 10 > cfg.max_lam:
            break
        lam *= 10
        lr = cfg.learning_rate or 0.5 / (1.0 + lam * _operator_norm_sq(spec))
    return AttackResult.from_images(S, A, spec.beta, resid <= cfg.epsilon, iterations=total,
                                    info={"residual": resid, "lam": lam, "lam_path": lams})


@dataclass
class ScalingEvaluation:
    l2: float
    scaled_l2: float
    residual: float
    flip: bool


def evaluate(spec: ScalerSpec, S: np.ndarray, T: np.ndarray, A: np.ndarray, model: Model | None = None) -> ScalingEvaluation:
    d = np.asarray(A, dtype=np.float64) - S
    resid = linf_norm(scale(spec, A) - T)
    flip = False
    if model is not None:
        flip = predict(model, scale(spec, A)) != predict(model, scale(spec, S))
    return ScalingEvaluation(l2_norm(d), scaled_l2(d, spec.beta), resid, bool(flip))
