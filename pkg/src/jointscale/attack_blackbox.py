"""Hard-label boundary-walk attack with scaling-aware noise.

The loop is the usual decision-based recipe: bisect to the decision
boundary, estimate the boundary normal from the signs of noisy queries,
take a geometric step along it and bisect back toward the source. The
noise is either plain HR Gaussian (``hr_naive``), Gaussian in the LR space
pulled back through the scaler (``lr_subspace``), or pulled back through a
smooth surrogate of a median-defended scaler (``lr_subspace_median``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .defenses import PreventionSpec, apply_prevention, smooth_median_defense, smooth_median_defense_vjp
from .imagecore import AttackResult, clamp01, l2_norm, make_rng
from .scaling import ScalerSpec, adjoint_scale, row_space_projector, scale

MODES = ("hr_naive", "lr_subspace", "lr_subspace_median")


class BudgetExhausted(RuntimeError):
    pass


class InitializationError(RuntimeError):
    pass


class DegenerateNoiseError(RuntimeError):
    pass


class BlackboxOracle:
    """Label-only access to a classifier with an exact query counter.

    ``query_fn`` maps a batch ``(B, H, W, C)`` to ``B`` labels.
    """

    def __init__(self, query_fn: Callable[[np.ndarray], np.ndarray], y: int, budget: int | None = None):
        self._fn = query_fn
        self.y = int(y)
        self.budget = budget
        self.count = 0

    @property
    def remaining(self) -> float:
        return math.inf if self.budget is None else self.budget - self.count

    def labels(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        n = len(x)
        if n > self.remaining:
            raise BudgetExhausted(f"{n} queries requested, {self.remaining} left")
        self.count += n
        return np.asarray(self._fn(x))

    def adversarial(self, x: np.ndarray) -> np.ndarray:
        """Batch of booleans: label differs from the true label."""
        return self.labels(x) != self.y

    def is_adversarial(self, img: np.ndarray) -> bool:
        return bool(self.adversarial(np.asarray(img)[None])[0])


def pipeline_oracle(model, scaler: ScalerSpec, defense: PreventionSpec | None, y: int, budget: int | None = None,
                    rng: np.random.Generator | None = None) -> BlackboxOracle:
    """Oracle around ``model(scale(defense(x)))`` with the exact defense."""
    from .classifier import predict

    rng = make_rng(0) if rng is None else rng

    def fn(x):
        d = x if defense is None else apply_prevention(defense, x, rng)
        return np.atleast_1d(predict(model, scale(scaler, d)))

    return BlackboxOracle(fn, y, budget)


@dataclass
class HsjConfig:
    budget: int = 2000
    mode: str = "lr_subspace"
    init_batch: int = 100  # gradient batch at iteration 1, grows with sqrt(iteration)
    max_batch: int = 1000
    tolerance: float = 1e-3  # bisection stops at this fraction of the segment
    delta_scale: float = 1.0  # probe radius = delta_scale * distance / sqrt(d)
    max_halvings: int = 20
    init_queries: int = 200
    quantiles: tuple[float, float] = (0.2, 0.8)
    seed: int = 0

    def __post_init__(self):
        if self.budget < 100:
            raise ValueError("budget must be >= 100")
        if not 0 < self.tolerance < 0.1:
            raise ValueError("tolerance must be in (0, 0.1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 <= self.quantiles[0] < self.quantiles[1] <= 1:
            raise ValueError("quantile bounds must satisfy 0 <= a < b <= 1")


def _unit(u: np.ndarray) -> np.ndarray:
    n = np.sqrt((u**2).reshape(len(u), -1).sum(axis=1)).reshape((-1,) + (1,) * (u.ndim - 1))
    return u / np.maximum(n, 1e-300)


# ---------------------------------------------------------------------------
# Noise


class NoiseSampler:
    """Draws unit-norm HR noise fields for one boundary point."""

    def __init__(self, mode: str, scaler: ScalerSpec, defense: PreventionSpec | None, x: np.ndarray,
                 quantiles=(0.2, 0.8)):
        self.mode = mode
        self.scaler = scaler
        self.shape = np.shape(x)
        self.lr_shape = scaler.out_shape + (self.shape[2],)
        if mode == "lr_subspace_median":
            if defense is None or defense.kind != "median":
                raise ValueError("lr_subspace_median needs a median defense")
            a, b = quantiles
            self._vjp = smooth_median_defense_vjp(defense, x, a, b)
            exact = scale(scaler, apply_prevention(defense, x))
            self._offset = exact - scale(scaler, smooth_median_defense(defense, x, a, b))

    def pull_back(self, u_lr: np.ndarray) -> np.ndarray:
        """Sign-flipped gradient at ``u = 0`` of the LR projection objective."""
        if self.mode == "lr_subspace":
            return adjoint_scale(self.scaler, u_lr)
        return self._vjp(adjoint_scale(self.scaler, u_lr + self._offset))

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if self.mode == "hr_naive":
            return _unit(rng.standard_normal((count,) + self.shape))
        out = np.empty((count,) + self.shape)
        for i in range(count):
            for _ in range(11):
                u = self.pull_back(rng.standard_normal(self.lr_shape))
                n = l2_norm(u)
                if n > 1e-12:
                    out[i] = u / n
                    break
            else:
                raise DegenerateNoiseError("noise pull-back vanished on 11 draws")
        return out


def sample_subspace_noise(scaler: ScalerSpec, defense: PreventionSpec | None, x_hr: np.ndarray,
                          rng: np.random.Generator, quantiles=(0.2, 0.8)) -> np.ndarray:
    """One unit HR noise field confined to what the scaler (and defense) can see."""
    mode = "lr_subspace" if defense is None else "lr_subspace_median"
    return NoiseSampler(mode, scaler, defense, x_hr, quantiles).draw(rng, 1)[0]


# ---------------------------------------------------------------------------
# Boundary walk primitives


def boundary_search(oracle: BlackboxOracle, x: np.ndarray, x_adv: np.ndarray, tol: float = 1e-3,
                    check: bool = False) -> np.ndarray:
    """Bisect the segment ``x -> x_adv`` down to ``tol`` of its length; returns the adversarial end.

    With ``check`` the endpoints are verified first (two extra queries).
    """
    if check:
        ends = oracle.adversarial(np.stack([x, x_adv]))
        if ends[0] or not ends[1]:
            raise ValueError("boundary search needs a benign start and an adversarial end")
    if l2_norm(x_adv - x) <= tol:
        return x_adv
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if oracle.is_adversarial(x + mid * (x_adv - x)):
            hi = mid
        else:
            lo = mid
    return x + hi * (x_adv - x)


def estimate_gradient(oracle: BlackboxOracle, x_boundary: np.ndarray, batch: int, sampler: NoiseSampler,
                      rng: np.random.Generator, delta: float, retry: bool = True) -> np.ndarray:
    """Unit estimate of the direction pointing into the adversarial region."""
    u = sampler.draw(rng, batch)
    phi = np.where(oracle.adversarial(clamp01(x_boundary + delta * u)), 1.0, -1.0)
    if abs(phi.mean()) == 1.0:
        if retry and oracle.remaining >= batch:
            # all probes on one side: widen when all stay adversarial, shrink otherwise
            factor = 2.0 if phi[0] > 0 else 0.5
            return estimate_gradient(oracle, x_boundary, batch, sampler, rng, delta * factor, retry=False)
        v = (phi[:, None, None, None] * u).mean(axis=0)
    else:
        v = ((phi - phi.mean())[:, None, None, None] * u).mean(axis=0)
    return v / max(l2_norm(v), 1e-300)


def geometric_step(oracle: BlackboxOracle, x_boundary: np.ndarray, direction: np.ndarray, x_src: np.ndarray,
                   iteration: int, max_halvings: int = 20, tol: float = 1e-3) -> np.ndarray:
    """Step along ``direction`` (halving until adversarial), then bisect back toward ``x_src``."""
    eps = l2_norm(x_boundary - x_src) / math.sqrt(iteration)
    for _ in range(max_halvings + 1):
        cand = clamp01(x_boundary + eps * direction)
        if oracle.is_adversarial(cand):
            return boundary_search(oracle, x_src, cand, tol)
        eps *= 0.5
    return x_boundary


# ---------------------------------------------------------------------------
# Attack loop


@dataclass
class Trajectory:
    queries: list[int] = field(default_factory=list)
    scaled_l2: list[float] = field(default_factory=list)
    points: list = field(default_factory=list, repr=False)  # best image at each record

    def _last(self, budget: int) -> int:
        k = -1
        for i, q in enumerate(self.queries):
            if q <= budget:
                k = i
        return k

    def best_at(self, budget: int) -> float:
        k = self._last(budget)
        return self.scaled_l2[k] if k >= 0 else math.inf

    def best_image_at(self, budget: int):
        k = self._last(budget)
        return self.points[k] if k >= 0 else None

    def queries_at(self, budget: int) -> int:
        k = self._last(budget)
        return self.queries[k] if k >= 0 else 0


def _initial_point(oracle, S, cfg, candidates, project, rng) -> np.ndarray:
    pool = list(candidates) if candidates is not None else []
    while oracle.count < cfg.init_queries:
        if pool:
            cand = np.asarray(pool.pop(0), dtype=np.float64)
        else:
            cand = rng.uniform(0.0, 1.0, S.shape)
        if project is not None:
            cand = clamp01(S + project(cand - S))
        if oracle.is_adversarial(cand):
            return cand
    raise InitializationError(f"no adversarial starting point in {cfg.init_queries} queries")


def attack(oracle: BlackboxOracle, scaler: ScalerSpec, defense: PreventionSpec | None, S_hr: np.ndarray,
           cfg: HsjConfig, candidates=None) -> AttackResult:
    """Boundary walk from ``S_hr`` within ``cfg.budget`` total oracle queries.

    ``candidates`` are HR images tried (in order) as adversarial starting
    points; uniform noise images are used once they run out.
    """
    S = np.asarray(S_hr, dtype=np.float64)
    rng = make_rng(cfg.seed)
    if oracle.budget is None or oracle.budget > cfg.budget:
        oracle.budget = cfg.budget
    start = oracle.count
    if oracle.is_adversarial(S):
        return AttackResult.from_images(S, S, scaler.beta, True, queries=oracle.count - start,
                                        info={"trajectory": Trajectory([oracle.count - start], [0.0], [S])})
    project = row_space_projector(scaler) if cfg.mode == "lr_subspace" else None
    traj = Trajectory()
    best = None
    d = S.size

    def record(x):
        nonlocal best
        dist = l2_norm(x - S) / scaler.beta
        if best is None or dist < best[0]:
            best = (dist, x)
        traj.queries.append(oracle.count - start)
        traj.scaled_l2.append(best[0])
        traj.points.append(best[1])

    it = 0
    try:
        x = _initial_point(oracle, S, cfg, candidates, project, rng)
        x = boundary_search(oracle, S, x, cfg.tolerance)
        record(x)
        while True:
            it += 1
            dist = l2_norm(x - S)
            sampler = NoiseSampler(cfg.mode, scaler, defense, x, cfg.quantiles)
            batch = int(min(cfg.max_batch, cfg.init_batch * math.sqrt(it)))
            batch = int(min(batch, oracle.remaining))
            if batch < 2:
                break
            delta = cfg.delta_scale * dist / math.sqrt(d)
            v = estimate_gradient(oracle, x, batch, sampler, rng, delta)
            x = geometric_step(oracle, x, v, S, it, cfg.max_halvings, cfg.tolerance)
            record(x)
    except BudgetExhausted:
        pass
    if best is None:
        raise InitializationError("budget exhausted before an adversarial point was found")
    A = best[1]
    return AttackResult.from_images(S, A, scaler.beta, True, queries=oracle.count - start, iterations=it,
                                    info={"trajectory": traj, "mode": cfg.mode})
