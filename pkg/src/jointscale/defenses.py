"""Prevention and detection defenses against image-scaling attacks.

Prevention filters are masked pooling layers: pooled value on vulnerable
pixels, identity elsewhere. Windows use reflect padding (``d c b | a b c d``).
All window ops accept a single ``(m, n, C)`` image or a batch
``(B, m, n, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import ndimage, stats

from .imagecore import mse
from .scaling import ScalerSpec, _axis_matrix, build_matrices, resize_bilinear, scale

DEFAULT_EOT_SAMPLES = 20
DEFAULT_CACHE_INTERVAL = 20
DEFAULT_QUANTILES = (0.2, 0.8)
THRESHOLD_FLOOR = 1e-12
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class PreventionSpec:
    kind: str  # "median" | "randomized"
    window: tuple[int, int]
    mask: np.ndarray
    padding: str = "reflect"

    def __post_init__(self):
        if self.kind not in ("median", "randomized"):
            raise ValueError(f"unknown prevention kind {self.kind!r}")
        h, w = self.window
        if h < 3 or w < 3 or h % 2 == 0 or w % 2 == 0:
            raise ValueError("window dimensions must be odd and >= 3")
        if self.padding != "reflect":
            raise ValueError("only reflect padding is supported")
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.mask.shape)

    @property
    def positions(self) -> np.ndarray:
        return _positions(self)

    @property
    def windows(self) -> np.ndarray:
        """(K, h*w) flat source indices of each masked pixel's window."""
        return window_index(self.shape, self.window)[self.mask]


def _positions(spec: PreventionSpec) -> np.ndarray:
    return np.flatnonzero(spec.mask)


@lru_cache(maxsize=64)
def window_index(shape: tuple[int, int], window: tuple[int, int]) -> np.ndarray:
    """Flat pixel indices of every reflect-padded window: ``(m, n, h*w)``."""
    m, n = shape
    h, w = window
    idx = np.arange(m * n).reshape(m, n)
    padded = np.pad(idx, ((h // 2, h // 2), (w // 2, w // 2)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (h, w))
    out = np.ascontiguousarray(win.reshape(m, n, h * w))
    out.setflags(write=False)
    return out


def _flat(img: np.ndarray, spec: PreventionSpec) -> np.ndarray:
    if tuple(img.shape[-3:-1]) != spec.shape:
        raise ValueError(f"image shape {img.shape[-3:-1]} does not match mask {spec.shape}")
    return img.reshape(img.shape[:-3] + (-1, img.shape[-1]))


def window_values(spec: PreventionSpec, img: np.ndarray) -> np.ndarray:
    """Values of each masked window: ``(..., K, h*w, C)``."""
    return _flat(np.asarray(img, dtype=np.float64), spec)[..., spec.windows, :]


def _scatter_masked(spec: PreventionSpec, img: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.array(img, dtype=np.float64, copy=True)
    flat = out.reshape(out.shape[:-3] + (-1, out.shape[-1]))
    flat[..., spec.positions, :] = values
    return out


def median_window(values) -> float:
    """Median of a window; even counts take the lower median."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("empty window")
    return float(v[(v.size - 1) // 2])


def random_choices(spec: PreventionSpec, rng: np.random.Generator, batch_shape=()) -> np.ndarray:
    """Flat source index picked for every masked pixel: ``batch_shape + (K,)``."""
    h, w = spec.window
    k = len(spec.positions)
    pick = rng.integers(0, h * w, size=tuple(batch_shape) + (k,))
    return np.take_along_axis(np.broadcast_to(spec.windows, pick.shape + (h * w,)), pick[..., None], -1)[..., 0]


def apply_prevention(spec: PreventionSpec, img: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if spec.kind == "median":
        vals = window_values(spec, img)
        k = (vals.shape[-2] - 1) // 2
        return _scatter_masked(spec, img, np.partition(vals, k, axis=-2)[..., k, :])
    if rng is None:
        raise ValueError("randomized filtering needs an rng")
    choice = random_choices(spec, rng, img.shape[:-3])
    return apply_selection(spec, img, choice)


def apply_selection(spec: PreventionSpec, img: np.ndarray, choice: np.ndarray) -> np.ndarray:
    """Replace masked pixels by the pixels at ``choice`` (shared across channels)."""
    flat = _flat(img, spec)
    picked = np.take_along_axis(flat, choice[..., None], axis=-2)
    return _scatter_masked(spec, img, picked)


def selection_adjoint(spec: PreventionSpec, g: np.ndarray, choice: np.ndarray) -> np.ndarray:
    """Transpose of ``apply_selection`` (per-channel source index allowed)."""
    g = np.asarray(g, dtype=np.float64)
    gf = _flat(g, spec)
    out = gf.copy()
    pos = spec.positions
    out[..., pos, :] = 0.0
    routed = gf[..., pos, :]
    if choice.ndim == routed.ndim - 1:
        choice = np.broadcast_to(choice[..., None], routed.shape)
    _scatter_add(out, choice, routed)
    return out.reshape(g.shape)


def _scatter_add(out_flat: np.ndarray, src_index: np.ndarray, values: np.ndarray) -> None:
    # out_flat: (..., P, C); src_index, values: (..., K, C)
    lead = out_flat.shape[:-2]
    P, C = out_flat.shape[-2:]
    nb = int(np.prod(lead)) if lead else 1
    idx = src_index.reshape(nb, -1, C) * C + np.arange(C)
    idx = idx + (np.arange(nb) * P * C)[:, None, None]
    acc = np.bincount(idx.ravel(), weights=values.reshape(nb, -1, C).ravel(), minlength=nb * P * C)
    out_flat += acc.reshape(out_flat.shape)


def median_indices(spec: PreventionSpec, img: np.ndarray) -> np.ndarray:
    """Flat source index of each masked window's median, per channel: ``(..., K, C)``.

    Ties resolve to the lowest window position holding the median value.
    """
    vals = window_values(spec, img)
    k = (vals.shape[-2] - 1) // 2
    med = np.partition(vals, k, axis=-2)[..., k : k + 1, :]
    j = np.argmax(vals == med, axis=-2)
    return spec.windows[np.arange(len(spec.positions))[:, None], j]


def window_mean(spec: PreventionSpec, img: np.ndarray) -> np.ndarray:
    """Expected randomized filter output: box mean on masked pixels, identity elsewhere."""
    img = np.asarray(img, dtype=np.float64)
    return _scatter_masked(spec, img, window_values(spec, img).mean(axis=-2))


def window_mean_adjoint(spec: PreventionSpec, g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    gf = _flat(g, spec)
    out = gf.copy()
    pos, win = spec.positions, spec.windows
    out[..., pos, :] = 0.0
    hw = win.shape[1]
    routed = np.repeat(gf[..., pos, :] / hw, hw, axis=-2)  # (..., K*hw, C)
    idx = np.broadcast_to(win.reshape(-1)[:, None], routed.shape)
    _scatter_add(out, idx, routed)
    return out.reshape(g.shape)


def expected_defense(spec: PreventionSpec, img: np.ndarray, rng: np.random.Generator,
                     samples: int = DEFAULT_EOT_SAMPLES) -> np.ndarray:
    if spec.kind != "randomized":
        raise ValueError("expectation is defined for randomized filtering")
    if samples < 1:
        raise ValueError("need at least one sample")
    acc = np.zeros(np.shape(img))
    for _ in range(samples):
        acc += apply_prevention(spec, img, rng)
    return acc / samples


class CachedSampler:
    """Cached noise model for randomized filtering.

    The defended image is modelled as the window mean of the current image
    plus zero-mean noise ``eta`` drawn from the real filter. The ``samples``
    noise fields are reused for ``interval`` calls before being redrawn.
    """

    def __init__(self, spec: PreventionSpec, img: np.ndarray, rng: np.random.Generator,
                 samples: int = DEFAULT_EOT_SAMPLES, interval: int = DEFAULT_CACHE_INTERVAL):
        if spec.kind != "randomized":
            raise ValueError("cached sampling models randomized filtering")
        self.spec = spec
        self.rng = rng
        self.samples = samples
        self.interval = interval
        self.refreshes = 0
        self.draws = 0
        self.calls = 0
        self._since = 0
        self._resample(np.asarray(img, dtype=np.float64))

    def _resample(self, img: np.ndarray) -> None:
        mu = window_mean(self.spec, img)
        eta = np.empty((self.samples,) + img.shape)
        for i in range(self.samples):
            eta[i] = apply_prevention(self.spec, img, self.rng) - mu
        self.draws += self.samples
        self.eta = eta
        self._since = 0

    def tick(self, img: np.ndarray) -> None:
        """Count one attack iteration, redrawing the cache every ``interval`` calls."""
        if self._since >= self.interval:
            self._resample(np.asarray(img, dtype=np.float64))
            self.refreshes += 1
        self._since += 1
        self.calls += 1

    def outputs(self, img: np.ndarray) -> np.ndarray:
        """All cached defense outputs at ``img``: ``(samples,) + img.shape``."""
        return window_mean(self.spec, img)[None] + self.eta


def cached_defense(sampler: CachedSampler, img: np.ndarray) -> np.ndarray:
    """``mu(img) + eta_i`` with ``i`` cycling through the cache."""
    sampler.tick(img)
    idx = (sampler._since - 1) % sampler.samples
    return window_mean(sampler.spec, img) + sampler.eta[idx]


# ---------------------------------------------------------------------------
# Smooth median


def _smooth_median_parts(x: np.ndarray, a: float, b: float):
    n = x.shape[-1]
    srt = np.sort(x, axis=-1)
    med = srt[..., (n - 1) // 2 : (n - 1) // 2 + 1]
    pos = np.array([a, b]) * (n - 1)
    lo_i = np.floor(pos).astype(int)
    hi_i = np.minimum(lo_i + 1, n - 1)
    frac = pos - lo_i
    qa = srt[..., lo_i[0]] * (1 - frac[0]) + srt[..., hi_i[0]] * frac[0]
    qb = srt[..., lo_i[1]] * (1 - frac[1]) + srt[..., hi_i[1]] * frac[1]
    inside = (x >= qa[..., None]) & (x <= qb[..., None])
    w = (1.0 - np.abs(x - med)) * inside
    return med[..., 0], inside, w


def smooth_median_nd(x: np.ndarray, a: float = 0.2, b: float = 0.8) -> np.ndarray:
    """Trimmed, deviation-weighted average along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= a < b <= 1:
        raise ValueError("need 0 <= a < b <= 1")
    med, _, w = _smooth_median_parts(x, a, b)
    total = w.sum(axis=-1)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, (x * w).sum(axis=-1) / safe, med)


def smooth_median_grad_nd(x: np.ndarray, a: float = 0.2, b: float = 0.8, frozen: bool = False) -> np.ndarray:
    """Derivative of ``smooth_median_nd`` w.r.t. each entry (last axis).

    The trimming indicator is piecewise constant and contributes nothing.
    With ``frozen=True`` the deviation weights are treated as constants too,
    which yields the plain weighted-average rule ``w_k / sum(w)``.
    """
    x = np.asarray(x, dtype=np.float64)
    med, inside, w = _smooth_median_parts(x, a, b)
    total = w.sum(axis=-1, keepdims=True)
    ok = total > 0
    safe = np.where(ok, total, 1.0)
    grad = w / safe
    if not frozen:
        f = (x * w).sum(axis=-1, keepdims=True) / safe
        sgn = np.sign(x - med[..., None]) * inside
        grad = grad - (x - f) * sgn / safe
        r = np.argmax(x == med[..., None], axis=-1)
        extra = ((x - f) * sgn).sum(axis=-1) / safe[..., 0]
        np.put_along_axis(grad, r[..., None], np.take_along_axis(grad, r[..., None], -1) + extra[..., None], -1)
    return np.where(ok, grad, 0.0)


def smooth_median(values, a: float = DEFAULT_QUANTILES[0], b: float = DEFAULT_QUANTILES[1]) -> float:
    return float(smooth_median_nd(np.asarray(values, dtype=np.float64).ravel(), a, b))


def smooth_median_grad(values, a: float = DEFAULT_QUANTILES[0], b: float = DEFAULT_QUANTILES[1],
                       frozen: bool = False) -> np.ndarray:
    return smooth_median_grad_nd(np.asarray(values, dtype=np.float64).ravel(), a, b, frozen)


def smooth_median_defense(spec: PreventionSpec, img: np.ndarray, a: float = 0.2, b: float = 0.8) -> np.ndarray:
    vals = np.moveaxis(window_values(spec, img), -2, -1)  # (..., K, C, hw)
    return _scatter_masked(spec, img, smooth_median_nd(vals, a, b))


def smooth_median_defense_vjp(spec: PreventionSpec, img: np.ndarray, a: float = 0.2, b: float = 0.8):
    """Return a function mapping output cotangents to input cotangents."""
    vals = np.moveaxis(window_values(spec, img), -2, -1)
    jac = smooth_median_grad_nd(vals, a, b)  # (..., K, C, hw)
    win = spec.windows
    pos = spec.positions

    def vjp(g: np.ndarray) -> np.ndarray:
        # g may carry extra leading axes beyond img's batch shape
        g = np.asarray(g, dtype=np.float64)
        gf = g.reshape(g.shape[:-3] + (-1, g.shape[-1]))
        out = gf.copy()
        out[..., pos, :] = 0.0
        routed = gf[..., pos, :, None] * jac  # (..., K, C, hw)
        routed = np.moveaxis(routed, -1, -2).reshape(routed.shape[:-3] + (-1, routed.shape[-2]))
        idx = np.broadcast_to(win.reshape(-1)[:, None], routed.shape)
        _scatter_add(out, idx, routed)
        return out.reshape(g.shape)

    return vjp


# ---------------------------------------------------------------------------
# Detection


@dataclass(frozen=True)
class DetectionSpec:
    kind: str  # "unscaling" | "minfilter" | "spectrum"
    scaler: ScalerSpec | None = None
    metric: str = "mse"
    threshold: float = float("inf")
    window: int = 3

    def __post_init__(self):
        if self.kind not in ("unscaling", "minfilter", "spectrum"):
            raise ValueError(f"unknown detector {self.kind!r}")
        if self.metric not in ("mse", "ssim"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.kind == "unscaling" and self.scaler is None:
            raise ValueError("unscaling detection needs a scaler")


def spectrum_detector(threshold: float = 1.0) -> DetectionSpec:
    return DetectionSpec("spectrum", threshold=threshold)


def unscale(spec: ScalerSpec, img: np.ndarray) -> np.ndarray:
    return resize_bilinear(scale(spec, img), spec.in_shape)


def min_filter(img: np.ndarray, window: int = 3) -> np.ndarray:
    size = (1,) * (img.ndim - 3) + (window, window, 1)
    return ndimage.minimum_filter(img, size=size, mode="mirror")


def _distortion(metric: str, a: np.ndarray, b: np.ndarray) -> float:
    if metric == "mse":
        return mse(a, b)
    return max(0.0, 1.0 - ssim(a, b))


def centered_log_spectrum(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    luma = img[..., 0] if img.shape[-1] == 1 else img[..., :3] @ LUMA
    return np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(luma))))


def spectrum_peaks(img: np.ndarray, dc_radius: float = 5.0, k_sigma: float = 4.0) -> int:
    """Count local maxima above mean + k*std of the spectrum outside the DC disc."""
    spec = centered_log_spectrum(img)
    h, w = spec.shape
    yy, xx = np.mgrid[0:h, 0:w]
    outside = (yy - h // 2) ** 2 + (xx - w // 2) ** 2 > dc_radius**2
    vals = spec[outside]
    thr = vals.mean() + k_sigma * vals.std()
    local_max = spec == ndimage.maximum_filter(spec, size=3, mode="wrap")
    return int(np.count_nonzero(local_max & outside & (spec > thr)))


def detect_score(spec: DetectionSpec, img: np.ndarray) -> float:
    img = np.asarray(img, dtype=np.float64)
    if spec.kind == "spectrum":
        return float(spectrum_peaks(img))
    if spec.kind == "unscaling":
        if tuple(img.shape[:2]) != spec.scaler.in_shape:
            raise ValueError("image does not match the detector's scaler")
        return _distortion(spec.metric, img, unscale(spec.scaler, img))
    return _distortion(spec.metric, img, min_filter(img, spec.window))


def detect(spec: DetectionSpec, img: np.ndarray) -> bool:
    return detect_score(spec, img) > spec.threshold


def detect_score_grad(spec: DetectionSpec, img: np.ndarray) -> np.ndarray:
    """Gradient of the MSE-based spatial scores w.r.t. the image."""
    if spec.metric != "mse" or spec.kind == "spectrum":
        raise ValueError("only MSE unscaling/minfilter scores are differentiable")
    img = np.asarray(img, dtype=np.float64)
    if spec.kind == "unscaling":
        r = img - unscale(spec.scaler, img)
        cm = build_matrices(spec.scaler)
        (m, n), (p, q) = spec.scaler.in_shape, spec.scaler.out_shape
        Uy, Ux = _axis_matrix("bilinear", p, m), _axis_matrix("bilinear", q, n)
        up_t = np.einsum("mp,mnc,nq->pqc", Uy, r, Ux)
        return 2.0 / r.size * (r - cm.adjoint(up_t))
    h = min_filter(img, spec.window)
    r = img - h
    m, n, _ = img.shape
    pad = spec.window // 2
    idx = np.pad(np.arange(m * n).reshape(m, n), pad, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(idx, (spec.window, spec.window)).reshape(m * n, -1)
    vals = img.reshape(m * n, -1)[win]  # (P, ww, C)
    arg = win[np.arange(m * n)[:, None], np.argmin(vals, axis=1)]  # (P, C)
    back = np.zeros((m * n, img.shape[2]))
    np.add.at(back, (arg, np.arange(img.shape[2])[None, :]), r.reshape(m * n, -1))
    return 2.0 / r.size * (r - back.reshape(img.shape))


def calibrate_threshold(spec: DetectionSpec, corpus, percentile: float = 95.0) -> DetectionSpec:
    scores = [detect_score(spec, x) for x in corpus]
    if not scores:
        raise ValueError("calibration corpus is empty")
    thr = float(np.percentile(scores, percentile))
    return replace(spec, threshold=max(thr, THRESHOLD_FLOOR))


def ssim(img_a: np.ndarray, img_b: np.ndarray, win: int = 8) -> float:
    """Mean SSIM over all 8x8 windows (uniform weights), averaged over channels."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("SSIM needs equal shapes")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    c1, c2 = 0.01**2, 0.03**2
    wy, wx = min(win, a.shape[0]), min(win, a.shape[1])
    va = np.lib.stride_tricks.sliding_window_view(a, (wy, wx), axis=(0, 1))
    vb = np.lib.stride_tricks.sliding_window_view(b, (wy, wx), axis=(0, 1))
    mu_a, mu_b = va.mean(axis=(-2, -1)), vb.mean(axis=(-2, -1))
    var_a = va.var(axis=(-2, -1))
    var_b = vb.var(axis=(-2, -1))
    cov = (va * vb).mean(axis=(-2, -1)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


# ---------------------------------------------------------------------------
# Randomized-filter distortion diagnostics


@dataclass
class DistortionHistogram:
    counts: np.ndarray
    edges: np.ndarray
    loc: float
    scale: float
    ks_distance: float
    samples: np.ndarray = field(repr=False)


def distortion_histogram(spec: PreventionSpec, img: np.ndarray, rng: np.random.Generator,
                         samples: int = 200, bins: int = 41) -> DistortionHistogram:
    if samples < 100:
        raise ValueError("need at least 100 samples")
    img = np.asarray(img, dtype=np.float64)
    pos = spec.positions
    diffs = []
    for _ in range(samples):
        d = apply_prevention(spec, img, rng) - img
        diffs.append(d.reshape(-1, img.shape[-1])[pos].ravel())
    d = np.concatenate(diffs)
    loc = float(np.median(d))
    b = float(np.mean(np.abs(d - loc)))
    lim = max(float(np.max(np.abs(d))), 1e-6)
    counts, edges = np.histogram(d, bins=bins, range=(-lim, lim))
    if b > 0:
        ks = float(stats.kstest(d, stats.laplace(loc=loc, scale=b).cdf).statistic)
    else:
        ks = 0.0 if np.all(d == loc) else 1.0
    return DistortionHistogram(counts, edges, loc, b, ks, d)
