"""Downscaling algorithms in direct (kernel) and matrix form.

Every scaler here is linear and separable: ``scale(S) = L @ S @ R`` per
channel, with ``L`` of shape ``(p, m)`` and ``R`` of shape ``(n, q)``.
``scale`` evaluates the kernel directly by gathering source pixels;
``build_matrices`` assembles the coefficient matrices one axis at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .imagecore import InvalidRatioError

KINDS = ("nearest", "bilinear", "area")
MASK_TOL = 1e-8
PINV_RIDGE = 1e-10


class NonlinearScalerError(RuntimeError):
    """The probed black-box scaler is not linear and separable."""


@dataclass(frozen=True)
class ScalerSpec:
    kind: str
    in_shape: tuple[int, int]
    out_shape: tuple[int, int]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scaler kind {self.kind!r}")
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "out_shape", tuple(int(v) for v in self.out_shape))
        if min(self.out_shape) < 1:
            raise ValueError("output shape must be positive")
        if self.beta_v < 1 or self.beta_h < 1:
            raise InvalidRatioError("only downscaling (ratio >= 1) is supported")

    @property
    def beta_v(self) -> float:
        return self.in_shape[0] / self.out_shape[0]

    @property
    def beta_h(self) -> float:
        return self.in_shape[1] / self.out_shape[1]

    @property
    def beta(self) -> float:
        return min(self.beta_h, self.beta_v)

    @classmethod
    def from_ratio(cls, kind: str, out_shape, beta: int) -> "ScalerSpec":
        p, q = out_shape
        return cls(kind, (p * beta, q * beta), (p, q))


@dataclass(frozen=True)
class CoefficientMatrices:
    L: np.ndarray  # (p, m)
    R: np.ndarray  # (n, q)

    def apply(self, img: np.ndarray) -> np.ndarray:
        return np.einsum("pm,...mnc,nq->...pqc", self.L, img, self.R, optimize=True)

    def adjoint(self, d: np.ndarray) -> np.ndarray:
        return np.einsum("pm,...pqc,nq->...mnc", self.L, d, self.R, optimize=True)


# ---------------------------------------------------------------------------
# Per-axis sampling rules


def _source_coord(i: np.ndarray, ratio: float) -> np.ndarray:
    # half-pixel-centre convention
    return (i + 0.5) * ratio - 0.5


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    src = _source_coord(np.arange(n_out), n_in / n_out)
    return np.clip(np.floor(src + 0.5).astype(np.int64), 0, n_in - 1)


def _bilinear_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = np.clip(_source_coord(np.arange(n_out), n_in / n_out), 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, frac


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    ratio = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * ratio, (i + 1) * ratio
        for k in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            w[i, k] = max(0.0, min(hi, k + 1) - max(lo, k))
    return w / w.sum(axis=1, keepdims=True)


@lru_cache(maxsize=128)
def _axis_matrix(kind: str, n_in: int, n_out: int) -> np.ndarray:
    """Rows: output samples; columns: source pixels."""
    w = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if kind == "nearest":
        w[rows, _nearest_index(n_in, n_out)] = 1.0
    elif kind == "bilinear":
        i0, i1, frac = _bilinear_taps(n_in, n_out)
        np.add.at(w, (rows, i0), 1.0 - frac)
        np.add.at(w, (rows, i1), frac)
    else:
        w = _area_weights(n_in, n_out)
    w.setflags(write=False)
    return w


def build_matrices(spec: ScalerSpec) -> CoefficientMatrices:
    (m, n), (p, q) = spec.in_shape, spec.out_shape
    return CoefficientMatrices(_axis_matrix(spec.kind, m, p), _axis_matrix(spec.kind, n, q).T)


# ---------------------------------------------------------------------------
# Direct evaluation


def _check_shape(img: np.ndarray, shape: tuple[int, int], what: str) -> None:
    if img.ndim < 3 or tuple(img.shape[-3:-1]) != tuple(shape):
        raise ValueError(f"{what} spatial shape {img.shape[-3:-1]} != expected {shape}")


def _area_direct(img: np.ndarray, spec: ScalerSpec) -> np.ndarray:
    (m, n), (p, q) = spec.in_shape, spec.out_shape
    if m % p == 0 and n % q == 0:
        bv, bh = m // p, n // q
        blocks = img.reshape(img.shape[:-3] + (p, bv, q, bh, img.shape[-1]))
        return blocks.mean(axis=(-4, -2))
    out = np.empty(img.shape[:-3] + (p, q, img.shape[-1]))
    rv, rh = m / p, n / q
    for i in range(p):
        y0, y1 = i * rv, (i + 1) * rv
        ys = np.arange(int(math.floor(y0)), min(m, int(math.ceil(y1))))
        wy = np.minimum(y1, ys + 1) - np.maximum(y0, ys)
        for j in range(q):
            x0, x1 = j * rh, (j + 1) * rh
            xs = np.arange(int(math.floor(x0)), min(n, int(math.ceil(x1))))
            wx = np.minimum(x1, xs + 1) - np.maximum(x0, xs)
            k = np.outer(wy, wx)
            patch = img[..., ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1, :]
            out[..., i, j, :] = np.einsum("...yxc,yx->...c", patch, k) / k.sum()
    return out


def scale(spec: ScalerSpec, img: np.ndarray) -> np.ndarray:
    """Downscale ``img`` (``(..., m, n, C)``) by evaluating the kernel per output pixel."""
    img = np.asarray(img, dtype=np.float64)
    _check_shape(img, spec.in_shape, "input")
    (m, n), (p, q) = spec.in_shape, spec.out_shape
    if spec.kind == "nearest":
        iy, ix = _nearest_index(m, p), _nearest_index(n, q)
        return img[..., iy[:, None], ix[None, :], :]
    if spec.kind == "bilinear":
        y0, y1, fy = _bilinear_taps(m, p)
        x0, x1, fx = _bilinear_taps(n, q)
        fy, fx = fy[:, None, None], fx[None, :, None]
        top = img[..., y0[:, None], x0[None, :], :] * (1 - fx) + img[..., y0[:, None], x1[None, :], :] * fx
        bot = img[..., y1[:, None], x0[None, :], :] * (1 - fx) + img[..., y1[:, None], x1[None, :], :] * fx
        return top * (1 - fy) + bot * fy
    return _area_direct(img, spec)


def adjoint_scale(spec: ScalerSpec, d_lr: np.ndarray) -> np.ndarray:
    """Transpose of the flattened scaling operator applied to ``d_lr``."""
    d_lr = np.asarray(d_lr, dtype=np.float64)
    _check_shape(d_lr, spec.out_shape, "low-resolution field")
    return build_matrices(spec).adjoint(d_lr)


def resize_bilinear(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize in either direction (used for upscaling in detectors)."""
    img = np.asarray(img, dtype=np.float64)
    m, n = img.shape[-3:-1]
    Ly = _axis_matrix("bilinear", m, shape[0])
    Lx = _axis_matrix("bilinear", n, shape[1])
    return np.einsum("pm,...mnc,qn->...pqc", Ly, img, Lx, optimize=True)


def area_kernel(beta) -> np.ndarray:
    if int(beta) != beta or beta < 1:
        raise InvalidRatioError(f"area kernel needs an integer ratio >= 1, got {beta}")
    b = int(beta)
    return np.full((b, b), 1.0 / (b * b))


# ---------------------------------------------------------------------------
# Vulnerability mask


def _ridge_pinv_rows(L: np.ndarray) -> np.ndarray:
    # L^+ = L^T (L L^T + rI)^-1 for a wide matrix
    g = L @ L.T
    return np.linalg.solve(g + PINV_RIDGE * np.eye(len(g)), L).T


def identify_mask(spec: ScalerSpec) -> np.ndarray:
    """Boolean ``in_shape`` grid marking pixels that carry weight in the scaler."""
    cm = build_matrices(spec)
    Lp = _ridge_pinv_rows(cm.L)  # (m, p)
    Rp = _ridge_pinv_rows(cm.R.T).T  # (q, n)
    ones = np.ones(spec.out_shape)
    s_star = Lp @ ones @ Rp
    return np.abs(s_star) > MASK_TOL


def row_space_projector(spec: ScalerSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Least-squares projection onto the row space of the scaling operator."""
    cm = build_matrices(spec)
    Lp = _ridge_pinv_rows(cm.L)
    Rp = _ridge_pinv_rows(cm.R.T).T
    PL, PR = Lp @ cm.L, cm.R @ Rp

    def project(x: np.ndarray) -> np.ndarray:
        return np.einsum("am,...mnc,nb->...abc", PL, x, PR, optimize=True)

    return project


def probe_mask(scaler: Callable[[np.ndarray], np.ndarray], in_shape, amount: float = 0.1) -> np.ndarray:
    """Brute force: perturb each pixel and see whether any output pixel moves."""
    m, n = in_shape
    base = np.full((m, n, 1), 0.5)
    ref = scaler(base)
    mask = np.zeros((m, n), dtype=bool)
    for i in range(m):
        for j in range(n):
            x = base.copy()
            x[i, j, 0] += amount
            mask[i, j] = np.any(np.abs(scaler(x) - ref) > 1e-12)
    return mask


# ---------------------------------------------------------------------------
# Black-box coefficient extraction


def extract_matrices(blackbox: Callable[[np.ndarray], np.ndarray], in_shape, out_shape,
                     tol: float = 1e-6, rng: np.random.Generator | None = None) -> CoefficientMatrices:
    """Recover ``(L, R)`` from a separable linear scaler with ``m + n + 1`` probes.

    Row probes ``e_i 1^T`` return ``L[:, i] c^T`` and column probes
    ``1 e_j^T`` return ``a R[j, :]`` where ``a = L 1`` and ``c = R^T 1``;
    the all-ones probe fixes ``a c^T``. Gauge is chosen so ``mean(a) = 1``.
    A few random probes then verify the factorization.
    """
    (m, n), (p, q) = in_shape, out_shape

    def call(x2d):
        out = np.asarray(blackbox(x2d[:, :, None]), dtype=np.float64)
        return out[:, :, 0] if out.ndim == 3 else out

    d0 = call(np.ones((m, n)))
    if call(np.zeros((m, n))).any():
        raise NonlinearScalerError("scaler does not map zero to zero")
    u, s, vt = np.linalg.svd(d0)
    if s[0] <= 0 or (len(s) > 1 and s[1] > tol * max(1.0, s[0])):
        raise NonlinearScalerError("all-ones response is not rank one")
    a = np.sqrt(s[0]) * u[:, 0]
    c = np.sqrt(s[0]) * vt[0]
    g = a.mean()
    if abs(g) < 1e-12:
        raise NonlinearScalerError("degenerate row sums")
    a, c = a / g, c * g
    L = np.empty((p, m))
    for i in range(m):
        e = np.zeros((m, n))
        e[i, :] = 1.0
        L[:, i] = call(e) @ c / (c @ c)
    R = np.empty((n, q))
    for j in range(n):
        e = np.zeros((m, n))
        e[:, j] = 1.0
        R[j, :] = a @ call(e) / (a @ a)
    rng = rng if rng is not None else np.random.default_rng(0)
    for _ in range(3):
        x = rng.random((m, n))
        resid = np.max(np.abs(call(x) - L @ x @ R))
        if resid > tol:
            raise NonlinearScalerError(f"probe residual {resid:.3g} exceeds {tol:g}")
    return CoefficientMatrices(L, R)
