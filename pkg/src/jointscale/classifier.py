"""Tiny convolutional classifier with hand-written backpropagation.

Layout: conv3x3(8) -> relu -> avgpool2 -> conv3x3(16) -> relu -> avgpool2
-> dense -> softmax. Convolutions use zero "same" padding, so spatial sides
must be divisible by 4. Everything runs in float64 on ``(B, H, W, C)``
batches; single images are promoted and demoted transparently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .imagecore import Dataset, make_rng

CONV1, CONV2 = 8, 16
MAGIC = b"JSCM"
VERSION = 1
PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class Model:
    params: dict[str, np.ndarray]
    input_shape: tuple[int, int, int]
    class_count: int

    def copy(self) -> "Model":
        return Model({k: v.copy() for k, v in self.params.items()}, self.input_shape, self.class_count)

    @property
    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 3e-3
    seed: int = 0
    adv_epsilon: float | None = None  # L2 budget for adversarial training
    adv_steps: int = 7
    history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch size and learning rate positive")


def init(seed: int, input_shape, class_count: int) -> Model:
    if class_count < 1:
        raise ValueError("class_count must be positive")
    h, w, c = input_shape
    if h % 4 or w % 4:
        raise ValueError("input sides must be divisible by 4")
    rng = make_rng(seed)

    def uniform(shape, fan_in):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape)

    dense_in = (h // 4) * (w // 4) * CONV2
    params = {
        "w1": uniform((3, 3, c, CONV1), 9 * c),
        "b1": np.zeros(CONV1),
        "w2": uniform((3, 3, CONV1, CONV2), 9 * CONV1),
        "b2": np.zeros(CONV2),
        "w3": uniform((dense_in, class_count), dense_in) * 0.5,
        "b3": np.zeros(class_count),
    }
    return Model(params, (h, w, c), class_count)


# ---------------------------------------------------------------------------
# Layers


def _im2col(x: np.ndarray) -> np.ndarray:
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))  # B,H,W,C,3,3
    return cols.reshape(B * H * W, C * 9)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    B, H, W, C = shape
    d = dcols.reshape(B, H, W, C, 3, 3)
    dxp = np.zeros((B, H + 2, W + 2, C))
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + H, j : j + W, :] += d[..., i, j]
    return dxp[:, 1:-1, 1:-1, :]


def _wmat(w: np.ndarray) -> np.ndarray:
    # (3, 3, C, F) -> (C*9, F) matching the im2col ordering (C, ky, kx)
    return w.transpose(2, 0, 1, 3).reshape(-1, w.shape[3])


def _pool(x: np.ndarray) -> np.ndarray:
    B, H, W, C = x.shape
    return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def _unpool(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25


def _forward(model: Model, x: np.ndarray):
    p = model.params
    B, H, W, _ = x.shape
    c1 = _im2col(x)
    a1 = (c1 @ _wmat(p["w1"]) + p["b1"]).reshape(B, H, W, CONV1)
    r1 = np.maximum(a1, 0.0)
    p1 = _pool(r1)
    c2 = _im2col(p1)
    a2 = (c2 @ _wmat(p["w2"]) + p["b2"]).reshape(B, H // 2, W // 2, CONV2)
    r2 = np.maximum(a2, 0.0)
    p2 = _pool(r2)
    flat = p2.reshape(B, -1)
    logits = flat @ p["w3"] + p["b3"]
    return logits, (x, c1, a1, p1, c2, a2, flat)


def _backward(model: Model, cache, dlogits: np.ndarray, want_params: bool = True, want_input: bool = True):
    p = model.params
    x, c1, a1, p1, c2, a2, flat = cache
    B, H, W, C = x.shape
    grads = {}
    if want_params:
        grads["w3"] = flat.T @ dlogits
        grads["b3"] = dlogits.sum(axis=0)
    dp2 = (dlogits @ p["w3"].T).reshape(B, H // 4, W // 4, CONV2)
    da2 = _unpool(dp2) * (a2 > 0)
    da2f = da2.reshape(-1, CONV2)
    if want_params:
        grads["w2"] = (c2.T @ da2f).reshape(CONV1, 3, 3, CONV2).transpose(1, 2, 0, 3)
        grads["b2"] = da2f.sum(axis=0)
    dp1 = _col2im(da2f @ _wmat(p["w2"]).T, p1.shape)
    da1 = (_unpool(dp1) * (a1 > 0)).reshape(-1, CONV1)
    if want_params:
        grads["w1"] = (c1.T @ da1).reshape(C, 3, 3, CONV1).transpose(1, 2, 0, 3)
        grads["b1"] = da1.sum(axis=0)
    dx = _col2im(da1 @ _wmat(p["w1"]).T, x.shape) if want_input else None
    return grads, dx


def _batch(model: Model, img: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(img, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ValueError(f"input shape {x.shape[1:]} != model input {model.input_shape}")
    return x, single


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits(model: Model, img: np.ndarray) -> np.ndarray:
    x, single = _batch(model, img)
    out, _ = _forward(model, x)
    return out[0] if single else out


def forward(model: Model, img: np.ndarray):
    """Return ``(logits, probabilities, label)`` for one image or a batch."""
    z = logits(model, img)
    probs = softmax(z)
    label = np.argmax(z, axis=-1)
    return z, probs, (int(label) if np.ndim(label) == 0 else label)


def predict(model: Model, img: np.ndarray, chunk: int = 512):
    x, single = _batch(model, img)
    labels = np.concatenate([np.argmax(_forward(model, x[i : i + chunk])[0], axis=1) for i in range(0, len(x), chunk)])
    return int(labels[0]) if single else labels


def _check_labels(y, count: int, classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (count,) and y.shape != (1,):
        raise ValueError("label count does not match batch")
    if np.any(y < 0) or np.any(y >= classes):
        raise ValueError("invalid label")
    return np.broadcast_to(y, (count,))


def cross_entropy(probabilities, y) -> float | np.ndarray:
    p = np.asarray(probabilities, dtype=np.float64)
    y_arr = np.asarray(y)
    if np.any(y_arr < 0) or np.any(y_arr >= p.shape[-1]):
        raise ValueError("invalid label")
    py = np.take_along_axis(np.atleast_2d(p), np.atleast_1d(y_arr).reshape(-1, 1), 1)[:, 0]
    out = -np.log(np.maximum(py, 1e-300))
    return float(out[0]) if p.ndim == 1 else out


def cw_margin(logit_values, y, kappa: float = 0.0) -> float | np.ndarray:
    """Untargeted margin ``max(z_y - max_{j != y} z_j + kappa, 0)``."""
    z = np.atleast_2d(np.asarray(logit_values, dtype=np.float64))
    y_arr = np.atleast_1d(np.asarray(y))
    if np.any(y_arr < 0) or np.any(y_arr >= z.shape[-1]):
        raise ValueError("invalid label")
    zy = np.take_along_axis(z, y_arr.reshape(-1, 1), 1)[:, 0]
    other = z.copy()
    np.put_along_axis(other, y_arr.reshape(-1, 1), -np.inf, 1)
    out = np.maximum(zy - other.max(axis=1) + kappa, 0.0)
    return float(out[0]) if np.ndim(logit_values) == 1 else out


def loss_and_dlogits(z: np.ndarray, y: np.ndarray, loss: str, kappa: float = 0.0):
    """Per-sample loss values and their gradient w.r.t. the logits."""
    B = len(z)
    rows = np.arange(B)
    if loss == "ce":
        p = softmax(z)
        val = -np.log(np.maximum(p[rows, y], 1e-300))
        d = p.copy()
        d[rows, y] -= 1.0
        return val, d
    if loss == "cw":
        other = z.copy()
        other[rows, y] = -np.inf
        j = other.argmax(axis=1)
        raw = z[rows, y] - z[rows, j] + kappa
        val = np.maximum(raw, 0.0)
        d = np.zeros_like(z)
        on = raw > 0
        d[rows[on], y[on]] = 1.0
        d[rows[on], j[on]] = -1.0
        return val, d
    raise ValueError(f"unknown loss {loss!r}")


def loss_and_input_gradient(model: Model, img: np.ndarray, y, loss: str = "ce", kappa: float = 0.0):
    """Per-sample loss, logits and input gradient in one pass."""
    x, single = _batch(model, img)
    y = _check_labels(y, len(x), model.class_count)
    z, cache = _forward(model, x)
    val, dz = loss_and_dlogits(z, y, loss, kappa)
    _, dx = _backward(model, cache, dz, want_params=False)
    if single:
        return float(val[0]), z[0], dx[0]
    return val, z, dx


def input_gradient(model: Model, img: np.ndarray, loss: str, y, kappa: float = 0.0) -> np.ndarray:
    return loss_and_input_gradient(model, img, y, loss, kappa)[2]


# ---------------------------------------------------------------------------
# Training


def pgd_l2(model: Model, x: np.ndarray, y: np.ndarray, epsilon: float, steps: int, step_size: float | None = None) -> np.ndarray:
    """Plain L2 PGD on the model input (no scaling), used for adversarial training."""
    step_size = 2.5 * epsilon / steps if step_size is None else step_size
    delta = np.zeros_like(x)
    for _ in range(steps):
        _, _, g = loss_and_input_gradient(model, x + delta, y, "ce")
        gn = np.sqrt((g**2).sum(axis=(1, 2, 3), keepdims=True))
        delta = delta + step_size * g / np.maximum(gn, 1e-12)
        dn = np.sqrt((delta**2).sum(axis=(1, 2, 3), keepdims=True))
        delta = delta * np.minimum(1.0, epsilon / np.maximum(dn, 1e-12))
        delta = np.clip(x + delta, 0.0, 1.0) - x
    return x + delta


def dataset_loss(model: Model, data: Dataset, chunk: int = 256) -> float:
    total = 0.0
    for i in range(0, len(data), chunk):
        z, _ = _forward(model, data.images[i : i + chunk])
        val, _ = loss_and_dlogits(z, data.labels[i : i + chunk], "ce")
        total += val.sum()
    return total / max(1, len(data))


def accuracy(model: Model, data: Dataset) -> float:
    return float(np.mean(predict(model, data.images) == data.labels)) if len(data) else 0.0


def train(model: Model, dataset: Dataset, config: TrainConfig) -> Model:
    """Minibatch Adam; adversarial when ``config.adv_epsilon`` is set."""
    if tuple(dataset.shape) != tuple(model.input_shape):
        raise ValueError("dataset shape does not match model input")
    model = model.copy()
    rng = make_rng(config.seed)
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2, t = 0.9, 0.999, 0
    n = len(dataset)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, y = dataset.images[idx], dataset.labels[idx]
            if config.adv_epsilon:
                x = pgd_l2(model, x, y, config.adv_epsilon, config.adv_steps)
            z, cache = _forward(model, x)
            _, dz = loss_and_dlogits(z, y, "ce")
            grads, _ = _backward(model, cache, dz / len(idx), want_input=False)
            t += 1
            for k in PARAM_ORDER:
                m1[k] = b1 * m1[k] + (1 - b1) * grads[k]
                m2[k] = b2 * m2[k] + (1 - b2) * grads[k] ** 2
                step = (m1[k] / (1 - b1**t)) / (np.sqrt(m2[k] / (1 - b2**t)) + 1e-8)
                model.params[k] -= config.learning_rate * step
        config.history.append(dataset_loss(model, dataset))
    return model


def adv_train(model: Model, dataset: Dataset, config: TrainConfig) -> Model:
    if not config.adv_epsilon:
        raise ValueError("adversarial training needs adv_epsilon")
    return train(model, dataset, config)


# ---------------------------------------------------------------------------
# Serialization: magic, version, input shape, class count, tensor table, data


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I3II", VERSION, *model.input_shape, model.class_count))
        fh.write(struct.pack("<I", len(PARAM_ORDER)))
        for name in PARAM_ORDER:
            arr = model.params[name]
            fh.write(struct.pack("<H", len(name)) + name.encode("ascii"))
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name in PARAM_ORDER:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_model(path) -> Model:
    buf = open(path, "rb").read()
    if buf[:4] != MAGIC:
        raise ValueError("not a model file")
    version, h, w, c, classes = struct.unpack_from("<I3II", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported model version {version}")
    pos = 24
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    table = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2 : pos + 2 + ln].decode("ascii")
        pos += 2 + ln
        (nd,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{nd}I", buf, pos + 1)
        pos += 1 + 4 * nd
        table.append((name, shape))
    params = {}
    for name, shape in table:
        size = int(np.prod(shape))
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return Model(params, (h, w, c), classes)
