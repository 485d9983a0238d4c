"""Generic JSON-over-HTTP image classifier client and transfer success rules.

Request: ``POST <url>`` with the encoded image as the body and
``Authorization: Bearer <token>`` (token read from an environment variable).
Response: ``{"labels": [{"label": str, "score": float}, ...]}``.
"""

from __future__ import annotations

import io
import json
import os
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from ..imagecore import to_bytes8


class RemoteError(RuntimeError):
    pass


@dataclass(frozen=True)
class Endpoint:
    url: str
    format: str = "ppm"  # ppm | png
    token_env: str = "JOINTSCALE_API_TOKEN"
    timeout: float = 30.0
    top_k: int = 5


def encode(image: np.ndarray, fmt: str) -> tuple[bytes, str]:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    raw = to_bytes8(img)
    if fmt == "ppm":
        h, w, _ = raw.shape
        return f"P6\n{w} {h}\n255\n".encode("ascii") + raw.tobytes(), "image/x-portable-pixmap"
    if fmt == "png":
        from PIL import Image  # optional dependency, only for PNG endpoints

        buf = io.BytesIO()
        Image.fromarray(raw).save(buf, format="PNG")
        return buf.getvalue(), "image/png"
    raise ValueError(f"unknown image format {fmt!r}")


def parse_response(body: bytes, top_k: int = 5) -> list[tuple[str, float]]:
    try:
        doc = json.loads(body.decode("utf-8"))
        items = doc["labels"]
        out = [(str(it["label"]), float(it["score"])) for it in items]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as err:
        raise RemoteError(f"response does not match the label/score schema: {err}") from err
    out.sort(key=lambda t: -t[1])
    return out[:top_k]


def remote_classify(endpoint: Endpoint, image: np.ndarray) -> list[tuple[str, float]]:
    """Top-k ``(label, score)`` pairs, highest score first. Errors are raised, never retried."""
    token = os.environ.get(endpoint.token_env)
    if not token:
        raise RemoteError(f"auth token missing: set {endpoint.token_env}")
    body, ctype = encode(image, endpoint.format)
    req = urllib.request.Request(endpoint.url, data=body, method="POST",
                                 headers={"Content-Type": ctype, "Authorization": f"Bearer {token}"})
    try:
        with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
            payload = resp.read()
    except urllib.error.HTTPError as err:
        raise RemoteError(f"endpoint returned HTTP {err.code}") from err
    except (urllib.error.URLError, OSError) as err:
        raise RemoteError(f"network failure: {err}") from err
    return parse_response(payload, endpoint.top_k)


def score_of(results: list[tuple[str, float]], label: str) -> float:
    return next((s for l, s in results if l == label), 0.0)


def ground_truth(benign: list[tuple[str, float]], truth_min: float = 0.5) -> str | None:
    """Benign Top-1 label if its score reaches ``truth_min``; otherwise the image is excluded."""
    if not benign or benign[0][1] < truth_min:
        return None
    return benign[0][0]


def transfer_success(truth: str, attacked: list[tuple[str, float]], success_max: float = 0.1) -> bool:
    """The attack succeeds when the truth label's score falls below ``success_max``."""
    return score_of(attacked, truth) < success_max
