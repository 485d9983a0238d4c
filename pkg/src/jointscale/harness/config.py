"""Experiment configuration: flat ``key = value`` files plus flag overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

KINDS = ("train", "scale-attack", "whitebox", "blackbox", "detect", "robust-scalers", "report")
DEFENSES = ("none", "median", "randomized")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "whitebox"
    scaler: str = "bilinear"
    beta: int = 3
    defense: tuple[str, ...] = ("none",)
    attack: str = "pgd"  # whitebox: pgd | cw
    modes: tuple[str, ...] = ("hr_naive", "lr_subspace")  # blackbox sampling modes
    eps_grid: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)  # scaled-L2 budgets
    kappa_grid: tuple[float, ...] = tuple(float(k) for k in range(11))
    budget_grid: tuple[int, ...] = (1000, 2000)
    detectors: tuple[str, ...] = ("unscaling", "minfilter", "spectrum")
    dataset: str = "synth"
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    side: int = 32
    class_count: int = 3
    train_size: int = 1200
    test_size: int = 300
    epochs: int = 8
    adv_epsilon: float = 0.0
    model_path: str = ""
    images: int = 20
    window: int = 5
    pgd_steps: int = 50
    cw_binary_steps: int = 10
    cw_iterations: int = 50
    cw_learning_rate: float = 0.01
    repeats: int = 100
    quantiles: tuple[float, ...] = (0.2, 0.8)
    scale_epsilon: float = 0.05
    percentile: float = 95.0
    endpoint: str = ""
    endpoint_format: str = "ppm"
    token_env: str = "JOINTSCALE_API_TOKEN"
    benign_dir: str = ""
    attack_dir: str = ""
    truth_min: float = 0.5
    success_max: float = 0.1
    seed: int = 0
    out: str = "results"

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in KINDS:
            raise ConfigError(f"experiment must be one of {KINDS}, got {self.experiment!r}")
        if self.experiment not in ("train", "report") and self.beta not in (2, 3, 4):
            raise ConfigError(f"beta must be 3 or 4 for the main experiments (2 allowed for smoke runs), got {self.beta}")
        if self.scaler not in ("nearest", "bilinear", "area"):
            raise ConfigError(f"unknown scaler {self.scaler!r}")
        for d in self.defense:
            if d not in DEFENSES:
                raise ConfigError(f"unknown defense {d!r}")
        if self.attack not in ("pgd", "cw"):
            raise ConfigError(f"unknown attack {self.attack!r}")
        for name in ("defense", "eps_grid", "kappa_grid", "budget_grid", "modes", "detectors"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be nonempty")
        if any(e <= 0 for e in self.eps_grid) or any(k < 0 for k in self.kappa_grid):
            raise ConfigError("eps_grid must be positive and kappa_grid nonnegative")
        if any(b < 100 for b in self.budget_grid):
            raise ConfigError("query budgets must be >= 100")
        if self.dataset not in ("synth", "idx"):
            raise ConfigError(f"dataset must be synth or idx, got {self.dataset!r}")
        if self.images < 1 or self.repeats < 1:
            raise ConfigError("images and repeats must be positive")
        if len(self.quantiles) != 2:
            raise ConfigError("quantiles needs two values a,b")
        return self


_PARSERS = {}
for _f in fields(ExperimentConfig):
    default = _f.default
    if isinstance(default, tuple):
        if default and isinstance(default[0], str):
            _PARSERS[_f.name] = _words
        elif default and isinstance(default[0], int):
            _PARSERS[_f.name] = _ints
        else:
            _PARSERS[_f.name] = _floats
    elif isinstance(default, bool):
        _PARSERS[_f.name] = lambda t: t.strip().lower() in ("1", "true", "yes")
    elif isinstance(default, int):
        _PARSERS[_f.name] = int
    elif isinstance(default, float):
        _PARSERS[_f.name] = float
    else:
        _PARSERS[_f.name] = str.strip


def parse_value(key: str, text: str):
    key = key.strip().replace("-", "_")
    if key not in _PARSERS:
        raise ConfigError(f"unknown key {key!r}")
    try:
        return key, _PARSERS[key](text.strip())
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {text.strip()!r} ({err})") from err


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, val = line.split("=", 1)
        try:
            k, v = parse_value(key, val)
        except ConfigError as err:
            raise ConfigError(f"{source}:{no}: {err}") from None
        values[k] = v
    return values


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """File values first, then ``overrides`` (flags win)."""
    values = parse_text(Path(path).read_text(), str(path)) if path else {}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if isinstance(v, str) and k in _PARSERS and _PARSERS[k] is not str.strip:
            k, v = parse_value(k, v)
        values[k] = v
    return replace(ExperimentConfig(), **values).validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        text = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
