"""Hard and soft vicinity weights over normalized regression labels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

DEFAULT_WEIGHT_FLOOR = 1e-3


@dataclass(frozen=True)
class VicinityParams:
    sigma: float
    nu: float
    kappa: float
    weight_floor: float = DEFAULT_WEIGHT_FLOOR

    def __post_init__(self):
        for name in ("sigma", "nu", "kappa"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a finite positive number, got {v}")
        if not 0 < self.weight_floor < 1:
            raise ConfigError(f"weight_floor must lie in (0, 1), got {self.weight_floor}")

    @property
    def soft_radius(self) -> float:
        return soft_radius(self)


@dataclass(frozen=True)
class VicinityPreset:
    name: str
    sigma: float
    nu: float
    kappa: float

    def params(self, weight_floor: float = DEFAULT_WEIGHT_FLOOR) -> VicinityParams:
        return VicinityParams(self.sigma, self.nu, self.kappa, weight_floor)


PRESETS: dict[str, VicinityPreset] = {
    p.name: p
    for p in (
        VicinityPreset("utkface64", sigma=0.041, nu=3600.0, kappa=0.017),
        VicinityPreset("utkface128", sigma=0.041, nu=900.0, kappa=0.033),
        VicinityPreset("steering_angle", sigma=0.029, nu=1000.438, kappa=0.032),
    )
}


def preset(name: str) -> VicinityPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown vicinity preset {name!r}; known: {sorted(PRESETS)}") from None


def soft_weight(y_i, y_target, nu):
    """exp(-nu * (y_i - y_target)**2); elementwise on arrays."""
    d = np.asarray(y_i, dtype=np.float64) - np.asarray(y_target, dtype=np.float64)
    w = np.exp(-nu * d * d)
    return float(w) if np.ndim(w) == 0 else w


def normalized_soft_weights(labels, y_target: float, nu: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise DomainError("normalized_soft_weights needs at least one label")
    d = labels - y_target
    # shift the exponent so the nearest label has weight 1 before normalizing;
    # the ratio is unchanged and no weight underflows to an all-zero vector
    e = -nu * d * d
    w = np.exp(e - e.max())
    return w / w.sum()


def hard_weights(labels, y_target: float, kappa: float) -> tuple[np.ndarray, bool]:
    """Uniform weights over labels with |label - y_target| <= kappa.

    Returns ``(weights, empty)``; when no label is in the vicinity the
    weights are all zero and ``empty`` is True.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise DomainError("hard_weights needs at least one label")
    if not kappa > 0:
        raise DomainError(f"kappa must be positive, got {kappa}")
    inside = np.abs(labels - y_target) <= kappa
    m = int(inside.sum())
    if m == 0:
        return np.zeros_like(labels), True
    return inside / m, False


def soft_radius(params: VicinityParams) -> float:
    """Half-width of the window where soft weights exceed the floor."""
    return soft_radius_for(params.nu, params.weight_floor)


def soft_radius_for(nu: float, weight_floor: float = DEFAULT_WEIGHT_FLOOR) -> float:
    return math.sqrt(max(0.0, -math.log(weight_floor)) / nu)
