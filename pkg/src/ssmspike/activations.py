"""Element-wise output nonlinearities and their surrogate derivatives."""

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError

NON_SIGNED = "non_signed_spike"
SIGNED = "signed_spike"
GELU = "gelu"
VARIANTS = (NON_SIGNED, SIGNED, GELU)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ActivationKind:
    """Activation choice plus threshold and car-box surrogate shape.

    ``smooth=True`` replaces the spike in the forward pass by the primitive of
    the surrogate (a clipped ramp per box). Gradients of that model are then
    exact, which is what gradient checks compare against.
    """

    variant: str = SIGNED
    theta: float = 1.0
    surrogate_width: float = 0.5
    surrogate_height: float = 1.0
    smooth: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown activation {self.variant!r}, expected one of {VARIANTS}", "variant")
        if not self.theta > 0:
            raise ConfigError("threshold must be positive", "theta")
        if not self.surrogate_width > 0:
            raise ConfigError("surrogate width must be positive", "surrogate_width")

    @property
    def is_spiking(self):
        return self.variant != GELU

    def smoothed(self):
        return ActivationKind(self.variant, self.theta, self.surrogate_width, self.surrogate_height, True)


def _check_finite(y):
    if np.isnan(y).any():
        raise FloatingPointError("NaN reached the activation function")


def _ramp(kind, y):
    lo = kind.theta - kind.surrogate_width
    return kind.surrogate_height * np.clip(y - lo, 0.0, 2.0 * kind.surrogate_width)


def _box(kind, y):
    inside = np.abs(y - kind.theta) < kind.surrogate_width
    return np.where(inside, kind.surrogate_height, 0.0)


def gelu(y):
    return 0.5 * y * (1.0 + erf(y / _SQRT2))


def gelu_derivative(y):
    return 0.5 * (1.0 + erf(y / _SQRT2)) + y * _INV_SQRT_2PI * np.exp(-0.5 * y * y)


def activate(kind, y):
    y = np.asarray(y)
    _check_finite(y)
    if kind.variant == GELU:
        return gelu(y)
    if kind.smooth:
        out = _ramp(kind, y)
        if kind.variant == SIGNED:
            out = out - _ramp(kind, -y)
        return out.astype(y.dtype, copy=False)
    out = (y >= kind.theta).astype(y.dtype)
    if kind.variant == SIGNED:
        out -= (y <= -kind.theta)
    return out


def surrogate_derivative(kind, y):
    """Backward-pass stand-in for d activate / dy.

    Spiking variants use a car-box of half-width ``surrogate_width`` and
    height ``surrogate_height`` around each threshold.
    """
    y = np.asarray(y)
    if kind.variant == GELU:
        return gelu_derivative(y)
    out = _box(kind, y)
    if kind.variant == SIGNED:
        out = out + _box(kind, -y)
    return out.astype(y.dtype, copy=False)
