"""Interpolation functions used to place kernel elements at real-valued positions.

Each function takes a displacement ``x`` (grid units) and a raw standard
deviation ``sigma_raw``; the effective width is ``sigma0 + |sigma_raw|``.
All functions broadcast over numpy arrays and also accept Python scalars.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

TRIANGLE_SIGMA0 = 1.0
GAUSS_SIGMA0 = 0.27


class Kind(str, enum.Enum):
    BILINEAR = "bilinear"
    TRIANGLE = "triangle"
    GAUSS = "gauss"


@dataclass(frozen=True)
class InterpolationKind:
    """Interpolation semantics for one DCLS layer.

    Use :meth:`from_name` rather than building instances by hand; it fills in
    the ``sigma0`` and clamping policy that go with each kind.
    """

    kind: Kind
    sigma0: float
    clamp_positions: bool

    def __post_init__(self):
        expected = _DEFAULTS[Kind(self.kind)]
        if (self.sigma0, self.clamp_positions) != expected:
            raise ValueError(
                f"{self.kind.value}: expected sigma0={expected[0]}, "
                f"clamp_positions={expected[1]}, got {self.sigma0}, {self.clamp_positions}"
            )

    @classmethod
    def from_name(cls, name: str | Kind | InterpolationKind) -> InterpolationKind:
        if isinstance(name, InterpolationKind):
            return name
        kind = Kind(str(name.value if isinstance(name, Kind) else name).lower())
        sigma0, clamp = _DEFAULTS[kind]
        return cls(kind, sigma0, clamp)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def learns_sigma(self) -> bool:
        return self.kind is not Kind.BILINEAR

    def effective_sigma(self, sigma_raw):
        """``sigma0 + |sigma_raw|``; bilinear ignores ``sigma_raw``."""
        sigma_raw = np.asarray(sigma_raw, dtype=np.float64)
        if self.kind is Kind.BILINEAR:
            return np.full_like(sigma_raw, self.sigma0)
        return self.sigma0 + np.abs(sigma_raw)

    def __call__(self, x, sigma_raw):
        return interp_eval(self, x, sigma_raw)


_DEFAULTS = {
    Kind.BILINEAR: (TRIANGLE_SIGMA0, True),
    Kind.TRIANGLE: (TRIANGLE_SIGMA0, False),
    Kind.GAUSS: (GAUSS_SIGMA0, False),
}

BILINEAR = InterpolationKind.from_name(Kind.BILINEAR)
TRIANGLE = InterpolationKind.from_name(Kind.TRIANGLE)
GAUSS = InterpolationKind.from_name(Kind.GAUSS)


def _scalar_or_array(out):
    return out.item() if out.ndim == 0 else out


def triangle_eval(x, sigma_raw, sigma0: float = TRIANGLE_SIGMA0):
    """``max(0, sigma0 + |sigma_raw| - |x|)``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(0.0, sigma0 + np.abs(sigma_raw) - np.abs(x))
    return _scalar_or_array(out)


def gauss_eval(x, sigma_raw, sigma0: float = GAUSS_SIGMA0):
    """``exp(-x^2 / (2 (sigma0 + |sigma_raw|)^2))``."""
    x = np.asarray(x, dtype=np.float64)
    sig = sigma0 + np.abs(np.asarray(sigma_raw, dtype=np.float64))
    out = np.exp(-0.5 * (x / sig) ** 2)
    return _scalar_or_array(out)


def interp_eval(kind: InterpolationKind, x, sigma_raw):
    if kind.kind is Kind.GAUSS:
        return gauss_eval(x, sigma_raw, kind.sigma0)
    if kind.kind is Kind.BILINEAR:
        sigma_raw = 0.0
    return triangle_eval(x, sigma_raw, kind.sigma0)


def interp_eval_grad(kind: InterpolationKind, x, sigma_raw):
    """Return ``(f, df/dx, df/dsigma_raw)`` in one pass.

    ``d|s|/ds`` uses ``sign(0) = 0``. Triangle derivatives are 0 on the
    support boundary ``|x| = sigma_eff`` and the x-slope is 0 at ``x = 0``.
    Bilinear never has a sigma gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    sigma_raw = np.asarray(sigma_raw, dtype=np.float64)
    if kind.kind is Kind.GAUSS:
        sig = kind.sigma0 + np.abs(sigma_raw)
        f = np.exp(-0.5 * (x / sig) ** 2)
        dx = -x / sig**2 * f
        dsig = np.sign(sigma_raw) * (x**2 / sig**3) * f
        return f, dx, dsig

    if kind.kind is Kind.BILINEAR:
        sig = np.full_like(sigma_raw, kind.sigma0)
    else:
        sig = kind.sigma0 + np.abs(sigma_raw)
    margin = sig - np.abs(x)
    inside = margin > 0
    f = np.where(inside, margin, 0.0)
    dx = np.where(inside, -np.sign(x), 0.0)
    if kind.kind is Kind.BILINEAR:
        dsig = np.zeros(np.broadcast(x, sigma_raw).shape)
    else:
        dsig = np.where(inside, np.sign(sigma_raw), 0.0)
    return f, dx, dsig


def interp_grad(kind: InterpolationKind, x, sigma_raw):
    """Exact partials ``(d/dx, d/dsigma_raw)`` of the reparameterized function."""
    _, dx, dsig = interp_eval_grad(kind, x, sigma_raw)
    return _scalar_or_array(np.asarray(dx)), _scalar_or_array(np.asarray(dsig))


def distance_to_kink(kind: InterpolationKind, x, sigma_raw):
    """Distance from ``(x, sigma_raw)`` to the nearest non-differentiable point.

    Triangle kinks at ``x = 0`` and ``|x| = sigma_eff``; both learnable kinds
    kink at ``sigma_raw = 0`` through ``|sigma_raw|``. Used by gradient checks
    to skip points where central differences straddle a kink.
    """
    x = np.asarray(x, dtype=np.float64)
    sigma_raw = np.asarray(sigma_raw, dtype=np.float64)
    shape = np.broadcast(x, sigma_raw).shape
    d = np.full(shape, np.inf)
    if kind.kind is not Kind.GAUSS:
        sig = kind.effective_sigma(sigma_raw)
        d = np.minimum(np.abs(np.abs(x) - sig), np.abs(x))
    if kind.learns_sigma:
        d = np.minimum(d, np.abs(sigma_raw))
    return d
