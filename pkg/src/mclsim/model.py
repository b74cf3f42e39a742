"""Physical parameters, wall data and closed-form potentials.

Bulk double well ``F(phi) = (phi^2 - 1)^2 / (4 eps)`` and wall energy
``g(phi) = -(sqrt(2)/3) cos(theta_s) sin(pi phi / 2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import WallTag

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class PhysParams:
    """Dimensionless model parameters.

    ``lam`` is the capillary strength (``lambda`` in config files), ``M`` the
    mobility, ``g0`` a signed gravity acceleration along +y (0 disables it).
    """

    nu: float = 1.0
    lam: float = 0.1
    M: float = 0.001
    eps: float = 0.025
    g0: float = 0.0
    dt: float = 1e-3

    def __post_init__(self):
        for name in ("nu", "lam", "M", "eps", "dt"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if not np.isfinite(self.g0):
            raise ValueError("g0 must be finite")

    def with_dt(self, dt: float) -> "PhysParams":
        return replace(self, dt=dt)


@dataclass(frozen=True)
class Wall:
    theta_s: float = 90.0
    slip_l: float = 1.0 / 0.19
    u_wall: float = 0.0
    active_sclc: bool = True

    def __post_init__(self):
        if not 0.0 < self.theta_s < 180.0:
            raise ValueError(f"static contact angle must lie in (0, 180) degrees, got {self.theta_s}")
        if self.slip_l < 0:
            raise ValueError(f"slip coefficient must be >= 0, got {self.slip_l}")


@dataclass(frozen=True)
class WallSpec:
    """Per-wall contact angle, slip coefficient, tangential wall speed and SCLC flag."""

    left: Wall = field(default_factory=Wall)
    right: Wall = field(default_factory=Wall)
    bottom: Wall = field(default_factory=Wall)
    top: Wall = field(default_factory=Wall)

    def __getitem__(self, tag: WallTag) -> Wall:
        return getattr(self, WallTag(tag).name.lower())

    def items(self):
        return [(tag, self[tag]) for tag in WallTag]

    @classmethod
    def uniform(cls, **kw) -> "WallSpec":
        w = Wall(**kw)
        return cls(w, w, w, w)

    def active_walls(self) -> list[WallTag]:
        return [tag for tag, w in self.items() if w.active_sclc]

    def all_walls_at_rest(self) -> bool:
        return all(w.u_wall == 0.0 for _, w in self.items())


@dataclass(frozen=True)
class StabSpec:
    mode: str = "auto"
    value: float | None = None

    def __post_init__(self):
        if self.mode not in ("auto", "explicit"):
            raise ValueError(f"stabilization mode must be 'auto' or 'explicit', got {self.mode!r}")
        if self.mode == "explicit" and (self.value is None or self.value < 0):
            raise ValueError("explicit stabilization needs a value S >= 0")


def bulk_F(phi, eps):
    phi = np.asarray(phi, dtype=float)
    return (phi * phi - 1.0) ** 2 / (4.0 * eps)


def bulk_f(phi, eps):
    phi = np.asarray(phi, dtype=float)
    return (phi ** 3 - phi) / eps


def surf_g(phi, theta_s):
    c = math.cos(math.radians(theta_s))
    return -(SQRT2 / 3.0) * c * np.sin(0.5 * np.pi * np.asarray(phi, dtype=float))


def surf_g1(phi, theta_s):
    c = math.cos(math.radians(theta_s))
    return -(SQRT2 * np.pi / 6.0) * c * np.cos(0.5 * np.pi * np.asarray(phi, dtype=float))


def surf_g2(phi, theta_s):
    c = math.cos(math.radians(theta_s))
    return (SQRT2 * np.pi ** 2 / 12.0) * c * np.sin(0.5 * np.pi * np.asarray(phi, dtype=float))


def l_bar(theta_s) -> float:
    """Supremum of |g''| over all phi."""
    return SQRT2 * math.pi ** 2 / 12.0 * abs(math.cos(math.radians(theta_s)))


def required_S(walls: WallSpec) -> float:
    """Smallest stabilization constant allowed by the energy estimate."""
    return max((0.5 * l_bar(w.theta_s) for _, w in walls.items() if w.active_sclc), default=0.0)


def resolve_S(stab: StabSpec, walls: WallSpec, check: bool = True) -> float:
    """Resolve the stabilization constant.

    ``auto`` picks the minimal admissible value.  An explicit value below it
    raises ValueError unless ``check`` is False (used to study the boundary
    of the stability contract).
    """
    need = required_S(walls)
    if stab.mode == "auto":
        return need
    S = float(stab.value)
    # 1e-12 slack: explicit values are often typed as rounded decimals of Lbar/2
    if check and S < need * (1.0 - 1e-12):
        raise ValueError(f"S = {S} violates S >= Lbar/2 = {need:.12g} for the configured contact angles")
    return S
