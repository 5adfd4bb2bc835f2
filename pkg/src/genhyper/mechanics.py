"""Biaxial kinematics, incompressible plane stress and the May-Newman model.

Fiber directions are fixed to the specimen axes (v = x, w = y), so the
anisotropic invariants reduce to I4v = lx**2 and I4w = ly**2. The private
``_*`` kernels use plain arithmetic only and can be traced by JAX; the public
wrappers validate their arguments first.
"""
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .errors import DomainError, SaturationError

EXP_GUARD = 700.0


class Protocol(str, Enum):
    OFF_X = "offx"
    OFF_Y = "offy"
    EQUIBIAXIAL = "equibiaxial"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"offx": cls.OFF_X, "offy": cls.OFF_Y,
                   "equibiaxial": cls.EQUIBIAXIAL, "equi": cls.EQUIBIAXIAL,
                   "eq": cls.EQUIBIAXIAL}
        if key not in aliases:
            raise DomainError(f"unknown loading protocol {value!r}")
        return aliases[key]


ALL_PROTOCOLS = (Protocol.OFF_X, Protocol.OFF_Y, Protocol.EQUIBIAXIAL)


@dataclass(frozen=True)
class LoadingProtocol:
    kind: Protocol
    stretch_grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.stretch_grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0:
            raise DomainError("stretch grid must be a non-empty 1-D sequence")
        if np.any(grid <= 0):
            raise DomainError("stretches must be positive")
        if np.any(np.diff(grid) <= 0):
            raise DomainError("stretch grid must be strictly increasing")
        object.__setattr__(self, "kind", Protocol.parse(self.kind))
        object.__setattr__(self, "stretch_grid", grid)


class Invariants(NamedTuple):
    I1: object
    I2: object
    I4v: object
    I4w: object
    J: object


@dataclass
class BiaxialCurve:
    protocol: LoadingProtocol
    sigma_xx: np.ndarray
    sigma_yy: np.ndarray

    def __post_init__(self):
        self.sigma_xx = np.asarray(self.sigma_xx, dtype=float)
        self.sigma_yy = np.asarray(self.sigma_yy, dtype=float)
        n = self.protocol.stretch_grid.size
        if self.sigma_xx.shape != (n,) or self.sigma_yy.shape != (n,):
            raise DomainError("stress arrays must align with the stretch grid")

    @property
    def kind(self):
        return self.protocol.kind

    @property
    def stretch(self):
        return self.protocol.stretch_grid

    def max_abs_stress(self):
        return float(max(np.max(np.abs(self.sigma_xx)), np.max(np.abs(self.sigma_yy))))


@dataclass(frozen=True)
class MayNewmanParams:
    mu: float
    k1: float
    k2: float

    def __post_init__(self):
        for name in ("mu", "k1", "k2"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise DomainError(f"May-Newman parameter {name} must be positive, got {value}")


def _check_positive(*values):
    for v in values:
        arr = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise DomainError(f"stretches must be finite and positive, got {v}")


def _stretches(kind, lam):
    if kind is Protocol.OFF_X:
        lx, ly = lam ** 0.5, lam
    elif kind is Protocol.OFF_Y:
        lx, ly = lam, lam ** 0.5
    else:
        lx, ly = lam, lam
    return lx, ly, 1.0 / (lx * ly)


def protocol_stretches(kind, lam):
    """Principal stretches (lx, ly, lz) of an incompressible biaxial protocol."""
    _check_positive(lam)
    return _stretches(Protocol.parse(kind), lam)


def _invariants(lx, ly, lz):
    x2, y2, z2 = lx * lx, ly * ly, lz * lz
    return Invariants(x2 + y2 + z2, x2 * y2 + y2 * z2 + z2 * x2, x2, y2, lx * ly * lz)


def invariants_from_stretches(lx, ly, lz):
    _check_positive(lx, ly, lz)
    return _invariants(lx, ly, lz)


def _plane_stress(derivs, lx, ly):
    d1, d2, d4v, d4w = derivs
    lz = 1.0 / (lx * ly)
    x2, y2, z2 = lx * lx, ly * ly, lz * lz
    i1 = x2 + y2 + z2
    sxx = 2 * d1 * (x2 - z2) + 2 * d2 * (i1 * (x2 - z2) - (x2 * x2 - z2 * z2)) + 2 * d4v * x2
    syy = 2 * d1 * (y2 - z2) + 2 * d2 * (i1 * (y2 - z2) - (y2 * y2 - z2 * z2)) + 2 * d4w * y2
    return sxx, syy


def cauchy_stress_plane_stress(derivs, lx, ly):
    """In-plane Cauchy stresses with the pressure eliminated through sigma_zz = 0.

    ``derivs`` is ``(dPsi/dI1, dPsi/dI2, dPsi/dI4v, dPsi/dI4w)``.
    """
    _check_positive(lx, ly)
    return _plane_stress(derivs, lx, ly)


def cauchy_stress_3d(derivs, lx, ly):
    """Diagonal of the full Cauchy stress, pressure taken from sigma_zz = 0.

    The zz entry is recomputed from the general incompressible expression,
    so it doubles as a consistency check of the pressure elimination.
    """
    _check_positive(lx, ly)
    d1, d2, d4v, d4w = derivs
    lz = 1.0 / (lx * ly)
    b = np.array([lx * lx, ly * ly, lz * lz], dtype=float)
    i1 = b.sum()
    p = 2 * d1 * b[2] + 2 * d2 * (i1 * b[2] - b[2] ** 2)
    fiber = np.array([2 * d4v * b[0], 2 * d4w * b[1], 0.0])
    return -p + 2 * d1 * b + 2 * d2 * (i1 * b - b * b) + fiber


def _may_newman_d1(params, i1):
    arg = params.k2 * (i1 - 3.0)
    if np.max(arg) > EXP_GUARD:
        raise SaturationError(f"exp argument {np.max(arg):.4g} exceeds guard {EXP_GUARD}")
    return params.k1 * np.exp(arg) + params.mu


def may_newman_energy(params, lx, ly):
    """Strain energy k1/k2 (exp(k2 (I1-3)) - 1) + mu (I1-3) on an incompressible state."""
    _check_positive(lx, ly)
    inv = _invariants(lx, ly, 1.0 / (lx * ly))
    arg = params.k2 * (inv.I1 - 3.0)
    if np.max(arg) > EXP_GUARD:
        raise SaturationError(f"exp argument {np.max(arg):.4g} exceeds guard {EXP_GUARD}")
    return params.k1 / params.k2 * np.expm1(arg) + params.mu * (inv.I1 - 3.0)


def may_newman_stress(params, protocol, lam):
    """(sigma_xx, sigma_yy) of the May-Newman model along a loading protocol."""
    lx, ly, lz = protocol_stretches(protocol, lam)
    inv = _invariants(lx, ly, lz)
    d1 = _may_newman_d1(params, inv.I1)
    zero = np.zeros_like(np.asarray(d1, dtype=float))
    return _plane_stress((d1, zero, zero, zero), lx, ly)


def may_newman_curve(params, protocol):
    """Evaluate May-Newman on every point of a LoadingProtocol."""
    sxx, syy = may_newman_stress(params, protocol.kind, protocol.stretch_grid)
    return BiaxialCurve(protocol, sxx, syy)
