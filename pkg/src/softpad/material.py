"""Rate-dependent corotational elasticity.

The pad material is modelled as corotational linear elasticity whose shear
weight is multiplied by a strain-rate stiffening factor

    s(rate) = 1 + rate_gain * (rate / rate_ref) ** rate_exponent

with stiffness-proportional damping applied by the solver.  Per element the
energy is ``w * ||F - R||_F**2`` with ``w = s * mu * V_rest`` and ``R`` the
rotation of the polar decomposition of ``F``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ConfigError, DomainError
from .kvfile import format_kv, get_float, read_kv

MATERIAL_KEYS = ("density", "young_modulus", "poisson", "damping", "rate_gain", "rate_exponent", "rate_ref")


@dataclass(frozen=True)
class MaterialParams:
    density: float = 1200.0
    young_modulus: float = 0.8e6
    poisson: float = 0.3
    damping: float = 2e-3
    rate_gain: float = 5.0
    rate_exponent: float = 0.8
    rate_ref: float = 5.0

    def __post_init__(self):
        checks = {
            "density": self.density > 0,
            "young_modulus": self.young_modulus > 0,
            "poisson": 0 <= self.poisson < 0.5,
            "damping": self.damping >= 0,
            "rate_gain": self.rate_gain >= 0,
            "rate_exponent": self.rate_exponent > 0,
            "rate_ref": self.rate_ref > 0,
        }
        for name, ok in checks.items():
            value = getattr(self, name)
            if not (math.isfinite(value) and ok):
                raise ConfigError(f"material {name} out of range: {value!r}", field=name)

    @property
    def shear_modulus(self) -> float:
        return lame_from_E_nu(self.young_modulus, self.poisson)[0]

    def with_(self, **changes) -> "MaterialParams":
        return replace(self, **changes)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def lame_from_E_nu(E: float, nu: float) -> tuple[float, float]:
    if not E > 0:
        raise DomainError(f"Young's modulus must be positive, got {E}")
    if nu >= 0.5:
        raise DomainError(f"Poisson ratio {nu} >= 0.5 is incompressible; Lame lambda is unbounded")
    if nu < 0:
        raise DomainError(f"Poisson ratio must be >= 0, got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def rate_multiplier(rate, params: MaterialParams):
    """Stiffening factor s(rate); scalar in, scalar out, arrays broadcast."""
    r = np.asarray(rate, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise DomainError("strain rate must be non-negative")
    s = 1.0 + params.rate_gain * (r / params.rate_ref) ** params.rate_exponent
    return float(s) if s.ndim == 0 else s


def effective_modulus(rate, params: MaterialParams):
    return params.young_modulus * rate_multiplier(rate, params)


def polar_rotation(F: np.ndarray, singular_tol: float = 1e-12) -> tuple[np.ndarray, bool]:
    """Nearest proper rotation to ``F``.

    Returns ``(R, fallback)``; ``fallback`` is set when ``F`` is singular or
    inverted and the reflection-corrected SVD branch had to be taken.
    """
    F = np.asarray(F, dtype=float)
    U, sig, Vt = np.linalg.svd(F)
    det = np.linalg.det(U @ Vt)
    fallback = bool(np.linalg.det(F) <= singular_tol * max(sig[0], 1.0) ** 3)
    if det < 0:
        U = U.copy()
        U[:, -1] *= -1.0
    return U @ Vt, fallback


@dataclass(frozen=True)
class ElementStrainState:
    F: np.ndarray
    strain_rate: float = 0.0


@dataclass(frozen=True)
class Projection:
    target: np.ndarray
    weight: float
    fallback: bool


def local_projection(state: ElementStrainState, params: MaterialParams, rest_volume: float = 1.0) -> Projection:
    """Corotational target R and the element's constraint weight s * mu * V."""
    R, fallback = polar_rotation(state.F)
    w = rate_multiplier(state.strain_rate, params) * params.shear_modulus * rest_volume
    return Projection(R, w, fallback)


def shape_gradients(rest: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradients g_a (4x3) with F = sum_a x_a g_a^T, and the rest volume."""
    rest = np.asarray(rest, dtype=float)
    Dm = (rest[1:] - rest[0]).T
    vol = np.linalg.det(Dm) / 6.0
    Dm_inv = np.linalg.inv(Dm)
    g = np.empty((4, 3))
    g[1:] = Dm_inv
    g[0] = -Dm_inv.sum(axis=0)
    return g, vol


def deformation_gradient(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float).T @ g


def element_energy(x: np.ndarray, rest: np.ndarray, params: MaterialParams, strain_rate: float = 0.0) -> float:
    g, vol = shape_gradients(rest)
    F = deformation_gradient(x, g)
    proj = local_projection(ElementStrainState(F, strain_rate), params, vol)
    return proj.weight * float(np.sum((F - proj.target) ** 2))


def element_forces(x: np.ndarray, rest: np.ndarray, params: MaterialParams, strain_rate: float = 0.0) -> np.ndarray:
    """Nodal elastic forces (4x3) of one tet, ``-2 w (F - R) g_a``."""
    g, vol = shape_gradients(rest)
    F = deformation_gradient(x, g)
    proj = local_projection(ElementStrainState(F, strain_rate), params, vol)
    return -2.0 * proj.weight * ((F - proj.target) @ g.T).T


def load_material(path) -> MaterialParams:
    kv = read_kv(path)
    unknown = sorted(set(kv) - set(MATERIAL_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown material keys {unknown}", field=unknown[0])
    return MaterialParams(**{k: get_float(kv, k) for k in MATERIAL_KEYS})


def material_from_kv(kv: dict[str, str], base: MaterialParams | None = None) -> MaterialParams:
    base = base or MaterialParams()
    values = {k: get_float(kv, k, getattr(base, k)) for k in MATERIAL_KEYS}
    return MaterialParams(**values)


def format_material(params: MaterialParams) -> str:
    return format_kv({k: float(getattr(params, k)) for k in MATERIAL_KEYS})


def save_material(params: MaterialParams, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_material(params))
