"""Fluid, rock and matrix-fracture interface closures for two-phase flow.

Phase convention: phase 1 is the non-wetting phase (oil), phase 2 the
wetting phase (water).  Capillary pressure is p = u1 - u2 and saturations
satisfy s1 + s2 = 1 in each medium.

The capillary law is of Corey type,

    p_c(s) = -a * log(1 - s)   <=>   s(p) = 1 - exp(-p / a)  for p >= 0,

extended by s = 0 for p < 0.  Its convex primitive

    energy(q) = integral_0^q p_c(tau) dtau = a * ((1 - q) log(1 - q) + q)

drives the discrete energy ledger in :mod:`fracflow.energy`.

Relative permeabilities default to quadratic in the matrix and linear in
the fractures; phase mobilities are k_r(s) / mu.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

GRAVITY_DEFAULT = (0.0, -9.81)


class PhysicsError(ValueError):
    """Invalid physical parameter or out-of-range closure argument."""


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class FluidModel:
    """Densities and viscosities per phase, plus the gravity vector.

    ``rho`` and ``mu`` are indexed by phase-1-based convention via
    :func:`phase_index` (phase 1 -> entry 0).
    """

    rho: tuple[float, float] = (700.0, 1000.0)
    mu: tuple[float, float] = (5.0e-3, 1.0e-3)
    gravity: tuple[float, float] = GRAVITY_DEFAULT

    def __post_init__(self):
        if any(r <= 0 for r in self.rho):
            raise PhysicsError(f"densities must be positive, got {self.rho}")
        if any(m <= 0 for m in self.mu):
            raise PhysicsError(f"viscosities must be positive, got {self.mu}")
        if len(self.rho) != 2 or len(self.mu) != 2:
            raise PhysicsError("exactly two phases expected")

    @property
    def gravity_vec(self) -> np.ndarray:
        return np.asarray(self.gravity, dtype=float)


@dataclass(frozen=True)
class RockModel:
    """One rock region: capillary parameter, permeability, porosity.

    ``relperm`` selects the relative-permeability shape: "quadratic"
    (k_r = s^2, matrix default) or "linear" (k_r = s, fracture default).
    Fracture rocks additionally carry an aperture ``width`` (d_f) and a
    normal permeability ``perm_normal`` used by the interface
    transmissibility.
    """

    a: float                      # Pa, Corey capillary parameter
    perm: float                   # m^2, isotropic (tangential for fractures)
    porosity: float
    relperm: str = "quadratic"
    width: float | None = None    # m, fracture aperture d_f
    perm_normal: float | None = None

    def __post_init__(self):
        if self.a <= 0:
            raise PhysicsError(f"capillary parameter must be positive, got {self.a}")
        if self.perm <= 0:
            raise PhysicsError(f"permeability must be positive, got {self.perm}")
        if not 0.0 < self.porosity <= 1.0:
            raise PhysicsError(f"porosity must lie in (0, 1], got {self.porosity}")
        if self.relperm not in ("quadratic", "linear"):
            raise PhysicsError(f"unknown relperm shape {self.relperm!r}")
        if self.width is not None and self.width <= 0:
            raise PhysicsError(f"fracture width must be positive, got {self.width}")
        if self.perm_normal is not None and self.perm_normal <= 0:
            raise PhysicsError("normal permeability must be positive")


def matrix_rock(a: float, perm: float, porosity: float) -> RockModel:
    return RockModel(a=a, perm=perm, porosity=porosity, relperm="quadratic")


def fracture_rock(a: float, perm: float, porosity: float, width: float,
                  perm_normal: float | None = None) -> RockModel:
    return RockModel(a=a, perm=perm, porosity=porosity, relperm="linear",
                     width=width, perm_normal=perm_normal if perm_normal is not None else perm)


@dataclass(frozen=True)
class InterfaceModel:
    """Matrix-fracture interface layer on one side of a fracture.

    theta in [0, 1] mixes the matrix (theta) and fracture (1 - theta) rock
    types in the layer; epsilon in [0, 1] scales the layer thickness
    d_a = (d_f / 2) * epsilon; phi is the layer porosity.  The layer storage
    coefficient per unit interface length is eta = d_a * phi.
    """

    theta: float = 0.5
    epsilon: float = 0.1
    phi: float = 0.2
    d_f: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise PhysicsError(f"theta must lie in [0, 1], got {self.theta}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise PhysicsError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.epsilon == 1.0:
            warnings.warn("epsilon = 1 puts the interface layer thickness at the "
                          "upper boundary d_f / 2 of its admissible open interval",
                          stacklevel=2)
        if not 0.0 < self.phi <= 1.0:
            raise PhysicsError(f"interface porosity must lie in (0, 1], got {self.phi}")
        if self.d_f <= 0:
            raise PhysicsError(f"fracture width must be positive, got {self.d_f}")

    @property
    def d_a(self) -> float:
        """Layer thickness (d_f / 2) * epsilon [m]."""
        return 0.5 * self.d_f * self.epsilon


def storage_coefficient(iface: InterfaceModel) -> float:
    """Interface layer pore volume per unit interface area: eta = d_a * phi [m]."""
    return iface.d_a * iface.phi


@dataclass(frozen=True)
class Physics:
    """Complete closure set: one fluid, one rock per medium, interface law.

    ``mobility_floor`` is an optional additive regularization of all phase
    mobilities (0 disables it).
    """

    rock_m: RockModel
    rock_f: RockModel
    fluid: FluidModel = field(default_factory=FluidModel)
    interface: InterfaceModel = field(default_factory=InterfaceModel)
    mobility_floor: float = 0.0

    def __post_init__(self):
        if self.mobility_floor < 0:
            raise PhysicsError("mobility floor must be nonnegative")


def phase_index(phase: int) -> int:
    if phase not in (1, 2):
        raise PhysicsError(f"phase must be 1 (non-wetting) or 2 (wetting), got {phase}")
    return phase - 1


# ---------------------------------------------------------------------------
# capillary closures


def saturation(rock: RockModel, p):
    """Non-wetting saturation s(p) = 1 - exp(-p / a) for p >= 0, else 0."""
    p = np.asarray(p, dtype=float)
    return np.where(p > 0.0, -np.expm1(-p / rock.a), 0.0)


def saturation_derivative(rock: RockModel, p):
    """ds/dp; the kink at p = 0 takes the right branch value 1 / a."""
    p = np.asarray(p, dtype=float)
    return np.where(p >= 0.0, np.exp(-np.maximum(p, 0.0) / rock.a) / rock.a, 0.0)


def phase_saturation(rock: RockModel, phase: int, p):
    s = saturation(rock, p)
    return s if phase == 1 else 1.0 - s


def phase_saturation_derivative(rock: RockModel, phase: int, p):
    ds = saturation_derivative(rock, p)
    return ds if phase == 1 else -ds


def capillary_pressure(rock: RockModel, s):
    """Inverse of :func:`saturation`: p_c(s) = -a log(1 - s), with p_c(0) = 0.

    Defined for s in [0, 1); raises on out-of-range saturations.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s < 0.0) or np.any(s >= 1.0):
        raise PhysicsError("saturation outside [0, 1) has no finite capillary pressure")
    return -rock.a * np.log1p(-s)


def capillary_energy(rock: RockModel, q):
    """Convex primitive of p_c: a ((1-q) log(1-q) + q) on [0, 1].

    Returns the continuous limit value a at q = 1 (the integral of p_c up to
    full saturation converges) and +inf for q > 1, where the primitive is
    undefined.  A series branch keeps full relative accuracy for small q,
    where the closed form suffers cancellation (the leading term is q^2/2).
    """
    q = np.asarray(q, dtype=float)
    if np.any(q < 0.0):
        raise PhysicsError("saturation must be nonnegative")
    inside = q <= 1.0
    qc = np.where(inside, q, 0.0)
    small = qc < 1e-4
    qs = np.where(small, qc, 0.5)
    series = qs * qs * (1.0 / 2.0 + qs * (1.0 / 6.0 + qs * (1.0 / 12.0 + qs / 20.0)))
    qb = np.where(small | (qc >= 1.0), 0.5, qc)
    closed = (1.0 - qb) * np.log1p(-qb) + qb
    val = rock.a * np.where(qc >= 1.0, 1.0, np.where(small, series, closed))
    return np.where(inside, val, np.inf)


# ---------------------------------------------------------------------------
# mobilities


def relative_permeability(rock: RockModel, s):
    s = np.asarray(s, dtype=float)
    if rock.relperm == "quadratic":
        return s * s
    return s


def relative_permeability_derivative(rock: RockModel, s):
    s = np.asarray(s, dtype=float)
    if rock.relperm == "quadratic":
        return 2.0 * s
    return np.ones_like(s)


def mobility(rock: RockModel, fluid: FluidModel, phase: int, s, floor: float = 0.0):
    """Phase mobility k_r(s) / mu_phase (+ optional floor)."""
    return relative_permeability(rock, s) / fluid.mu[phase_index(phase)] + floor


def mobility_derivative(rock: RockModel, fluid: FluidModel, phase: int, s):
    """d(mobility)/ds at fixed phase (saturation of that same phase)."""
    return relative_permeability_derivative(rock, s) / fluid.mu[phase_index(phase)]


# ---------------------------------------------------------------------------
# interface closures


def interface_saturation(iface: InterfaceModel, rock_m: RockModel, rock_f: RockModel, p):
    """Layer saturation: theta * s_m(p) + (1 - theta) * s_f(p)."""
    return iface.theta * saturation(rock_m, p) + (1.0 - iface.theta) * saturation(rock_f, p)


def interface_saturation_derivative(iface: InterfaceModel, rock_m: RockModel,
                                    rock_f: RockModel, p):
    return (iface.theta * saturation_derivative(rock_m, p)
            + (1.0 - iface.theta) * saturation_derivative(rock_f, p))


def interface_phase_saturation(iface: InterfaceModel, rock_m: RockModel,
                               rock_f: RockModel, phase: int, p):
    s = interface_saturation(iface, rock_m, rock_f, p)
    return s if phase == 1 else 1.0 - s


def interface_mobility(iface: InterfaceModel, rock_m: RockModel, rock_f: RockModel,
                       fluid: FluidModel, phase: int, s_m, s_f, floor: float = 0.0):
    """Layer mobility: theta * k_m(s_m) + (1 - theta) * k_f(s_f).

    ``s_m`` / ``s_f`` are the *phase* saturations of ``phase`` evaluated with
    the matrix resp. fracture capillary law at the interface trace pressure.
    """
    k_m = mobility(rock_m, fluid, phase, s_m, floor)
    k_f = mobility(rock_f, fluid, phase, s_f, floor)
    return iface.theta * k_m + (1.0 - iface.theta) * k_f


def half_transmissibility(rock_f: RockModel) -> float:
    """Half-fracture normal transmissibility T_f = 2 lambda_{f,n} / d_f [m]."""
    if rock_f.width is None:
        raise PhysicsError("half transmissibility requires a fracture rock with width")
    perm_n = rock_f.perm_normal if rock_f.perm_normal is not None else rock_f.perm
    return 2.0 * perm_n / rock_f.width
