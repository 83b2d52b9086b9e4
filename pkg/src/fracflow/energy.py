"""Per-step energy ledger of a simulated trajectory.

Each accepted backward-Euler step of the two-phase system satisfies an
energy balance obtained by testing its residual rows with the computed
pressures: the change of stored capillary energy plus the (nonnegative)
diffusion and interface-exchange quadratic forms equals the work done by
volumetric sources, by the Dirichlet boundary, and by gravity, up to the
Newton defect left in the free rows.  Because the stored capillary energy
is a convex primitive of the capillary pressure, the pressure-tested
accumulation change dominates the stored-energy difference, so the slack

    slack = work(source + boundary + gravity) - stored - dissipation

is nonnegative for exactly solved steps up to the Newton truncation; a
significantly negative slack flags an inconsistent trajectory, an
under-converged solve, or a broken scheme ingredient (a non-dissipative
flux, a sign error, a non-convex stored energy).

All entries are energies per unit out-of-plane depth (Pa m^3 / m).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import physics as ph
from .assembly import upwind_flux

__all__ = [
    "EnergyStep",
    "Trajectory",
    "TrajectoryRecorder",
    "energy_audit",
    "stored_energy",
]


@dataclass(frozen=True)
class EnergyStep:
    """Energy ledger of one accepted time step."""

    step: int
    t: float
    dt: float
    stored_matrix: float          # capillary-energy change, matrix pores
    stored_fracture: float        # ... fracture pores (aperture weighted)
    stored_interface: float       # ... interface layers (both sides)
    dissipation_matrix: float     # both phases' diffusion quadratic form
    dissipation_fracture: float   # ... tangential, along the fractures
    dissipation_coupling: float   # upwinded interface-exchange form
    work_source: float            # volumetric source work on free dofs
    work_boundary: float          # work done at Dirichlet dofs
    work_gravity: float           # buoyancy work of all fluxes
    work_residual: float          # Newton defect tested on free rows

    @property
    def lhs(self) -> float:
        return (self.stored_matrix + self.stored_fracture + self.stored_interface
                + self.dissipation_matrix + self.dissipation_fracture
                + self.dissipation_coupling)

    @property
    def rhs(self) -> float:
        return self.work_source + self.work_boundary + self.work_gravity

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def rhs_scale(self) -> float:
        """Cancellation-free magnitude of the work terms (for tolerances)."""
        return (abs(self.work_source) + abs(self.work_boundary)
                + abs(self.work_gravity))


ENERGY_FIELDS = tuple(f.name for f in fields(EnergyStep))


@dataclass
class Trajectory:
    """Accepted states of a run: times (K+1,), dts (K,), states (K+1, N, 2)."""

    times: np.ndarray
    dts: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.dts = np.asarray(self.dts, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1 or self.dts.shape != (self.times.size - 1,):
            raise ValueError("need K+1 times and K step sizes")
        if self.states.shape[:1] != self.times.shape or self.states.ndim != 3 \
                or self.states.shape[2] != 2:
            raise ValueError("states must have shape (K+1, n_dofs, 2)")

    def save(self, path) -> None:
        np.savez_compressed(path, times=self.times, dts=self.dts,
                            states=self.states)

    @classmethod
    def load(cls, path) -> "Trajectory":
        with np.load(path) as data:
            return cls(times=data["times"].copy(), dts=data["dts"].copy(),
                       states=data["states"].copy())


class TrajectoryRecorder:
    """Time-loop observer collecting the accepted states of a run.

    The initial entry is taken from the first accepted step's previous state
    (its time reconstructed as ``t - dt``), so the recorded history is
    exactly the one the solves consumed, including the initial projection.
    """

    def __init__(self, history: Trajectory | None = None):
        self._times: list[float] = []
        self._dts: list[float] = []
        self._states: list[np.ndarray] = []
        if history is not None:
            self._times = [float(t) for t in history.times]
            self._dts = [float(dt) for dt in history.dts]
            self._states = [np.array(s) for s in history.states]

    def __call__(self, info) -> None:
        if not self._times:
            self._times.append(info.t - info.dt)
            self._states.append(np.array(info.U_old))
        self._times.append(info.t)
        self._dts.append(info.dt)
        self._states.append(np.array(info.U))

    @property
    def trajectory(self) -> Trajectory:
        if not self._times:
            raise ValueError("no accepted steps were recorded")
        return Trajectory(times=np.array(self._times), dts=np.array(self._dts),
                          states=np.stack(self._states))


# ---------------------------------------------------------------------------
# energy forms


def stored_energy(model, U: np.ndarray) -> tuple[float, float, float]:
    """Stored capillary energy (matrix, fracture, interface compartments).

    Per dof this is the pore volume times the convex primitive of the
    capillary pressure evaluated at the dof's saturation; interface layers
    mix the matrix and fracture primitives with the same weights as their
    storage coefficients.
    """
    gd, phys = model.gd, model.physics
    rock_m, rock_f = phys.rock_m, phys.rock_f
    p = U[:, 0] - U[:, 1]
    bm = ph.capillary_energy(rock_m, ph.saturation(rock_m, p))
    bf = ph.capillary_energy(rock_f, ph.saturation(rock_f, p))
    pore_m = rock_m.porosity * gd.vol_m
    pore_f = rock_f.porosity * gd.vol_f_w
    e_m = float(pore_m @ bm)
    e_f = float(pore_f @ bf)
    e_a = float((model.acc_m - pore_m) @ bm + (model.acc_f - pore_f) @ bf)
    return e_m, e_f, e_a


def _quadratic_forms(model, U: np.ndarray, dt: float):
    """dt-weighted dissipation forms at state U and the matching gravity work.

    Returns (matrix, fracture, coupling, gravity work); testing the
    assembled flux rows with U itself gives exactly
    matrix + fracture + coupling - gravity work.
    """
    gd, phys = model.gd, model.physics
    rock_m, rock_f = phys.rock_m, phys.rock_f
    rho = np.asarray(phys.fluid.rho)
    theta = phys.interface.theta
    diss_m = diss_f = diss_a = w_grav = 0.0

    pvals = U[gd.sub_dofs]                           # (ns, 3, 2)
    pc = pvals[:, :, 0] - pvals[:, :, 1]
    for a in (0, 1):
        keff = (model.w_sub * model._mob(rock_m, a + 1, pc)).sum(axis=1)
        # center per sub-triangle: the gradient tables annihilate constants,
        # and working with the local variations avoids losing the small
        # pressure differences to cancellation against the large absolute level
        uc = pvals[:, :, a] - pvals[:, :, a].mean(axis=1, keepdims=True)
        su = np.einsum("cij,cj->ci", model.stiff, uc)
        diss_m += dt * float(keff @ np.einsum("ci,ci->c", uc, su))
        w_grav += dt * rho[a] * float(
            keff @ np.einsum("ci,ci->c", model.grav_m, uc))

    if gd.fe_dofs.shape[0]:
        fp = U[gd.fe_dofs]                           # (nfe, 2, 2)
        pcf = fp[:, :, 0] - fp[:, :, 1]
        for a in (0, 1):
            k = model._mob(rock_f, a + 1, pcf)
            ke = 0.5 * (k[:, 0] + k[:, 1])
            du = fp[:, 1, a] - fp[:, 0, a]
            diss_f += dt * float((ke * model.fcond) @ (du * du))
            w_grav += dt * rho[a] * float(
                (ke * gd.fe_width * rock_f.perm * model.fgrav) @ du)

    if gd.n_he:
        pf = U[gd.he_frac_dof]                       # (nhe, 2)
        pcf = pf[:, 0] - pf[:, 1]
        L = gd.he_length
        for s in (0, 1):
            pt = U[gd.he_trace_dof[:, s]]
            pct = pt[:, 0] - pt[:, 1]
            for a in (0, 1):
                ka = (theta * model._mob(rock_m, a + 1, pct)
                      + (1.0 - theta) * model._mob(rock_f, a + 1, pct))
                kff = model._mob(rock_f, a + 1, pcf)
                beta = pt[:, a] - pf[:, a] - model.gshift[:, s, a]
                F = upwind_flux(model.T_half, ka, kff, beta)
                diss_a += dt * float((L * F) @ beta)
                w_grav -= dt * float((L * F) @ model.gshift[:, s, a])

    return diss_m, diss_f, diss_a, w_grav


def energy_audit(model, trajectory: Trajectory) -> list[EnergyStep]:
    """Evaluate the per-step energy ledger of an accepted-state history.

    Negative slack is reported, not raised: the ledger is the finding.
    """
    dir_mask = model.bc.mask
    free = ~dir_mask
    steps: list[EnergyStep] = []
    e_prev = stored_energy(model, trajectory.states[0])

    for n, dt in enumerate(trajectory.dts):
        U_old = trajectory.states[n]
        U = trajectory.states[n + 1]
        e_new = stored_energy(model, U)
        raw = dt * model.residual(U, U_old, float(dt), apply_dirichlet=False)
        diss_m, diss_f, diss_a, w_grav = _quadratic_forms(model, U, float(dt))
        steps.append(EnergyStep(
            step=n + 1,
            t=float(trajectory.times[n + 1]),
            dt=float(dt),
            stored_matrix=e_new[0] - e_prev[0],
            stored_fracture=e_new[1] - e_prev[1],
            stored_interface=e_new[2] - e_prev[2],
            dissipation_matrix=diss_m,
            dissipation_fracture=diss_f,
            dissipation_coupling=diss_a,
            work_source=float(dt) * float((U[free] * model.source[free]).sum()),
            work_boundary=float((U[dir_mask] * raw[dir_mask]).sum()),
            work_gravity=w_grav,
            work_residual=float((U[free] * raw[free]).sum()),
        ))
        e_prev = e_new
    return steps
