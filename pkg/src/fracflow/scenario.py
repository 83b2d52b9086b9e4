"""Scenario assembly: from a resolved configuration to a ready-to-run model.

The reference setting is a water-filled reservoir with oil entering from
the bottom boundary: Dirichlet phase pressures at bottom and top (water
pressure plus a capillary offset for the oil phase), no-flux sides,
hydrostatic water-pressure initial state with zero capillary pressure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import fracflow.physics as ph
from .assembly import BoundaryConditions, DiscreteModel, boundary_conditions
from .config import RunConfig
from .gd import GradientDiscretisation
from .mesh import (
    FractureSpec,
    Mesh,
    SidesIndex,
    build_structured_mesh,
    read_mesh,
    side_geometry,
)
from .solver import NewtonConfig, TimeControl
from .vag import VagLayout, build_vag

__all__ = [
    "Scenario",
    "build_scenario",
    "fracture_profiles",
    "front_position",
    "hydrostatic_initial",
    "oil_volumes",
]

GRAVITY = 9.81  # m/s^2, downward


@dataclass
class Scenario:
    """Everything a run needs, built once from a RunConfig."""

    cfg: RunConfig
    mesh: Mesh
    sides: SidesIndex
    gd: GradientDiscretisation
    layout: VagLayout
    physics: ph.Physics
    bc: BoundaryConditions
    model: DiscreteModel
    U0: np.ndarray
    control: TimeControl
    newton: NewtonConfig
    # per fracture: node dof ids along the chain walk (n_edges + 1 entries)
    frac_dof_walk: tuple[np.ndarray, ...] = field(default=())


def _build_mesh(cfg: RunConfig) -> Mesh:
    if cfg.mesh_file is not None:
        return read_mesh(cfg.mesh_file, fracture_width=cfg.fracture_width)
    fractures = tuple(
        FractureSpec(polyline=np.asarray(poly, dtype=float),
                     width=cfg.fracture_width)
        for poly in cfg.fractures)
    return build_structured_mesh(cfg.lx, cfg.ly, cfg.nx, cfg.ny,
                                 fractures=fractures)


def _build_physics(cfg: RunConfig) -> ph.Physics:
    return ph.Physics(
        rock_m=ph.matrix_rock(cfg.a_matrix, cfg.perm_matrix,
                              cfg.porosity_matrix),
        rock_f=ph.fracture_rock(cfg.a_fracture, cfg.perm_fracture,
                                cfg.porosity_fracture,
                                width=cfg.fracture_width),
        fluid=ph.FluidModel(rho=(cfg.rho_oil, cfg.rho_water),
                            mu=(cfg.mu_oil, cfg.mu_water),
                            gravity=(0.0, -GRAVITY) if cfg.gravity
                            else (0.0, 0.0)),
        interface=ph.InterfaceModel(theta=cfg.theta, epsilon=cfg.epsilon,
                                    phi=cfg.interface_porosity,
                                    d_f=cfg.fracture_width),
        mobility_floor=cfg.mobility_floor)


def hydrostatic_initial(gd: GradientDiscretisation, cfg: RunConfig) -> np.ndarray:
    """Water at hydrostatic equilibrium (anchored at the bottom water
    pressure), zero capillary pressure, i.e. no oil anywhere."""
    g_y = -GRAVITY if cfg.gravity else 0.0
    U = np.empty((gd.n_dofs, 2))
    U[:, 1] = cfg.bottom_water + cfg.rho_water * g_y * gd.dof_pos[:, 1]
    U[:, 0] = U[:, 1]
    return U


def _node_dof_walk(gd, sides) -> tuple[np.ndarray, ...]:
    walks = []
    for fid in range(sides.n_fractures):
        order = sides.fracture_order[fid]
        dofs = [gd.fe_dofs[order[0], 0]]
        dofs.extend(gd.fe_dofs[e, 1] for e in order)
        walks.append(np.asarray(dofs, dtype=np.int64))
    return tuple(walks)


def build_scenario(cfg: RunConfig, n_threads: int = 1) -> Scenario:
    mesh = _build_mesh(cfg)
    sides = side_geometry(mesh)
    gd, layout = build_vag(mesh)
    physics = _build_physics(cfg)
    bc = boundary_conditions(gd, {
        "bottom": (cfg.bottom_water + cfg.bottom_capillary, cfg.bottom_water),
        "top": (cfg.top_water + cfg.top_capillary, cfg.top_water),
    })
    model = DiscreteModel(gd, physics, bc, n_threads=n_threads)
    control = TimeControl(t_end=cfg.t_end, dt_init=cfg.dt_init,
                          dt_caps=cfg.dt_caps, growth=cfg.growth,
                          chop=cfg.chop)
    newton = NewtonConfig(tol=cfg.newton_tol, max_iters=cfg.newton_max_iters)
    return Scenario(cfg=cfg, mesh=mesh, sides=sides, gd=gd, layout=layout,
                    physics=physics, bc=bc, model=model,
                    U0=hydrostatic_initial(gd, cfg), control=control,
                    newton=newton, frac_dof_walk=_node_dof_walk(gd, sides))


def fracture_profiles(gd: GradientDiscretisation, sides: SidesIndex,
                      U: np.ndarray, rock_f: ph.RockModel
                      ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per fracture: (arclength, oil saturation) at the fracture node dofs,
    ordered along the chain walk."""
    U = np.asarray(U, dtype=float)
    out = []
    for fid, dofs in enumerate(_node_dof_walk(gd, sides)):
        order = sides.fracture_order[fid]
        arc = np.concatenate([[sides.fe_arc[order[0], 0]],
                              sides.fe_arc[order, 1]])
        p = U[dofs, 0] - U[dofs, 1]
        out.append((arc, np.asarray(ph.saturation(rock_f, p))))
    return out


def front_position(arc: np.ndarray, sat: np.ndarray, threshold: float) -> float:
    """Largest arclength whose saturation reaches the threshold (0 if none)."""
    hit = np.flatnonzero(np.asarray(sat) >= threshold)
    return float(arc[hit[-1]]) if hit.size else 0.0


def oil_volumes(gd: GradientDiscretisation, physics: ph.Physics,
                U: np.ndarray) -> tuple[float, float, float]:
    """Oil volume by compartment: (matrix, fracture, interface / epsilon).

    The interface compartment is normalized by epsilon, which cancels the
    layer-thickness factor and makes runs with different epsilon directly
    comparable.
    """
    U = np.asarray(U, dtype=float)
    p = U[:, 0] - U[:, 1]
    s_m = ph.saturation(physics.rock_m, p)
    s_f = ph.saturation(physics.rock_f, p)
    v_matrix = float((physics.rock_m.porosity * gd.vol_m) @ s_m)
    v_fracture = float((physics.rock_f.porosity * gd.vol_f_w) @ s_f)
    theta = physics.interface.theta
    # eta / epsilon = phi_a * d_f / 2 per unit side length
    weight = physics.interface.phi * 0.5 * gd.he_width * gd.he_length
    v_iface = 0.0
    if gd.n_he:
        for s in range(2):
            pt = p[gd.he_trace_dof[:, s]]
            s_a = (theta * np.asarray(ph.saturation(physics.rock_m, pt))
                   + (1.0 - theta) * np.asarray(ph.saturation(physics.rock_f, pt)))
            v_iface += float(weight @ s_a)
    return v_matrix, v_fracture, v_iface
