"""Scenario construction: mesh/physics/BC wiring, initial state, profiles."""

import numpy as np
import pytest

import fracflow.physics as ph
from fracflow.config import parse_config
from fracflow.mesh import write_mesh
from fracflow.scenario import (
    build_scenario,
    fracture_profiles,
    front_position,
    hydrostatic_initial,
    oil_volumes,
)
from fracflow.solver import time_loop
from fracflow.units import BAR, DAY
from fracflow.vag import dirichlet_mask

DESK = "[mesh]\nnx = 4\nny = 8\n"


def desk_scenario(extra=""):
    return build_scenario(parse_config(DESK + extra))


class TestBuildScenario:
    def test_generator_mesh_and_tables(self):
        sc = desk_scenario()
        assert sc.mesh.extent == (10.0, 20.0)
        assert sc.mesh.n_triangles == 2 * 4 * 8
        assert sc.gd.n_dofs == sc.model.N
        assert sc.gd.n_he == 2 * 8  # vertical fracture split at y nodes

    def test_physics_wiring(self):
        sc = desk_scenario("[physics]\ntheta = 0.25\nepsilon = 0.5\n")
        phys = sc.physics
        assert phys.rock_m.a == 1.0 * BAR
        assert phys.rock_m.relperm == "quadratic"
        assert phys.rock_f.relperm == "linear"
        assert phys.rock_f.width == 0.01
        assert phys.interface.theta == 0.25
        assert phys.interface.epsilon == 0.5
        assert phys.interface.d_f == 0.01
        assert phys.fluid.rho == (700.0, 1000.0)
        assert phys.fluid.mu == (0.005, 0.001)
        assert phys.fluid.gravity == (0.0, -9.81)

    def test_gravity_off(self):
        sc = desk_scenario("[physics]\ngravity = off\n")
        assert sc.physics.fluid.gravity == (0.0, 0.0)

    def test_boundary_values(self):
        sc = desk_scenario()
        expected_mask = dirichlet_mask(sc.gd, ("bottom", "top"))
        assert np.array_equal(sc.bc.mask, expected_mask)
        bottom = sc.gd.dof_pos[:, 1] == 0.0
        top = sc.gd.dof_pos[:, 1] == 20.0
        sel_b = expected_mask & bottom
        sel_t = expected_mask & top
        assert np.all(sc.bc.values[sel_b, 1] == 3.0 * BAR)
        assert np.allclose(sc.bc.values[sel_b, 0], 3.1 * BAR, rtol=1e-15)
        assert np.all(sc.bc.values[sel_t, 1] == 1.0 * BAR)
        assert np.all(sc.bc.values[sel_t, 0] == 1.0 * BAR)

    def test_time_and_newton_controls(self):
        sc = desk_scenario("[time]\nt_end = 6 h\n[newton]\nmax_iters = 20\n")
        assert sc.control.t_end == 6 * 3600.0
        assert sc.control.dt_caps[0] == (0.5 * DAY, 0.01 * DAY)
        assert sc.newton.max_iters == 20
        assert sc.newton.tol == 1e-6

    def test_mesh_file_source(self, tmp_path):
        sc = desk_scenario()
        path = tmp_path / "mesh.txt"
        write_mesh(sc.mesh, path)
        cfg = parse_config(f"[mesh]\nfile = {path}\n")
        sc2 = build_scenario(cfg)
        assert sc2.gd.n_dofs == sc.gd.n_dofs
        assert np.array_equal(sc2.mesh.nodes, sc.mesh.nodes)

    def test_unfractured_config(self):
        sc = desk_scenario("[mesh]\nfractures = none\n")
        assert sc.gd.n_he == 0


class TestInitialState:
    def test_hydrostatic_anchored_at_bottom_water_pressure(self):
        sc = desk_scenario()
        U0 = hydrostatic_initial(sc.gd, sc.cfg)
        y = sc.gd.dof_pos[:, 1]
        assert np.allclose(U0[:, 1], 3.0 * BAR - 1000.0 * 9.81 * y, rtol=1e-15)
        assert np.array_equal(U0[:, 0], U0[:, 1])

    def test_no_gravity_initial_is_uniform(self):
        sc = desk_scenario("[physics]\ngravity = off\n")
        U0 = hydrostatic_initial(sc.gd, sc.cfg)
        assert np.all(U0 == 3.0 * BAR)

    def test_equilibrium_preserved_without_forcing(self):
        # equal pressures on both Dirichlet parts, no gravity, no fracture:
        # the initial state solves every step exactly and must not drift
        sc = desk_scenario(
            "[mesh]\nfractures = none\n"
            "[physics]\ngravity = off\n"
            "[boundary]\nbottom_water = 1 bar\nbottom_capillary = 0 bar\n"
            "[time]\nt_end = 0.05 d\n")
        U, report = time_loop(sc.model, sc.U0, sc.control, sc.newton)
        assert report.n_steps >= 3
        assert np.max(np.abs(U - sc.U0)) <= 1e-12


class TestProfiles:
    def test_water_filled_fracture_has_zero_front(self):
        sc = desk_scenario("[physics]\ngravity = off\n")
        profiles = fracture_profiles(sc.gd, sc.sides, sc.U0,
                                     sc.physics.rock_f)
        assert len(profiles) == 1
        arc, sat = profiles[0]
        assert arc.shape == sat.shape == (8 + 1,)
        assert np.all(np.diff(arc) > 0)
        assert arc[0] == 0.0 and arc[-1] == pytest.approx(20.0)
        assert np.all(sat == 0.0)
        assert front_position(arc, sat, 0.5) == 0.0

    def test_synthetic_step_profile_front(self):
        sc = desk_scenario()
        gd, rock_f = sc.gd, sc.physics.rock_f
        U = np.array(sc.U0)
        profiles = fracture_profiles(gd, sc.sides, U, rock_f)
        arc, _ = profiles[0]
        # oil up to arclength 8 m: capillary pressure matching S = 0.9 there
        p_oil = ph.capillary_pressure(rock_f, 0.9)
        for k, a in enumerate(arc):
            dof = sc.frac_dof_walk[0][k]
            if a <= 8.0:
                U[dof, 0] = U[dof, 1] + p_oil
        arc2, sat = fracture_profiles(gd, sc.sides, U, rock_f)[0]
        assert np.array_equal(arc2, arc)
        spacing = 20.0 / 8
        front = front_position(arc2, sat, 0.5)
        assert abs(front - 8.0) <= spacing + 1e-12
        assert front_position(arc2, sat, 0.95) == 0.0  # S = 0.9 < 0.95

    def test_front_threshold_is_configurable(self):
        arc = np.array([0.0, 1.0, 2.0, 3.0])
        sat = np.array([0.9, 0.7, 0.3, 0.0])
        assert front_position(arc, sat, 0.5) == 1.0
        assert front_position(arc, sat, 0.25) == 2.0


class TestOilVolumes:
    def test_water_saturated_state_has_zero_oil(self):
        sc = desk_scenario()
        vm, vf, va = oil_volumes(sc.gd, sc.physics, sc.U0)
        assert vm == 0.0 and vf == 0.0 and va == 0.0

    def test_fully_flooded_limits(self):
        sc = desk_scenario()
        gd, phys = sc.gd, sc.physics
        U = np.array(sc.U0)
        U[:, 0] = U[:, 1] + 60.0 * BAR  # S_m = 1 - exp(-60) ~ 1
        vm, vf, va = oil_volumes(gd, phys, U)
        assert vm == pytest.approx(0.2 * gd.vol_m.sum(), rel=1e-12)
        assert vf == pytest.approx(0.4 * gd.vol_f_w.sum(), rel=1e-12)
        # normalized interface volume: phi_a * (d_f / 2) * total side length,
        # independent of epsilon
        total_sides = 2.0 * gd.he_length.sum()
        assert va == pytest.approx(0.2 * 0.005 * total_sides, rel=1e-12)

    def test_interface_volume_normalization_is_epsilon_free(self):
        values = []
        for eps in ("1", "0.1", "1e-6"):
            sc = desk_scenario(f"[physics]\nepsilon = {eps}\n")
            U = np.array(sc.U0)
            U[:, 0] = U[:, 1] + 0.5 * BAR
            values.append(oil_volumes(sc.gd, sc.physics, U)[2])
        assert values[0] == pytest.approx(values[1], rel=1e-12)
        assert values[1] == pytest.approx(values[2], rel=1e-12)
