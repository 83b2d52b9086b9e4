"""Assembly of the discrete two-phase flow system.

Unknowns are the two phase pressures per dof, stored as an (N, 2) array
``U`` (column 0: non-wetting, column 1: wetting) and interleaved as
``x[2 i + phase]`` in linear algebra.  The residual of dof i and phase a is

    R = [M(U) - M(U_old)] / dt  (accumulation: matrix + fracture + interface
                                 storage, all diagonal per dof)
      + matrix diffusion        (per sub-triangle, weighted-mobility times
                                 stiffness, with gravity in the flux)
      + fracture diffusion      (per fracture edge, tangential, aperture
                                 weighted)
      + interface exchange      (per half-edge and side: upwinded two-point
                                 flux in the jump, gravity-shifted)
      - sources.

Dirichlet rows are replaced by ``u - g``.  The Jacobian sparsity pattern and
the order of every scattered contribution are fixed at model construction,
so assembled systems are bitwise reproducible for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import physics as ph
from .gd import GradientDiscretisation, segment_quadrature, triangle_quadrature

CHUNK = 8192


def upwind_flux(T, k_interface, k_fracture, beta):
    """Two-point interface exchange flux, upwinded in the jump ``beta``.

    Positive jumps (matrix above fracture) carry the interface mobility,
    negative jumps the fracture mobility, so the flux is monotone
    nondecreasing in ``beta`` and dissipative: ``flux * beta >= 0``.
    """
    bp = np.maximum(beta, 0.0)
    bm = np.maximum(-beta, 0.0)
    return T * (k_interface * bp - k_fracture * bm)


@dataclass
class BoundaryConditions:
    """Dirichlet data: per-dof mask and phase pressure values."""

    mask: np.ndarray      # (N,) bool
    values: np.ndarray    # (N, 2)


def boundary_conditions(gd: GradientDiscretisation, spec: dict) -> BoundaryConditions:
    """Build Dirichlet data from {tag: (g1, g2)} with constants or callables.

    Callables receive an (n, 2) array of dof positions.  Tags are applied
    in the mesh's tag-table order, so later tags win at shared corners.
    """
    from .vag import dirichlet_mask

    mask = np.zeros(gd.n_dofs, dtype=bool)
    values = np.zeros((gd.n_dofs, 2))
    for tag in gd.mesh.tag_names:
        if tag not in spec:
            continue
        sel = dirichlet_mask(gd, {tag})
        mask |= sel
        pos = gd.dof_pos[sel]
        for a, g in enumerate(spec[tag]):
            values[sel, a] = g(pos) if callable(g) else float(g)
    unknown = set(spec) - set(gd.mesh.tag_names)
    if unknown:
        raise ValueError(f"unknown boundary tags: {sorted(unknown)}")
    return BoundaryConditions(mask=mask, values=values)


def dof_source_vector(gd: GradientDiscretisation, f, degree: int = 2) -> np.ndarray:
    """Dof functional of a matrix source density: integrals against pieces."""
    pts, w = triangle_quadrature(degree)
    out = np.zeros(gd.n_dofs)
    for k in range(len(w)):
        x = np.einsum("j,pjd->pd", pts[k], gd.piece_vertices)
        np.add.at(out, gd.piece_dof, w[k] * gd.piece_area * np.asarray(f(x)))
    return out


def fracture_source_vector(gd: GradientDiscretisation, f, degree: int = 2) -> np.ndarray:
    """Dof functional of a fracture source density (aperture weighted)."""
    pts, w = segment_quadrature(degree)
    out = np.zeros(gd.n_dofs)
    for k in range(len(w)):
        x = gd.he_pts[:, 0] + pts[k] * (gd.he_pts[:, 1] - gd.he_pts[:, 0])
        np.add.at(out, gd.he_frac_dof,
                  w[k] * gd.he_length * gd.he_width * np.asarray(f(x)))
    return out


class DiscreteModel:
    """Binds a discretisation to fluids, rocks, interface law, and data."""

    def __init__(self, gd: GradientDiscretisation, physics: ph.Physics,
                 bc: BoundaryConditions, source: np.ndarray | None = None,
                 n_threads: int = 1):
        self.gd = gd
        self.physics = physics
        self.bc = bc
        self.n_threads = max(1, int(n_threads))
        N = gd.n_dofs
        self.N = N
        self.source = np.zeros((N, 2)) if source is None else np.asarray(source, float)
        if self.source.shape != (N, 2):
            raise ValueError(f"source must have shape ({N}, 2)")

        fluid, rock_m, rock_f, iface = (physics.fluid, physics.rock_m,
                                        physics.rock_f, physics.interface)
        gvec = fluid.gravity_vec

        # accumulation coefficients: M1(p) = am Sm(p) + af Sf(p)
        c_a = np.zeros(N)
        storage = 0.5 * gd.he_width * iface.epsilon * iface.phi  # eta per length
        for s in range(2):
            if gd.he_frac_dof.size:
                np.add.at(c_a, gd.he_trace_dof[:, s], storage * gd.he_length)
        self.acc_m = rock_m.porosity * gd.vol_m + iface.theta * c_a
        self.acc_f = rock_f.porosity * gd.vol_f_w + (1.0 - iface.theta) * c_a
        self.pore_volume = float(self.acc_m.sum() + self.acc_f.sum())

        # matrix diffusion tables
        G = gd.sub_grads                                  # (ns, 3, 2)
        lam_m = rock_m.perm
        self.stiff = lam_m * gd.sub_area[:, None, None] * np.einsum(
            "sid,sjd->sij", G, G)                         # (ns, 3, 3)
        self.grav_m = lam_m * gd.sub_area[:, None] * (G @ gvec)  # (ns, 3)
        # mobility weights over the sub-triangle dofs (cell, node i, node j);
        # a reassigned corner piece moves its weight onto the cell
        ns = gd.n_sub
        w = np.empty((ns, 3))
        cell = gd.sub_dofs[:, 0]
        pd = gd.piece_dof.reshape(ns, 4)
        w[:, 1] = np.where(pd[:, 1] == cell, 0.0, 0.25)
        w[:, 2] = np.where(pd[:, 2] == cell, 0.0, 0.25)
        w[:, 0] = 1.0 - w[:, 1] - w[:, 2]
        self.w_sub = w

        # fracture diffusion tables
        lam_f = rock_f.perm
        self.fcond = gd.fe_width * lam_f / gd.fe_length    # (nfe,)
        self.fgrav = gd.fe_tangent @ gvec                  # (nfe,) g . tangent
        self.fsgn = np.array([-1.0, 1.0])

        # interface exchange tables
        self.T_half = 2.0 * (rock_f.perm_normal if rock_f.perm_normal is not None
                             else rock_f.perm) / gd.he_width  # (nhe,)
        gdotn = gd.he_normal @ gvec                        # (nhe,) side plus
        rho = np.asarray(fluid.rho)
        # gravity shift of the jump: rho (g . n_side) d_f / 2, (nhe, 2, 2)
        self.gshift = (np.stack([gdotn, -gdotn], axis=1)[:, :, None]
                       * rho[None, None, :] * (0.5 * gd.he_width)[:, None, None])

        self._init_jacobian_slots()

    # ------------------------------------------------------------------
    # static Jacobian layout

    def _idx(self, dofs, phase):
        return 2 * np.asarray(dofs, dtype=np.int64) + phase

    def _init_jacobian_slots(self):
        gd = self.gd
        N, ns, nfe, nhe = self.N, gd.n_sub, gd.fe_dofs.shape[0], gd.n_he
        rows, cols = [], []

        # accumulation: per dof the 2x2 block (11, 12, 21, 22)
        d = np.arange(N, dtype=np.int64)
        for a in (0, 1):
            for b in (0, 1):
                rows.append(self._idx(d, a))
                cols.append(self._idx(d, b))
        self._n_acc = 4 * N

        # matrix grad-grad: phase a, row i, col j
        sd = gd.sub_dofs
        for a in (0, 1):
            for i in range(3):
                for j in range(3):
                    rows.append(self._idx(sd[:, i], a))
                    cols.append(self._idx(sd[:, j], a))
        self._n_gg = 18 * ns

        # matrix mobility chain: row (i, a), col (d, b)
        for a in (0, 1):
            for i in range(3):
                for dcol in range(3):
                    for b in (0, 1):
                        rows.append(self._idx(sd[:, i], a))
                        cols.append(self._idx(sd[:, dcol], b))
        self._n_chain = 36 * ns

        # fracture grad-grad and chain
        fd = gd.fe_dofs
        for a in (0, 1):
            for i in range(2):
                for j in range(2):
                    rows.append(self._idx(fd[:, i], a))
                    cols.append(self._idx(fd[:, j], a))
        self._n_fgg = 8 * nfe
        for a in (0, 1):
            for i in range(2):
                for dcol in range(2):
                    for b in (0, 1):
                        rows.append(self._idx(fd[:, i], a))
                        cols.append(self._idx(fd[:, dcol], b))
        self._n_fchain = 16 * nfe

        # interface exchange: per side and phase, rows (trace, frac) x cols
        # [(t,a), (t,1), (t,2), (f,a), (f,1), (f,2)]
        for s in (0, 1):
            t = gd.he_trace_dof[:, s] if nhe else np.empty(0, dtype=np.int64)
            f = gd.he_frac_dof
            for a in (0, 1):
                col_pattern = [(t, a), (t, 0), (t, 1), (f, a), (f, 0), (f, 1)]
                for rdof in (t, f):
                    for cdof, b in col_pattern:
                        rows.append(self._idx(rdof, a))
                        cols.append(self._idx(cdof, b))
        self._n_coup = 2 * 2 * 2 * 6 * nhe

        # Dirichlet identity entries
        dir_rows = np.concatenate([self._idx(np.nonzero(self.bc.mask)[0], a)
                                   for a in (0, 1)])
        rows.append(dir_rows)
        cols.append(dir_rows)
        self._n_dir = dir_rows.size

        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)
        # zero out Dirichlet rows of assembled physics, keep the identity
        free_row = np.ones(2 * N)
        free_row[dir_rows] = 0.0
        self._row_scale = free_row[self._rows]
        if self._n_dir:
            self._row_scale[-self._n_dir:] = 1.0
        self._nnz = self._rows.size

    # ------------------------------------------------------------------
    # pointwise physics helpers

    def _mob(self, rock, phase, p, deriv=False):
        fluid = self.physics.fluid
        s = ph.phase_saturation(rock, phase, p)
        k = ph.mobility(rock, fluid, phase, s, self.physics.mobility_floor)
        if not deriv:
            return k
        dk = (ph.mobility_derivative(rock, fluid, phase, s)
              * ph.phase_saturation_derivative(rock, phase, p))
        return k, dk

    def accumulation(self, U: np.ndarray) -> np.ndarray:
        """Stored amounts M per dof and phase (multiplied by dt in no way)."""
        rock_m, rock_f = self.physics.rock_m, self.physics.rock_f
        p = U[:, 0] - U[:, 1]
        sm = ph.saturation(rock_m, p)
        sf = ph.saturation(rock_f, p)
        m1 = self.acc_m * sm + self.acc_f * sf
        m2 = (self.acc_m + self.acc_f) - m1
        return np.column_stack([m1, m2])

    def accumulation_derivative(self, U: np.ndarray) -> np.ndarray:
        rock_m, rock_f = self.physics.rock_m, self.physics.rock_f
        p = U[:, 0] - U[:, 1]
        return (self.acc_m * ph.saturation_derivative(rock_m, p)
                + self.acc_f * ph.saturation_derivative(rock_f, p))

    # ------------------------------------------------------------------
    # assembly

    def residual(self, U, U_old, dt, parts: bool = False,
                 apply_dirichlet: bool = True):
        """Residual (N, 2); optionally also the named contribution parts."""
        out = self._assemble(U, U_old, dt, want_jac=False)
        R, part_dict = out
        if apply_dirichlet:
            R = R.copy()
            R[self.bc.mask] = U[self.bc.mask] - self.bc.values[self.bc.mask]
        return (R, part_dict) if parts else R

    def system(self, U, U_old, dt):
        """Residual (flattened, Dirichlet applied) and Jacobian (csr)."""
        (R, _), vals = self._assemble(U, U_old, dt, want_jac=True)
        R = R.copy()
        R[self.bc.mask] = U[self.bc.mask] - self.bc.values[self.bc.mask]
        J = sp.coo_matrix((vals * self._row_scale, (self._rows, self._cols)),
                          shape=(2 * self.N, 2 * self.N)).tocsr()
        return R.ravel(), J

    def _chunked(self, n, fn):
        """Run fn(lo, hi) over chunks, in parallel when requested.

        Each invocation writes disjoint slices of preallocated outputs, so
        results are identical for any thread count.
        """
        spans = [(lo, min(lo + CHUNK, n)) for lo in range(0, n, CHUNK)]
        if self.n_threads == 1 or len(spans) <= 1:
            for lo, hi in spans:
                fn(lo, hi)
        else:
            with ThreadPoolExecutor(max_workers=self.n_threads) as pool:
                list(pool.map(lambda s: fn(*s), spans))

    def _assemble(self, U, U_old, dt, want_jac):
        gd, N = self.gd, self.N
        physics = self.physics
        rock_m, rock_f, iface, fluid = (physics.rock_m, physics.rock_f,
                                        physics.interface, physics.fluid)
        rho = np.asarray(fluid.rho)
        theta = iface.theta
        ns, nfe, nhe = gd.n_sub, gd.fe_dofs.shape[0], gd.n_he
        vals = np.empty(self._nnz) if want_jac else None

        parts = {
            "acc": (self.accumulation(U) - self.accumulation(U_old)) / dt,
            "diff_m": np.zeros((N, 2)),
            "diff_f": np.zeros((N, 2)),
            "coupling": np.zeros((N, 2)),
            "src": self.source,
        }
        if want_jac:
            D = self.accumulation_derivative(U) / dt
            acc_vals = np.concatenate([D, -D, -D, D])
            vals[:self._n_acc] = acc_vals

        # ---- matrix diffusion -------------------------------------------
        sub_flux = np.empty((ns, 3, 2))     # row contributions per phase
        ksub = np.empty((ns, 2))
        if want_jac:
            gg_vals = vals[self._n_acc:self._n_acc + self._n_gg].reshape(2, 3, 3, ns)
            ch_vals = vals[self._n_acc + self._n_gg:
                           self._n_acc + self._n_gg + self._n_chain
                           ].reshape(2, 3, 3, 2, ns)

        def matrix_block(lo, hi):
            sl = slice(lo, hi)
            dofs = gd.sub_dofs[sl]
            pvals = U[dofs]                              # (c, 3, 2)
            pc = pvals[:, :, 0] - pvals[:, :, 1]         # capillary p per dof
            w = self.w_sub[sl]
            for a in (0, 1):
                k, dk = self._mob(rock_m, a + 1, pc, deriv=True)
                keff = (w * k).sum(axis=1)
                ksub[sl, a] = keff
                base = (np.einsum("cij,cj->ci", self.stiff[sl], pvals[:, :, a])
                        - rho[a] * self.grav_m[sl])      # (c, 3)
                sub_flux[sl, :, a] = keff[:, None] * base
                if want_jac:
                    gg_vals[a, :, :, sl] = (keff[:, None, None]
                                            * self.stiff[sl]).transpose(1, 2, 0)
                    chain = w * dk                       # (c, 3) d keff / dp_d
                    for b, sgn in ((0, 1.0), (1, -1.0)):
                        ch_vals[a, :, :, b, sl] = sgn * np.einsum(
                            "ci,cd->idc", base, chain)

        self._chunked(ns, matrix_block)
        for a in (0, 1):
            for i in range(3):
                np.add.at(parts["diff_m"][:, a], gd.sub_dofs[:, i], sub_flux[:, i, a])

        # ---- fracture diffusion -----------------------------------------
        if nfe:
            fdofs = gd.fe_dofs
            fp = U[fdofs]                                # (nfe, 2, 2)
            pcf = fp[:, :, 0] - fp[:, :, 1]
            if want_jac:
                fgg = vals[self._n_acc + self._n_gg + self._n_chain:
                           ][:self._n_fgg].reshape(2, 2, 2, nfe)
                fch = vals[self._n_acc + self._n_gg + self._n_chain + self._n_fgg:
                           ][:self._n_fchain].reshape(2, 2, 2, 2, nfe)
            for a in (0, 1):
                k, dk = self._mob(rock_f, a + 1, pcf, deriv=True)
                ke = 0.5 * (k[:, 0] + k[:, 1])
                du = (fp[:, 1, a] - fp[:, 0, a]) / gd.fe_length
                flux = gd.fe_width * rock_f.perm * (du - rho[a] * self.fgrav)
                for i, sgn in ((0, -1.0), (1, 1.0)):
                    np.add.at(parts["diff_f"][:, a], fdofs[:, i], sgn * ke * flux)
                if want_jac:
                    for i in range(2):
                        for j in range(2):
                            fgg[a, i, j] = (self.fsgn[i] * self.fsgn[j]
                                            * self.fcond * ke)
                    for i in range(2):
                        for dcol in range(2):
                            for b, sgn in ((0, 1.0), (1, -1.0)):
                                fch[a, i, dcol, b] = (self.fsgn[i] * sgn * flux
                                                      * 0.5 * dk[:, dcol])

        # ---- interface exchange ------------------------------------------
        if nhe:
            coup0 = self._n_acc + self._n_gg + self._n_chain + self._n_fgg + self._n_fchain
            if want_jac:
                cvals = vals[coup0:coup0 + self._n_coup].reshape(2, 2, 2, 6, nhe)
            pf = U[gd.he_frac_dof]                       # (nhe, 2)
            pcf = pf[:, 0] - pf[:, 1]
            for s in (0, 1):
                tdof = gd.he_trace_dof[:, s]
                pt = U[tdof]
                pct = pt[:, 0] - pt[:, 1]
                for a in (0, 1):
                    km_t, dkm_t = self._mob(rock_m, a + 1, pct, deriv=True)
                    kf_t, dkf_t = self._mob(rock_f, a + 1, pct, deriv=True)
                    ka = theta * km_t + (1 - theta) * kf_t
                    dka = theta * dkm_t + (1 - theta) * dkf_t
                    kff, dkff = self._mob(rock_f, a + 1, pcf, deriv=True)
                    beta = pt[:, a] - pf[:, a] - self.gshift[:, s, a]
                    bp = np.maximum(beta, 0.0)
                    bm = np.maximum(-beta, 0.0)
                    T = self.T_half
                    F = upwind_flux(T, ka, kff, beta)
                    L = gd.he_length
                    np.add.at(parts["coupling"][:, a], tdof, L * F)
                    np.add.at(parts["coupling"][:, a], gd.he_frac_dof, -L * F)
                    if want_jac:
                        kbr = np.where(beta >= 0.0, ka, kff)
                        dF_dut = T * kbr
                        dF_dpt = T * bp * dka
                        dF_dpf = -T * bm * dkff
                        block = np.empty((6, nhe))
                        block[0] = L * dF_dut
                        block[1] = L * dF_dpt
                        block[2] = -L * dF_dpt
                        block[3] = -L * dF_dut
                        block[4] = L * dF_dpf
                        block[5] = -L * dF_dpf
                        cvals[s, a, 0] = block          # trace row
                        cvals[s, a, 1] = -block        # fracture row

        if want_jac and self._n_dir:
            vals[-self._n_dir:] = 1.0

        R = (parts["acc"] + parts["diff_m"] + parts["diff_f"]
             + parts["coupling"] - parts["src"])
        if want_jac:
            return (R, parts), vals
        return R, parts

    # ------------------------------------------------------------------
    # reporting helpers

    def phase_volumes(self, U: np.ndarray) -> dict:
        """Stored non-wetting amounts per compartment (pore volume units)."""
        gd, physics = self.gd, self.physics
        p = U[:, 0] - U[:, 1]
        sm = ph.saturation(physics.rock_m, p)
        sf = ph.saturation(physics.rock_f, p)
        iface = physics.interface
        vm = float((physics.rock_m.porosity * gd.vol_m) @ sm)
        vf = float((physics.rock_f.porosity * gd.vol_f_w) @ sf)
        va = 0.0
        storage = 0.5 * gd.he_width * iface.epsilon * iface.phi
        for s in range(2):
            if gd.he_frac_dof.size:
                pt = p[gd.he_trace_dof[:, s]]
                sa = ph.interface_saturation(iface, physics.rock_m,
                                             physics.rock_f, pt)
                va += float((storage * gd.he_length) @ sa)
        return {"matrix": vm, "fracture": vf, "interface": va}

    def boundary_flux(self, U, U_old, dt) -> np.ndarray:
        """Outflow through Dirichlet dofs per phase (positive = leaving)."""
        _, parts = self.residual(U, U_old, dt, parts=True, apply_dirichlet=False)
        flux = parts["diff_m"] + parts["diff_f"] + parts["coupling"]
        return flux[self.bc.mask].sum(axis=0)
