"""Newton solver and adaptive time loop for the two-phase system.

Per time step, Newton iterates on the interleaved phase-pressure vector.
Dirichlet values are imposed on every iterate, so convergence is measured
by the l1 residual of the free (non-Dirichlet) rows relative to its value
at the first iterate; a stationary-update criterion accepts iterates whose
correction no longer moves the state, guarding relative targets that sit
below attainable rounding noise.
Each iteration solves the linearized system after eliminating the trailing
cell unknowns (their 2 x 2 diagonal blocks couple to no other cell), then
backtracks the update while the residual increases (halving down to a floor
of 1/64, where the bounded step is accepted so later iterations can escape
saturation kinks) and projects saturations into [0, 1 - 1e-14] by capping
the capillary pressure of every dof.

The linear solve equilibrates the system with exact power-of-two row and
column scalings before factorizing (entry magnitudes span many decades:
constraint rows, accumulation terms, and mobilities of the two phases),
and iterative refinement runs against the full unreduced system.

The time loop grows the step geometrically up to a scheduled cap, chops it
on Newton failure or a singular linearization, lands exactly on requested
output times, and aborts once the step underflows.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .gd import DOF_FRACTURE
from .units import DAY

logger = logging.getLogger(__name__)

SAT_TAIL = 1.0e-14   # projected states keep 1 - S above this
SNAP_REL = 1.0e-9    # snap band below p = 0, relative to the capillary scale


class SolverAbort(RuntimeError):
    """Time stepping cannot continue (step underflow)."""


class SingularSystem(RuntimeError):
    """The linearized system is singular to working precision."""


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1.0e-6          # l1 residual relative to the first iterate
    max_iters: int = 35
    relax_floor: float = 1.0 / 64.0
    lin_tol: float = 1.0e-9      # linear residual, relative
    lin_refinements: int = 2
    pivot_rtol: float = 1.0e-14  # singularity threshold on U-diagonal pivots
    step_tol: float = 1.0e-11    # update below step_tol * |U| counts as stationary


@dataclass(frozen=True)
class TimeControl:
    t_end: float
    dt_init: float
    # (until_time, dt_cap) segments, sorted; the last cap extends to t_end
    dt_caps: tuple[tuple[float, float], ...]
    growth: float = 2.0
    chop: float = 4.0
    dt_min: float = 1.0e-12 * DAY
    forced_times: tuple[float, ...] = ()

    def dt_cap(self, t: float) -> float:
        for until, cap in self.dt_caps:
            if t < until - 1e-30:
                return cap
        return self.dt_caps[-1][1]


@dataclass
class NewtonResult:
    U: np.ndarray
    converged: bool
    iterations: int
    residuals: list[float] = field(default_factory=list)
    singular: bool = False
    lin_warnings: int = 0


@dataclass
class StepInfo:
    t: float
    dt: float
    U: np.ndarray
    U_old: np.ndarray
    newton: NewtonResult
    step_index: int


@dataclass
class SolverReport:
    t_final: float = 0.0
    n_steps: int = 0
    n_newton: int = 0
    n_chops: int = 0
    lin_warnings: int = 0
    cpu_seconds: float = 0.0
    aborted: bool = False
    abort_reason: str = ""
    dt_cursor: float = 0.0   # step-size cursor at exit, for seamless restarts


# ---------------------------------------------------------------------------
# linear solve with cell elimination


def _pow2_equilibration(J: sp.csr_matrix) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
    """Scale rows then columns of J by exact powers of two.

    Returns (scaled matrix, row scale, column scale) with
    scaled = diag(sr) J diag(sc).  Power-of-two factors keep the scaling
    free of rounding error, so results stay bitwise deterministic.
    """
    def pow2(v: np.ndarray) -> np.ndarray:
        out = np.ones_like(v)
        pos = v > 0.0
        out[pos] = np.exp2(-np.round(np.log2(v[pos])))
        return out

    a = J.copy()
    a.data = np.abs(a.data)
    sr = pow2(np.asarray(a.max(axis=1).todense()).ravel())
    Js = sp.diags(sr) @ J
    a = Js.copy()
    a.data = np.abs(a.data)
    sc = pow2(np.asarray(a.max(axis=0).todense()).ravel())
    return (Js @ sp.diags(sc)).tocsr(), sr, sc


def solve_linear(J: sp.csr_matrix, rhs: np.ndarray, n_cells: int,
                 cfg: NewtonConfig) -> tuple[np.ndarray, int]:
    """Solve J x = rhs, eliminating the trailing 2x2 cell blocks.

    The system is equilibrated first (power-of-two row/column scaling) and
    iterative refinement runs against the full equilibrated system, so the
    returned solution is accurate even though the cell-block elimination is
    formed explicitly.  Returns (x, warnings) where warnings counts
    unconverged linear residuals after refinement.  Raises SingularSystem
    when the factorization reports exact singularity, a cell block is
    numerically singular, or a pivot falls below the threshold.
    """
    n = J.shape[0]
    nf = n - 2 * n_cells
    Js, sr, sc = _pow2_equilibration(J.tocsr())
    b = sr * rhs

    if n_cells:
        A = Js[:nf, :nf]
        Anc = Js[:nf, nf:]
        Acn = Js[nf:, :nf]
        C = Js[nf:, nf:].tocoo()
        if C.row.size and (C.row // 2 != C.col // 2).any():
            raise ValueError("cell block is not 2x2 diagonal")
        blocks = np.zeros((n_cells, 2, 2))
        np.add.at(blocks, (C.row // 2, C.row % 2, C.col % 2), C.data)
        det = blocks[:, 0, 0] * blocks[:, 1, 1] - blocks[:, 0, 1] * blocks[:, 1, 0]
        scale = np.abs(blocks).max(axis=(1, 2))
        bad = np.abs(det) <= (cfg.pivot_rtol * np.maximum(scale, 1e-300)) ** 2
        if bad.any():
            raise SingularSystem(f"{int(bad.sum())} cell blocks are singular")
        inv = np.empty_like(blocks)
        inv[:, 0, 0] = blocks[:, 1, 1] / det
        inv[:, 1, 1] = blocks[:, 0, 0] / det
        inv[:, 0, 1] = -blocks[:, 0, 1] / det
        inv[:, 1, 0] = -blocks[:, 1, 0] / det
        Cinv = sp.bsr_matrix((inv, np.arange(n_cells), np.arange(n_cells + 1)),
                             shape=(2 * n_cells, 2 * n_cells)).tocsr()
        S = (A - Anc @ (Cinv @ Acn)).tocsc()
    else:
        S = Js.tocsc()

    try:
        lu = spla.splu(S)
    except RuntimeError as exc:
        if "singular" in str(exc).lower():
            raise SingularSystem(str(exc)) from exc
        raise
    udiag = np.abs(lu.U.diagonal())
    if udiag.size and udiag.min() <= cfg.pivot_rtol * udiag.max():
        raise SingularSystem(
            f"pivot ratio {udiag.min():.3e} / {udiag.max():.3e} below threshold")

    def descend(r: np.ndarray) -> np.ndarray:
        """One full-system solve via the eliminated factorization."""
        if not n_cells:
            return lu.solve(r)
        y = lu.solve(r[:nf] - Anc @ (Cinv @ r[nf:]))
        return np.concatenate([y, Cinv @ (r[nf:] - Acn @ y)])

    x = descend(b)
    warnings = 0
    norm_b = np.abs(b).sum()
    if norm_b > 0.0:
        for _ in range(cfg.lin_refinements):
            r = b - Js @ x
            if np.abs(r).sum() <= cfg.lin_tol * norm_b:
                break
            x = x + descend(r)
        r = b - Js @ x
        if np.abs(r).sum() > cfg.lin_tol * norm_b:
            warnings = 1
            logger.warning("linear residual %.3e above tolerance after refinement",
                           float(np.abs(r).sum() / norm_b))
    return sc * x, warnings


# ---------------------------------------------------------------------------
# Newton iteration


def capillary_scale(model) -> np.ndarray:
    """Binding capillary-pressure scale per dof.

    Fracture dofs follow the fracture law.  Matrix traces along the fracture
    sides feed the interface saturation, whose fracture contribution
    saturates fastest, so they bind on the fracture scale as well; plain
    matrix and cell dofs bind on the matrix scale.
    """
    gd = model.gd
    a = np.full(gd.n_dofs, model.physics.rock_m.a)
    a[(gd.dof_kind == DOF_FRACTURE) | (gd.vol_a > 0.0)] = model.physics.rock_f.a
    return a


def pressure_caps(model) -> np.ndarray:
    """Admissible capillary pressure maximum per dof (keeps 1 - S >= tail)."""
    return -np.log(SAT_TAIL) * capillary_scale(model)


def pressure_snap(model) -> np.ndarray:
    """Width of the band of negative capillary pressures snapped to zero."""
    return SNAP_REL * capillary_scale(model)


def project_state(U: np.ndarray, caps: np.ndarray,
                  snap: np.ndarray | None = None) -> np.ndarray:
    """Project saturations into [0, 1 - tail] by capping capillary pressure.

    Only the upper bound needs enforcing: the saturation law is flat at zero
    for non-positive capillary pressure, so negative values are admissible
    states of the dry region (the oil pressure there is a smooth extension
    whose flux balance determines it).

    Rounding noise, however, can push a dof that belongs at exactly zero
    infinitesimally negative; in a fully dry neighbourhood that zeroes the
    dof's entire Jacobian column (flat saturation slope, no live mobility)
    and makes the linearization exactly singular.  Negative values within
    ``snap`` of zero are therefore snapped back to zero -- the saturation
    and every mobility are identical on both sides, so the residual is
    unchanged and only the linearization point moves to the live branch.
    """
    p = U[:, 0] - U[:, 1]
    clipped = np.minimum(p, caps)
    if snap is not None:
        clipped = np.where((clipped < 0.0) & (clipped >= -snap), 0.0, clipped)
    out = U.copy()
    out[:, 0] = U[:, 1] + clipped
    return out


def newton_solve(model, U_init, U_old, dt, cfg: NewtonConfig = NewtonConfig(),
                 caps: np.ndarray | None = None,
                 snap: np.ndarray | None = None) -> NewtonResult:
    if caps is None:
        caps = pressure_caps(model)
        if snap is None:
            snap = pressure_snap(model)
    bc = model.bc
    free = np.repeat(~bc.mask, 2)

    def admissible(V: np.ndarray) -> np.ndarray:
        W = project_state(V, caps, snap)
        W[bc.mask] = bc.values[bc.mask]
        return W

    def norm1(Rv: np.ndarray) -> float:
        return float(np.abs(Rv[free]).sum())

    U = admissible(np.asarray(U_init, dtype=float))
    result = NewtonResult(U=U, converged=False, iterations=0)

    R, J = model.system(U, U_old, dt)
    r0 = norm1(R)
    result.residuals.append(r0)
    if r0 == 0.0:
        result.converged = True
        return result

    r_prev = r0
    for _ in range(cfg.max_iters):
        result.iterations += 1
        try:
            dx, warn = solve_linear(J, -R, model.gd.n_cells, cfg)
        except SingularSystem as exc:
            logger.info("newton: singular linearization (%s)", exc)
            result.singular = True
            result.U = U
            return result
        result.lin_warnings += warn

        # stationary update: the correction no longer moves the state, so
        # the fixed point is resolved to machine precision (guards residual
        # targets that sit below attainable rounding noise)
        if np.abs(dx).max() <= cfg.step_tol * max(1.0, np.abs(U).max()):
            result.converged = True
            break

        alpha = 1.0
        while True:
            U_try = admissible(U + alpha * dx.reshape(-1, 2))
            R_try = model.residual(U_try, U_old, dt).ravel()
            r_try = norm1(R_try)
            if np.isfinite(r_try) and r_try <= r_prev:
                break
            if alpha <= cfg.relax_floor:
                # accept the bounded floor step even without a decrease:
                # near saturation kinks the direction can point uphill for
                # every step length, and the small move lets later
                # iterations recover (cutting dt does not remove a kink)
                break
            alpha *= 0.5
        if not np.isfinite(r_try):
            result.U = U
            return result       # hopeless step: let the time loop chop

        U, r_prev = U_try, r_try
        result.residuals.append(r_try)
        if r_try <= cfg.tol * r0:
            result.converged = True
            break
        R, J = model.system(U, U_old, dt)

    result.U = U
    return result


# ---------------------------------------------------------------------------
# time loop


def time_loop(model, U0, control: TimeControl, cfg: NewtonConfig = NewtonConfig(),
              observers=(), t0: float = 0.0,
              dt_cursor: float | None = None) -> tuple[np.ndarray, SolverReport]:
    """March from t0 to control.t_end; returns (final state, report).

    Raises SolverAbort once chopping underflows the minimum step.  Observers
    are called after every accepted step with a StepInfo.
    """
    started = time.perf_counter()
    report = SolverReport()
    caps = pressure_caps(model)
    snap = pressure_snap(model)
    U = project_state(np.asarray(U0, dtype=float), caps, snap)
    t = t0
    cursor = control.dt_init if dt_cursor is None else dt_cursor
    forced = np.asarray(sorted(set(control.forced_times)))
    tiny = 1e-9

    while t < control.t_end * (1.0 - 1e-13):
        candidate = min(cursor, control.dt_cap(t))
        dt = min(candidate, control.t_end - t)
        ahead = forced[forced > t * (1.0 + tiny) + control.dt_min]
        if ahead.size and t + dt >= ahead[0] * (1.0 - 1e-13):
            dt = ahead[0] - t
        clamped = dt < candidate * (1.0 - 1e-13)

        result = newton_solve(model, U, U, dt, cfg, caps=caps, snap=snap)
        report.n_newton += result.iterations
        report.lin_warnings += result.lin_warnings

        if result.converged:
            U_old, U = U, result.U
            t = t + dt
            report.n_steps += 1
            if not clamped:
                cursor = candidate * control.growth
            info = StepInfo(t=t, dt=dt, U=U, U_old=U_old, newton=result,
                            step_index=report.n_steps)
            for obs in observers:
                obs(info)
        else:
            report.n_chops += 1
            cursor = dt / control.chop
            if cursor < control.dt_min:
                report.aborted = True
                report.abort_reason = (
                    "time step underflow at t = "
                    f"{t:.6e} s after {report.n_chops} chops"
                    + (": singular linearization" if result.singular else ""))
                report.t_final = t
                report.dt_cursor = cursor
                report.cpu_seconds = time.perf_counter() - started
                exc = SolverAbort(report.abort_reason)
                exc.report = report
                raise exc
            logger.info("chopping dt to %.3e s at t = %.6e s (newton %s)",
                        cursor, t, "singular" if result.singular else
                        "not converged")

    report.t_final = t
    report.dt_cursor = cursor
    report.cpu_seconds = time.perf_counter() - started
    return U, report
