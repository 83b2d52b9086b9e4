"""Result emission: snapshot fields, CSV series, checkpoints.

All writers are deterministic: identical inputs produce byte-identical
files (floats are rendered with ``repr``, which is the shortest exact
form).  Formats are versioned in their headers:

* snapshots -- legacy-ASCII unstructured-grid files, triangle cells with
  cell data (``u1_pa``, ``u2_pa``, ``p_pa``, ``s_m``) and point data
  (``s_f`` on fracture nodes, ``s_m_node`` sector means);
* ``volumes.csv`` -- per accepted step, oil volume per compartment with
  the interface column normalized by epsilon;
* ``profile_t<label>.csv`` -- fracture oil saturation over arclength;
* ``report.csv`` -- step/iteration/chop counters, CPU time, status;
* ``energy.csv`` -- the per-step energy ledger;
* ``gdm_diagnostics.csv`` -- refinement-study table;
* checkpoints -- accepted-state history plus the step-size cursor,
  sufficient to resume a run bitwise.
"""

from __future__ import annotations

import json
import os

import numpy as np

import fracflow.physics as ph
from .energy import ENERGY_FIELDS, Trajectory

__all__ = [
    "read_checkpoint",
    "write_checkpoint",
    "write_energy_csv",
    "write_gdm_csv",
    "write_profile_csv",
    "write_report_csv",
    "write_snapshot_vtk",
    "write_volumes_csv",
]

SNAPSHOT_VERSION = "fracflow snapshot v1"
CSV_VERSION = "# fracflow csv v1"
CHECKPOINT_VERSION = 1


def _fmt(x) -> str:
    return repr(float(x))


def _write_lines(path, lines) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write output {path}: {exc}") from exc


def write_snapshot_vtk(path, scenario, U: np.ndarray, t: float) -> None:
    """Write one field snapshot as a legacy-ASCII unstructured grid."""
    mesh, gd, layout = scenario.mesh, scenario.gd, scenario.layout
    U = np.asarray(U, dtype=float)
    rock_m, rock_f = scenario.physics.rock_m, scenario.physics.rock_f

    lines = ["# vtk DataFile Version 3.0",
             f"{SNAPSHOT_VERSION} t={_fmt(t)}s",
             "ASCII",
             "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    for x, y in mesh.nodes:
        lines.append(f"{_fmt(x)} {_fmt(y)} 0.0")
    lines.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {mesh.n_triangles}")
    lines.extend("5" for _ in range(mesh.n_triangles))

    cells = slice(layout.cell_dof0, layout.cell_dof0 + mesh.n_triangles)
    u1, u2 = U[cells, 0], U[cells, 1]
    p = u1 - u2
    cell_fields = (("u1_pa", u1), ("u2_pa", u2), ("p_pa", p),
                   ("s_m", np.asarray(ph.saturation(rock_m, p))))
    lines.append(f"CELL_DATA {mesh.n_triangles}")
    for name, values in cell_fields:
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(_fmt(v) for v in values)

    s_f = np.zeros(mesh.n_nodes)
    for node, dof in layout.frac_dof_of_node.items():
        s_f[node] = ph.saturation(rock_f, float(U[dof, 0] - U[dof, 1]))
    s_m_node = np.empty(mesh.n_nodes)
    for n in range(mesh.n_nodes):
        dofs = layout.node_dofs[n]
        pn = U[dofs, 0] - U[dofs, 1]
        s_m_node[n] = float(np.mean(ph.saturation(rock_m, pn)))
    lines.append(f"POINT_DATA {mesh.n_nodes}")
    for name, values in (("s_f", s_f), ("s_m_node", s_m_node)):
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(_fmt(v) for v in values)
    _write_lines(path, lines)


def write_volumes_csv(path, times, volume_rows) -> None:
    """Oil-volume series; one row per recorded state (initial included)."""
    lines = [CSV_VERSION,
             "t_s,oil_matrix_m3,oil_fracture_m3,oil_interface_per_epsilon_m3"]
    for t, (vm, vf, va) in zip(times, volume_rows):
        lines.append(f"{_fmt(t)},{_fmt(vm)},{_fmt(vf)},{_fmt(va)}")
    _write_lines(path, lines)


def write_profile_csv(path, profiles) -> None:
    """Fracture saturation profiles, one row per fracture node dof."""
    lines = [CSV_VERSION, "fracture,arclength_m,s_f"]
    for fid, (arc, sat) in enumerate(profiles):
        for a, s in zip(arc, sat):
            lines.append(f"{fid},{_fmt(a)},{_fmt(s)}")
    _write_lines(path, lines)


def write_report_csv(path, report) -> None:
    """Run counters in the computational-cost table layout."""
    status = (f"aborted: {report.abort_reason}" if report.aborted
              else "completed")
    lines = [CSV_VERSION,
             "n_dt,n_newton,n_chop,cpu_s,t_final_s,status",
             f"{report.n_steps},{report.n_newton},{report.n_chops},"
             f"{_fmt(report.cpu_seconds)},{_fmt(report.t_final)},{status}"]
    _write_lines(path, lines)


def write_energy_csv(path, steps) -> None:
    """Per-step energy ledger with the derived slack columns."""
    header = list(ENERGY_FIELDS) + ["slack", "rhs_scale"]
    lines = [CSV_VERSION, ",".join(header)]
    for s in steps:
        row = [getattr(s, name) for name in ENERGY_FIELDS]
        row += [s.slack, s.rhs_scale]
        lines.append(",".join(str(int(v)) if name in ("step",)
                              else _fmt(v)
                              for name, v in zip(header, row)))
    _write_lines(path, lines)


def write_gdm_csv(path, rows) -> None:
    """Refinement-study table; column set taken from the first row."""
    if not rows:
        raise ValueError("no diagnostic rows to write")
    header = list(rows[0].keys())
    lines = [CSV_VERSION, ",".join(header)]
    for row in rows:
        cells = []
        for key in header:
            v = row[key]
            cells.append(str(v) if isinstance(v, (int, np.integer))
                         else _fmt(v))
        lines.append(",".join(cells))
    _write_lines(path, lines)


def write_checkpoint(prefix, trajectory: Trajectory, dt_cursor: float) -> None:
    """Persist the accepted-state history and the step-size cursor.

    ``prefix`` names a pair of files (``<prefix>.npz``, ``<prefix>.json``);
    the cursor makes a resumed run continue with the exact step sizes of
    an uninterrupted one.
    """
    trajectory.save(f"{prefix}.npz")
    meta = {"version": CHECKPOINT_VERSION,
            "t_final": float(trajectory.times[-1]),
            "dt_cursor": float(dt_cursor)}
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def read_checkpoint(prefix) -> tuple[Trajectory, float]:
    """Load a checkpoint pair; raises FileNotFoundError when absent."""
    npz, meta_path = f"{prefix}.npz", f"{prefix}.json"
    if not (os.path.exists(npz) and os.path.exists(meta_path)):
        raise FileNotFoundError(f"no checkpoint at {prefix}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {meta_path}")
    return Trajectory.load(npz), float(meta["dt_cursor"])
