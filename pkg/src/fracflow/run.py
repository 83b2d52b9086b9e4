"""Run orchestration: configuration in, artifacts on disk out.

A run marches the time loop in segments bounded by the snapshot grid
(multiples of the snapshot interval, the profile times, and the end
time).  After every segment it emits a field snapshot, any due fracture
profiles, and a checkpoint; the checkpoint carries the accepted-state
history and the step-size cursor, so ``resume=True`` continues a
truncated run with exactly the steps an uninterrupted one would have
taken.  Final artifacts: the resolved-config echo, ``volumes.csv`` over
all recorded states, ``report.csv`` counters, the per-step energy
ledger, and (optionally) the full trajectory.
"""

from __future__ import annotations

import logging
import os
from dataclasses import replace

import numpy as np

from .config import RunConfig
from .energy import TrajectoryRecorder, energy_audit
from .outputs import (
    read_checkpoint,
    write_checkpoint,
    write_energy_csv,
    write_profile_csv,
    write_report_csv,
    write_snapshot_vtk,
    write_volumes_csv,
)
from .scenario import build_scenario, fracture_profiles, oil_volumes
from .solver import SolverAbort, SolverReport, time_loop

__all__ = ["run_simulation", "snapshot_grid"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ABORT = 1


def snapshot_grid(cfg: RunConfig) -> tuple[float, ...]:
    """Times in (0, t_end] at which segments end and snapshots are taken."""
    times = set()
    k, interval = 1, cfg.snapshot_interval
    while k * interval < cfg.t_end * (1.0 - 1e-12):
        times.add(k * interval)
        k += 1
    times.update(t for t in cfg.profile_times
                 if 0.0 < t < cfg.t_end * (1.0 - 1e-12))
    times.add(cfg.t_end)
    return tuple(sorted(times))


def _label(t: float) -> str:
    return format(float(t), ".10g")


def _merge(total: SolverReport, part: SolverReport) -> None:
    total.n_steps += part.n_steps
    total.n_newton += part.n_newton
    total.n_chops += part.n_chops
    total.lin_warnings += part.lin_warnings
    total.cpu_seconds += part.cpu_seconds
    total.t_final = part.t_final
    total.dt_cursor = part.dt_cursor


def run_simulation(cfg: RunConfig, output_dir=None, resume: bool = False,
                   n_threads: int = 1) -> tuple[int, SolverReport]:
    """Execute a configured run; returns (exit code, aggregate report)."""
    outdir = str(output_dir) if output_dir is not None else cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config_resolved.cfg"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.echo())
    for w in cfg.warnings:
        logger.warning("%s", w)

    sc = build_scenario(cfg, n_threads=n_threads)
    checkpoint = os.path.join(outdir, "checkpoint")

    if resume:
        history, cursor = read_checkpoint(checkpoint)
        if history.states.shape[1:] != (sc.gd.n_dofs, 2):
            raise ValueError("checkpoint does not match the configured mesh")
        recorder = TrajectoryRecorder(history)
        t = float(history.times[-1])
        U = np.array(history.states[-1])
        logger.info("resuming at t = %.6e s", t)
    else:
        recorder = TrajectoryRecorder()
        t, cursor = 0.0, cfg.dt_init
        U = sc.U0

    report = SolverReport(t_final=t, dt_cursor=cursor)
    profile_due = set(_label(x) for x in cfg.profile_times)
    aborted = False
    for seg_end in snapshot_grid(cfg):
        if seg_end <= t * (1.0 + 1e-12):
            continue
        segment = replace(sc.control, t_end=seg_end)
        try:
            U, part = time_loop(sc.model, U, segment, sc.newton,
                                observers=(recorder,), t0=t,
                                dt_cursor=cursor)
        except SolverAbort as exc:
            _merge(report, exc.report)
            report.aborted = True
            report.abort_reason = exc.report.abort_reason
            aborted = True
            logger.error("run aborted: %s", report.abort_reason)
            break
        _merge(report, part)
        t, cursor = seg_end, part.dt_cursor
        label = _label(seg_end)
        write_snapshot_vtk(os.path.join(outdir, f"snapshot_t{label}s.vtk"),
                           sc, U, t=seg_end)
        if label in profile_due and sc.sides.n_fractures:
            profiles = fracture_profiles(sc.gd, sc.sides, U,
                                         sc.physics.rock_f)
            write_profile_csv(
                os.path.join(outdir, f"profile_t{label}s.csv"), profiles)
        write_checkpoint(checkpoint, recorder.trajectory, cursor)

    try:
        trajectory = recorder.trajectory
    except ValueError:
        trajectory = None
    if trajectory is not None:
        volumes = [oil_volumes(sc.gd, sc.physics, state)
                   for state in trajectory.states]
        write_volumes_csv(os.path.join(outdir, "volumes.csv"),
                          trajectory.times, volumes)
        write_energy_csv(os.path.join(outdir, "energy.csv"),
                         energy_audit(sc.model, trajectory))
        if cfg.save_trajectory:
            trajectory.save(os.path.join(outdir, "trajectory.npz"))
    write_report_csv(os.path.join(outdir, "report.csv"), report)
    return (EXIT_ABORT if aborted else EXIT_OK), report
