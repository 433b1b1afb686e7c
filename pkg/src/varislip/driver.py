"""Run driver: simulate a configuration, verify it, and verify stored runs."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .config import CHECK_NAMES, SimulationConfig, parse_config
from .fluid_model import VelocityField
from .geometry import build_interface
from .io import check_integrity, read_budgets, read_snapshots
from .scenarios import SCENARIOS, rotation_flowmap, shrinking_disc_transport
from .solid_model import DeformationField

log = logging.getLogger(__name__)

# acceptance thresholds
COMPARISON_TOL = 1e-9
REASSEMBLY_TOL = 1e-10
COUPLING_TOL = 1e-7
FLOWMAP_BAND = (0.9, 1.1)
ROTATION_BAND = (0.9999, 1.0001)
CN_TOL = 1e-6
TRANSPORT_TOL = 0.02


def _states(snapshots):
    return [(s.eta, s.velocity_values()) for s in snapshots[1:]]


def energy_checks(report, model, cfg, init, budgets, states):
    """Comparison inequality, budget re-assembly and the summed estimate."""
    report.add(dg.check_comparison(budgets, COMPARISON_TOL))
    rebuilt = dg.reassemble_budgets(model, cfg, init, states)
    report.add(dg.compare_budgets(budgets, rebuilt, REASSEMBLY_TOL))
    e0 = dg.initial_energy(init.eta0, model.material, model.regularizer(cfg))
    chain = dg.check_energy_chain(rebuilt, e0, COMPARISON_TOL)
    tol = chain.tolerance[-1] if len(chain.tolerance) else 0.0
    worst = float(np.min(chain.slack + chain.tolerance)) if len(chain.slack) else 0.0
    report.add(dg.CheckResult("energy_chain", chain.passed, worst, 0.0, f"min(slack + k tol), final tol {tol:.3g}"))
    return rebuilt


def coupling_checks(report, model, cfg, snapshots):
    """Normal coupling residual recomputed from consecutive snapshots."""
    worst_n, jumps, defects = 0.0, [], []
    for prev, cur in zip(snapshots[:-1], snapshots[1:]):
        e0 = DeformationField(model.solid, prev.eta)
        e1 = DeformationField(model.solid, cur.eta)
        v = VelocityField(model.fluid_grid, cur.velocity_values(), cur.active)
        itf = build_interface(e0)
        n_res, tj = dg.check_coupling(e1, e0, v, itf, cfg.dt_tau)
        defects.append(dg.linearization_defect(e1, e0, v, itf, cfg.dt_tau))
        worst_n = max(worst_n, n_res)
        jumps.append(tj)
    mean_jump = float(np.mean(jumps)) if jumps else 0.0
    report.add(dg.CheckResult("coupling_normal_residual", worst_n < COUPLING_TOL, worst_n, COUPLING_TOL))
    report.add(dg.CheckResult("tangential_jump_mean", True, mean_jump, np.inf, "reported"))
    report.add(dg.CheckResult("linearization_defect_max", True, max(defects, default=0.0), np.inf, "reported"))


def geometry_checks(report, snapshots):
    cn = max((s.checks.get("cn_residual", 0.0) for s in snapshots), default=0.0)
    sep = min((s.checks.get("separation", np.inf) for s in snapshots), default=np.inf)
    report.add(dg.CheckResult("ciarlet_necas_residual", cn < CN_TOL, cn, CN_TOL))
    report.add(dg.CheckResult("min_separation", sep > 0, sep, 0.0, "must stay positive"))


def flowmap_checks(report, snapshots):
    lo = min((s.flowmap_det[0] for s in snapshots), default=1.0)
    hi = max((s.flowmap_det[1] for s in snapshots), default=1.0)
    a, b = FLOWMAP_BAND
    report.add(dg.CheckResult("flowmap_det_min", lo >= a, lo, a))
    report.add(dg.CheckResult("flowmap_det_max", hi <= b, hi, b))


def kinematic_report(config: SimulationConfig) -> dg.VerificationReport:
    report = dg.VerificationReport()
    name = config.run.scenario
    if name == "shrinking_disc_transport":
        rep = shrinking_disc_transport(config.fluid.mx)
        report.add(dg.CheckResult("transport_relative_error", rep.max_relative_error < TRANSPORT_TOL, rep.max_relative_error, TRANSPORT_TOL))
    elif name == "rotation_flowmap":
        steps = config.n_steps
        lo, hi, lip = dg.flow_map_report(rotation_flowmap(steps, config.step.dt_tau, 1.0, config.fluid.mx))
        a, b = ROTATION_BAND
        report.add(dg.CheckResult("rotation_det_min", lo >= a, lo, a))
        report.add(dg.CheckResult("rotation_det_max", hi <= b, hi, b))
        report.add(dg.CheckResult("rotation_lipschitz", True, lip, np.inf, "reported"))
    return report


def simulate(config: SimulationConfig, steps: int | None = None, callback=None):
    """Run a simulation scenario. Returns ``(trajectory, model, cfg, init)``."""
    from .stepper import run_simulation

    model, cfg, init = config.build()
    n = config.n_steps if steps is None else steps
    traj = run_simulation(cfg, model, init, n, callback)
    return traj, model, cfg, init


def verify_trajectory(config, traj, model, cfg, init, checks=CHECK_NAMES) -> dg.VerificationReport:
    """Checks on an in-memory run, computed from its serialized form."""
    from .io import SnapshotRecord

    snaps = [SnapshotRecord.from_json(SnapshotRecord.from_step(r).to_json()) for r in traj.records]
    budgets = [r.budget for r in traj.records[1:]]
    return _verify(config, model, cfg, init, snaps, budgets, checks)


def _verify(config, model, cfg, init, snaps, budgets, checks):
    report = dg.VerificationReport()
    if "energy" in checks:
        energy_checks(report, model, cfg, init, budgets, _states(snaps))
    if "coupling" in checks:
        coupling_checks(report, model, cfg, snaps)
        geometry_checks(report, snaps)
    if "flowmap" in checks:
        flowmap_checks(report, snaps)
    return report


def verify_directory(directory, checks=None) -> dg.VerificationReport:
    """Re-run the diagnostics on a stored run directory.

    Only the directory's own files are used. File hashes are checked first.
    """
    d = Path(directory)
    with open(d / "config.ini", encoding="utf-8") as fh:
        config = parse_config(fh.read())
    checks = tuple(config.run.checks if checks is None else checks)
    report = dg.VerificationReport()
    bad = check_integrity(d)
    report.add(dg.CheckResult("file_integrity", not bad, float(len(bad)), 0.0, ", ".join(bad) or "all hashes match"))
    if SCENARIOS[config.run.scenario].kind == "kinematic":
        for c in kinematic_report(config).checks:
            report.add(c)
        return report
    model, cfg, init = config.build()
    snaps = read_snapshots(d / "snapshots.jsonl")
    budgets = read_budgets(d / "budgets.csv")
    if len(budgets) != len(snaps) - 1:
        report.add(dg.CheckResult("budget_count", False, len(budgets), len(snaps) - 1, "rows vs stored steps"))
        return report
    for c in _verify(config, model, cfg, init, snaps, budgets, checks).checks:
        report.add(c)
    return report
