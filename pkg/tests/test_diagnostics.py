from dataclasses import replace

import numpy as np
import pytest

from varislip import diagnostics as dg
from varislip.budget import EnergyBudget
from varislip.fluid_model import FluidGrid, VelocityField
from varislip.geometry import build_interface, classify_cells, interface_from_polygon
from varislip.scenarios import rotation_flowmap, scenario_config, shrinking_disc_transport
from varislip.solid_model import DeformationField, MaterialParams
from varislip.stepper import FlowMap, run_simulation, update_flow_map


@pytest.fixture(scope="module")
def toy_run():
    model, cfg, init = scenario_config("toy_oracle").build()
    traj = run_simulation(cfg, model, init, 4)
    assert traj.abort_reason is None
    return model, cfg, init, traj


def _budget(step, **kw):
    vals = {n: 0.0 for n in EnergyBudget.field_names() if n != "step"}
    vals.update(objective=1.0, objective_warm=1.0)
    vals.update(kw)
    return EnergyBudget(step=step, **vals)


# -- energy chain -------------------------------------------------------------------
def test_chain_conserved_energy_passes():
    bs = [_budget(1, elastic=1.0), _budget(2, elastic=1.0)]
    rep = dg.check_energy_chain(bs, 1.0)
    assert rep.passed
    assert np.all(rep.slack == 0)


def test_chain_sums_rates():
    bs = [_budget(1, elastic=0.5, viscous_dissipation=0.2, solid_window_rate=0.1), _budget(2, elastic=0.4, slip_dissipation=0.1)]
    rep = dg.check_energy_chain(bs, 1.0)
    assert np.allclose(rep.left, [0.7, 0.7])
    assert np.allclose(rep.right, [1.1, 1.1])
    assert rep.passed


def test_chain_detects_energy_growth():
    bs = [_budget(1, elastic=1.0), _budget(2, elastic=1.0 + 1e-6)]
    rep = dg.check_energy_chain(bs, 1.0, tol_per_step=1e-9)
    assert not rep.passed
    assert rep.worst_slack == pytest.approx(-1e-6)


def test_chain_tolerance_grows_with_steps():
    bs = [_budget(k, elastic=1.0) for k in range(1, 6)]
    rep = dg.check_energy_chain(bs, 1.0, tol_per_step=1e-9, scale=2.0)
    assert np.allclose(rep.tolerance, 2e-9 * np.arange(1, 6))


def test_chain_empty():
    assert dg.check_energy_chain([], 1.0).passed


def test_comparison_check():
    ok = dg.check_comparison([_budget(1, comparison_gap=-0.1), _budget(2, comparison_gap=5e-10)])
    assert ok.passed
    bad = dg.check_comparison([_budget(1, comparison_gap=2e-9)])
    assert not bad.passed


# -- re-assembly --------------------------------------------------------------------------
def test_reassembly_matches_stepper(toy_run):
    model, cfg, init, traj = toy_run
    states = [(r.eta, r.v) for r in traj.records[1:]]
    rebuilt = dg.reassemble_budgets(model, cfg, init, states)
    res = dg.compare_budgets([r.budget for r in traj.records[1:]], rebuilt, 1e-10)
    assert res.passed, res.value


def test_reassembly_detects_tampering(toy_run):
    model, cfg, init, traj = toy_run
    budgets = [r.budget for r in traj.records[1:]]
    bad = list(budgets)
    bad[2] = replace(bad[2], viscous_dissipation=bad[2].viscous_dissipation + 1e-6 * abs(bad[2].objective))
    assert not dg.compare_budgets(budgets, bad).passed
    assert not dg.compare_budgets(budgets, budgets[:-1]).passed


def test_toy_run_energy_estimate(toy_run):
    model, cfg, init, traj = toy_run
    budgets = [r.budget for r in traj.records[1:]]
    e0 = dg.initial_energy(init.eta0, model.material, model.regularizer(cfg))
    assert dg.check_energy_chain(budgets, e0).passed
    assert dg.check_comparison(budgets).passed


# -- coupling -------------------------------------------------------------------------------
def _disc_setup():
    model, cfg, init = scenario_config("toy_oracle").build()
    eta0 = init.eta0
    itf = build_interface(eta0)
    g = model.fluid_grid
    return model, eta0, itf, g


def test_coupling_rigid_translation_matches():
    model, eta0, itf, g = _disc_setup()
    c, dt = np.array([0.3, -0.7]), 1e-3
    eta1 = DeformationField(model.solid, eta0.positions + dt * c)
    v = VelocityField(g, np.broadcast_to(c, (g.mx, g.my, 2)).copy(), np.ones((g.mx, g.my), dtype=bool))
    n_res, tang = dg.check_coupling(eta1, eta0, v, itf, dt)
    assert n_res < 1e-11 and tang < 1e-11
    assert dg.linearization_defect(eta1, eta0, v, itf, dt) < 1e-11


def test_coupling_fluid_at_rest():
    model, eta0, itf, g = _disc_setup()
    c, dt = np.array([0.3, -0.7]), 1e-3
    eta1 = DeformationField(model.solid, eta0.positions + dt * c)
    v = VelocityField(g, np.zeros((g.mx, g.my, 2)), np.ones((g.mx, g.my), dtype=bool))
    n_res, tang = dg.check_coupling(eta1, eta0, v, itf, dt)
    assert n_res == pytest.approx(np.abs(itf.normals @ c).max(), rel=1e-9)
    w = itf.weights
    assert tang == pytest.approx(np.sqrt(np.sum(w * (itf.tangents @ c) ** 2) / np.sum(w)), rel=1e-9)


def test_toy_run_coupling(toy_run):
    model, cfg, init, traj = toy_run
    for prev, cur in zip(traj.records[:-1], traj.records[1:]):
        e0 = DeformationField(model.solid, prev.eta)
        e1 = DeformationField(model.solid, cur.eta)
        v = VelocityField(model.fluid_grid, cur.v, cur.active)
        n_res, _ = dg.check_coupling(e1, e0, v, build_interface(e0), cfg.dt_tau)
        assert n_res < 1e-7


# -- transport --------------------------------------------------------------------------------
def test_transport_shrinking_disc_coarse():
    rep = shrinking_disc_transport(mx=48)
    assert rep.max_relative_error < 0.02
    assert np.all(rep.reference < 0)


def test_transport_error_decreases_with_grid():
    e1 = shrinking_disc_transport(mx=24).max_relative_error
    e2 = shrinking_disc_transport(mx=48).max_relative_error
    assert e2 < e1


def test_transport_rejects_bad_region():
    with pytest.raises(ValueError):
        dg.check_transport([], [0.0], None, [], [], region="wall")


# -- strong form --------------------------------------------------------------------------------
def test_strong_form_identity_and_translation_vanish():
    mat = MaterialParams()
    for eta in (dg.AnalyticDeformation.identity(), dg.AnalyticDeformation.translation((0.1, -0.2))):
        assert np.abs(dg.strong_form_solid_residual(eta, mat, n=16)).max() < 1e-12


def test_strong_form_gravity_on_rest_state():
    mat = MaterialParams(rho_s=2.0)
    res = dg.strong_form_solid_residual(dg.AnalyticDeformation.identity(), mat, n=8, force=lambda t, X: np.tile([0.0, -1.0], (len(X), 1)))
    assert np.allclose(res, [0.0, 2.0])


@pytest.mark.parametrize("point", [(0.3, 0.4), (0.55, 0.7), (0.2, 0.8)])
def test_strong_form_manufactured_second_order(point):
    mat = MaterialParams()
    eta = dg.AnalyticDeformation.manufactured()
    t = 0.7
    hs = [0.1, 0.05, 0.025, 0.0125, 0.00625]

    def residual(h, force=None):
        x, y = point
        box = (x - h / 2, x + h / 2, y - h / 2, y + h / 2)
        return dg.strong_form_solid_residual(eta, mat, t=t, n=1, bounds=box, force=force)[0, 0]

    # manufactured force: Richardson limit of the operator at the point
    R = [residual(h) for h in hs[-2:]]
    f = (4 * R[1] - R[0]) / 3 / mat.rho_s
    err = np.array([np.linalg.norm(residual(h, lambda t, X: np.tile(f, (len(X), 1)))) for h in hs[:-1]])
    ratios = err[:-1] / err[1:]
    assert np.all((ratios > 3.5) & (ratios < 4.5))


# -- flow map -----------------------------------------------------------------------------------
def test_flow_map_report_rotation():
    fm = rotation_flowmap(steps=10, mx=32)
    lo, hi, lip = dg.flow_map_report(fm)
    assert lo == pytest.approx((1 + 1e-6) ** 10, abs=1e-9)
    assert hi == pytest.approx((1 + 1e-6) ** 10, abs=1e-9)
    assert lip == pytest.approx(np.sqrt((1 + 1e-6) ** 10), abs=1e-9)



def test_flow_map_report_identity():
    fm = rotation_flowmap(steps=0, mx=16)
    assert dg.flow_map_report(fm) == (1.0, 1.0, 1.0)


def test_flow_map_shear_trajectory_band():
    g = FluidGrid(mx=32, my=32)
    C = g.centers()
    v = VelocityField(g, np.stack([C[..., 1] - 0.5, np.zeros_like(C[..., 0])], axis=-1), np.ones((32, 32), dtype=bool))
    inside = np.abs(C[..., 1] - 0.5) < 0.3
    X = C[inside]
    fm = FlowMap(X, X.copy(), np.argwhere(inside), np.full(len(X), g.cell_area))
    for _ in range(100):
        fm = update_flow_map(fm, v, 1e-3)
    lo, hi, _ = dg.flow_map_report(fm)
    assert 0.99 <= lo <= hi <= 1.01


# -- transport: trivial motions ---------------------------------------------------------------
def _square(x0, y0, side=0.4, per_side=24):
    t = np.arange(per_side) / per_side
    edges = [((0, 0), (1, 0)), ((1, 0), (1, 1)), ((1, 1), (0, 1)), ((0, 1), (0, 0))]
    pts = [np.column_stack([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]) for a, b in edges]
    return np.array([x0, y0]) + side * np.vstack(pts)


def _square_transport(velocity):
    grid = FluidGrid(mx=48, my=48)
    times = 1e-3 * np.arange(6)
    cls, itfs, vn = [], [], []
    for t in times:
        itf = interface_from_polygon(_square(0.3 + velocity[0] * t, 0.3 + velocity[1] * t))
        cls.append(classify_cells(itf, grid))
        itfs.append(itf)
        vn.append(-(itf.normals @ np.asarray(velocity)))
    one = lambda t, p: np.ones(len(p))
    return dg.check_transport(cls, times, one, itfs, vn, region="fluid")


def test_transport_static_domain():
    rep = _square_transport((0.0, 0.0))
    assert np.all(rep.volume_rate == 0)
    assert np.all(rep.boundary_rate == 0)


def test_transport_translating_square():
    rep = _square_transport((0.37, -0.21))
    assert np.abs(rep.volume_rate).max() < 1e-9
    assert np.abs(rep.boundary_rate).max() < 1e-12


# -- strong form: time shift ---------------------------------------------------------------------
def test_strong_form_translation_time_independent():
    mat = MaterialParams()
    eta = dg.AnalyticDeformation.translation((0.1, -0.2))
    r0 = dg.strong_form_solid_residual(eta, mat, t=0.0, n=8)
    r1 = dg.strong_form_solid_residual(eta, mat, t=1.3, n=8)
    assert np.array_equal(r0, r1)


def test_strong_form_identity_strain_only():
    mat = MaterialParams(det_weight=0.0, grad2_weight=0.0)
    assert np.all(dg.strong_form_solid_residual(dg.AnalyticDeformation.identity(), mat, n=8) == 0)
