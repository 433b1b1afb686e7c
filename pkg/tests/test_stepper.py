import numpy as np
import pytest

from varislip.errors import ContactImminent, SampleEscaped, ValidationError
from varislip.fluid_model import FluidGrid, VelocityField
from varislip.scenarios import scenario_config
from varislip.stepper import (
    FlowMap,
    SolverConfig,
    StepConfig,
    assemble_step,
    initial_state,
    run_simulation,
    solve_step,
    step,
    update_flow_map,
)


@pytest.fixture(scope="module")
def toy():
    model, cfg, init = scenario_config("toy_oracle").build()
    state = initial_state(model, cfg, init)
    prob = assemble_step(state, model, cfg)
    res = solve_step(prob, cfg.solver)
    return model, cfg, init, state, prob, res


# -- configuration ------------------------------------------------------------------
def test_step_config_slots():
    cfg = StepConfig(dt_tau=1e-3, h_delay=1e-2, t_end=0.2)
    assert (cfg.slots, cfg.n_steps) == (10, 200)


def test_h_not_multiple_of_tau():
    with pytest.raises(ValidationError) as exc:
        StepConfig(dt_tau=1e-3, h_delay=2.5e-3)
    assert exc.value.key == "h_delay"


def test_t_end_not_multiple_of_h():
    with pytest.raises(ValidationError):
        StepConfig(dt_tau=1e-3, h_delay=1e-2, t_end=0.015)


@pytest.mark.parametrize("key,value", [("penalty", 0.0), ("backtrack", 1.0), ("penalty_growth", 1.0), ("cn_tol", -1.0)])
def test_solver_config_validation(key, value):
    with pytest.raises(ValidationError):
        SolverConfig(**{key: value})


# -- flow map -------------------------------------------------------------------------
def _full_domain_flow_map():
    model, cfg, init = scenario_config("toy_oracle").build()
    state = initial_state(model, cfg, init)
    return state.flow_map, state.domain


def test_flow_map_constant_velocity_translates():
    fm, dom = _full_domain_flow_map()
    v = VelocityField.from_active(dom, np.tile([0.3, -0.2], (dom.n, 1)))
    out = update_flow_map(fm, v, 1e-3)
    assert np.allclose(out.positions - fm.positions, [3e-4, -2e-4], atol=1e-15)
    assert np.allclose(out.det, 1.0, atol=1e-12)


def test_flow_map_linear_dilation_det():
    fm, dom = _full_domain_flow_map()
    c = dom.centers - 0.5
    v = VelocityField.from_active(dom, 0.5 * c)
    out = update_flow_map(fm, v, 1e-2, values=0.5 * (fm.positions - 0.5))
    assert np.allclose(out.det, (1 + 0.5e-2) ** 2, rtol=1e-12)


def test_flow_map_escape_raises():
    fm, dom = _full_domain_flow_map()
    far = FlowMap(fm.reference, fm.positions + np.array([5.0, 0.0]), fm.lattice, fm.weights, fm.jacobians)
    v = VelocityField.from_active(dom, np.zeros((dom.n, 2)))
    with pytest.raises(SampleEscaped):
        update_flow_map(far, v, 1e-3)


# -- one step -------------------------------------------------------------------------
def test_toy_step_converges(toy):
    *_, prob, res = toy
    assert res.converged
    assert res.feasibility < 1e-10
    assert res.min_det > 0


def test_toy_step_constraints(toy):
    *_, prob, res = toy
    r = prob.C @ res.x
    for name, sl in prob.row_slices.items():
        assert np.abs(r[sl]).max() < 1e-9, name


def test_comparison_inequality_single_step(toy):
    *_, prob, res = toy
    assert res.objective <= res.objective_warm + 1e-9 * abs(res.objective_warm)
    assert res.objective_warm == pytest.approx(prob.objective(prob.warm_start()), rel=1e-14)


def test_step_objective_gradient_fd(toy):
    *_, prob, res = toy
    rng = np.random.default_rng(7)
    x = res.x
    g = prob.gradient(x)
    for _ in range(5):
        d = rng.normal(size=prob.n)
        d /= np.linalg.norm(d)
        eps = 1e-6
        fd = (prob.objective(x + eps * d) - prob.objective(x - eps * d)) / (2 * eps)
        assert fd == pytest.approx(g @ d, rel=1e-5, abs=1e-9)


def test_step_hessian_matches_gradient_difference(toy):
    *_, prob, res = toy
    rng = np.random.default_rng(8)
    d = rng.normal(size=prob.n)
    d /= np.linalg.norm(d)
    eps = 1e-6
    fd = (prob.gradient(res.x + eps * d) - prob.gradient(res.x - eps * d)) / (2 * eps)
    Hd = prob.hessian(res.x) @ d
    assert np.linalg.norm(fd - Hd) <= 1e-5 * np.linalg.norm(Hd)


def test_kkt_stationarity(toy):
    *_, prob, res = toy
    # the gradient lies in the row space of the constraints at the minimizer
    g = prob.gradient(res.x)
    C = prob.C.toarray()
    lam, *_ = np.linalg.lstsq(C.T, g, rcond=None)
    assert np.linalg.norm(g - C.T @ lam) <= 1e-6 * np.linalg.norm(g)


def test_pressure_gauge(toy):
    *_, prob, res = toy
    a = prob.domain.weights
    p = res.pressure[res.v.active]
    assert abs(np.sum(a * p)) <= 1e-10 * max(np.sum(a * np.abs(p)), 1e-300)


def test_disc_sinks_under_gravity(toy):
    model, cfg, init, state, prob, res = toy
    d, _ = prob.split(res.x)
    assert d[:, 1].mean() < 0


def test_state_advances(toy):
    model, cfg, init, *_ = toy
    state = initial_state(model, cfg, init)
    new, res, prob, extras = step(state, model, cfg)
    assert (new.k, new.t) == (1, pytest.approx(cfg.dt_tau))
    assert len(new.rates) == 1
    assert extras["separation"] > 0
    assert extras["cn_residual"] < 1e-6


# -- trajectories ----------------------------------------------------------------------
def test_rest_block_stays_at_rest():
    model, cfg, init = scenario_config("rest_block").build()
    traj = run_simulation(cfg, model, init, 12)
    assert traj.abort_reason is None
    X0 = traj.records[0].eta
    for r in traj.records:
        assert np.abs(r.eta - X0).max() < 1e-8
        assert np.abs(r.v).max() < 1e-8


def test_trajectory_interpolants():
    model, cfg, init = scenario_config("toy_oracle").build()
    traj = run_simulation(cfg, model, init, 3)
    assert len(traj.records) == 4
    tau = cfg.dt_tau
    t = 1.5 * tau
    e1, e2 = traj.records[1].eta, traj.records[2].eta
    assert np.array_equal(traj.eta_constant(t), e2)
    assert np.array_equal(traj.eta_lagged(t), e1)
    assert np.allclose(traj.eta_affine(t), 0.5 * (e1 + e2), atol=1e-15)
    assert np.array_equal(traj.eta_affine(2 * tau), e2)


def test_contact_imminent_raised_near_wall():
    config = scenario_config("toy_oracle").with_values(solver={"contact_distance": 0.5})
    model, cfg, init = config.build()
    state = initial_state(model, cfg, init)
    with pytest.raises(ContactImminent) as exc:
        step(state, model, cfg)
    assert exc.value.step == 1
    traj = run_simulation(cfg, model, init, 3)
    assert traj.abort_reason.startswith("ContactImminent")
    assert len(traj.records) == 1


def test_solid_leaving_container_rejected():
    config = scenario_config("toy_oracle").with_values(solid={"center_x": 0.9})
    model, cfg, init = config.build()
    from varislip.errors import ShapeMismatch

    with pytest.raises(ShapeMismatch):
        initial_state(model, cfg, init)


def test_grid_container_default():
    g = FluidGrid()
    assert (g.x1 - g.x0, g.y1 - g.y0) == (1.0, 1.0)
