import dataclasses
import math

import numpy as np
import pytest

from vesselcfd.centerline import build_flow_domain, plan_cuts, skeletonize
from vesselcfd.errors import PreconditionError, ResolutionError
from vesselcfd.phantom import PhantomSpec, Shape, generate_phantom
from vesselcfd.solver import SolverConfig, bfa_check, grid_independence, solve_steady


@pytest.fixture(scope="module")
def tube_domain():
    vol, _, _ = generate_phantom(PhantomSpec(Shape.STRAIGHT_TUBE, 1.0, 8.0, spacing_mm=0.125))
    g = skeletonize(vol)
    return build_flow_domain(vol, plan_cuts(g), g)


@pytest.fixture(scope="module")
def tube_flow(tube_domain):
    return solve_steady(tube_domain, SolverConfig(mass_flow=0.001, grid_spacing_mm=0.25))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(cfl=1.0)
    with pytest.raises(ValueError):
        SolverConfig(mass_flow=0.01)
    with pytest.raises(ValueError):
        SolverConfig(viscosity=0.0)
    assert SolverConfig(mass_flow=0.01, allow_any_mass_flow=True).mass_flow == 0.01


def test_small_tube_converges_and_conserves_mass(tube_flow):
    f = tube_flow
    assert f.converged and not f.diverged
    assert f.residuals[-1].max() <= 1e-6
    assert f.mass_balance <= 1e-4
    assert f.max_divergence <= 1e-8
    assert f.inflow == pytest.approx(0.001, rel=1e-9)
    assert bfa_check(f) == 1


def test_flow_goes_downhill(tube_flow):
    assert tube_flow.pressure_drop > 0
    assert tube_flow.mean_wss() > 0
    assert tube_flow.max_wss >= tube_flow.mean_wss()


def test_summary_is_finite(tube_flow):
    s = tube_flow.summary()
    assert s["converged"] is True and s["error"] is None
    assert all(v is not None for k, v in s.items() if k != "error")


def test_runs_are_deterministic(tube_domain, tube_flow):
    again = solve_steady(tube_domain, SolverConfig(mass_flow=0.001, grid_spacing_mm=0.25))
    np.testing.assert_array_equal(again.residuals, tube_flow.residuals)


def test_step_cap_gives_bfa_zero(tube_domain):
    f = solve_steady(tube_domain, SolverConfig(mass_flow=0.001, grid_spacing_mm=0.25, max_steps=10))
    assert not f.converged and f.steps == 10
    assert bfa_check(f) == 0
    assert "10 steps" in f.error


def test_bfa_rejects_missing_and_diverged(tube_flow):
    assert bfa_check(None) == 0
    nan = dataclasses.replace(tube_flow, diverged=True, converged=False)
    assert bfa_check(nan) == 0
    leaky = dataclasses.replace(tube_flow, outflows=[0.0009])
    assert bfa_check(leaky) == 0


def test_under_resolved_is_resolution_error(tube_domain):
    with pytest.raises(ResolutionError):
        solve_steady(tube_domain, SolverConfig(mass_flow=0.001, grid_spacing_mm=0.6))


def test_empty_inlet_is_precondition_error(tube_domain):
    broken = dataclasses.replace(tube_domain, patches=list(tube_domain.patches))
    broken.patches[0] = dataclasses.replace(broken.patches[0], faces=np.zeros((0, 4), int))
    with pytest.raises(PreconditionError):
        solve_steady(broken, SolverConfig(mass_flow=0.001, grid_spacing_mm=0.25))


def test_grid_study_single_spacing(tube_domain):
    st = grid_independence(tube_domain, SolverConfig(mass_flow=0.001), [0.25])
    assert len(st.rows) == 1 and st.differences == []
    assert st.rows[0].converged


def test_grid_study_flags_unresolved_row(tube_domain):
    st = grid_independence(tube_domain, SolverConfig(mass_flow=0.001, max_steps=5), [0.6, 0.25])
    assert st.rows[0].error.startswith("ResolutionError")
    assert st.rows[0].mean_wss is None
    assert math.isnan(st.differences[0])


def test_grid_study_rejects_increasing_spacings(tube_domain):
    with pytest.raises(ValueError):
        grid_independence(tube_domain, SolverConfig(mass_flow=0.001), [0.2, 0.3])
