import math

import numpy as np
import pytest

from cell_problems import CellGrid, SolverOptions
from effective_operator import DirectEffectiveFlux, tabulate_b
from errors import ConfigurationError, ConvergenceError, InvalidArgumentError, RangeError
from flux_models import FourierSeries
from multiscale_fields import SpaceTimeGrid
from parabolic_solver import (LEDGER_COLUMNS, FieldSpec, ProblemSpec, energy_balance,
                              gradient_integrability_probe, restrict, solve_fine, solve_homogenized,
                              time_translation_probe)

ZERO = FieldSpec(kind='constant', value=0.0)
ONE = FieldSpec(kind='constant', value=1.0)
SINE = FieldSpec(kind='sine', amplitude=1.0, modes=(1,))


def _heat_run(heat, n_t, n_x=256, horizon=0.1):
    spec = ProblemSpec(dim=1, horizon=horizon, source=ZERO, initial=SINE, model=heat)
    return solve_fine(spec, SpaceTimeGrid(dim=1, T=horizon, n_x=n_x, n_t=n_t, epsilon=1.0, mu=2.0))


def test_heat_equation_oracle(heat):
    result = _heat_run(heat, 1024)
    nodes = result.grid.mesh().node_coordinates()[:, 0]
    exact = math.exp(-math.pi ** 2 * 0.1) * np.sin(math.pi * nodes)
    assert np.max(np.abs(result.trajectory[-1] - exact)) < 1e-3
    assert result.trajectory.shape == (1025, 255)
    assert result.gradient.values.shape == (1024, 256, 1)


def test_energy_balance_is_first_order_in_dt(heat):
    coarse = energy_balance(_heat_run(heat, 1024))
    fine = energy_balance(_heat_run(heat, 2048))
    assert fine < 1e-4
    assert 0.4 < fine / coarse < 0.6


def test_ledger_layout(heat):
    result = _heat_run(heat, 16, n_x=16)
    assert list(result.ledger.columns) == LEDGER_COLUMNS
    assert len(result.ledger) == 16
    assert result.ledger['step'].tolist() == list(range(1, 17))
    assert np.all(result.ledger['dissipation'] > 0)
    assert np.all(result.step_residuals < 1e-10)


def test_zero_data_gives_zero_solution(heat):
    spec = ProblemSpec(dim=1, horizon=0.1, source=ZERO, initial=ZERO, model=heat)
    result = solve_fine(spec, SpaceTimeGrid(dim=1, T=0.1, n_x=16, n_t=8, epsilon=1.0, mu=2.0))
    assert np.all(result.trajectory == 0.0)
    assert energy_balance(result) == 0.0


def test_initial_datum_is_kept_and_boundary_is_zero(heat):
    result = _heat_run(heat, 8, n_x=32)
    nodes = result.grid.mesh().node_coordinates()
    np.testing.assert_array_equal(result.trajectory[0], SINE(nodes))
    full = result.nodal(8)
    assert full[0] == 0.0 and full[-1] == 0.0


def test_initial_datum_must_vanish_on_boundary(heat):
    with pytest.raises(ConfigurationError, match="vanish"):
        ProblemSpec(dim=1, horizon=0.1, source=ZERO, initial=ONE, model=heat)
    with pytest.raises(ConfigurationError, match="vanish"):
        ProblemSpec(dim=2, horizon=0.1, source=ZERO, initial=FieldSpec(
            kind='fourier', series=FourierSeries(mean=0.0, terms=(((1, 0), 0.0, 1.0),), dim=2)))


def test_field_descriptors():
    x = np.array([[0.25], [0.5]])
    np.testing.assert_allclose(SINE(x), [math.sqrt(0.5), 1.0])
    separable = FieldSpec.from_dict({'type': 'separable', 'space': {'type': 'sine', 'modes': [2]},
                                     'time': {'mean': 1.0, 'terms': [{'freq': [1], 'cos': 1.0}]}}, 1)
    np.testing.assert_allclose(separable(x, 0.0), 2.0 * np.sin(2 * np.pi * x[:, 0]), atol=1e-15)
    np.testing.assert_allclose(separable(x, 0.5), 0.0, atol=1e-15)
    assert FieldSpec.from_dict(separable.to_dict(), 1) == separable
    with pytest.raises(ConfigurationError, match="unknown field type"):
        FieldSpec.from_dict({'type': 'gaussian'}, 1)


def test_p4_fine_solve_dissipates(models):
    spec = ProblemSpec(dim=1, horizon=0.05, source=ZERO, initial=SINE, model=models['p_laplacian_1d_p4'])
    result = solve_fine(spec, SpaceTimeGrid(dim=1, T=0.05, n_x=32, n_t=64, epsilon=0.25, mu=2.0))
    mesh = result.grid.mesh()
    norms = [mesh.l2_norm(u) for u in result.trajectory]
    assert np.all(np.diff(norms) <= 1e-12)
    assert np.all(result.step_residuals <= 1e-7)
    assert energy_balance(result) < 1e-2


def test_failed_step_reports_its_index(models):
    spec = ProblemSpec(dim=1, horizon=0.05, source=ONE, initial=SINE, model=models['p_laplacian_1d_p4'])
    grid = SpaceTimeGrid(dim=1, T=0.05, n_x=16, n_t=4, epsilon=0.5, mu=2.0)
    with pytest.raises(ConvergenceError) as info:
        solve_fine(spec, grid, SolverOptions(tol=1e-14, max_iter=1))
    assert info.value.step == 1
    assert info.value.history


def test_fine_solve_needs_model_and_gate(models):
    spec = ProblemSpec(dim=2, horizon=0.25, source=ONE, initial=ZERO)
    grid = SpaceTimeGrid(dim=2, T=0.25, n_x=4, n_t=4, epsilon=0.5, mu=1.0)
    with pytest.raises(ConfigurationError, match="flux model"):
        solve_fine(spec, grid)
    gated = ProblemSpec(dim=2, horizon=0.25, source=ONE, initial=ZERO, model=models['checkerboard_2d'])
    with pytest.raises(ConfigurationError):
        solve_fine(gated, grid)
    with pytest.raises(ConfigurationError, match="effective"):
        solve_homogenized(spec, grid)


def test_homogenized_equals_fine_for_constant_coefficient(constant_two):
    effective = DirectEffectiveFlux(constant_two, 2.0, CellGrid(dim=1, n_space=16, n_time=4))
    grid = SpaceTimeGrid(dim=1, T=0.125, n_x=32, n_t=8, epsilon=0.25, mu=2.0)
    fine = solve_fine(ProblemSpec(dim=1, horizon=0.125, source=ONE, initial=SINE, model=constant_two), grid)
    hom = solve_homogenized(ProblemSpec(dim=1, horizon=0.125, source=ONE, initial=SINE, effective=effective), grid)
    np.testing.assert_allclose(hom.trajectory, fine.trajectory, atol=1e-8)
    assert hom.kind == 'homogenized' and fine.kind == 'fine'


def test_homogenized_steady_state(harmonic):
    effective = DirectEffectiveFlux(harmonic, 2.0, CellGrid(dim=1, n_space=64, n_time=8))
    grid = SpaceTimeGrid(dim=1, T=2.0, n_x=64, n_t=64, epsilon=1.0, mu=2.0)
    result = solve_homogenized(ProblemSpec(dim=1, horizon=2.0, source=ONE, initial=ZERO, effective=effective), grid)
    x = grid.mesh().node_coordinates()[:, 0]
    np.testing.assert_allclose(result.trajectory[-1], x * (1.0 - x) / (2.0 * math.sqrt(3.0)), atol=1e-5)


def test_homogenized_solve_outside_table_raises(harmonic):
    table = tabulate_b(harmonic, 2.0, (-0.5, 0.5), 0.5, CellGrid(dim=1, n_space=16, n_time=4))
    spec = ProblemSpec(dim=1, horizon=0.1, source=ZERO, initial=SINE, effective=table)
    with pytest.raises(RangeError, match="larger box"):
        solve_homogenized(spec, SpaceTimeGrid(dim=1, T=0.1, n_x=16, n_t=4, epsilon=1.0, mu=2.0))


def test_fine_error_decreases_with_epsilon(harmonic):
    horizon = 0.125
    problem = dict(dim=1, horizon=horizon, source=ONE, initial=SINE)
    effective = DirectEffectiveFlux(harmonic, 2.0, CellGrid(dim=1, n_space=64, n_time=8))
    finest = SpaceTimeGrid(dim=1, T=horizon, n_x=512, n_t=256, epsilon=0.0625, mu=2.0)
    u_hom = solve_homogenized(ProblemSpec(**problem, effective=effective), finest)
    errors = []
    for eps in (0.25, 0.125, 0.0625):
        grid = SpaceTimeGrid(dim=1, T=horizon, n_x=int(32 / eps), n_t=int(8 * horizon / eps ** 2),
                             epsilon=eps, mu=2.0)
        u_fine = solve_fine(ProblemSpec(**problem, model=harmonic), grid)
        coarse = restrict(u_hom, grid)
        errors.append(grid.mesh().l2_norm(u_fine.trajectory[-1] - coarse.trajectory[-1]))
    assert errors[0] > errors[1] > errors[2]


def test_restrict_samples_nested_grid(heat):
    result = _heat_run(heat, 16, n_x=32)
    coarse_grid = SpaceTimeGrid(dim=1, T=0.1, n_x=16, n_t=8, epsilon=1.0, mu=2.0)
    coarse = restrict(result, coarse_grid)
    assert coarse.trajectory.shape == (9, 15)
    np.testing.assert_array_equal(coarse.nodal(4), result.nodal(8)[::2])
    assert coarse.gradient.grid == coarse_grid
    with pytest.raises(InvalidArgumentError, match="nested"):
        restrict(result, SpaceTimeGrid(dim=1, T=0.1, n_x=12, n_t=8, epsilon=1.0, mu=2.0))


def test_trajectory_frame(heat):
    result = _heat_run(heat, 4, n_x=8)
    frame = result.trajectory_frame()
    assert list(frame.columns) == ['t', 'i0', 'u']
    assert len(frame) == 5 * 9
    assert frame['u'].iloc[0] == 0.0


def test_time_regularity_probes(heat):
    result = _heat_run(heat, 64, n_x=32)
    dt = result.grid.dt
    translation = time_translation_probe(result, [dt, 4 * dt, 16 * dt])
    assert translation[0] < translation[1] < translation[2]
    with pytest.raises(InvalidArgumentError):
        time_translation_probe(result, [0.1])
    probe = gradient_integrability_probe(result)
    assert set(probe) == {'0.1', '0.5'}
    assert all(np.isfinite(v) and v > 0 for v in probe.values())
