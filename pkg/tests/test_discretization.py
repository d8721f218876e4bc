import numpy as np
import pytest

from discretization import LinearSolver, MonotoneSystem, TensorMesh, lagged_diffusivity, solve_monotone
from errors import ConvergenceError, InvalidArgumentError


def test_mesh_layout():
    mesh = TensorMesh(2, 4, periodic=False)
    assert mesh.n_nodes == 9
    assert mesh.n_quad == 16 * 4
    assert mesh.weights.sum() == pytest.approx(1.0)
    periodic = TensorMesh(1, 8, periodic=True)
    assert periodic.n_nodes == 8
    assert periodic.node_mass == pytest.approx(1.0 / 8)
    with pytest.raises(InvalidArgumentError):
        TensorMesh(3, 4, periodic=True)


def test_gradient_of_quadratic_is_exact_at_midpoints():
    mesh = TensorMesh(1, 16, periodic=False)
    x = mesh.node_coordinates()[:, 0]
    g = mesh.gradient(x * (1.0 - x))[:, 0]
    np.testing.assert_allclose(g, 1.0 - 2.0 * mesh.quad_points[:, 0], atol=1e-12)


def test_periodic_gradient_integrates_to_zero():
    mesh = TensorMesh(2, 8, periodic=True)
    v = np.random.default_rng(0).standard_normal(mesh.n_nodes)
    np.testing.assert_allclose(mesh.integrate(mesh.gradient(v)), 0.0, atol=1e-12)


def test_periodic_stiffness_annihilates_constants():
    mesh = TensorMesh(2, 8, periodic=True)
    np.testing.assert_allclose(mesh.stiffness() @ np.ones(mesh.n_nodes), 0.0, atol=1e-12)


def test_gradient_at_matches_quadrature_gradient():
    mesh = TensorMesh(2, 8, periodic=True)
    v = np.random.default_rng(1).standard_normal(mesh.n_nodes)
    np.testing.assert_allclose(mesh.gradient_at(v, mesh.quad_points), mesh.gradient(v), atol=1e-10)


def test_gradient_at_on_element_faces():
    mesh = TensorMesh(1, 4, periodic=False)
    v = np.array([1.0, -2.0, 0.5])
    slopes = mesh.gradient(v)[:, 0]
    at = mesh.gradient_at(v, np.array([[0.0], [0.25], [0.6], [1.0]]))[:, 0]
    np.testing.assert_allclose(at, slopes[[0, 1, 2, 3]], atol=1e-12)
    periodic = TensorMesh(1, 4, periodic=True)
    w = np.array([0.0, 1.0, 3.0, -1.0])
    np.testing.assert_allclose(periodic.gradient_at(w, np.array([[1.0], [0.75]]))[:, 0],
                               periodic.gradient(w)[[0, 3], 0], atol=1e-12)


def test_full_values_round_trip():
    mesh = TensorMesh(2, 4, periodic=False)
    v = np.arange(mesh.n_nodes, dtype=float) + 1.0
    full = mesh.full_values(v)
    assert full.shape == (5, 5)
    assert np.all(full[0] == 0) and np.all(full[:, -1] == 0)
    np.testing.assert_array_equal(mesh.from_full(full), v)


def test_singular_solver_returns_mean_zero_solution():
    mesh = TensorMesh(1, 32, periodic=True)
    matrix = mesh.stiffness()
    rhs = np.random.default_rng(2).standard_normal(mesh.n_nodes)
    rhs -= rhs.mean()
    x = LinearSolver(matrix, singular=True)(rhs)
    assert abs(x.mean()) < 1e-12
    np.testing.assert_allclose(matrix @ x, rhs, atol=1e-9)


def test_lagged_diffusivity():
    g = np.array([[0.0], [2.0]])
    np.testing.assert_array_equal(lagged_diffusivity(3.0, g, 2.0), [3.0, 3.0])
    d = lagged_diffusivity(np.ones(2), g, 4.0)
    assert d[0] > 0
    assert d[1] == pytest.approx(4.0)


def _p_laplacian_cell(models, n=32):
    model = models['p_laplacian_1d_p4']
    mesh = TensorMesh(1, n, periodic=True)
    points = mesh.quad_points
    xi = np.array([1.0])
    coefficient = model.coefficient(points, 0.0)
    system = MonotoneSystem(
        mesh,
        flux=lambda g: model.eval(points, 0.0, g + xi),
        flux_jvp=lambda g, dg: model.eval_jvp(points, 0.0, g + xi, dg),
        diffusivity=lambda g: lagged_diffusivity(coefficient, g + xi, 4.0))
    return mesh, system


def test_monotone_iteration_decreases_residual(models):
    mesh, system = _p_laplacian_cell(models)
    result = system.solve(np.zeros(mesh.n_nodes), None, 1e-8, 500)
    assert result.residual_norm <= 1e-8
    assert np.all(np.diff(result.history) <= 0)
    assert abs(result.v.mean()) < 1e-12


def test_monotone_iteration_without_lagged_direction(models):
    mesh, system = _p_laplacian_cell(models, n=16)
    result = solve_monotone(lambda v: system.residual(v), system.jvp, system.precond,
                            np.zeros(mesh.n_nodes), 1e-8, 2000, project=system.project)
    assert result.residual_norm <= 1e-8


def test_monotone_iteration_reports_history_on_failure(models):
    mesh, system = _p_laplacian_cell(models)
    with pytest.raises(ConvergenceError, match="no convergence within 1 iterations") as info:
        system.solve(np.zeros(mesh.n_nodes), None, 1e-14, 1)
    assert len(info.value.history) == 2
    assert info.value.last_residual == info.value.history[-1]


def test_affine_flux_takes_one_solve():
    mesh = TensorMesh(1, 16, periodic=False)
    c = 1.0 + mesh.quad_points[:, 0]
    system = MonotoneSystem(mesh, flux=lambda g: c[:, None] * g,
                            flux_jvp=lambda g, dg: c[:, None] * dg,
                            diffusivity=lambda g: c, shift=10.0, linear_coefficient=c)
    u_prev = np.sin(np.pi * mesh.node_coordinates()[:, 0])
    result = system.solve(u_prev, u_prev, 1e-10, 50, load=np.full(mesh.n_nodes, mesh.node_mass))
    assert result.iterations == 1
    assert result.residual_norm < 1e-10


def test_affine_flux_above_tolerance_raises():
    mesh = TensorMesh(1, 16, periodic=False)
    c = 1.0 + mesh.quad_points[:, 0]
    system = MonotoneSystem(mesh, flux=lambda g: c[:, None] * g,
                            flux_jvp=lambda g, dg: c[:, None] * dg,
                            diffusivity=lambda g: c, shift=10.0, linear_coefficient=c)
    u_prev = np.sin(np.pi * mesh.node_coordinates()[:, 0])
    with pytest.raises(ConvergenceError, match="above") as info:
        system.solve(u_prev, u_prev, 1e-30, 50, load=np.full(mesh.n_nodes, mesh.node_mass))
    assert len(info.value.history) == 1


def test_stagnating_iteration_raises(models):
    mesh, system = _p_laplacian_cell(models, n=16)
    with pytest.raises(ConvergenceError):
        system.solve(np.zeros(mesh.n_nodes), None, 1e-30, 200)
