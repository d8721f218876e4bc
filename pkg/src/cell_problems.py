"""
Periodic cell problems for the three time-scale regimes and the effective
flux b(xi) they define.

    0 < mu < 2   elliptic problem at each frozen tau, fluxes averaged over tau
    mu = 2       time-periodic parabolic problem on Y x T0
    mu > 2       elliptic problem for the time-averaged flux
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from discretization import MonotoneSystem, TensorMesh, lagged_diffusivity
from errors import ConvergenceError, InvalidArgumentError
from flux_models import FluxBase, time_gate

logger = logging.getLogger(__name__)

ELLIPTIC = 'elliptic-parametric'
PARABOLIC = 'parabolic-periodic'
TIME_AVERAGED = 'time-averaged'


@dataclass(frozen=True)
class CellGrid:
    """Discretization of Y x T0: n_space elements per axis, n_time steps per period."""
    dim: int = 1
    n_space: int = 64
    n_time: int = 8

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidArgumentError(f"cell dimension must be 1 or 2, got {self.dim}")
        if self.n_space < 4 or self.n_space & (self.n_space - 1):
            raise InvalidArgumentError(f"n_space must be a power of two >= 4, got {self.n_space}")
        if self.n_time < 2:
            raise InvalidArgumentError(f"n_time must be >= 2, got {self.n_time}")

    @property
    def h(self) -> float:
        return 1.0 / self.n_space

    @property
    def dtau(self) -> float:
        return 1.0 / self.n_time

    def to_dict(self) -> Dict:
        return {'dim': self.dim, 'n_space': self.n_space, 'n_time': self.n_time}


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and iteration limits; ``tol`` defaults by growth exponent."""
    tol: Optional[float] = None
    max_iter: int = 2000
    period_tol: float = 1e-8
    max_periods: int = 200
    identity_tol: float = 1e-6

    def __post_init__(self):
        for name in ('period_tol', 'identity_tol'):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.tol is not None and not self.tol > 0:
            raise InvalidArgumentError("tol must be positive")
        if self.max_iter < 1 or self.max_periods < 1:
            raise InvalidArgumentError("iteration limits must be positive")

    def tolerance(self, p: float) -> float:
        if self.tol is not None:
            return self.tol
        return 1e-10 if p == 2.0 else 1e-8

    def to_dict(self) -> Dict:
        return {'tol': self.tol, 'max_iter': self.max_iter, 'period_tol': self.period_tol,
                'max_periods': self.max_periods, 'identity_tol': self.identity_tol}


@lru_cache(maxsize=32)
def cell_mesh(dim: int, n_space: int) -> TensorMesh:
    return TensorMesh(dim, n_space, periodic=True)


@dataclass(frozen=True, eq=False)
class CellSolution:
    """Solution of one cell problem for a frozen gradient xi.

    ``v`` holds one row of nodal values per stored time slice and ``taus`` the
    slice times; time-independent solutions carry a single slice.
    """
    xi: np.ndarray
    regime: str
    grid: CellGrid
    taus: np.ndarray
    v: np.ndarray
    grad_v: np.ndarray
    b_xi: np.ndarray
    residual_norm: float
    periodicity_gap: Optional[float] = None
    gap_history: Tuple[float, ...] = field(default_factory=tuple)

    @property
    def n_slices(self) -> int:
        return len(self.taus)

    @property
    def slice_offset(self) -> float:
        return 0.5 if self.regime == ELLIPTIC else 0.0

    def slice_index(self, tau) -> np.ndarray:
        """Nearest stored slice for each tau in [0, 1)."""
        tau = np.asarray(tau, dtype=float)
        if self.n_slices == 1:
            return np.zeros(tau.shape, dtype=int)
        n = self.grid.n_time
        return np.round(np.mod(tau, 1.0) * n - self.slice_offset).astype(int) % n

    def gradient_at(self, y: np.ndarray, tau) -> np.ndarray:
        """Dv at points y (shape (m, dim)) and times tau, periodic in both."""
        y = np.mod(np.asarray(y, dtype=float).reshape(-1, self.grid.dim), 1.0)
        index = np.broadcast_to(self.slice_index(tau), y.shape[:1])
        mesh = cell_mesh(self.grid.dim, self.grid.n_space)
        out = np.zeros_like(y)
        for k in np.unique(index):
            mask = index == k
            out[mask] = mesh.gradient_at(self.v[k], y[mask])
        return out

    def mean_v(self) -> float:
        return float(np.max(np.abs(self.v.mean(axis=1))))

    def mean_corrected_gradient(self) -> np.ndarray:
        """Cell average of xi + Dv over Y x T0."""
        mesh = cell_mesh(self.grid.dim, self.grid.n_space)
        return self.xi + np.mean([mesh.integrate(g) for g in self.grad_v], axis=0)

    def to_dict(self) -> Dict:
        record = {
            'xi': self.xi.tolist(),
            'regime': self.regime,
            'b': self.b_xi.tolist(),
            'residual': self.residual_norm,
            'grid': self.grid.to_dict(),
        }
        if self.periodicity_gap is not None:
            record['periodicity_gap'] = self.periodicity_gap
        return record

    def to_frame(self) -> pd.DataFrame:
        """Nodal values per slice: index per axis, slice, v, gradient components."""
        mesh = cell_mesh(self.grid.dim, self.grid.n_space)
        nodes = mesh.node_coordinates()
        index = np.round(nodes * self.grid.n_space).astype(int)
        frames = []
        for k in range(self.n_slices):
            grad = mesh.gradient_at(self.v[k], nodes)
            data = {f'i{d}': index[:, d] for d in range(self.grid.dim)}
            data['slice'] = k
            data['v'] = self.v[k]
            data.update({f'grad{d}': grad[:, d] for d in range(self.grid.dim)})
            frames.append(pd.DataFrame(data))
        return pd.concat(frames, ignore_index=True)


class TimeAveragedFlux(FluxBase):
    """The tau-average (1/n) sum_k a(y, tau_k, xi) over midpoint nodes tau_k."""

    def __init__(self, model: FluxBase, n_time: int):
        self.model = model
        self.constants = model.constants
        self.taus = (np.arange(n_time) + 0.5) / n_time

    @property
    def dim(self) -> int:
        return self.model.dim

    @property
    def time_dependent(self) -> bool:
        return False

    def coefficient(self, y: np.ndarray, tau) -> np.ndarray:
        shape = np.broadcast_shapes(np.shape(y)[:-1], np.shape(tau))
        if not self.model.time_dependent:
            return np.broadcast_to(self.model.coefficient(y, 0.0), shape)
        total = sum(self.model.coefficient(y, t) for t in self.taus)
        return np.broadcast_to(total / len(self.taus), shape)

    def coefficient_bounds(self) -> Tuple[float, float]:
        return self.model.coefficient_bounds()


def time_average_flux(model: FluxBase, grid: CellGrid) -> TimeAveragedFlux:
    """Midpoint-rule average of the flux over one period."""
    return TimeAveragedFlux(model, grid.n_time)


def regime_for(mu: float) -> str:
    if not (math.isfinite(mu) and mu > 0):
        raise InvalidArgumentError(f"mu must be a positive real, got {mu}")
    if math.isclose(mu, 2.0, rel_tol=0.0, abs_tol=1e-12):
        return PARABOLIC
    return ELLIPTIC if mu < 2.0 else TIME_AVERAGED


def _check_xi(xi, dim: int) -> np.ndarray:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (dim,):
        raise InvalidArgumentError(f"xi must have {dim} components, got shape {xi.shape}")
    if not np.all(np.isfinite(xi)):
        raise InvalidArgumentError("xi must be finite")
    return xi


class _CellOperator(MonotoneSystem):
    """Step shift * M (v - v_prev) - div a(y, tau, Dv + xi) = 0 on the periodic cell mesh."""

    def __init__(self, model: FluxBase, mesh: TensorMesh, tau: float, xi: np.ndarray, shift: float = 0.0):
        self.model = model
        self.tau = tau
        self.xi = xi
        points = mesh.quad_points
        coefficient = model.coefficient(points, np.mod(tau, 1.0))
        super().__init__(
            mesh,
            flux=lambda g: model.eval(points, tau, g + xi),
            flux_jvp=lambda g, dg: model.eval_jvp(points, tau, g + xi, dg),
            diffusivity=lambda g: lagged_diffusivity(coefficient, g + xi, model.p),
            shift=shift,
            linear_coefficient=coefficient if model.is_linear else None)

    def run(self, v0: np.ndarray, v_prev: Optional[np.ndarray], tol: float, max_iter: int):
        result = self.solve(v0, v_prev, tol, max_iter)
        return result.v, result.residual_norm

    def b(self, v: np.ndarray) -> np.ndarray:
        return self.mesh.integrate(self.flux(self.mesh.gradient(v)))


def _elliptic_slice(model: FluxBase, tau: float, xi: np.ndarray, grid: CellGrid, opts: SolverOptions):
    mesh = cell_mesh(grid.dim, grid.n_space)
    operator = _CellOperator(model, mesh, tau, xi)
    v, residual = operator.run(np.zeros(mesh.n_nodes), None, opts.tolerance(model.p), opts.max_iter)
    return v, mesh.gradient(v), operator.b(v), residual


def solve_cell_elliptic(model: FluxBase, tau: float, xi, grid: CellGrid,
                        opts: Optional[SolverOptions] = None) -> CellSolution:
    """Solve -div a(y, tau, Dv + xi) = 0 with periodic, mean-zero v at frozen tau.

    Raises:
        ConvergenceError: The damped iteration did not reach tolerance
    """
    opts = opts or SolverOptions()
    xi = _check_xi(xi, grid.dim)
    v, grad, b, residual = _elliptic_slice(model, tau, xi, grid, opts)
    return CellSolution(xi=xi, regime=ELLIPTIC, grid=grid, taus=np.array([float(tau)]),
                        v=v[None, :], grad_v=grad[None], b_xi=b, residual_norm=residual)


def solve_cell_parametric(model: FluxBase, xi, grid: CellGrid,
                          opts: Optional[SolverOptions] = None) -> CellSolution:
    """Elliptic cell solves at the midpoint tau nodes, fluxes averaged over tau."""
    opts = opts or SolverOptions()
    xi = _check_xi(xi, grid.dim)
    if not model.time_dependent:
        solution = solve_cell_elliptic(model, 0.5 / grid.n_time, xi, grid, opts)
        return solution
    taus = (np.arange(grid.n_time) + 0.5) / grid.n_time
    slices = [_elliptic_slice(model, tau, xi, grid, opts) for tau in taus]
    return CellSolution(xi=xi, regime=ELLIPTIC, grid=grid, taus=taus,
                        v=np.stack([s[0] for s in slices]),
                        grad_v=np.stack([s[1] for s in slices]),
                        b_xi=np.mean([s[2] for s in slices], axis=0),
                        residual_norm=max(s[3] for s in slices))


def solve_cell_parabolic_periodic(model: FluxBase, xi, grid: CellGrid,
                                  opts: Optional[SolverOptions] = None) -> CellSolution:
    """Time-periodic solution of v' - div a(y, tau, Dv + xi) = 0.

    Backward Euler is repeated over whole periods, starting from the elliptic
    solution at tau = 0, until the L2 gap between the start and the end of a
    period drops below ``opts.period_tol``. Slice k holds v at tau = k/n_time.

    Raises:
        ConvergenceError: The gap did not contract within max_periods sweeps;
            carries the gap history
    """
    opts = opts or SolverOptions()
    xi = _check_xi(xi, grid.dim)
    if not model.time_dependent:
        stationary = solve_cell_elliptic(model, 0.0, xi, grid, opts)
        return CellSolution(xi=xi, regime=PARABOLIC, grid=grid, taus=np.array([0.0]),
                            v=stationary.v, grad_v=stationary.grad_v, b_xi=stationary.b_xi,
                            residual_norm=stationary.residual_norm, periodicity_gap=0.0,
                            gap_history=(0.0,))

    mesh = cell_mesh(grid.dim, grid.n_space)
    n = grid.n_time
    tol = opts.tolerance(model.p)
    shift = 1.0 / grid.dtau
    operators = [_CellOperator(model, mesh, k / n, xi, shift=shift) for k in range(n)]

    v, _, _, _ = _elliptic_slice(model, 0.0, xi, grid, opts)
    slices = np.zeros((n, mesh.n_nodes))
    gaps = []
    residual = 0.0
    for sweep in range(1, opts.max_periods + 1):
        start = v.copy()
        residual = 0.0
        for k in range(1, n + 1):
            try:
                v, step_residual = operators[k % n].run(v, v, tol, opts.max_iter)
            except ConvergenceError as e:
                raise ConvergenceError(f"period sweep {sweep} failed", history=e.history, step=k) from e
            residual = max(residual, step_residual)
            slices[k % n] = v
        gap = mesh.l2_norm(v - start)
        if gaps and gap > gaps[-1]:
            logger.warning(f"Periodicity gap grew from {gaps[-1]:.3e} to {gap:.3e} at sweep {sweep}")
        gaps.append(gap)
        logger.debug(f"period sweep {sweep}: gap {gap:.3e}")
        if gap < opts.period_tol:
            break
    else:
        raise ConvergenceError(f"periodicity gap did not reach {opts.period_tol:g} "
                               f"in {opts.max_periods} sweeps", history=gaps)

    grads = np.stack([mesh.gradient(s) for s in slices])
    b = np.mean([operators[k].b(slices[k]) for k in range(n)], axis=0)
    return CellSolution(xi=xi, regime=PARABOLIC, grid=grid, taus=np.arange(n) / n,
                        v=slices, grad_v=grads, b_xi=b, residual_norm=residual,
                        periodicity_gap=gaps[-1], gap_history=tuple(gaps))


def solve_cell_time_averaged(model: FluxBase, xi, grid: CellGrid,
                             opts: Optional[SolverOptions] = None) -> CellSolution:
    """Elliptic cell problem for the time-averaged flux; v is time-independent."""
    opts = opts or SolverOptions()
    xi = _check_xi(xi, grid.dim)
    averaged = time_average_flux(model, grid)
    v, grad, b, residual = _elliptic_slice(averaged, 0.0, xi, grid, opts)
    return CellSolution(xi=xi, regime=TIME_AVERAGED, grid=grid, taus=np.array([0.0]),
                        v=v[None, :], grad_v=grad[None], b_xi=b, residual_norm=residual)


def solve_cell(model: FluxBase, mu: float, xi, grid: CellGrid,
               opts: Optional[SolverOptions] = None) -> CellSolution:
    """Dispatch to the cell problem of the regime selected by mu."""
    regime = regime_for(mu)
    if regime == ELLIPTIC:
        time_gate(model)
        return solve_cell_parametric(model, xi, grid, opts)
    if regime == PARABOLIC:
        return solve_cell_parabolic_periodic(model, xi, grid, opts)
    return solve_cell_time_averaged(model, xi, grid, opts)


def effective_flux(model: FluxBase, mu: float, xi, grid: CellGrid,
                   opts: Optional[SolverOptions] = None) -> Tuple[np.ndarray, Tuple[CellSolution, ...]]:
    """b(xi) for the regime of mu, together with the cell solutions it came from.

    Raises:
        InvalidArgumentError: mu is not a positive real
        ConfigurationError: 0 < mu < 2 and the model fails the time-modulus gate
    """
    solution = solve_cell(model, mu, xi, grid, opts)
    return solution.b_xi, (solution,)


def energy_identity_check(solution: CellSolution, model: FluxBase) -> float:
    """|mean over Y x T0 of (a(p), p) - (b(xi), xi)| with p = xi + Dv.

    For the periodic parabolic regime the discrete time-derivative pairing
    (v^k - v^(k-1), v^k)/dtau, which replaces the vanishing integral of
    (v', v) over a period, is added before comparing.
    """
    flux = time_average_flux(model, solution.grid) if solution.regime == TIME_AVERAGED else model
    mesh = cell_mesh(solution.grid.dim, solution.grid.n_space)
    energies = []
    for k, tau in enumerate(solution.taus):
        p = solution.grad_v[k] + solution.xi
        a = flux.eval(mesh.quad_points, tau, p)
        energies.append(float(mesh.integrate(np.sum(a * p, axis=-1))))
    energy = float(np.mean(energies))

    pairing = 0.0
    if solution.regime == PARABOLIC and solution.n_slices > 1:
        v = solution.v
        jumps = v - np.roll(v, 1, axis=0)
        pairing = float(np.mean(np.sum(v * jumps, axis=1))) * mesh.node_mass * solution.grid.n_time
    return abs(energy + pairing - float(np.dot(solution.b_xi, solution.xi)))


def grid_refinement(model: FluxBase, mu: float, xi, grids: Sequence[CellGrid],
                    opts: Optional[SolverOptions] = None) -> np.ndarray:
    """|b_n(xi) - b_2n(xi)| for successive grids of the sequence."""
    values = [effective_flux(model, mu, xi, g, opts)[0] for g in grids]
    return np.array([float(np.linalg.norm(values[i + 1] - values[i])) for i in range(len(values) - 1)])
