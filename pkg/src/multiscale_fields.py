"""
Space-time fields on the fine grid of Omega x (0, T): the averaging operator
over eps-cells, the oscillating corrector built from cached cell solutions,
the remainder of the corrector decomposition and its diagnostics.
"""

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from cell_problems import CellGrid, CellSolution, SolverOptions, cell_mesh, solve_cell
from discretization import TensorMesh
from errors import InvalidArgumentError, ResourceError, UnavailableError
from flux_models import FluxBase, StructureConstants

logger = logging.getLogger(__name__)

PROBE_EXPONENTS = (0.1, 0.5)
DIAGNOSTIC_KEYS = ('lp_bound_ratio', 'xi_continuity_C', 'uniform_bound', 'higher_integrability_probe')


@lru_cache(maxsize=16)
def dirichlet_mesh(dim: int, n: int) -> TensorMesh:
    return TensorMesh(dim, n, periodic=False)


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Fine grid of (0,1)^dim x (0, T) resolving eps-cells in space and eps^mu-cells in time.

    ``n_x`` counts elements per axis and must be a multiple of 1/epsilon.
    Time steps are grouped into cells of ``steps_per_cell`` steps; trailing
    steps that do not fill a whole cell form the boundary layer in time.
    """
    dim: int
    T: float
    n_x: int
    n_t: int
    epsilon: float
    mu: float

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidArgumentError(f"dimension must be 1 or 2, got {self.dim}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise InvalidArgumentError(f"horizon T must be positive, got {self.T}")
        if self.n_x < 2 or self.n_t < 1:
            raise InvalidArgumentError("grid needs n_x >= 2 and n_t >= 1")
        if not (0 < self.epsilon <= 1):
            raise InvalidArgumentError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not self.mu > 0:
            raise InvalidArgumentError(f"mu must be positive, got {self.mu}")
        inverse = 1.0 / self.epsilon
        if abs(inverse - round(inverse)) > 1e-9 * inverse:
            raise InvalidArgumentError(f"1/epsilon must be an integer, got {inverse}")
        if self.n_x % self.cells_per_axis:
            raise InvalidArgumentError(f"n_x={self.n_x} is not a multiple of 1/epsilon={self.cells_per_axis}")
        if self.steps_per_cell < 1:
            raise InvalidArgumentError(f"n_t={self.n_t} does not resolve eps^mu={self.epsilon ** self.mu:g}")

    @property
    def cells_per_axis(self) -> int:
        return int(round(1.0 / self.epsilon))

    @property
    def elements_per_cell(self) -> int:
        return self.n_x // self.cells_per_axis

    @property
    def steps_per_cell(self) -> int:
        return int(round(self.epsilon ** self.mu * self.n_t / self.T))

    @property
    def n_time_cells(self) -> int:
        return self.n_t // self.steps_per_cell

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def times(self) -> np.ndarray:
        """End-of-step times t_1, ..., t_n_t."""
        return self.dt * np.arange(1, self.n_t + 1)

    def mesh(self) -> TensorMesh:
        return dirichlet_mesh(self.dim, self.n_x)

    def with_epsilon(self, epsilon: float) -> 'SpaceTimeGrid':
        return replace(self, epsilon=epsilon)

    def same_discretization(self, other: 'SpaceTimeGrid') -> bool:
        return (self.dim, self.T, self.n_x, self.n_t) == (other.dim, other.T, other.n_x, other.n_t)

    def to_dict(self) -> Dict:
        return {'dim': self.dim, 'T': self.T, 'n_x': self.n_x, 'n_t': self.n_t,
                'epsilon': self.epsilon, 'mu': self.mu}


@dataclass(frozen=True, eq=False)
class DiscreteField:
    """Vector samples at the space-time quadrature points of a grid.

    ``values`` has shape (n_t, n_quad, components); slice k belongs to the
    end-of-step time t_(k+1).
    """
    grid: SpaceTimeGrid
    values: np.ndarray

    def __post_init__(self):
        expected = (self.grid.n_t, self.grid.mesh().n_quad)
        if self.values.ndim != 3 or self.values.shape[:2] != expected:
            raise InvalidArgumentError(f"field shape {self.values.shape} does not match grid {expected}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("field contains non-finite values")

    @property
    def components(self) -> int:
        return self.values.shape[-1]

    def power_integral(self, p: float) -> float:
        """sum_k dt sum_q w |phi|^p."""
        mesh = self.grid.mesh()
        magnitude = np.linalg.norm(self.values, axis=-1) ** p
        return float(self.grid.dt * np.sum(magnitude @ mesh.weights))

    def lp_norm(self, p: float) -> float:
        return self.power_integral(p) ** (1.0 / p)

    def __sub__(self, other: 'DiscreteField') -> 'DiscreteField':
        _check_same(self.grid, other.grid)
        return DiscreteField(self.grid, self.values - other.values)

    def to_frame(self) -> pd.DataFrame:
        """One row per (time slice, quadrature point): element indices, local point, t index, components."""
        mesh = self.grid.mesh()
        elements = np.array(list(np.ndindex(*(self.grid.n_x,) * self.grid.dim))).reshape(-1, self.grid.dim)
        element_of_q = np.repeat(elements, mesh.n_local, axis=0)
        local = np.tile(np.arange(mesh.n_local), len(elements))
        n_t = self.grid.n_t
        data = {f'x{d}': np.tile(element_of_q[:, d], n_t) for d in range(self.grid.dim)}
        data['q'] = np.tile(local, n_t)
        data['t'] = np.repeat(np.arange(n_t), mesh.n_quad)
        flat = self.values.reshape(-1, self.components)
        data.update({f'c{c}': flat[:, c] for c in range(self.components)})
        return pd.DataFrame(data)


def fields_frame(fields: Dict[str, DiscreteField]) -> pd.DataFrame:
    """Several fields of one grid side by side; component columns are renamed ``<name>_c<k>``.

    Raises:
        InvalidArgumentError: No fields, or fields on different grids
    """
    if not fields:
        raise InvalidArgumentError("no fields to export")
    frames = [f.to_frame() for f in fields.values()]
    grids = [f.grid for f in fields.values()]
    for grid in grids[1:]:
        _check_same(grids[0], grid)
    index = [c for c in frames[0].columns if not c.startswith('c')]
    out = frames[0][index].copy()
    for name, frame in zip(fields, frames):
        for column in (c for c in frame.columns if c not in index):
            out[f'{name}_{column}'] = frame[column].to_numpy()
    return out


def _check_same(grid: SpaceTimeGrid, other: SpaceTimeGrid):
    if not grid.same_discretization(other):
        raise InvalidArgumentError(f"grid mismatch: {grid.to_dict()} vs {other.to_dict()}")


def _cell_blocks(values: np.ndarray, grid: SpaceTimeGrid):
    """Interior steps reshaped so that each eps-cell is a block, plus the block axes."""
    mesh = grid.mesh()
    s = grid.steps_per_cell
    interior = values[:grid.n_time_cells * s]
    shape = (grid.n_time_cells, s)
    for _ in range(grid.dim):
        shape += (grid.cells_per_axis, grid.elements_per_cell)
    shape += (mesh.n_local, values.shape[-1])
    axes = (1,) + tuple(3 + 2 * d for d in range(grid.dim)) + (2 + 2 * grid.dim,)
    return interior.reshape(shape), axes


def cell_means(phi: DiscreteField, grid: Optional[SpaceTimeGrid] = None) -> np.ndarray:
    """Discrete means over each interior eps-cell, shape (n_time_cells, cells, ..., components).

    Cells holding a single repeated value return that value exactly.
    """
    grid = grid or phi.grid
    _check_same(phi.grid, grid)
    blocks, axes = _cell_blocks(phi.values, grid)
    mean = blocks.mean(axis=axes, keepdims=True)
    lo = blocks.min(axis=axes, keepdims=True)
    hi = blocks.max(axis=axes, keepdims=True)
    mean = np.where(lo == hi, hi, mean)
    return np.squeeze(mean, axis=axes)


def mesh_average(phi: DiscreteField, grid: Optional[SpaceTimeGrid] = None) -> DiscreteField:
    """Piecewise-constant projection onto eps-cell means; boundary steps carry 0.

    Raises:
        InvalidArgumentError: phi does not live on the grid
    """
    grid = grid or phi.grid
    _check_same(phi.grid, grid)
    blocks, axes = _cell_blocks(phi.values, grid)
    means = np.expand_dims(cell_means(phi, grid), axis=axes)
    out = np.zeros_like(phi.values)
    out[:grid.n_time_cells * grid.steps_per_cell] = np.broadcast_to(means, blocks.shape).reshape(
        (-1,) + phi.values.shape[1:])
    return DiscreteField(grid, out)


def identity_approximation_check(phi: DiscreteField, epsilons: Sequence[float], p: float = 2.0) -> List[float]:
    """||M_eps phi - phi||_p for a nested sequence of decreasing epsilons.

    Raises:
        InvalidArgumentError: The epsilons are not strictly decreasing with
            each cell count dividing the next
    """
    if not epsilons:
        raise InvalidArgumentError("epsilon list is empty")
    counts = [int(round(1.0 / eps)) for eps in epsilons]
    for coarse, fine in zip(counts, counts[1:]):
        if fine <= coarse or fine % coarse:
            raise InvalidArgumentError(f"epsilons are not nested: {list(epsilons)}")
    errors = []
    for eps in epsilons:
        grid = phi.grid.with_epsilon(eps)
        averaged = mesh_average(DiscreteField(grid, phi.values), grid)
        errors.append(DiscreteField(grid, averaged.values - phi.values).lp_norm(p))
    return errors


class CellSolutionCache:
    """Thread-safe insert-or-get store of cell solutions keyed by quantized xi.

    A key is the integer tuple round(xi / quantization); the solve runs at
    the lattice representative key * quantization. Callers add the corrector
    Dv of that representative to their own xi, so the lattice only picks Dv.
    Concurrent solves of the same key are allowed and produce identical values.

    Args:
        model: Flux model of the fine problem
        mu: Time-scale exponent selecting the cell regime
        grid: Cell discretization
        opts: Solver options
        quantization: Lattice spacing; may be fixed later by the first assembly
        budget: Maximum number of distinct keys
        solve: Solve on a miss; otherwise misses raise UnavailableError
    """

    def __init__(self, model: FluxBase, mu: float, grid: CellGrid, opts: Optional[SolverOptions] = None,
                 quantization: Optional[float] = None, budget: int = 10000, solve: bool = True):
        self.model = model
        self.mu = mu
        self.grid = grid
        self.opts = opts or SolverOptions()
        self.quantization = quantization
        self.budget = budget
        self.solve = solve
        self._entries: Dict[Tuple[int, ...], CellSolution] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def fix_quantization(self, quantization: float):
        if not quantization > 0:
            raise InvalidArgumentError(f"quantization must be positive, got {quantization}")
        with self._lock:
            if self.quantization is None:
                self.quantization = float(quantization)
            elif self.quantization != quantization:
                raise InvalidArgumentError(
                    f"cache quantized at {self.quantization}, requested {quantization}")

    def key(self, xi) -> Tuple[int, ...]:
        if self.quantization is None:
            raise InvalidArgumentError("cache quantization is not set")
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        return tuple(int(k) for k in np.round(xi / self.quantization))

    def representative(self, key: Tuple[int, ...]) -> np.ndarray:
        return np.array(key, dtype=float) * self.quantization

    def solutions(self) -> List[CellSolution]:
        with self._lock:
            return [self._entries[k] for k in sorted(self._entries)]

    def get_key(self, key: Tuple[int, ...]) -> CellSolution:
        with self._lock:
            found = self._entries.get(key)
            if found is None and len(self._entries) >= self.budget:
                raise ResourceError("cell cache budget exhausted", len(self._entries) + 1)
        if found is not None:
            return found
        if not self.solve:
            raise UnavailableError(f"no cached cell solution for xi={self.representative(key).tolist()}")
        solution = solve_cell(self.model, self.mu, self.representative(key), self.grid, self.opts)
        with self._lock:
            return self._entries.setdefault(key, solution)

    def get(self, xi) -> CellSolution:
        return self.get_key(self.key(xi))

    def prefill(self, keys: Iterable[Tuple[int, ...]], threads: int = 1) -> None:
        """Solve every missing key, enforcing the budget before any solve starts.

        Raises:
            ResourceError: The distinct keys would exceed the budget
        """
        keys = sorted(set(keys))
        with self._lock:
            missing = [k for k in keys if k not in self._entries]
            total = len(self._entries) + len(missing)
        if total > self.budget:
            raise ResourceError(f"corrector needs more than the budget of {self.budget} cell solves", total)
        if missing:
            logger.info(f"Solving {len(missing)} cell problems ({total} cached after this)")
        with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
            list(executor.map(self.get_key, missing))


def _fine_cell_coordinates(grid: SpaceTimeGrid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cell variables y = x/eps mod 1, tau_k = t_k/eps^mu mod 1 and the spatial cell id of each point."""
    mesh = grid.mesh()
    y = np.mod(mesh.quad_points / grid.epsilon, 1.0)
    tau = np.mod(grid.times / grid.epsilon ** grid.mu, 1.0)
    cell_index = np.floor(np.round(mesh.quad_points * grid.cells_per_axis, 9)).astype(int)
    cell_index = np.clip(cell_index, 0, grid.cells_per_axis - 1)
    cell_id = np.ravel_multi_index(tuple(cell_index.T), (grid.cells_per_axis,) * grid.dim)
    return y, tau, cell_id


def corrector_eval(cache: CellSolutionCache, x, t, xi, grid: SpaceTimeGrid) -> np.ndarray:
    """p_eps(x, t, xi) = xi + Dv_Q(xi)(x/eps mod 1, t/eps^mu mod 1), Dv taken at the quantized xi.

    Raises:
        UnavailableError: Cache miss with solving disabled
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    solution = cache.get(xi)
    x = np.asarray(x, dtype=float).reshape(-1, grid.dim)
    tau = np.mod(np.asarray(t, dtype=float) / grid.epsilon ** grid.mu, 1.0)
    return xi + solution.gradient_at(np.mod(x / grid.epsilon, 1.0), tau)


def default_quantization(means: np.ndarray) -> float:
    return 0.05 * (1.0 + float(np.max(np.abs(means))) if means.size else 1.0)


def assemble_corrector_field(u_hom, cache: CellSolutionCache, grid: SpaceTimeGrid,
                             quantization: Optional[float] = None, threads: int = 1) -> DiscreteField:
    """Oscillating field p_eps(., ., M_eps Du) on the fine grid.

    Each interior eps-cell adds to its mean gradient the Dv of the cell
    solution at the quantized mean; boundary steps use xi = 0.

    Raises:
        ResourceError: More distinct quantized values than the cache budget
    """
    du = u_hom.gradient
    _check_same(du.grid, grid)
    du = DiscreteField(grid, du.values)
    means = cell_means(du, grid)
    quantization = quantization or cache.quantization or default_quantization(means)
    cache.fix_quantization(quantization)

    n_cells = grid.cells_per_axis ** grid.dim
    flat_means = means.reshape(grid.n_time_cells, n_cells, grid.dim)
    cell_keys = np.round(flat_means / quantization).astype(int)
    has_boundary = grid.n_time_cells * grid.steps_per_cell < grid.n_t
    zero = (0,) * grid.dim
    distinct = sorted({tuple(k) for k in cell_keys.reshape(-1, grid.dim)} | ({zero} if has_boundary else set()))
    cache.prefill(distinct, threads=threads)
    key_id = {k: i for i, k in enumerate(distinct)}
    ids = np.array([key_id[tuple(k)] for k in cell_keys.reshape(-1, grid.dim)],
                   dtype=int).reshape(grid.n_time_cells, n_cells)

    y, tau, cell_id = _fine_cell_coordinates(grid)
    solutions = [cache.get_key(k) for k in distinct]
    reference = max(solutions, key=lambda s: s.n_slices)
    n_slices = reference.n_slices
    mesh = grid.mesh()
    # Dv of every key at every fine point and every stored slice
    table = np.zeros((len(distinct), n_slices, mesh.n_quad, grid.dim))
    for i, solution in enumerate(solutions):
        mesh_cell = cell_mesh(solution.grid.dim, solution.grid.n_space)
        for k in range(solution.n_slices):
            table[i, k] = mesh_cell.gradient_at(solution.v[k], y)
        table[i, solution.n_slices:] = table[i, :1]

    values = np.zeros((grid.n_t, mesh.n_quad, grid.dim))
    points = np.arange(mesh.n_quad)
    for step in range(grid.n_t):
        cell = step // grid.steps_per_cell
        if cell < grid.n_time_cells:
            key_ids = ids[cell, cell_id]
            xi = flat_means[cell, cell_id]
        else:
            key_ids = np.full(mesh.n_quad, key_id[zero])
            xi = 0.0
        slice_index = reference.slice_index(tau[step]) if n_slices > 1 else 0
        values[step] = xi + table[key_ids, slice_index, points]
    return DiscreteField(grid, values)


def remainder(u_fine, corrector_field: DiscreteField, p: Optional[float] = None) -> Tuple[DiscreteField, float]:
    """r_eps = Du_eps - p_eps(., ., M_eps Du) and its L^p(0,T;L^p) norm.

    Raises:
        InvalidArgumentError: The fields live on different grids
    """
    _check_same(u_fine.gradient.grid, corrector_field.grid)
    p = p or u_fine.p
    r = DiscreteField(corrector_field.grid, u_fine.gradient.values - corrector_field.values)
    return r, r.lp_norm(p)


@dataclass
class CorrectorDiagnostics:
    """Empirical constants of the corrector estimates."""
    lp_bound_ratio: float
    xi_continuity_C: float
    uniform_bound: float
    higher_integrability_probe: Dict[str, float]
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'lp_bound_ratio': self.lp_bound_ratio,
            'xi_continuity_C': self.xi_continuity_C,
            'uniform_bound': self.uniform_bound,
            'higher_integrability_probe': dict(self.higher_integrability_probe),
        }


def _cell_power_mean(solution: CellSolution, exponent: float, other: Optional[CellSolution] = None) -> float:
    """Mean over Y x T0 of |p(xi)|^exponent, or of |p(xi1) - p(xi2)|^exponent."""
    mesh = cell_mesh(solution.grid.dim, solution.grid.n_space)
    p = solution.grad_v + solution.xi
    if other is not None:
        q = other.grad_v + other.xi
        n = max(len(p), len(q))
        p = np.broadcast_to(p, (n,) + p.shape[1:]) if len(p) == 1 else p
        q = np.broadcast_to(q, (n,) + q.shape[1:]) if len(q) == 1 else q
        p = p - q
    magnitude = np.linalg.norm(p, axis=-1) ** exponent
    return float(np.mean(magnitude @ mesh.weights))


def corrector_diagnostics(cache: CellSolutionCache, corrector_field: Optional[DiscreteField],
                          constants: StructureConstants, ceilings: Optional[Dict[str, float]] = None,
                          max_pairs: int = 2000, seed: int = 0) -> CorrectorDiagnostics:
    """Ratios of the cell estimates over every cached xi and the uniform bound of the corrector field.

    Never raises for large values; ratios above ``ceilings`` are listed in ``flags``.
    """
    p, alpha = constants.p, constants.alpha
    solutions = cache.solutions()
    lp_ratio = max((_cell_power_mean(s, p) / (1.0 + float(np.linalg.norm(s.xi)) ** p) for s in solutions),
                   default=0.0)

    probe = {}
    for eta in PROBE_EXPONENTS:
        q = p + eta
        probe[str(eta)] = max((_cell_power_mean(s, q) / (1.0 + float(np.linalg.norm(s.xi)) ** q)
                               for s in solutions), default=0.0)

    continuity = 0.0
    if len(solutions) > 1:
        rng = np.random.default_rng(seed)
        pairs = [(i, j) for i in range(len(solutions)) for j in range(i + 1, len(solutions))]
        if len(pairs) > max_pairs:
            pairs = [pairs[i] for i in sorted(rng.choice(len(pairs), max_pairs, replace=False))]
        for i, j in pairs:
            a, b = solutions[i], solutions[j]
            n1, n2 = np.linalg.norm(a.xi), np.linalg.norm(b.xi)
            dist = np.linalg.norm(a.xi - b.xi)
            bound = (1.0 + n1 ** p + n2 ** p) ** ((p - 1.0 - alpha) / (p - alpha)) * dist ** (p / (p - alpha))
            continuity = max(continuity, _cell_power_mean(a, p, b) / bound)

    uniform = corrector_field.power_integral(p) if corrector_field is not None else 0.0
    diagnostics = CorrectorDiagnostics(lp_bound_ratio=lp_ratio, xi_continuity_C=continuity,
                                       uniform_bound=uniform, higher_integrability_probe=probe)
    for name, ceiling in (ceilings or {}).items():
        value = getattr(diagnostics, name, None)
        if isinstance(value, float) and value > ceiling:
            diagnostics.flags.append(name)
            logger.warning(f"Corrector diagnostic {name}={value:.4g} exceeds ceiling {ceiling:g}")
    return diagnostics


def fine_flux_field(u_fine, model: FluxBase) -> DiscreteField:
    """a(x/eps, t/eps^mu, Du_eps) at the space-time quadrature points."""
    grid = u_fine.gradient.grid
    y, tau, _ = _fine_cell_coordinates(grid)
    values = np.stack([model.eval(y, tau[k], u_fine.gradient.values[k]) for k in range(grid.n_t)])
    return DiscreteField(grid, values)


def flux_weak_gap(u_fine, u_hom_on_grid, model: FluxBase, table, grid: SpaceTimeGrid) -> float:
    """||M_eps a_eps(Du_eps) - M_eps b(Du)|| in L^p' over the fine grid."""
    _check_same(u_fine.gradient.grid, grid)
    _check_same(u_hom_on_grid.gradient.grid, grid)
    fine = DiscreteField(grid, fine_flux_field(u_fine, model).values)
    homogenized = DiscreteField(grid, table.evaluate(u_hom_on_grid.gradient.values))
    gap = mesh_average(fine, grid) - mesh_average(homogenized, grid)
    p = model.p
    return gap.lp_norm(p / (p - 1.0))
