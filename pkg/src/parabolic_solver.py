"""
Backward-Euler solver for u' - div a(x/eps, t/eps^mu, Du) = f and for the
homogenized problem u' - div b(Du) = f on (0,1)^N x (0,T) with homogeneous
Dirichlet data, with the discrete energy ledger of each run.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from cell_problems import ELLIPTIC, SolverOptions, regime_for
from discretization import MonotoneSystem, lagged_diffusivity
from errors import ConfigurationError, ConvergenceError, InvalidArgumentError
from flux_models import FluxBase, FourierSeries, time_gate
from multiscale_fields import DiscreteField, SpaceTimeGrid, dirichlet_mesh

logger = logging.getLogger(__name__)

LEDGER_COLUMNS = ['step', 't', 'dissipation', 'l2_half_delta', 'source_pairing', 'residual']
FIELD_KINDS = ('constant', 'sine', 'fourier', 'separable')


@dataclass(frozen=True)
class FieldSpec:
    """Source or initial datum given by a finite descriptor.

    constant   value
    sine       amplitude * prod_d sin(pi m_d x_d)
    fourier    truncated Fourier series in x
    separable  space(x) * time(t), time a Fourier series of period 1
    """
    kind: str
    value: float = 0.0
    amplitude: float = 1.0
    modes: tuple = (1,)
    series: Optional[FourierSeries] = None
    space: Optional['FieldSpec'] = None
    time: Optional[FourierSeries] = None

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ConfigurationError(f"unknown field type '{self.kind}'; expected one of {FIELD_KINDS}")
        if self.kind == 'fourier' and self.series is None:
            raise ConfigurationError("fourier field needs a series")
        if self.kind == 'separable' and (self.space is None or self.time is None):
            raise ConfigurationError("separable field needs 'space' and 'time' parts")

    def __call__(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == 'constant':
            return np.full(x.shape[:-1], float(self.value))
        if self.kind == 'sine':
            modes = np.broadcast_to(np.asarray(self.modes, dtype=float), x.shape[-1:])
            return self.amplitude * np.prod(np.sin(np.pi * modes * x), axis=-1)
        if self.kind == 'fourier':
            return self.series(x)
        return self.space(x, t) * float(self.time(np.array([float(t)])))

    @classmethod
    def from_dict(cls, data: Dict, dim: int) -> 'FieldSpec':
        kind = data.get('type')
        if kind == 'constant':
            return cls(kind=kind, value=float(data.get('value', 0.0)))
        if kind == 'sine':
            return cls(kind=kind, amplitude=float(data.get('amplitude', 1.0)),
                       modes=tuple(int(m) for m in data.get('modes', [1] * dim)))
        if kind == 'fourier':
            return cls(kind=kind, series=FourierSeries.from_dict(data, dim))
        if kind == 'separable':
            return cls(kind=kind, space=cls.from_dict(data['space'], dim),
                       time=FourierSeries.from_dict(data['time'], 1))
        raise ConfigurationError(f"unknown field type '{kind}'; expected one of {FIELD_KINDS}")

    def to_dict(self) -> Dict:
        if self.kind == 'constant':
            return {'type': 'constant', 'value': self.value}
        if self.kind == 'sine':
            return {'type': 'sine', 'amplitude': self.amplitude, 'modes': list(self.modes)}
        if self.kind == 'fourier':
            return {'type': 'fourier', **self.series.to_dict()}
        return {'type': 'separable', 'space': self.space.to_dict(), 'time': self.time.to_dict()}


def _boundary_samples(dim: int, n: int = 33) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n)
    if dim == 1:
        return np.array([[0.0], [1.0]])
    edges = [np.stack([s, np.full(n, c)], axis=1) for c in (0.0, 1.0)]
    edges += [np.stack([np.full(n, c), s], axis=1) for c in (0.0, 1.0)]
    return np.concatenate(edges)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Data of the parabolic problem on (0,1)^dim x (0, horizon).

    ``model`` drives fine-scale solves, ``effective`` the homogenized solve.
    """
    dim: int
    horizon: float
    source: FieldSpec
    initial: FieldSpec
    model: Optional[FluxBase] = None
    effective: Optional[object] = None

    def __post_init__(self):
        if not self.horizon > 0:
            raise InvalidArgumentError(f"horizon must be positive, got {self.horizon}")
        probe = np.random.default_rng(0).random((64, self.dim))
        for name, data in (('source', self.source), ('initial', self.initial)):
            if not np.all(np.isfinite(data(probe, 0.0))):
                raise ConfigurationError(f"{name} is not finite on the domain")
        boundary = self.initial(_boundary_samples(self.dim))
        if np.max(np.abs(boundary)) > 1e-10:
            raise ConfigurationError("initial datum must vanish on the boundary")


@dataclass(frozen=True, eq=False)
class SolveResult:
    """Trajectory of interior nodal values (row 0 is u0) and its end-of-step gradients."""
    grid: SpaceTimeGrid
    kind: str
    trajectory: np.ndarray
    gradient: DiscreteField
    ledger: pd.DataFrame
    step_residuals: np.ndarray
    p: float = 2.0
    wall_time_s: float = 0.0

    def nodal(self, step: int) -> np.ndarray:
        """Full nodal array at a step, boundary zeros included."""
        return self.grid.mesh().full_values(self.trajectory[step])

    def trajectory_frame(self) -> pd.DataFrame:
        """Long format (t, i0[, i1], u) over all steps and all nodes."""
        n_full = (self.grid.n_x + 1) ** self.grid.dim
        index = np.array(list(np.ndindex(*(self.grid.n_x + 1,) * self.grid.dim))).reshape(-1, self.grid.dim)
        times = np.concatenate([[0.0], self.grid.times])
        data = {'t': np.repeat(times, n_full)}
        for d in range(self.grid.dim):
            data[f'i{d}'] = np.tile(index[:, d], len(times))
        data['u'] = np.concatenate([self.nodal(k).ravel() for k in range(len(times))])
        return pd.DataFrame(data)


def _march(spec: ProblemSpec, grid: SpaceTimeGrid, kind: str, system_at: Callable[[float], MonotoneSystem],
           tol: float, max_iter: int, p: float) -> SolveResult:
    if spec.dim != grid.dim or abs(spec.horizon - grid.T) > 1e-12 * grid.T:
        raise InvalidArgumentError("problem and grid disagree on dimension or horizon")
    started = time.perf_counter()
    mesh = grid.mesh()
    nodes = mesh.node_coordinates()
    u = spec.initial(nodes, 0.0)
    trajectory = [u]
    gradients = []
    residuals = []
    rows = []
    cumulative = 0.0
    for k, t in enumerate(grid.times):
        system = system_at(t)
        load = mesh.node_mass * spec.source(nodes, t)
        try:
            result = system.solve(u, u, tol, max_iter, load=load)
        except ConvergenceError as e:
            logger.error(f"{kind} solve failed at step {k + 1}")
            raise ConvergenceError("implicit step did not converge", history=e.history, step=k + 1) from e
        u_new = result.v
        g = mesh.gradient(u_new)
        dissipation = grid.dt * float(mesh.integrate(np.sum(system.flux(g) * g, axis=-1)))
        l2_half_delta = 0.5 * (mesh.l2_norm(u_new) ** 2 - mesh.l2_norm(u) ** 2)
        source_pairing = grid.dt * float(np.dot(load, u_new))
        cumulative += dissipation + l2_half_delta - source_pairing
        rows.append((k + 1, float(t), dissipation, l2_half_delta, source_pairing, abs(cumulative)))
        gradients.append(g)
        residuals.append(result.residual_norm)
        trajectory.append(u_new)
        u = u_new

    elapsed = time.perf_counter() - started
    logger.info(f"{kind} solve finished: {grid.n_t} steps on n_x={grid.n_x} in {elapsed:.2f}s")
    return SolveResult(grid=grid, kind=kind, trajectory=np.array(trajectory),
                       gradient=DiscreteField(grid, np.array(gradients)),
                       ledger=pd.DataFrame(rows, columns=LEDGER_COLUMNS),
                       step_residuals=np.array(residuals), p=p, wall_time_s=elapsed)


def solve_fine(spec: ProblemSpec, grid: SpaceTimeGrid, opts: Optional[SolverOptions] = None) -> SolveResult:
    """Backward Euler for the oscillating problem; a is sampled at end-of-step times.

    Raises:
        ConfigurationError: No flux model, or 0 < mu < 2 without a valid time modulus
        ConvergenceError: A step failed; carries the step index and residual history
    """
    opts = opts or SolverOptions()
    model = spec.model
    if model is None:
        raise ConfigurationError("fine solve needs a flux model")
    if regime_for(grid.mu) == ELLIPTIC:
        time_gate(model)
    mesh = grid.mesh()
    y = np.mod(mesh.quad_points / grid.epsilon, 1.0)
    shift = 1.0 / grid.dt
    systems: Dict[float, MonotoneSystem] = {}
    logger.info(f"Fine solve started: eps={grid.epsilon:g}, mu={grid.mu:g}, n_x={grid.n_x}, n_t={grid.n_t}")

    def system_at(t: float) -> MonotoneSystem:
        tau = float(np.mod(t / grid.epsilon ** grid.mu, 1.0)) if model.time_dependent else 0.0
        key = round(tau, 9) % 1.0
        if key not in systems:
            if len(systems) > 64:
                systems.clear()
            coefficient = model.coefficient(y, tau)
            systems[key] = MonotoneSystem(
                mesh,
                flux=lambda g: model.eval(y, tau, g),
                flux_jvp=lambda g, dg: model.eval_jvp(y, tau, g, dg),
                diffusivity=lambda g: lagged_diffusivity(coefficient, g, model.p),
                shift=shift,
                linear_coefficient=coefficient if model.is_linear else None)
        return systems[key]

    return _march(spec, grid, 'fine', system_at, opts.tolerance(model.p), opts.max_iter, model.p)


def solve_homogenized(spec: ProblemSpec, grid: SpaceTimeGrid, opts: Optional[SolverOptions] = None) -> SolveResult:
    """Backward Euler for u' - div b(Du) = f with an effective evaluator.

    Raises:
        ConfigurationError: No effective evaluator
        RangeError: A gradient left the tabulated box; tabulate a larger box
    """
    opts = opts or SolverOptions()
    effective = spec.effective
    if effective is None:
        raise ConfigurationError("homogenized solve needs an effective flux evaluator")
    scale = effective.stiffness_scale
    logger.info(f"Homogenized solve started: n_x={grid.n_x}, n_t={grid.n_t}")
    system = MonotoneSystem(
        grid.mesh(),
        flux=effective.evaluate,
        flux_jvp=effective.jvp,
        diffusivity=lambda g: lagged_diffusivity(scale, g, effective.p),
        shift=1.0 / grid.dt,
        scale=scale)
    return _march(spec, grid, 'homogenized', lambda t: system, opts.tolerance(effective.p),
                  opts.max_iter, effective.p)


def energy_balance(result: SolveResult) -> float:
    """|sum (a(Du), Du) dt + 1/2 |u(T)|^2 - 1/2 |u(0)|^2 - sum <f, u> dt|."""
    if result.ledger.empty:
        return 0.0
    return float(result.ledger['residual'].iloc[-1])


def restrict(result: SolveResult, grid: SpaceTimeGrid) -> SolveResult:
    """Sample a trajectory onto a nested coarser grid and recompute Du there.

    The energy ledger and step residuals of the source solve are kept.

    Raises:
        InvalidArgumentError: The grids are not nested
    """
    source = result.grid
    if (grid.dim != source.dim or abs(grid.T - source.T) > 1e-12 * grid.T
            or source.n_x % grid.n_x or source.n_t % grid.n_t):
        raise InvalidArgumentError(f"grid {grid.to_dict()} is not nested in {source.to_dict()}")
    sx = source.n_x // grid.n_x
    st = source.n_t // grid.n_t
    mesh = grid.mesh()
    stride = (slice(None, None, sx),) * grid.dim
    trajectory = np.array([mesh.from_full(result.nodal(k)[stride]) for k in range(0, source.n_t + 1, st)])
    gradients = np.array([mesh.gradient(u) for u in trajectory[1:]])
    return SolveResult(grid=grid, kind=result.kind, trajectory=trajectory,
                       gradient=DiscreteField(grid, gradients), ledger=result.ledger,
                       step_residuals=result.step_residuals, p=result.p, wall_time_s=result.wall_time_s)


def time_translation_probe(result: SolveResult, shifts: Sequence[float]) -> List[float]:
    """integral over t of ||Du(t + s) - Du(t)||_p^p for each shift s (rounded to whole steps)."""
    grid = result.grid
    mesh = grid.mesh()
    values = result.gradient.values
    out = []
    for s in shifts:
        m = max(1, int(round(s / grid.dt)))
        if m >= grid.n_t:
            raise InvalidArgumentError(f"shift {s} is not shorter than the horizon")
        diff = np.linalg.norm(values[m:] - values[:-m], axis=-1) ** result.p
        out.append(float(grid.dt * np.sum(diff @ mesh.weights)))
    return out


def gradient_integrability_probe(result: SolveResult, exponents: Sequence[float] = (0.1, 0.5),
                                 margin: float = 0.25) -> Dict[str, float]:
    """||Du||_{L^(p+eta)} on an interior sub-box and sub-interval over ||Du||_{L^p} on the whole.

    The sub-box is [margin, 1 - margin]^N and the sub-interval [margin T, T].
    """
    if not 0 <= margin < 0.5:
        raise InvalidArgumentError(f"margin must lie in [0, 0.5), got {margin}")
    grid = result.grid
    mesh = grid.mesh()
    inside = np.all((mesh.quad_points >= margin) & (mesh.quad_points <= 1.0 - margin), axis=-1)
    later = grid.times >= margin * grid.T
    magnitude = np.linalg.norm(result.gradient.values, axis=-1)
    whole = result.gradient.lp_norm(result.p)
    probe = {}
    for eta in exponents:
        q = result.p + eta
        local = (magnitude[later][:, inside] ** q) @ mesh.weights[inside]
        value = float(grid.dt * np.sum(local)) ** (1.0 / q)
        probe[str(eta)] = value / whole if whole > 0 else 0.0
    return probe
