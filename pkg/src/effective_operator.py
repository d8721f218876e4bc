"""
Effective flux b over a xi-lattice: tabulation, multilinear interpolation,
persistence with a content-addressed cache, direct evaluation by per-xi cell
solves, and numerical checks of the monotonicity and Hoelder estimates of b.
"""

import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

from cell_problems import CellGrid, SolverOptions, effective_flux, regime_for
from errors import ConvergenceError, InvalidArgumentError, RangeError
from flux_models import FluxBase, StructureConstants

logger = logging.getLogger(__name__)

Box = Union[Tuple[float, float], Sequence[Tuple[float, float]]]


class EffectiveEvaluator:
    """Interface of the homogenized flux used by the parabolic solver."""

    dim: int
    p: float

    def evaluate(self, xi: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jvp(self, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def stiffness_scale(self) -> float:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class FluxTable(EffectiveEvaluator):
    """b(xi) on a uniform axis-aligned lattice.

    ``values`` has shape (n_0, ..., n_{dim-1}, dim); node i along axis d sits
    at ``axes[d][i]``.
    """
    mu: float
    regime: str
    axes: Tuple[np.ndarray, ...]
    values: np.ndarray
    p: float = 2.0
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        if any(len(axis) < 2 for axis in self.axes):
            raise InvalidArgumentError("flux table needs at least 2 nodes per axis")
        interpolator = RegularGridInterpolator(self.axes, self.values, method='linear', bounds_error=True)
        object.__setattr__(self, '_interpolator', interpolator)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def lower(self) -> np.ndarray:
        return np.array([axis[0] for axis in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([axis[-1] for axis in self.axes])

    @property
    def spacing(self) -> np.ndarray:
        return np.array([axis[1] - axis[0] for axis in self.axes])

    def nodes(self) -> np.ndarray:
        """Lattice nodes in C order, shape (n_nodes, dim)."""
        return np.array(list(product(*self.axes))).reshape(-1, self.dim)

    def node_values(self) -> np.ndarray:
        return self.values.reshape(-1, self.dim)

    def contains(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float).reshape(-1, self.dim)
        return np.all((xi >= self.lower) & (xi <= self.upper), axis=-1)

    def evaluate(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        try:
            return self._interpolator(xi.reshape(-1, self.dim)).reshape(xi.shape)
        except ValueError as e:
            reach = float(np.max(np.abs(xi))) if xi.size else 0.0
            raise RangeError(f"xi outside the tabulated box [{self.lower.tolist()}, {self.upper.tolist()}] "
                             f"(max |xi_i| = {reach:.3g}); tabulate a larger box") from e

    def jvp(self, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        """One-sided finite difference of the interpolant, stepping into the box."""
        xi = np.asarray(xi, dtype=float).reshape(-1, self.dim)
        eta = np.asarray(eta, dtype=float).reshape(-1, self.dim)
        size = np.linalg.norm(eta, axis=-1)
        t = 1e-4 * float(np.min(self.spacing)) / np.where(size > 0, size, 1.0)
        step = t[:, None] * eta
        sign = np.where(self.contains(xi + step), 1.0, -1.0)
        moved = self.evaluate(xi + sign[:, None] * step)
        return (moved - self.evaluate(xi)) / (sign * t)[:, None]

    @property
    def stiffness_scale(self) -> float:
        """Mean secant stiffness (b(xi), xi) / |xi|^p over nonzero nodes."""
        nodes = self.nodes()
        norm = np.linalg.norm(nodes, axis=-1)
        mask = norm > 0
        ratio = np.sum(self.node_values()[mask] * nodes[mask], axis=-1) / norm[mask] ** self.p
        return float(np.mean(ratio))

    def metadata(self) -> Dict:
        return {
            'mu': self.mu,
            'regime': self.regime,
            'p': self.p,
            'lower': self.lower.tolist(),
            'upper': self.upper.tolist(),
            'counts': [len(axis) for axis in self.axes],
            'provenance': self.provenance,
        }

    def to_frame(self) -> pd.DataFrame:
        nodes = self.nodes()
        values = self.node_values()
        data = {f'xi{d}': nodes[:, d] for d in range(self.dim)}
        data.update({f'b{d}': values[:, d] for d in range(self.dim)})
        return pd.DataFrame(data)


def lattice_axes(box: Box, spacing: float, dim: int) -> Tuple[np.ndarray, ...]:
    """Uniform axes covering the box with at least two nodes each."""
    if not (np.isfinite(spacing) and spacing > 0):
        raise InvalidArgumentError(f"spacing must be positive, got {spacing}")
    bounds = np.asarray(box, dtype=float)
    if bounds.shape == (2,):
        bounds = np.tile(bounds, (dim, 1))
    if bounds.shape != (dim, 2):
        raise InvalidArgumentError(f"box must be (lo, hi) or {dim} such pairs")
    axes = []
    for lo, hi in bounds:
        if not hi > lo:
            raise InvalidArgumentError(f"degenerate box axis [{lo}, {hi}]")
        count = max(2, int(round((hi - lo) / spacing)) + 1)
        axes.append(np.linspace(lo, hi, count))
    return tuple(axes)


def tabulate_b(model: FluxBase, mu: float, box: Box, spacing: float, grid: CellGrid,
               opts: Optional[SolverOptions] = None, threads: int = 1) -> FluxTable:
    """Solve one cell problem per lattice node and collect b.

    Nodes are solved concurrently when ``threads`` > 1; results are stored
    in lattice order.

    Raises:
        ConvergenceError: A node failed; the message names the node
    """
    opts = opts or SolverOptions()
    regime = regime_for(mu)
    axes = lattice_axes(box, spacing, model.dim)
    nodes = list(product(*axes))
    logger.info(f"Tabulating b on {len(nodes)} nodes ({regime}, {threads} thread(s))")

    def solve(node):
        try:
            return effective_flux(model, mu, np.array(node), grid, opts)[0]
        except ConvergenceError as e:
            raise ConvergenceError(f"cell solve failed at xi={list(node)}: {e}", history=e.history) from e

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        values = list(executor.map(solve, nodes))

    shape = tuple(len(axis) for axis in axes) + (model.dim,)
    provenance = {'grid': grid.to_dict(), 'options': opts.to_dict(), 'spacing': float(spacing)}
    if hasattr(model, 'fingerprint'):
        provenance['model'] = model.fingerprint()
    return FluxTable(mu=float(mu), regime=regime, axes=axes, values=np.array(values).reshape(shape),
                     p=model.p, provenance=provenance)


def eval_b(table: FluxTable, xi) -> np.ndarray:
    """Multilinear interpolation of b at a single xi.

    Raises:
        RangeError: xi lies outside the tabulated box
        InvalidArgumentError: xi is not finite or has the wrong length
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (table.dim,) or not np.all(np.isfinite(xi)):
        raise InvalidArgumentError(f"xi must be a finite vector of length {table.dim}")
    return table.evaluate(xi[None, :])[0]


@dataclass
class EstimateReport:
    """Sampled monotonicity and Hoelder estimates for a tabulated b."""
    n_pairs: int
    theta: float
    min_monotonicity_ratio: float
    holder_constant: float
    gamma: float

    @property
    def passed(self) -> bool:
        return self.n_pairs == 0 or self.min_monotonicity_ratio >= self.theta

    def to_dict(self) -> Dict:
        return {'n_pairs': self.n_pairs, 'theta': self.theta,
                'min_monotonicity_ratio': self.min_monotonicity_ratio,
                'holder_constant': self.holder_constant, 'gamma': self.gamma,
                'passed': self.passed}


def verify_b_estimates(table: FluxTable, constants: StructureConstants, n_pairs: int,
                       seed: int, theta: float = 0.9) -> EstimateReport:
    """Check (b1 - b2, xi1 - xi2) >= theta c2 |xi1 - xi2|^p over random node pairs.

    Also reports the smallest C with
    |b1 - b2| <= C (1 + |xi1| + |xi2|)^(p-1-gamma) |xi1 - xi2|^gamma.
    Pairs of identical nodes are skipped.
    """
    nodes = table.nodes()
    values = table.node_values()
    rng = np.random.default_rng(seed)
    i = rng.integers(0, len(nodes), n_pairs)
    j = rng.integers(0, len(nodes), n_pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    if len(i) == 0:
        return EstimateReport(0, theta, float('inf'), 0.0, constants.gamma)

    p, gamma = constants.p, constants.gamma
    dxi = nodes[i] - nodes[j]
    db = values[i] - values[j]
    dist = np.linalg.norm(dxi, axis=-1)
    ratio = np.sum(db * dxi, axis=-1) / (constants.c2 * dist ** p)
    growth = (1.0 + np.linalg.norm(nodes[i], axis=-1) + np.linalg.norm(nodes[j], axis=-1)) ** (p - 1.0 - gamma)
    holder = np.linalg.norm(db, axis=-1) / (growth * dist ** gamma)
    report = EstimateReport(n_pairs=len(i), theta=theta, min_monotonicity_ratio=float(ratio.min()),
                            holder_constant=float(holder.max()), gamma=gamma)
    if not report.passed:
        logger.warning(f"Monotonicity estimate of b failed: min ratio {report.min_monotonicity_ratio:.4f}")
    return report


def save_table(table: FluxTable, json_path: str, csv_path: Optional[str] = None) -> Tuple[str, str]:
    """Write lattice metadata as JSON and node rows as CSV."""
    csv_path = csv_path or os.path.splitext(json_path)[0] + '.csv'
    os.makedirs(os.path.dirname(os.path.abspath(json_path)), exist_ok=True)
    metadata = table.metadata()
    metadata['csv'] = os.path.basename(csv_path)
    with open(json_path, 'w') as f:
        json.dump(metadata, f, indent=2)
    table.to_frame().to_csv(csv_path, index=False)
    logger.info(f"Flux table saved to {json_path}")
    return json_path, csv_path


def load_table(json_path: str, csv_path: Optional[str] = None) -> FluxTable:
    with open(json_path, 'r') as f:
        metadata = json.load(f)
    csv_path = csv_path or os.path.join(os.path.dirname(json_path), metadata['csv'])
    frame = pd.read_csv(csv_path, float_precision='round_trip')
    dim = len(metadata['counts'])
    axes = tuple(np.linspace(lo, hi, n) for lo, hi, n in
                 zip(metadata['lower'], metadata['upper'], metadata['counts']))
    values = frame[[f'b{d}' for d in range(dim)]].to_numpy().reshape(tuple(metadata['counts']) + (dim,))
    return FluxTable(mu=metadata['mu'], regime=metadata['regime'], axes=axes, values=values,
                     p=metadata.get('p', 2.0), provenance=metadata.get('provenance', {}))


def table_cache_key(model, mu: float, box: Box, spacing: float, grid: CellGrid,
                    opts: SolverOptions) -> str:
    """sha256 over model descriptor, regime, lattice, grid and tolerances."""
    payload = {
        'model': model.to_dict(),
        'regime': regime_for(mu),
        'mu': None if regime_for(mu) == 'elliptic-parametric' else float(mu),
        'box': np.asarray(box, dtype=float).tolist(),
        'spacing': float(spacing),
        'grid': grid.to_dict(),
        'options': opts.to_dict(),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()


def cached_table(cache_dir: str, model, mu: float, box: Box, spacing: float, grid: CellGrid,
                 opts: Optional[SolverOptions] = None, threads: int = 1) -> FluxTable:
    """Load a table from ``cache_dir`` if its key is present, else tabulate and store it."""
    opts = opts or SolverOptions()
    key = table_cache_key(model, mu, box, spacing, grid, opts)
    json_path = os.path.join(cache_dir, f'{key}.json')
    if os.path.exists(json_path):
        logger.info(f"Flux table cache hit {key[:12]}")
        return load_table(json_path)
    table = tabulate_b(model, mu, box, spacing, grid, opts, threads=threads)
    save_table(table, json_path)
    return table


class DirectEffectiveFlux(EffectiveEvaluator):
    """b evaluated by cell solves on demand.

    Linear models are reduced to the matrix of b on the unit vectors. Other
    models memoise one solve per xi rounded to ``quantization``.
    """

    def __init__(self, model: FluxBase, mu: float, grid: CellGrid,
                 opts: Optional[SolverOptions] = None, quantization: float = 1e-9):
        self.model = model
        self.mu = mu
        self.grid = grid
        self.opts = opts or SolverOptions()
        self.quantization = quantization
        self.dim = model.dim
        self.p = model.p
        self._memo: Dict[Tuple[int, ...], np.ndarray] = {}
        self._lock = threading.Lock()
        self._matrix = None
        if model.is_linear:
            columns = [self._solve(np.eye(self.dim)[d]) for d in range(self.dim)]
            self._matrix = np.stack(columns, axis=1)

    def _solve(self, xi: np.ndarray) -> np.ndarray:
        return effective_flux(self.model, self.mu, xi, self.grid, self.opts)[0]

    @property
    def solve_count(self) -> int:
        return len(self._memo) if self._matrix is None else self.dim

    def evaluate(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        flat = xi.reshape(-1, self.dim)
        if self._matrix is not None:
            return (flat @ self._matrix.T).reshape(xi.shape)
        out = np.empty_like(flat)
        for row, point in enumerate(flat):
            key = tuple(np.round(point / self.quantization).astype(int))
            with self._lock:
                value = self._memo.get(key)
            if value is None:
                value = self._solve(np.array(key, dtype=float) * self.quantization)
                with self._lock:
                    self._memo.setdefault(key, value)
            out[row] = value
        return out.reshape(xi.shape)

    def jvp(self, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        if self._matrix is not None:
            return np.asarray(eta, dtype=float) @ self._matrix.T
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        size = np.linalg.norm(eta, axis=-1, keepdims=True)
        t = 1e3 * self.quantization / np.where(size > 0, size, 1.0)
        return (self.evaluate(xi + t * eta) - self.evaluate(xi)) / t

    @property
    def stiffness_scale(self) -> float:
        if self._matrix is not None:
            return float(np.trace(self._matrix)) / self.dim
        probe = np.eye(self.dim)[0]
        return float(np.dot(self.evaluate(probe[None, :])[0], probe))
