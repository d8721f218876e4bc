"""
Monotone flux maps a(y, tau, xi) of the structure class used throughout the
workbench, with built-in parametrised families and sampling-based checks of
the structure conditions.

All families share the form a(y, tau, xi) = c(y, tau) |xi|^(p-2) xi with a
positive, Y x T0-periodic coefficient c.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import ConfigurationError, InvalidArgumentError

logger = logging.getLogger(__name__)

FAMILIES = ('linear', 'p_laplacian', 'checkerboard')


@dataclass(frozen=True)
class StructureConstants:
    """Constants (p, alpha, c0, c1, c2) of the structure class."""
    p: float
    alpha: float
    c0: float
    c1: float
    c2: float

    def __post_init__(self):
        if not (2.0 <= self.p < math.inf):
            raise InvalidArgumentError(f"growth exponent p must satisfy 2 <= p < inf, got {self.p}")
        if not (0.0 < self.alpha <= 1.0):
            raise InvalidArgumentError(f"Hoelder exponent alpha must lie in (0, 1], got {self.alpha}")
        for name in ('c0', 'c1', 'c2'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"{name} must be a positive real, got {value}")

    @property
    def gamma(self) -> float:
        return self.alpha / (self.p - self.alpha)


@dataclass(frozen=True)
class FourierSeries:
    """Truncated real Fourier series c(z) = mean + sum(s sin 2pi k.z + c cos 2pi k.z).

    ``terms`` holds (frequency vector, sine amplitude, cosine amplitude) triples.
    """
    mean: float
    terms: Tuple[Tuple[Tuple[int, ...], float, float], ...] = ()
    dim: int = 1

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.dim == 1 and (z.ndim == 0 or z.shape[-1] != 1):
            z = z[..., None]
        out = np.full(z.shape[:-1], float(self.mean))
        for freq, s_amp, c_amp in self.terms:
            phase = 2.0 * np.pi * (z @ np.asarray(freq, dtype=float))
            if s_amp:
                out = out + s_amp * np.sin(phase)
            if c_amp:
                out = out + c_amp * np.cos(phase)
        return out

    @property
    def constant(self) -> bool:
        return all(s == 0 and c == 0 for _, s, c in self.terms)

    def bounds(self) -> Tuple[float, float]:
        """Conservative (lower, upper) bounds of the series."""
        spread = sum(abs(s) + abs(c) for _, s, c in self.terms)
        return self.mean - spread, self.mean + spread

    def lipschitz(self) -> float:
        """Lipschitz constant bound with respect to the Euclidean norm of z."""
        return sum(2.0 * np.pi * float(np.linalg.norm(freq)) * (abs(s) + abs(c))
                   for freq, s, c in self.terms)

    @classmethod
    def from_dict(cls, data: Dict, dim: int) -> 'FourierSeries':
        if not isinstance(data, dict) or 'mean' not in data:
            raise ConfigurationError("Fourier descriptor needs a 'mean' entry")
        terms = []
        for term in data.get('terms', []):
            freq = term.get('freq')
            freq = tuple(int(k) for k in (freq if isinstance(freq, (list, tuple)) else [freq]))
            if len(freq) != dim:
                raise ConfigurationError(f"Fourier frequency {list(freq)} does not match dimension {dim}")
            terms.append((freq, float(term.get('sin', 0.0)), float(term.get('cos', 0.0))))
        return cls(mean=float(data['mean']), terms=tuple(terms), dim=dim)

    def to_dict(self) -> Dict:
        return {
            'mean': self.mean,
            'terms': [{'freq': list(freq), 'sin': s, 'cos': c} for freq, s, c in self.terms],
        }


@dataclass(frozen=True, eq=False)
class CheckerboardTable:
    """Piecewise-constant coefficient on a k x ... x k sub-lattice of Y x T0.

    ``values`` has shape (k,)*dim + (k,); the last axis is time. Sub-cells are
    half-open [lower, upper).
    """
    k: int
    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.ndim - 1

    def __call__(self, y: np.ndarray, tau: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        tau = np.asarray(tau, dtype=float)
        # rounding to 1e-9 puts points sitting on a face into the upper sub-cell
        yi = np.floor(np.round(y * self.k, 9)).astype(int) % self.k
        ti = np.floor(np.round(tau * self.k, 9)).astype(int) % self.k
        shape = np.broadcast_shapes(y.shape[:-1], tau.shape)
        index = tuple(np.broadcast_to(yi[..., d], shape) for d in range(self.dim))
        return self.values[index + (np.broadcast_to(ti, shape),)]

    @property
    def time_dependent(self) -> bool:
        return bool(np.any(np.ptp(self.values, axis=-1) != 0))

    @classmethod
    def from_dict(cls, data: Dict) -> 'CheckerboardTable':
        if 'k' not in data or 'values' not in data:
            raise ConfigurationError("checkerboard coefficients need 'k' and 'values'")
        k = int(data['k'])
        values = np.asarray(data['values'], dtype=float)
        if k < 1 or values.ndim not in (2, 3) or any(n != k for n in values.shape):
            raise ConfigurationError(f"checkerboard values must have shape (k,)*(dim+1) with k={k}")
        if np.any(values <= 0) or not np.all(np.isfinite(values)):
            raise ConfigurationError("checkerboard values must be finite and positive")
        values.setflags(write=False)
        return cls(k=k, values=values)

    def to_dict(self) -> Dict:
        return {'k': self.k, 'values': self.values.tolist()}


@dataclass(frozen=True)
class TimeModulus:
    """Modulus of continuity in time, omega(h) = constant * |h|."""
    constant: float
    kind: str = 'lipschitz'

    def __call__(self, h) -> np.ndarray:
        return self.constant * np.abs(h)

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> Optional['TimeModulus']:
        if data is None:
            return None
        if data.get('type') != 'lipschitz' or 'constant' not in data:
            raise ConfigurationError("time_modulus must be {'type': 'lipschitz', 'constant': number}")
        return cls(constant=float(data['constant']))

    def to_dict(self) -> Dict:
        return {'type': self.kind, 'constant': self.constant}


class FluxBase:
    """Shared evaluation of a(y, tau, xi) = c(y, tau) |xi|^(p-2) xi."""

    constants: StructureConstants
    dim: int

    @property
    def p(self) -> float:
        return self.constants.p

    @property
    def is_linear(self) -> bool:
        return self.constants.p == 2.0

    @property
    def time_dependent(self) -> bool:
        raise NotImplementedError

    def coefficient(self, y: np.ndarray, tau: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _power(self, xi: np.ndarray) -> np.ndarray:
        if self.is_linear:
            return np.ones(xi.shape[:-1])
        return np.linalg.norm(xi, axis=-1) ** (self.p - 2.0)

    def eval(self, y: np.ndarray, tau, xi: np.ndarray) -> np.ndarray:
        """Evaluate the flux; y and tau are wrapped into the unit cell."""
        y = np.mod(np.asarray(y, dtype=float), 1.0)
        tau = np.mod(np.asarray(tau, dtype=float), 1.0)
        xi = np.asarray(xi, dtype=float)
        c = self.coefficient(y, tau)
        return (c * self._power(xi))[..., None] * xi

    def eval_jvp(self, y: np.ndarray, tau, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        """Directional derivative D_xi a(y, tau, xi)[eta]."""
        y = np.mod(np.asarray(y, dtype=float), 1.0)
        tau = np.mod(np.asarray(tau, dtype=float), 1.0)
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        c = self.coefficient(y, tau)
        if self.is_linear:
            return c[..., None] * eta
        norm = np.linalg.norm(xi, axis=-1)
        weight = norm ** (self.p - 2.0)
        unit = np.divide(xi, norm[..., None], out=np.zeros_like(xi), where=norm[..., None] > 0)
        along = np.sum(unit * eta, axis=-1)
        return (c * weight)[..., None] * (eta + (self.p - 2.0) * along[..., None] * unit)

    def coefficient_bounds(self) -> Tuple[float, float]:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class FluxModel(FluxBase):
    """A built-in flux family with its structure constants.

    Args:
        family: One of 'linear', 'p_laplacian', 'checkerboard'
        coefficients: Parsed coefficient descriptors ('space'/'time' Fourier
            series, or 'table' for the checkerboard)
        constants: Declared structure constants
        time_modulus: Optional time modulus, needed for 0 < mu < 2
    """
    family: str
    coefficients: Dict = field(default_factory=dict)
    constants: StructureConstants = None
    time_modulus: Optional[TimeModulus] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown flux family '{self.family}'; expected one of {FAMILIES}")
        if self.constants is None:
            raise ConfigurationError("flux model needs structure constants")
        if self.family == 'linear' and self.constants.p != 2.0:
            raise ConfigurationError("the 'linear' family requires p = 2")
        if self.family == 'checkerboard':
            if 'table' not in self.coefficients:
                raise ConfigurationError("checkerboard model needs a coefficient table")
        elif 'space' not in self.coefficients:
            raise ConfigurationError(f"{self.family} model needs a 'space' coefficient")
        lower, _ = self.coefficient_bounds()
        if lower <= 0:
            raise ConfigurationError(f"coefficient must stay positive (lower bound {lower:g})")

    @property
    def dim(self) -> int:
        if self.family == 'checkerboard':
            return self.coefficients['table'].dim
        return self.coefficients['space'].dim

    @property
    def time_dependent(self) -> bool:
        if self.family == 'checkerboard':
            return self.coefficients['table'].time_dependent
        time = self.coefficients.get('time')
        return time is not None and not time.constant

    def coefficient(self, y: np.ndarray, tau: np.ndarray) -> np.ndarray:
        if self.family == 'checkerboard':
            return self.coefficients['table'](y, tau)
        c = self.coefficients['space'](y)
        time = self.coefficients.get('time')
        if time is not None:
            c = c * time(np.asarray(tau, dtype=float)[..., None])
        return np.broadcast_to(c, np.broadcast_shapes(c.shape, np.shape(tau)))

    def coefficient_bounds(self) -> Tuple[float, float]:
        if self.family == 'checkerboard':
            values = self.coefficients['table'].values
            return float(values.min()), float(values.max())
        lo, hi = self.coefficients['space'].bounds()
        time = self.coefficients.get('time')
        if time is not None:
            t_lo, t_hi = time.bounds()
            if t_lo <= 0:
                return t_lo, hi * t_hi
            lo, hi = lo * t_lo, hi * t_hi
        return lo, hi

    def to_dict(self) -> Dict:
        """Serialise to the JSON model descriptor."""
        if self.family == 'checkerboard':
            coefficients = self.coefficients['table'].to_dict()
        else:
            coefficients = {'dim': self.dim, 'space': self.coefficients['space'].to_dict()}
            if self.coefficients.get('time') is not None:
                coefficients['time'] = self.coefficients['time'].to_dict()
        return {
            'family': self.family,
            'p': self.constants.p,
            'alpha': self.constants.alpha,
            'c0': self.constants.c0,
            'c1': self.constants.c1,
            'c2': self.constants.c2,
            'coefficients': coefficients,
            'time_modulus': self.time_modulus.to_dict() if self.time_modulus else None,
        }

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()

    @classmethod
    def from_dict(cls, data: Dict) -> 'FluxModel':
        """Build a model from its JSON descriptor (exact key names)."""
        required = ('family', 'p', 'alpha', 'c0', 'c1', 'c2', 'coefficients')
        missing = [key for key in required if key not in data]
        if missing:
            raise ConfigurationError(f"model descriptor is missing keys: {', '.join(missing)}")
        unknown = set(data) - set(required) - {'time_modulus'}
        if unknown:
            raise ConfigurationError(f"model descriptor has unknown keys: {', '.join(sorted(unknown))}")
        constants = StructureConstants(p=float(data['p']), alpha=float(data['alpha']),
                                       c0=float(data['c0']), c1=float(data['c1']), c2=float(data['c2']))
        raw = data['coefficients'] or {}
        if data['family'] == 'checkerboard':
            coefficients = {'table': CheckerboardTable.from_dict(raw)}
        else:
            if 'space' not in raw:
                raise ConfigurationError("coefficients need a 'space' Fourier descriptor")
            dim = int(raw.get('dim') or _infer_dim(raw['space']))
            if dim not in (1, 2):
                raise ConfigurationError(f"spatial dimension must be 1 or 2, got {dim}")
            coefficients = {'space': FourierSeries.from_dict(raw['space'], dim)}
            if raw.get('time') is not None:
                coefficients['time'] = FourierSeries.from_dict(raw['time'], 1)
        return cls(family=data['family'], coefficients=coefficients, constants=constants,
                   time_modulus=TimeModulus.from_dict(data.get('time_modulus')))


def _infer_dim(space: Dict) -> int:
    for term in space.get('terms', []):
        freq = term.get('freq')
        return len(freq) if isinstance(freq, (list, tuple)) else 1
    return 1


def eval_flux(model: FluxBase, y, tau, xi) -> np.ndarray:
    """Evaluate a(y, tau, xi) with periodic wrapping of y and tau.

    Raises:
        InvalidArgumentError: If any input is not finite
    """
    y, tau, xi = (np.asarray(v, dtype=float) for v in (y, tau, xi))
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(tau)) and np.all(np.isfinite(xi))):
        raise InvalidArgumentError("eval_flux received a non-finite input")
    if y.ndim == 0:
        y = y[None]
    if xi.ndim == 0:
        xi = xi[None]
    return model.eval(y, tau, xi)


@dataclass
class StructureReport:
    """Worst-case normalised margins of the sampled structure conditions."""
    n_samples: int
    zero_flux_margin: float
    monotonicity_margin: float
    continuity_margin: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return min(self.zero_flux_margin, self.monotonicity_margin,
                   self.continuity_margin) >= -self.tolerance

    def to_dict(self) -> Dict:
        return {
            'n_samples': self.n_samples,
            'zero_flux_margin': self.zero_flux_margin,
            'monotonicity_margin': self.monotonicity_margin,
            'continuity_margin': self.continuity_margin,
            'tolerance': self.tolerance,
            'passed': self.passed,
        }


def structure_margins(model: FluxBase, y, tau, xi1, xi2) -> Tuple[np.ndarray, np.ndarray]:
    """Normalised monotonicity and continuity margins for explicit sample triples.

    Both margins are divided by (1 + |xi1|^p + |xi2|^p); equal pairs give 0.
    """
    const = model.constants
    a1 = model.eval(y, tau, xi1)
    a2 = model.eval(y, tau, xi2)
    diff = np.asarray(xi1) - np.asarray(xi2)
    dist2 = np.sum(diff * diff, axis=-1)
    dist = np.sqrt(dist2)
    n1 = np.linalg.norm(xi1, axis=-1)
    n2 = np.linalg.norm(xi2, axis=-1)
    scale = 1.0 + n1 ** const.p + n2 ** const.p

    monotone = np.sum((a1 - a2) * diff, axis=-1) - const.c2 * dist2 ** (const.p / 2.0)
    bound = const.c1 * (1.0 + n1 + n2) ** (const.p - 1.0 - const.alpha) * dist ** const.alpha
    continuity = bound - np.linalg.norm(a1 - a2, axis=-1)
    return monotone / scale, continuity / scale


def check_structure(model: FluxBase, n_samples: int, seed: int,
                    tolerance: float = 0.0, xi_range: float = 3.0) -> StructureReport:
    """Sample conditions (ii), (iv) and (v) of the structure class.

    Args:
        model: Flux model with declared constants
        n_samples: Number of random (y, tau, xi1, xi2) samples
        seed: RNG seed; the report is deterministic given the seed
        tolerance: Allowed negative normalised margin for a pass
        xi_range: Gradients are drawn uniformly from [-xi_range, xi_range]^N
    """
    if n_samples < 1:
        raise InvalidArgumentError("check_structure needs at least one sample")
    rng = np.random.default_rng(seed)
    dim = model.dim
    y = rng.random((n_samples, dim))
    tau = rng.random(n_samples)
    xi1 = rng.uniform(-xi_range, xi_range, (n_samples, dim))
    xi2 = rng.uniform(-xi_range, xi_range, (n_samples, dim))

    zero = model.constants.c0 - np.linalg.norm(model.eval(y, tau, np.zeros_like(xi1)), axis=-1)
    monotone, continuity = structure_margins(model, y, tau, xi1, xi2)
    report = StructureReport(n_samples=n_samples,
                             zero_flux_margin=float(zero.min()),
                             monotonicity_margin=float(monotone.min()),
                             continuity_margin=float(continuity.min()),
                             tolerance=tolerance)
    if not report.passed:
        logger.warning(f"Structure check failed: {report.to_dict()}")
    return report


@dataclass
class TimeModulusReport:
    n_samples: int
    worst_margin: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_margin >= -self.tolerance

    def to_dict(self) -> Dict:
        return {'n_samples': self.n_samples, 'worst_margin': self.worst_margin,
                'tolerance': self.tolerance, 'passed': self.passed}


def check_time_modulus(model: FluxModel, n_samples: int, seed: int,
                       tolerance: float = 0.0, xi_range: float = 3.0) -> TimeModulusReport:
    """Sample |a(y,t,xi) - a(y,s,xi)| <= omega(t-s) (1 + |xi|^(p-1)).

    Raises:
        ConfigurationError: If the model carries no time modulus
    """
    if getattr(model, 'time_modulus', None) is None:
        raise ConfigurationError("model has no time_modulus descriptor")
    rng = np.random.default_rng(seed)
    y = rng.random((n_samples, model.dim))
    t = rng.random(n_samples)
    s = rng.random(n_samples)
    xi = rng.uniform(-xi_range, xi_range, (n_samples, model.dim))
    weight = 1.0 + np.linalg.norm(xi, axis=-1) ** (model.p - 1.0)
    lhs = np.linalg.norm(model.eval(y, t, xi) - model.eval(y, s, xi), axis=-1)
    margin = (model.time_modulus(t - s) * weight - lhs) / weight
    return TimeModulusReport(n_samples=n_samples, worst_margin=float(margin.min()), tolerance=tolerance)


def time_gate(model: FluxModel, n_samples: int = 10000, seed: int = 0) -> None:
    """Validity gate for the 0 < mu < 2 regime.

    Time-independent models pass without a descriptor.

    Raises:
        ConfigurationError: If the modulus is missing for a time-dependent
            model or the sampled check fails
    """
    if not model.time_dependent:
        return
    report = check_time_modulus(model, n_samples, seed)
    if not report.passed:
        raise ConfigurationError(f"time modulus check failed (worst margin {report.worst_margin:.3e})")


def _fourier(mean: float, terms: List[Tuple[Tuple[int, ...], float, float]], dim: int) -> FourierSeries:
    return FourierSeries(mean=mean, terms=tuple(terms), dim=dim)


def declared_constants(space: FourierSeries, time: Optional[FourierSeries], p: float) -> StructureConstants:
    """Constants with slack for c(y,tau)|xi|^(p-2)xi given coefficient bounds."""
    lo, hi = space.bounds()
    if time is not None:
        t_lo, t_hi = time.bounds()
        lo, hi = lo * t_lo, hi * t_hi
    return StructureConstants(p=p, alpha=1.0, c0=1.0,
                              c1=1.05 * hi * (p - 1.0),
                              c2=0.95 * lo * 2.0 ** (2.0 - p))


def builtin_models() -> Dict[str, FluxModel]:
    """Named presets shipped with their declared constants."""
    harmonic = _fourier(2.0, [((1,), 1.0, 0.0)], 1)
    oscillating_time = _fourier(1.0, [((1,), 0.5, 0.0)], 1)
    plane = _fourier(2.0, [((1, 0), 0.5, 0.0), ((0, 1), 0.0, 0.4)], 2)

    models = {
        'harmonic_mean_1d': FluxModel(
            family='linear', coefficients={'space': harmonic},
            constants=StructureConstants(p=2.0, alpha=1.0, c0=1.0, c1=3.0, c2=1.0)),
        'separable_oscillating_1d': FluxModel(
            family='linear', coefficients={'space': harmonic, 'time': oscillating_time},
            constants=declared_constants(harmonic, oscillating_time, 2.0),
            time_modulus=TimeModulus(constant=1.05 * 3.0 * oscillating_time.lipschitz())),
        'p_laplacian_1d_p4': FluxModel(
            family='p_laplacian', coefficients={'space': harmonic},
            constants=declared_constants(harmonic, None, 4.0)),
        'p_laplacian_2d_p4': FluxModel(
            family='p_laplacian', coefficients={'space': plane},
            constants=declared_constants(plane, None, 4.0)),
        'linear_2d': FluxModel(
            family='linear', coefficients={'space': plane},
            constants=declared_constants(plane, None, 2.0)),
    }
    board = np.array([[[1.0, 1.5], [2.0, 1.0]], [[1.5, 2.0], [1.0, 1.5]]])
    board.setflags(write=False)
    models['checkerboard_2d'] = FluxModel(
        family='checkerboard', coefficients={'table': CheckerboardTable(k=2, values=board)},
        constants=StructureConstants(p=4.0, alpha=1.0, c0=1.0, c1=1.05 * 2.0 * 3.0, c2=0.95 * 1.0 * 0.25),
        time_modulus=None)
    return models
