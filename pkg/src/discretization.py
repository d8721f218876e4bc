"""
Uniform tensor-grid finite elements on the unit box (periodic or Dirichlet)
and the damped monotone iteration shared by the cell and parabolic solvers.
"""

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, List, Optional

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from errors import ConvergenceError, InvalidArgumentError

logger = logging.getLogger(__name__)

GAUSS_2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


class TensorMesh:
    """P1 (1D) or Q1 (2D) elements on n^dim cells of side 1/n.

    Quadrature points are ordered element-major (C order over element
    indices), then by local point. 1D uses the element midpoint, 2D the 2x2
    Gauss rule.

    Args:
        dim: Spatial dimension, 1 or 2
        n: Elements per axis
        periodic: Identify opposite faces; otherwise homogeneous Dirichlet
            nodes are eliminated and only interior nodes are unknowns
    """

    def __init__(self, dim: int, n: int, periodic: bool):
        if dim not in (1, 2):
            raise InvalidArgumentError(f"dimension must be 1 or 2, got {dim}")
        if n < 2:
            raise InvalidArgumentError(f"need at least 2 elements per axis, got {n}")
        self.dim = dim
        self.n = n
        self.periodic = periodic
        self.h = 1.0 / n

        self.local_points = np.array([[0.5]]) if dim == 1 else np.array(list(product(GAUSS_2, GAUSS_2)))
        self.n_local = len(self.local_points)
        self.n_elements = n ** dim
        self.n_quad = self.n_elements * self.n_local
        self.weights = np.full(self.n_quad, self.h ** dim / self.n_local)

        elements = np.array(list(np.ndindex(*(n,) * dim)), dtype=int).reshape(-1, dim)
        self.quad_points = ((elements[:, None, :] + self.local_points[None, :, :]) * self.h).reshape(-1, dim)

        self._full_shape = (n,) * dim if periodic else (n + 1,) * dim
        if periodic:
            self.interior = np.arange(n ** dim)
        else:
            full = np.arange((n + 1) ** dim).reshape(self._full_shape)
            self.interior = full[(slice(1, n),) * dim].ravel()
        self.n_nodes = len(self.interior)

        self.grads: List[sparse.csr_matrix] = self._assemble(elements)
        self.node_mass = self.h ** dim

    def _corner_index(self, corners: np.ndarray) -> np.ndarray:
        if self.periodic:
            corners = corners % self.n
        return np.ravel_multi_index(tuple(corners.T), self._full_shape)

    def _assemble(self, elements: np.ndarray):
        n_full = int(np.prod(self._full_shape))
        rows, cols = [], []
        grad_data = [[] for _ in range(self.dim)]
        for q, s in enumerate(self.local_points):
            row = np.arange(self.n_elements) * self.n_local + q
            for offset in product((0, 1), repeat=self.dim):
                offset = np.array(offset)
                shape = np.where(offset == 1, s, 1.0 - s)
                sign = np.where(offset == 1, 1.0, -1.0)
                rows.append(row)
                cols.append(self._corner_index(elements + offset))
                for d in range(self.dim):
                    others = np.prod(np.delete(shape, d))
                    grad_data[d].append(np.full(self.n_elements, sign[d] * others / self.h))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)

        def build(data):
            matrix = sparse.coo_matrix((np.concatenate(data), (rows, cols)), shape=(self.n_quad, n_full)).tocsr()
            return matrix if self.periodic else matrix[:, self.interior]

        return [build(grad_data[d]) for d in range(self.dim)]

    # -- field operations -------------------------------------------------

    def gradient(self, v: np.ndarray) -> np.ndarray:
        """Gradient of the nodal field at the quadrature points, shape (n_quad, dim)."""
        return np.stack([g @ v for g in self.grads], axis=-1)

    def divergence(self, flux: np.ndarray) -> np.ndarray:
        """Weak divergence sum_d G_d^T (w * flux_d), i.e. the residual of -div(flux)."""
        out = np.zeros(self.n_nodes)
        for d, g in enumerate(self.grads):
            out += g.T @ (self.weights * flux[:, d])
        return out

    def stiffness(self, coefficient: Optional[np.ndarray] = None, shift: float = 0.0) -> sparse.csc_matrix:
        """sum_d G_d^T diag(w c) G_d plus shift times the lumped mass."""
        weights = self.weights if coefficient is None else self.weights * coefficient
        matrix = sum(g.T @ sparse.diags(weights) @ g for g in self.grads)
        if shift:
            matrix = matrix + sparse.identity(self.n_nodes) * (shift * self.node_mass)
        return sparse.csc_matrix(matrix)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Quadrature sum over the box of per-point values (leading axis)."""
        return np.tensordot(self.weights, values, axes=(0, 0))

    def l2_norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(self.node_mass * np.dot(v, v)))

    def full_values(self, v: np.ndarray) -> np.ndarray:
        """Nodal values on the full tensor node array (Dirichlet zeros included)."""
        if self.periodic:
            return np.asarray(v).reshape(self._full_shape)
        full = np.zeros(int(np.prod(self._full_shape)))
        full[self.interior] = v
        return full.reshape(self._full_shape)

    def from_full(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full).ravel()[self.interior]

    def node_coordinates(self) -> np.ndarray:
        grid = np.array(list(np.ndindex(*self._full_shape)), dtype=float).reshape(-1, self.dim) * self.h
        return grid[self.interior]

    def gradient_at(self, v: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Gradient of the FE interpolant at arbitrary points of the box.

        Points on an element face are assigned to the upper element.
        """
        points = np.asarray(points, dtype=float).reshape(-1, self.dim)
        scaled = points * self.n
        # rounding only picks the element; local coordinates stay exact
        element = np.floor(np.round(scaled, 9)).astype(int)
        if not self.periodic:
            element = np.clip(element, 0, self.n - 1)
        local = scaled - element
        if self.periodic:
            element %= self.n
        full = self.full_values(v)
        size = np.array(full.shape)
        out = np.zeros_like(points)
        for offset in product((0, 1), repeat=self.dim):
            offset = np.array(offset)
            corner = element + offset
            if self.periodic:
                corner = corner % size
            value = full[tuple(corner.T)]
            shape = np.where(offset == 1, local, 1.0 - local)
            sign = np.where(offset == 1, 1.0, -1.0)
            for d in range(self.dim):
                others = np.prod(np.delete(shape, d, axis=1), axis=1)
                out[:, d] += value * sign[d] * others / self.h
        return out


class LinearSolver:
    """Sparse LU of an SPD operator; periodic operators are pinned at node 0
    and the solution is projected onto mean zero."""

    def __init__(self, matrix: sparse.spmatrix, singular: bool):
        self.singular = singular
        matrix = sparse.csc_matrix(matrix)
        if singular:
            matrix = matrix[1:, 1:]
        self._solve = splinalg.factorized(sparse.csc_matrix(matrix))
        self.size = matrix.shape[0] + (1 if singular else 0)

    def __call__(self, rhs: np.ndarray) -> np.ndarray:
        if not self.singular:
            return self._solve(rhs)
        out = np.zeros(self.size)
        out[1:] = self._solve(rhs[1:])
        return out - out.mean()


@dataclass
class IterationResult:
    v: np.ndarray
    residual_norm: float
    iterations: int
    history: List[float] = field(default_factory=list)


def solve_monotone(residual: Callable[[np.ndarray], np.ndarray],
                   jvp: Callable[[np.ndarray, np.ndarray], np.ndarray],
                   precond: Callable[[np.ndarray], np.ndarray],
                   v0: np.ndarray,
                   tol: float,
                   max_iter: int,
                   direction: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
                   project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                   max_halvings: int = 30) -> IterationResult:
    """Damped preconditioned iteration for a monotone residual R(v) = 0.

    The residual is measured in the dual norm sqrt(R . P^-1 R) of the fixed
    preconditioner P. Each step moves along a search direction (the lagged
    diffusion direction when ``direction`` is given, otherwise P^-1 R) with
    the minimal-residual step length, halved until the dual norm decreases.
    If the lagged direction fails to produce descent the step falls back to
    P^-1 R, which is a descent direction for any monotone residual.

    Raises:
        ConvergenceError: Tolerance not reached within max_iter, or no
            descent found; carries the residual history
    """
    project = project or (lambda x: x)
    v = project(np.array(v0, dtype=float))
    r = residual(v)
    z = precond(r)
    norm = float(np.sqrt(max(np.dot(r, z), 0.0)))
    history = [norm]

    for iteration in range(1, max_iter + 1):
        if norm <= tol:
            return IterationResult(v=v, residual_norm=norm, iterations=iteration - 1, history=history)

        candidates = [direction(v, r)] if direction is not None else []
        candidates.append(z)
        accepted = False
        for step in candidates:
            jz = jvp(v, step)
            denom = np.dot(jz, precond(jz))
            rho = np.dot(jz, z) / denom if denom > 0 else 1.0
            if not np.isfinite(rho) or rho <= 0:
                rho = 1.0
            for _ in range(max_halvings):
                trial = project(v - rho * step)
                r_trial = residual(trial)
                z_trial = precond(r_trial)
                trial_norm = float(np.sqrt(max(np.dot(r_trial, z_trial), 0.0)))
                if trial_norm < norm:
                    v, r, z, norm = trial, r_trial, z_trial, trial_norm
                    accepted = True
                    break
                rho *= 0.5
            if accepted:
                break
        history.append(norm)
        logger.debug(f"iteration {iteration}: residual {norm:.3e}")
        if not accepted:
            raise ConvergenceError("line search found no descent", history=history)

    if norm <= tol:
        return IterationResult(v=v, residual_norm=norm, iterations=max_iter, history=history)
    raise ConvergenceError(f"no convergence within {max_iter} iterations", history=history)


def lagged_diffusivity(coefficient: np.ndarray, gradients: np.ndarray, p: float) -> np.ndarray:
    """Scalar diffusivity c |g|^(p-2) of a flux c |g|^(p-2) g at each quadrature point.

    A small floor keeps the weighted Laplacian definite where the gradient vanishes.
    """
    coefficient = np.broadcast_to(coefficient, gradients.shape[:-1]).astype(float)
    if p == 2.0:
        return coefficient
    norm2 = np.sum(gradients * gradients, axis=-1)
    floor = 1e-12 * (1.0 + float(np.max(norm2)))
    return coefficient * (norm2 + floor) ** ((p - 2.0) / 2.0)


class MonotoneSystem:
    """One implicit step shift * M (v - v_prev) - div flux(Dv) = load on a mesh.

    Args:
        mesh: Periodic or Dirichlet tensor mesh
        flux: Map from gradients at the quadrature points to fluxes
        flux_jvp: (gradients, directions) -> directional derivative of flux
        diffusivity: Gradients -> scalar lagged diffusivity per point
        shift: 1/dt for a time step, 0 for a stationary problem
        linear_coefficient: Per-point c when flux(g) = c (g + g0) is affine;
            the step is then a single sparse solve
        scale: Diffusivity of the fixed preconditioner that measures residuals
    """

    def __init__(self, mesh: TensorMesh,
                 flux: Callable[[np.ndarray], np.ndarray],
                 flux_jvp: Callable[[np.ndarray, np.ndarray], np.ndarray],
                 diffusivity: Callable[[np.ndarray], np.ndarray],
                 shift: float = 0.0,
                 linear_coefficient: Optional[np.ndarray] = None,
                 scale: float = 1.0):
        self.mesh = mesh
        self.flux = flux
        self.flux_jvp = flux_jvp
        self.diffusivity = diffusivity
        self.shift = shift
        self.singular = mesh.periodic and shift == 0.0
        self.precond = LinearSolver(mesh.stiffness(np.full(mesh.n_quad, scale), shift=shift), self.singular)
        self._linear = None
        if linear_coefficient is not None:
            coefficient = np.broadcast_to(linear_coefficient, (mesh.n_quad,))
            self._linear = LinearSolver(mesh.stiffness(coefficient, shift=shift), self.singular)

    def project(self, v: np.ndarray) -> np.ndarray:
        return v - v.mean() if self.mesh.periodic else v

    def residual(self, v: np.ndarray, v_prev: Optional[np.ndarray] = None,
                 load: Optional[np.ndarray] = None) -> np.ndarray:
        r = self.mesh.divergence(self.flux(self.mesh.gradient(v)))
        if self.shift:
            r = r + self.shift * self.mesh.node_mass * (v - v_prev)
        if load is not None:
            r = r - load
        return r

    def jvp(self, v: np.ndarray, z: np.ndarray) -> np.ndarray:
        out = self.mesh.divergence(self.flux_jvp(self.mesh.gradient(v), self.mesh.gradient(z)))
        if self.shift:
            out = out + self.shift * self.mesh.node_mass * z
        return out

    def lagged_direction(self, v: np.ndarray, r: np.ndarray) -> np.ndarray:
        weights = self.diffusivity(self.mesh.gradient(v))
        return LinearSolver(self.mesh.stiffness(weights, shift=self.shift), self.singular)(r)

    def dual_norm(self, r: np.ndarray) -> float:
        return float(np.sqrt(max(np.dot(r, self.precond(r)), 0.0)))

    def solve(self, v0: np.ndarray, v_prev: Optional[np.ndarray], tol: float, max_iter: int,
              load: Optional[np.ndarray] = None) -> IterationResult:
        """Solve the step; affine fluxes take one sparse solve.

        Raises:
            ConvergenceError: The final residual is above tol on either path
        """
        if self._linear is not None:
            rhs = -self.mesh.divergence(self.flux(np.zeros((self.mesh.n_quad, self.mesh.dim))))
            if self.shift:
                rhs = rhs + self.shift * self.mesh.node_mass * v_prev
            if load is not None:
                rhs = rhs + load
            v = self.project(self._linear(rhs))
            norm = self.dual_norm(self.residual(v, v_prev, load))
            if norm > tol:
                raise ConvergenceError(f"linear solve left residual above {tol:g}", history=[norm])
            return IterationResult(v=v, residual_norm=norm, iterations=1, history=[norm])
        return solve_monotone(
            residual=lambda v: self.residual(v, v_prev, load),
            jvp=self.jvp,
            precond=self.precond,
            v0=v0,
            tol=tol,
            max_iter=max_iter,
            direction=self.lagged_direction,
            project=self.project)
