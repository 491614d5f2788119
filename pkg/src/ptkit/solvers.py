"""Discrete energies and minimizers shared by the capacity and form modules.

The p-Dirichlet energy is assembled cell by cell with tensor-trapezoid
(corner) quadrature: on every grid cell the bilinear-element gradient is
evaluated at each of the 2^d cell corners (per-axis edge differences meeting
at that corner) and the energy density (|grad|^2 + delta^2)^(p/2) is
averaged over the corners.  This quadrature is convex for p > 1, second
order, and has no spurious zero-energy modes (single-point cell-center
quadrature admits a checkerboard null mode; corner quadrature controls it,
and for p = 2 it reduces to the classical compact stencil).

Minimizers:

* linear conjugate gradients for quadratic problems (p = 2 and the lagged
  linear solves), Jacobi preconditioned;
* Polak-Ribiere nonlinear conjugate gradients with backtracking line search
  for the regularized p-energy (descent guaranteed, energy history
  nonincreasing);
* damped lagged-coefficient (Picard) iterations whose fixed point solves the
  regularized Euler-Lagrange equation, used to polish fields to first-order
  optimality.

Constraints are nodal: Dirichlet values are projected every step; pure
Neumann problems fix the constant mode by volume-mean normalization.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .domains import DiscretizedDomain
from .errors import NonConvergence


# ---------------------------------------------------------------------------
# Stencil helpers
# ---------------------------------------------------------------------------

def _diff(F: np.ndarray, axis: int, periodic: bool) -> np.ndarray:
    if periodic:
        return np.roll(F, -1, axis=axis) - F
    lo = [slice(None)] * F.ndim
    hi = [slice(None)] * F.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return F[tuple(hi)] - F[tuple(lo)]


def _avg(F: np.ndarray, axis: int, periodic: bool) -> np.ndarray:
    if periodic:
        return 0.5 * (np.roll(F, -1, axis=axis) + F)
    lo = [slice(None)] * F.ndim
    hi = [slice(None)] * F.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (F[tuple(hi)] + F[tuple(lo)])


def _diff_adj(C: np.ndarray, axis: int, periodic: bool, out_shape) -> np.ndarray:
    out = np.zeros(out_shape)
    if periodic:
        out -= C
        out += np.roll(C, 1, axis=axis)
        return out
    lo = [slice(None)] * len(out_shape)
    hi = [slice(None)] * len(out_shape)
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    out[tuple(hi)] += C
    out[tuple(lo)] -= C
    return out


def _sum_adj(C: np.ndarray, axis: int, periodic: bool, out_shape) -> np.ndarray:
    """Adjoint of the edge lattice with +1 to both endpoints (for diagonals)."""
    out = np.zeros(out_shape)
    if periodic:
        out += C
        out += np.roll(C, 1, axis=axis)
        return out
    lo = [slice(None)] * len(out_shape)
    hi = [slice(None)] * len(out_shape)
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    out[tuple(hi)] += C
    out[tuple(lo)] += C
    return out


def _to_cells(grid: DiscretizedDomain, nodal: np.ndarray) -> np.ndarray:
    """Average a nodal field to cell centers."""
    F = grid.reshape(nodal)
    for axis in range(grid.ndim):
        F = _avg(F, axis, grid.periodic[axis])
    return F


# ---------------------------------------------------------------------------
# The corner-quadrature cell energy
# ---------------------------------------------------------------------------

class CellEnergy:
    """Regularized p-Dirichlet energy on grid cells with corner quadrature.

    Optional per-node diagonal anisotropy weights turn the density into
    (grad . D grad + delta^2)^(p/2); optional ``active_cells`` (cells-shaped
    0/1 array) restricts the integration domain.
    """

    def __init__(self, grid: DiscretizedDomain, p: float, delta: float = 0.0,
                 diag_weights: np.ndarray | None = None,
                 active_cells: np.ndarray | None = None):
        self.grid = grid
        self.p = float(p)
        self.delta = float(delta)

        vol = _to_cells(grid, grid.jac)
        for axis in range(grid.ndim):
            vol = vol * grid.spacing[axis]
        if active_cells is not None:
            vol = vol * active_cells
        self.cell_vol = vol
        self.cell_scale = [_to_cells(grid, grid.scale[:, a])
                           for a in range(grid.ndim)]
        if diag_weights is not None:
            self.diag = [_to_cells(grid, np.asarray(diag_weights, dtype=float)[:, a])
                         for a in range(grid.ndim)]
        else:
            self.diag = None
        self.patterns = list(itertools.product((0, 1), repeat=grid.ndim))
        self.corner_share = 1.0 / len(self.patterns)

    # -- edge differences ------------------------------------------------
    def _edge_diffs(self, phi: np.ndarray) -> list[np.ndarray]:
        grid = self.grid
        F = grid.reshape(np.asarray(phi, dtype=float))
        return [_diff(F, a, grid.periodic[a]) / grid.spacing[a]
                for a in range(grid.ndim)]

    def _sample(self, D: np.ndarray, axis: int, pattern) -> np.ndarray:
        """Edge difference of one axis sampled at the cell corner given by
        the 0/1 transverse pattern; result is cells-shaped."""
        grid = self.grid
        out = D
        for b in range(grid.ndim):
            if b == axis:
                continue
            if grid.periodic[b]:
                if pattern[b]:
                    out = np.roll(out, -1, axis=b)
            else:
                sl = [slice(None)] * grid.ndim
                sl[b] = slice(1, None) if pattern[b] else slice(None, -1)
                out = out[tuple(sl)]
        return out

    def _scatter(self, C: np.ndarray, axis: int, pattern) -> np.ndarray:
        """Adjoint of _sample: cells-shaped C back onto the edge lattice."""
        grid = self.grid
        out = C
        for b in range(grid.ndim - 1, -1, -1):
            if b == axis:
                continue
            if grid.periodic[b]:
                if pattern[b]:
                    out = np.roll(out, 1, axis=b)
            else:
                shape = list(out.shape)
                shape[b] += 1
                grown = np.zeros(tuple(shape))
                sl = [slice(None)] * grid.ndim
                sl[b] = slice(1, None) if pattern[b] else slice(None, -1)
                grown[tuple(sl)] = out
                out = grown
        return out

    def _corner_sq(self, diffs: list[np.ndarray], pattern) -> tuple[np.ndarray, list[np.ndarray]]:
        comps = []
        q = None
        for a in range(self.grid.ndim):
            G = self._sample(diffs[a], a, pattern) / self.cell_scale[a]
            comps.append(G)
            term = (self.diag[a] * G * G) if self.diag is not None else G * G
            q = term if q is None else q + term
        return q, comps

    # -- public evaluations ------------------------------------------------
    def value(self, phi: np.ndarray) -> float:
        diffs = self._edge_diffs(phi)
        total = 0.0
        for s in self.patterns:
            q, _ = self._corner_sq(diffs, s)
            total += float(np.sum(self.cell_vol *
                                  np.power(q + self.delta ** 2, self.p / 2.0)))
        return total * self.corner_share

    def value_and_grad(self, phi: np.ndarray) -> tuple[float, np.ndarray]:
        grid = self.grid
        diffs = self._edge_diffs(phi)
        acc = [np.zeros_like(diffs[a]) for a in range(grid.ndim)]
        total = 0.0
        for s in self.patterns:
            q, comps = self._corner_sq(diffs, s)
            qd = q + self.delta ** 2
            total += float(np.sum(self.cell_vol * np.power(qd, self.p / 2.0)))
            w = self.corner_share * self.cell_vol * \
                (self.p / 2.0) * np.power(qd, self.p / 2.0 - 1.0)
            for a in range(grid.ndim):
                C = 2.0 * w * comps[a] / self.cell_scale[a]
                if self.diag is not None:
                    C = C * self.diag[a]
                acc[a] += self._scatter(C, a, s)
        nodal = np.zeros(grid.shape)
        for a in range(grid.ndim):
            nodal += _diff_adj(acc[a] / grid.spacing[a], a, grid.periodic[a],
                               grid.shape)
        return total * self.corner_share, nodal.ravel()

    def corner_weights(self, phi: np.ndarray,
                       floor_rel: float = 1e-12) -> list[np.ndarray]:
        """Lagged diffusivities (q + delta^2)^((p-2)/2) per corner pattern.

        ``floor_rel`` caps the coefficient contrast (relative to the largest
        diffusivity) to keep the inner linear solves well conditioned; the
        caller anneals it toward zero so the fixed point is unaffected."""
        diffs = self._edge_diffs(phi)
        out = []
        for s in self.patterns:
            q, _ = self._corner_sq(diffs, s)
            if abs(self.p - 2.0) < 1e-14:
                out.append(np.ones_like(q))
            else:
                w = np.power(q + self.delta ** 2, (self.p - 2) / 2.0)
                floor = float(np.max(w)) * floor_rel
                out.append(np.maximum(w, floor if floor > 0 else 1e-300))
        return out

    def quadratic_operator(self, weights):
        """Linear operator phi -> weak-form action with frozen diffusivities.

        ``weights`` is either a single cells-shaped array (applied at every
        corner) or a list with one array per corner pattern."""
        grid = self.grid
        if isinstance(weights, np.ndarray):
            weights = [weights] * len(self.patterns)

        def apply(phi: np.ndarray) -> np.ndarray:
            diffs = self._edge_diffs(phi)
            acc = [np.zeros_like(diffs[a]) for a in range(grid.ndim)]
            for s, wgt in zip(self.patterns, weights):
                w = self.corner_share * self.cell_vol * wgt
                for a in range(grid.ndim):
                    G = self._sample(diffs[a], a, s) / self.cell_scale[a]
                    C = 2.0 * w * G / self.cell_scale[a]
                    if self.diag is not None:
                        C = C * self.diag[a]
                    acc[a] += self._scatter(C, a, s)
            nodal = np.zeros(grid.shape)
            for a in range(grid.ndim):
                nodal += _diff_adj(acc[a] / grid.spacing[a], a,
                                   grid.periodic[a], grid.shape)
            return nodal.ravel()

        return apply

    def jacobi_diagonal(self, weights=None) -> np.ndarray:
        """Diagonal of the (frozen-coefficient) quadratic operator."""
        grid = self.grid
        if weights is None:
            weights = [np.ones_like(self.cell_vol)] * len(self.patterns)
        elif isinstance(weights, np.ndarray):
            weights = [weights] * len(self.patterns)
        diag = np.zeros(grid.shape)
        for s, wgt in zip(self.patterns, weights):
            w = self.corner_share * self.cell_vol * wgt
            for a in range(grid.ndim):
                coef = 2.0 * w / (self.cell_scale[a] * grid.spacing[a]) ** 2
                if self.diag is not None:
                    coef = coef * self.diag[a]
                K = self._scatter(coef, a, s)
                diag += _sum_adj(K, a, grid.periodic[a], grid.shape)
        flat = diag.ravel()
        top = float(np.max(flat))
        flat[flat <= 0] = top if top > 0 else 1.0
        return flat

    # -- diagnostics -------------------------------------------------------
    def cell_gradient(self, phi: np.ndarray) -> list[np.ndarray]:
        """Cell-center (corner-averaged) physical gradient components."""
        grid = self.grid
        diffs = self._edge_diffs(phi)
        comps = []
        for a in range(grid.ndim):
            G = diffs[a]
            for b in range(grid.ndim):
                if b != a:
                    G = _avg(G, b, grid.periodic[b])
            comps.append(G / self.cell_scale[a])
        return comps


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------

@dataclass
class NodalConstraints:
    """Fixed nodal values (Dirichlet / plates) and optional zero-mean gauge."""

    fixed: np.ndarray                    # bool (N,)
    values: np.ndarray                   # (N,) used where fixed
    zero_mean: bool = False
    mean_weights: np.ndarray | None = None

    def project_field(self, phi: np.ndarray) -> np.ndarray:
        phi = phi.copy()
        phi[self.fixed] = self.values[self.fixed]
        if self.zero_mean and not np.any(self.fixed):
            phi -= np.average(phi, weights=self.mean_weights)
        return phi

    def project_direction(self, d: np.ndarray) -> np.ndarray:
        d = d.copy()
        d[self.fixed] = 0.0
        if self.zero_mean and not np.any(self.fixed):
            d -= np.average(d, weights=self.mean_weights)
        return d


# ---------------------------------------------------------------------------
# Linear conjugate gradients
# ---------------------------------------------------------------------------

def solve_linear_cg(operator, rhs_phi: np.ndarray, constraints: NodalConstraints,
                    precond_diag: np.ndarray, *, rtol: float = 1e-12,
                    atol: float = 0.0, max_iter: int = 20000):
    """Minimize the quadratic energy whose gradient is operator(phi); the
    boundary data enter through the fixed entries of rhs_phi.

    Returns (phi, iterations, residual_history).
    """
    phi = constraints.project_field(rhs_phi)
    r = constraints.project_direction(-operator(phi))
    M = 1.0 / precond_diag
    z = constraints.project_direction(M * r)
    d = z.copy()
    rz = float(np.dot(r, z))
    r0 = math.sqrt(max(float(np.dot(r, r)), 0.0))
    history = [r0]
    if r0 == 0:
        return phi, 0, history
    tol = max(rtol * r0, atol)
    for it in range(1, max_iter + 1):
        Ad = constraints.project_direction(operator(d))
        dAd = float(np.dot(d, Ad))
        if dAd <= 0:
            break
        alpha = rz / dAd
        phi = phi + alpha * d
        r = r - alpha * Ad
        rn = math.sqrt(float(np.dot(r, r)))
        history.append(rn)
        if rn <= tol:
            return constraints.project_field(phi), it, history
        z = constraints.project_direction(M * r)
        rz_new = float(np.dot(r, z))
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise NonConvergence(f"linear CG stalled after {len(history) - 1} iterations "
                         f"(residual {history[-1]:.3e}, target {tol:.3e})")


# ---------------------------------------------------------------------------
# Nonlinear conjugate gradients
# ---------------------------------------------------------------------------

@dataclass
class MinimizeResult:
    phi: np.ndarray
    iterations: int
    energy_history: list[float]
    grad_norm: float
    converged: bool


def minimize_ncg(energy: CellEnergy, phi0: np.ndarray,
                 constraints: NodalConstraints, *, tol_rel: float = 1e-8,
                 max_iter: int = 100000, precond: np.ndarray | None = None) -> MinimizeResult:
    """Polak-Ribiere NCG with backtracking Armijo line search.

    Stops when the projected-gradient sup-norm falls below tol_rel times its
    initial value.  The energy history records accepted steps only and is
    nonincreasing by construction.
    """
    phi = constraints.project_field(np.asarray(phi0, dtype=float))
    M = 1.0 / (precond if precond is not None else energy.jacobi_diagonal())

    value, grad = energy.value_and_grad(phi)
    grad = constraints.project_direction(grad)
    g0 = float(np.max(np.abs(grad)))
    target = tol_rel * g0
    history = [value]
    if g0 == 0:
        return MinimizeResult(phi, 0, history, 0.0, True)

    z = constraints.project_direction(M * grad)
    d = -z
    gz = float(np.dot(grad, z))
    step = 1.0
    for it in range(1, max_iter + 1):
        slope = float(np.dot(grad, d))
        if slope >= 0:
            d = -z
            slope = -gz
        t = step * 2.0
        for _ in range(60):
            trial = constraints.project_field(phi + t * d)
            v = energy.value(trial)
            if v <= value + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            return MinimizeResult(phi, it, history, float(np.max(np.abs(grad))),
                                  False)
        step = t
        phi = constraints.project_field(phi + t * d)
        value_new, grad_new = energy.value_and_grad(phi)
        grad_new = constraints.project_direction(grad_new)
        history.append(value_new)
        gn = float(np.max(np.abs(grad_new)))
        if gn <= target:
            return MinimizeResult(phi, it, history, gn, True)
        z_new = constraints.project_direction(M * grad_new)
        gz_new = float(np.dot(grad_new, z_new))
        beta = max(0.0, float(np.dot(grad_new - grad, z_new)) / gz) if gz > 0 else 0.0
        d = -z_new + beta * d
        grad, z, gz, value = grad_new, z_new, gz_new, value_new
    return MinimizeResult(phi, max_iter, history, float(np.max(np.abs(grad))),
                          False)


# ---------------------------------------------------------------------------
# Damped lagged-coefficient (Picard) solver
# ---------------------------------------------------------------------------

def solve_lagged(energy: CellEnergy, phi0: np.ndarray,
                 constraints: NodalConstraints, *, outer: int = 60,
                 inner_rtol: float = 1e-12, outer_tol: float = 1e-10,
                 max_inner: int = 20000) -> MinimizeResult:
    """Fixed-point iteration: freeze the corner diffusivities and solve the
    resulting linear problem by CG; damp when the update stalls.

    The fixed point solves the regularized Euler-Lagrange equation; for
    p = 2 a single linear solve suffices.
    """
    phi = constraints.project_field(np.asarray(phi0, dtype=float))
    p = energy.p
    history = [energy.value(phi)]
    prev_change = math.inf

    for it in range(1, outer + 1):
        # anneal the contrast cap: early sweeps stay well conditioned, late
        # sweeps solve the untouched lagged equation
        floor_rel = max(1e-12, 10.0 ** -(2 + it))
        weights = energy.corner_weights(phi, floor_rel=floor_rel)
        op = energy.quadratic_operator(weights)
        diag = energy.jacobi_diagonal(weights)
        rtol_it = inner_rtol if abs(p - 2.0) < 1e-14 else \
            max(inner_rtol, 1e-6 * 0.01 ** (it - 1))
        phi_new, inner_its, _ = solve_linear_cg(op, phi, constraints, diag,
                                                rtol=rtol_it,
                                                max_iter=max_inner)
        change = float(np.max(np.abs(phi_new - phi)))
        scale = float(np.max(np.abs(phi_new))) or 1.0
        # undamped updates can settle into a two-cycle; average it out
        if change >= 0.5 * prev_change and it > 1:
            phi = constraints.project_field(0.5 * (phi + phi_new))
        else:
            phi = phi_new
        prev_change = change
        history.append(energy.value(phi))
        if abs(p - 2.0) < 1e-14 or change <= outer_tol * scale:
            _, grad = energy.value_and_grad(phi)
            gn = float(np.max(np.abs(constraints.project_direction(grad))))
            return MinimizeResult(phi, it, history, gn, True)
    raise NonConvergence(f"lagged iteration did not settle in {outer} sweeps")
