"""Structure conditions, scalar form pairs, and A-harmonic boundary problems.

The toolkit realizes the weakly-closed form machinery in the scalar
quasilinear case: the primitive form is a function f, its differential is
the gradient field w = grad f, and the complementary form is the flux
theta = A(m, grad f) of a structure field A obeying the coercivity and
growth bounds

    nu1 |xi|^p <= <xi, A(m, xi)>,      |A(m, xi)| <= nu2 |xi|^(p-1).

A pair (w, theta) is of the second structure class (WT2) when those bounds
hold along w; it is of the first class (WT1) when nu0 |theta|^q <= <w, theta>
with q the conjugate exponent.  The second class embeds into the first with
the explicit constant nu0 = nu1 * nu2^(-q), which is verified here by direct
sampling.

The module also provides the discrete integration-by-parts identity for a
compactly supported flux field, weak A-harmonic solves under Dirichlet /
zero-Neumann nodal conditions, and the compact-manifold maximum principle
check (any solution with zero data is constant, so its flux vanishes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domains import (
    CUT,
    INTERIOR,
    MANIFOLD_BOUNDARY,
    DiscretizedDomain,
    node_divergence,
    node_gradient,
    volume_integral,
)
from .errors import InvalidDomain, NonConvergence, SupportTouchesBoundary
from .solvers import CellEnergy, NodalConstraints, minimize_ncg, solve_lagged, \
    solve_linear_cg

PLAPLACE = "plaplace"
ANISOTROPIC = "anisotropic"
CUSTOM = "custom"


# ---------------------------------------------------------------------------
# Structure fields
# ---------------------------------------------------------------------------

@dataclass
class StructureField:
    """Flux rule A(m, xi) with exponent p and structure constants.

    Presets:

    * ``plaplace``: A = |xi|^(p-2) xi, nu1 = nu2 = 1 (the bounds hold with
      equality).
    * ``anisotropic``: A = (xi . D xi)^((p-2)/2) D xi for diagonal weights
      D(m); nu1 = min(D)^(p/2), nu2 = max(D)^(p/2).  This A is the gradient
      of (xi . D xi)^(p/2) / p, so the associated equation is variational.
    * ``custom``: caller-supplied rule with claimed constants (checked, not
      derived).
    """

    p: float
    preset: str = PLAPLACE
    weights: np.ndarray | None = None     # (N, d) diagonal weights per node
    rule: Callable | None = None          # custom: (coords, xi) -> flux
    nu1: float = 1.0
    nu2: float = 1.0

    def __post_init__(self):
        if self.p <= 1:
            raise InvalidDomain("p must exceed 1")
        if self.preset == ANISOTROPIC:
            if self.weights is None:
                raise InvalidDomain("anisotropic preset needs diagonal weights")
            w = np.asarray(self.weights, dtype=float)
            if np.any(w <= 0):
                raise InvalidDomain("diagonal weights must be positive")
            self.weights = w
            self.nu1 = float(np.min(w)) ** (self.p / 2)
            self.nu2 = float(np.max(w)) ** (self.p / 2)
        elif self.preset == PLAPLACE:
            self.nu1 = 1.0
            self.nu2 = 1.0
        elif self.preset == CUSTOM:
            if self.rule is None:
                raise InvalidDomain("custom preset needs a rule")
        else:
            raise InvalidDomain(f"unknown preset '{self.preset}'")

    @property
    def q(self) -> float:
        return self.p / (self.p - 1)

    @property
    def nu0(self) -> float:
        return wt2_implies_wt1_constant(self.nu1, self.nu2, self.p)

    def apply(self, coords: np.ndarray, xi: np.ndarray,
              delta: float = 0.0, index: np.ndarray | None = None) -> np.ndarray:
        """Evaluate the flux A(m, xi) rowwise; delta regularizes |xi| = 0.

        ``index`` selects the nodes the rows of xi live at (needed when the
        anisotropic weights vary per node and xi is a sample)."""
        xi = np.asarray(xi, dtype=float)
        if self.preset == PLAPLACE:
            s = np.sum(xi * xi, axis=1) + delta * delta
            return np.power(s, (self.p - 2) / 2.0)[:, None] * xi
        if self.preset == ANISOTROPIC:
            w = self.weights if index is None else self.weights[index]
            s = np.sum(w * xi * xi, axis=1) + delta * delta
            return np.power(s, (self.p - 2) / 2.0)[:, None] * (w * xi)
        return self.rule(coords, xi)

    def describe(self) -> dict:
        return {"preset": self.preset, "p": self.p,
                "nu1": self.nu1, "nu2": self.nu2}


def wt2_implies_wt1_constant(nu1: float, nu2: float, p: float) -> float:
    """Constant nu0 = nu1 * nu2^(-q) with which every second-class pair is a
    first-class pair: |theta|^q <= nu2^q |w|^p <= (nu2^q / nu1) <w, theta>."""
    if nu1 <= 0 or nu2 <= 0 or p <= 1:
        raise InvalidDomain("need nu1, nu2 > 0 and p > 1")
    q = p / (p - 1)
    return nu1 * nu2 ** (-q)


# ---------------------------------------------------------------------------
# Scalar form pairs
# ---------------------------------------------------------------------------

@dataclass
class ScalarFormPair:
    """A degree-zero form f with its differential w = grad f and the
    complementary flux theta = A(m, grad f).

    ``w`` is always the discrete gradient of ``f`` on the grid (exactness is
    by construction).  ``theta`` is weakly closed exactly when f solves the
    A-harmonic equation.
    """

    grid: DiscretizedDomain
    f: np.ndarray
    w: np.ndarray
    theta: np.ndarray
    p: float
    structure: StructureField | None = None

    @classmethod
    def from_field(cls, grid: DiscretizedDomain, f: np.ndarray,
                   sf: StructureField) -> "ScalarFormPair":
        f = np.asarray(f, dtype=float)
        w = node_gradient(grid, f)
        theta = sf.apply(grid.coords, w)
        return cls(grid=grid, f=f, w=w, theta=theta, p=sf.p, structure=sf)

    def pairing(self) -> np.ndarray:
        """<w, theta> per node."""
        return np.sum(self.w * self.theta, axis=1)

    def w_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.w * self.w, axis=1))

    def theta_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.theta * self.theta, axis=1))


# ---------------------------------------------------------------------------
# Structure checks
# ---------------------------------------------------------------------------

@dataclass
class MarginReport:
    """Worst-case margins of pointwise structure inequalities (normalized by
    the relevant power of the field magnitude)."""

    margins: dict[str, float]
    passed: bool
    witness: dict = field(default_factory=dict)

    def describe(self) -> dict:
        return {"margins": dict(self.margins), "passed": self.passed,
                "witness": dict(self.witness)}


def check_structure(sf: StructureField, grid: DiscretizedDomain,
                    samples: int = 256, *, seed: int = 0,
                    tol: float = 1e-9) -> MarginReport:
    """Sample the coercivity and growth bounds over random (node, xi) draws.

    xi magnitudes span scales log-uniformly in [1e-3, 1e3]; failures return
    the located witness (node index, xi)."""
    if samples < 1:
        raise InvalidDomain("need at least one sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, grid.n_nodes, size=samples)
    direction = rng.normal(size=(samples, grid.ndim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    mag = 10.0 ** rng.uniform(-3, 3, size=samples)
    xi = direction * mag[:, None]

    A = sf.apply(grid.coords[idx], xi, index=idx)
    pair = np.sum(xi * A, axis=1)
    xin = np.linalg.norm(xi, axis=1)
    An = np.linalg.norm(A, axis=1)

    coercivity = (pair - sf.nu1 * xin ** sf.p) / xin ** sf.p
    growth = (sf.nu2 * xin ** (sf.p - 1) - An) / xin ** (sf.p - 1)
    i1, i2 = int(np.argmin(coercivity)), int(np.argmin(growth))
    margins = {"coercivity": float(coercivity[i1]), "growth": float(growth[i2])}
    passed = margins["coercivity"] >= -tol and margins["growth"] >= -tol
    witness = {}
    if not passed:
        worst = i1 if coercivity[i1] <= growth[i2] else i2
        witness = {"node": int(idx[worst]), "xi": xi[worst].tolist(),
                   "inequality": "coercivity" if worst == i1 else "growth"}
    return MarginReport(margins=margins, passed=passed, witness=witness)


def _normalized_margin(values: np.ndarray, scale: np.ndarray) -> float:
    s = np.maximum(scale, 1e-300)
    return float(np.min(values / s))


def check_wt1(pair: ScalarFormPair, nu0: float, p: float,
              *, tol: float = 1e-9) -> MarginReport:
    """Per-node first-class inequality nu0 |theta|^q <= <w, theta>."""
    q = p / (p - 1)
    lhs = nu0 * pair.theta_norm() ** q
    rhs = pair.pairing()
    scale = np.maximum(pair.theta_norm() ** q, pair.w_norm() ** p)
    margin = _normalized_margin(rhs - lhs, scale)
    passed = margin >= -tol
    witness = {} if passed else {"node": int(np.argmin((rhs - lhs) / np.maximum(scale, 1e-300)))}
    return MarginReport(margins={"first_class": margin}, passed=passed,
                        witness=witness)


def check_wt2(pair: ScalarFormPair, nu1: float, nu2: float, p: float,
              *, tol: float = 1e-9) -> MarginReport:
    """Per-node second-class inequalities: nu1 |w|^p <= <w, theta> and
    |theta| <= nu2 |w|^(p-1)."""
    wn = pair.w_norm()
    tn = pair.theta_norm()
    pr = pair.pairing()
    scale_low = np.maximum(wn ** p, 1e-300)
    low = _normalized_margin(pr - nu1 * wn ** p, scale_low)
    scale_up = np.maximum(wn ** (p - 1), 1e-300)
    up = _normalized_margin(nu2 * wn ** (p - 1) - tn, scale_up)
    passed = low >= -tol and up >= -tol
    witness = {}
    if not passed:
        which = "lower" if low <= up else "upper"
        fld = (pr - nu1 * wn ** p) / scale_low if which == "lower" else \
            (nu2 * wn ** (p - 1) - tn) / scale_up
        witness = {"node": int(np.argmin(fld)), "inequality": which}
    return MarginReport(margins={"lower": low, "upper": up}, passed=passed,
                        witness=witness)


# ---------------------------------------------------------------------------
# Discrete integration by parts
# ---------------------------------------------------------------------------

def discrete_stokes_check(alpha: np.ndarray, beta: np.ndarray,
                          grid: DiscretizedDomain, *,
                          margin_cells: int = 2) -> float:
    """Defect of the integration-by-parts identity for a scalar field alpha
    and a compactly supported flux field beta:

        | int <grad alpha, beta> dV  +  int alpha div beta dV |.

    The gradient pairing is assembled with the cell-centered (variational)
    stencil and the divergence term with the node-centered flux stencil, so
    the defect measures the mutual consistency of the toolkit's two discrete
    realizations; it converges to zero at second order for smooth inputs.
    (Pairing both terms with the same node stencil telescopes to zero
    identically on uniform tensor grids, which verifies nothing.)

    beta must vanish within ``margin_cells`` cells of cut/boundary nodes.
    """
    beta = np.asarray(beta, dtype=float)
    support = np.any(np.abs(beta) > 0, axis=1)
    near = _near_noninterior(grid, margin_cells)
    if np.any(support & near):
        raise SupportTouchesBoundary(
            "flux field is nonzero near boundary/cut nodes")

    from .solvers import CellEnergy, _to_cells
    energy = CellEnergy(grid, p=2.0)
    grad_cells = energy.cell_gradient(np.asarray(alpha, dtype=float))
    pairing = np.zeros_like(energy.cell_vol)
    for a in range(grid.ndim):
        pairing += grad_cells[a] * _to_cells(grid, beta[:, a])
    term1 = float(np.sum(pairing * energy.cell_vol))

    term2 = volume_integral(grid, np.asarray(alpha, dtype=float) *
                            node_divergence(grid, beta))
    return abs(term1 + term2)


def _near_noninterior(grid: DiscretizedDomain, margin: int) -> np.ndarray:
    bad = grid.reshape(grid.boundary_tag != INTERIOR).copy()
    out = bad.copy()
    for _ in range(margin):
        grown = out.copy()
        for axis in range(grid.ndim):
            if grid.periodic[axis]:
                grown |= np.roll(out, 1, axis=axis) | np.roll(out, -1, axis=axis)
            else:
                sl_lo = [slice(None)] * grid.ndim
                sl_hi = [slice(None)] * grid.ndim
                sl_lo[axis] = slice(None, -1)
                sl_hi[axis] = slice(1, None)
                grown[tuple(sl_lo)] |= out[tuple(sl_hi)]
                grown[tuple(sl_hi)] |= out[tuple(sl_lo)]
        out = grown
    return out.ravel()


# ---------------------------------------------------------------------------
# A-harmonic solves
# ---------------------------------------------------------------------------

@dataclass
class AHarmonicSolution:
    f: np.ndarray
    residual_max: float
    gauge: str
    iterations: int
    boundary_flux_max: float

    def describe(self) -> dict:
        return {"residual_max": self.residual_max, "gauge": self.gauge,
                "iterations": self.iterations,
                "boundary_flux_max": self.boundary_flux_max}


def solve_A_harmonic(grid: DiscretizedDomain, sf: StructureField,
                     bc: np.ndarray, *, delta: float | None = None,
                     rtol: float = 1e-12,
                     init: np.ndarray | None = None) -> AHarmonicSolution:
    """Weak solution of div A(m, grad f) = 0 under nodal boundary conditions.

    ``bc`` holds a finite Dirichlet value per constrained node and NaN for
    free (zero-Neumann) nodes.  When every node is free the constant mode is
    fixed by zero volume-mean normalization (reported as the gauge).

    The residual is the weak-form divergence density at interior nodes; the
    returned boundary flux is the largest normal flux pairing over untagged
    regular boundary faces (small for honest zero-Neumann solutions).
    """
    bc = np.asarray(bc, dtype=float)
    fixed = np.isfinite(bc)
    if sf.preset == CUSTOM:
        raise InvalidDomain("solver supports the variational presets only")

    gauge = "dirichlet"
    cons = NodalConstraints(fixed=fixed, values=np.where(fixed, bc, 0.0))
    if not np.any(fixed):
        gauge = "zero_mean"
        cons = NodalConstraints(fixed=fixed, values=np.zeros(grid.n_nodes),
                                zero_mean=True, mean_weights=grid.vol)

    if delta is None:
        delta = 1e-8
    diag_weights = sf.weights if sf.preset == ANISOTROPIC else None
    energy = CellEnergy(grid, p=sf.p, delta=delta, diag_weights=diag_weights)

    if init is not None:
        start = np.asarray(init, dtype=float)
    elif np.any(fixed):
        start = np.where(fixed, bc, float(np.mean(bc[fixed])))
    else:
        start = np.zeros(grid.n_nodes)
    res = solve_lagged(energy, start, cons, outer=80, inner_rtol=rtol,
                       outer_tol=1e-11)

    _, grad = energy.value_and_grad(res.phi)
    weak = np.abs(grad) / np.maximum(grid.vol, 1e-300)
    residual_max = float(np.max(weak[grid.interior])) if np.any(grid.interior) else 0.0

    flux = sf.apply(grid.coords, node_gradient(grid, res.phi), delta=delta)
    boundary_flux = _boundary_flux_max(grid, flux, exclude_fixed=fixed)
    return AHarmonicSolution(f=res.phi, residual_max=residual_max, gauge=gauge,
                             iterations=res.iterations,
                             boundary_flux_max=boundary_flux)


def _boundary_flux_max(grid: DiscretizedDomain, flux: np.ndarray,
                       exclude_fixed: np.ndarray | None = None) -> float:
    """Max |<A, normal>| over regular (single-face) non-periodic boundary
    nodes that are not Dirichlet-constrained."""
    face_count = np.zeros(grid.shape, dtype=np.int8)
    faces = []
    for axis in range(grid.ndim):
        if grid.periodic[axis]:
            continue
        for side in (0, -1):
            index = [slice(None)] * grid.ndim
            index[axis] = side
            f = np.zeros(grid.shape, dtype=bool)
            f[tuple(index)] = True
            face_count += f
            faces.append((axis, f))
    regular = (face_count == 1).ravel()
    worst = 0.0
    for axis, f in faces:
        sel = f.ravel() & regular
        if exclude_fixed is not None:
            sel &= ~exclude_fixed
        if np.any(sel):
            worst = max(worst, float(np.max(np.abs(flux[sel, axis]))))
    return worst


# ---------------------------------------------------------------------------
# Maximum principle on compact grids
# ---------------------------------------------------------------------------

@dataclass
class MaxPrincipleReport:
    bc_kind: str
    oscillation: float
    max_theta: float
    solution: np.ndarray

    def describe(self) -> dict:
        return {"bc_kind": self.bc_kind, "oscillation": self.oscillation,
                "max_theta": self.max_theta}


def maximum_principle_check(grid: DiscretizedDomain, sf: StructureField,
                            bc_kind: str = "neumann") -> MaxPrincipleReport:
    """On a compact grid (no cut nodes) solve the zero-data problem of the
    requested kind and report the flux magnitude witness.

    Any solution with zero Dirichlet data is the zero field; any zero-Neumann
    solution is constant.  Either way the complementary flux vanishes, which
    is what the report certifies.
    """
    if np.any(grid.tag_mask(CUT)):
        raise InvalidDomain("maximum principle check requires a compact grid "
                            "(no cut nodes)")
    if not np.any(grid.tag_mask(MANIFOLD_BOUNDARY)):
        raise InvalidDomain("compact grid must have nonempty boundary")

    bc = np.full(grid.n_nodes, np.nan)
    if bc_kind == "dirichlet":
        bc[grid.tag_mask(MANIFOLD_BOUNDARY)] = 0.0
    elif bc_kind != "neumann":
        raise InvalidDomain("bc_kind must be 'dirichlet' or 'neumann'")

    # start away from the expected constant so the solve is exercised
    x = grid.coords
    spans = np.array([float(a[-1] - a[0]) or 1.0 for a in grid.axes])
    xn = (x - x.min(axis=0)) / spans
    start = np.sin(2 * math.pi * xn[:, 0]) * np.cos(math.pi * xn[:, -1]) + 0.5 * xn[:, 0]
    if bc_kind == "dirichlet":
        start = np.where(np.isfinite(bc), bc, start)
    sol = solve_A_harmonic(grid, sf, bc, init=start)
    f = sol.f
    theta = sf.apply(grid.coords, node_gradient(grid, f))
    return MaxPrincipleReport(bc_kind=bc_kind,
                              oscillation=float(f.max() - f.min()),
                              max_theta=float(np.max(np.sqrt(np.sum(theta * theta, axis=1)))),
                              solution=f)


# ---------------------------------------------------------------------------
# Random pair generation (seeded, for property suites and the CLI)
# ---------------------------------------------------------------------------

def random_scalar_field(grid: DiscretizedDomain, rng: np.random.Generator,
                        terms: int = 3) -> np.ndarray:
    """Random low-order trigonometric/polynomial field, O(1) normalized."""
    x = grid.coords
    spans = np.array([float(a[-1] - a[0]) or 1.0 for a in grid.axes])
    xn = (x - x.min(axis=0)) / spans  # normalized to [0, 1] per axis
    f = np.zeros(grid.n_nodes)
    for _ in range(terms):
        amp = rng.uniform(0.3, 1.0)
        freq = rng.integers(1, 4, size=grid.ndim)
        phase = rng.uniform(0, 2 * math.pi, size=grid.ndim)
        wave = np.ones(grid.n_nodes)
        for a in range(grid.ndim):
            wave = wave * np.sin(2 * math.pi * freq[a] * xn[:, a] + phase[a])
        f += amp * wave
    coeffs = rng.normal(size=grid.ndim)
    f += xn @ coeffs
    scale = float(np.max(np.abs(f))) or 1.0
    return f / scale


def random_pair(grid: DiscretizedDomain, sf: StructureField,
                rng: np.random.Generator) -> ScalarFormPair:
    return ScalarFormPair.from_field(grid, random_scalar_field(grid, rng), sf)
