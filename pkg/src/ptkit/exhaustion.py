"""Special exhaustion functions: closed-form catalog and numerical verification.

An exhaustion function h maps the manifold onto (0, h0) so that its sublevel
sets (h-balls) exhaust the manifold toward the ideal boundary.  It is
*special* for exponent p when, outside a compact exceptional set, it solves
the p-Laplace equation and the flux of |grad h|^(p-2) grad h through its
level sets (h-spheres) is constant.  A sufficient boundary condition is that
the flux field is orthogonal to the manifold boundary.

The catalog covers the model domains:

* k-cylinder slab R^k x Delta: log(d_k / r1) for p = k, and the power
  d_k^((p-k)/(p-1)) for p > k (for p = n this is the familiar
  d_k^((n-k)/(n-1))).  For p < k the same radial equation is integrated to
  the increasing primitive with a finite supremum value, which places the
  slab in the hyperbolic regime.
* cone over U subset of the sphere: log(r / r1) for p = n.
* warped product with metric alpha^2 dr^2 + beta^2 dl^2: the radial primitive
  h(r) = int_{r1}^{r} alpha(t) / beta(t)^((n-1)/(p-1)) dt; h0 is the value of
  the improper integral, with divergence/convergence certified numerically.
* Cartesian products A x R^k: the same radial profiles lifted through the
  projection onto the free factor.

Verification is fully discrete: residual of the p-Laplace operator at
interior nodes, flux constancy across sampled noncritical levels, and the
boundary orthogonality pairing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .domains import (
    CUT,
    INTERIOR,
    MANIFOLD_BOUNDARY,
    CONE,
    EUCLIDEAN,
    KCYLINDER,
    PRODUCT,
    WARPED,
    AngularDomain,
    CrossSection,
    DiscretizedDomain,
    ModelDomain,
    RadialCoefficient,
    level_shell,
    node_divergence,
    node_gradient,
    sphere_area,
)
from .errors import (
    DegenerateGradient,
    InvalidDomain,
    IndeterminateTail,
    LevelOutOfRange,
    NoCatalogEntry,
)

PARABOLIC = "parabolic"
HYPERBOLIC = "hyperbolic"

# |grad| -> (|grad|^2 + delta^2)^(1/2) inside divergence assembly only
_FLUX_DELTA = 1e-8


# ---------------------------------------------------------------------------
# Exhaustion function objects
# ---------------------------------------------------------------------------

@dataclass
class ExhaustionFunction:
    """Closed-form exhaustion function h = profile(rho(x)).

    ``rho`` is the exhaustion coordinate of the adapted grid: the first axis
    for radial charts, its absolute value for two-sided axial charts.  The
    profile is strictly increasing; ``h0`` is the supremum of h as the
    exhausted end is approached (``inf`` in the parabolic regime).
    ``exceptional_radius`` bounds the compact set where the gradient may
    degenerate; verification excludes a one-cell neighbourhood of it.
    """

    family: str
    params: dict
    h0: float
    profile: Callable[[np.ndarray], np.ndarray]
    profile_derivative: Callable[[np.ndarray], np.ndarray]
    exceptional_radius: float = 0.0

    def radius(self, grid: DiscretizedDomain) -> np.ndarray:
        u0 = grid.coords[:, 0]
        if grid.axis_roles[0] == "axial":
            return np.abs(u0)
        return u0

    def evaluate(self, grid: DiscretizedDomain) -> np.ndarray:
        return self.profile(self.radius(grid))

    def gradient(self, grid: DiscretizedDomain) -> np.ndarray:
        """Physical gradient components on the adapted grid."""
        rho = self.radius(grid)
        dphi = self.profile_derivative(rho)
        g = np.zeros((grid.n_nodes, grid.ndim))
        direction = np.sign(grid.coords[:, 0]) if grid.axis_roles[0] == "axial" \
            else np.ones(grid.n_nodes)
        g[:, 0] = dphi * direction / grid.scale[:, 0]
        return g

    def grad_norm(self, grid: DiscretizedDomain) -> np.ndarray:
        rho = self.radius(grid)
        return np.abs(self.profile_derivative(rho)) / grid.scale[:, 0]

    def describe(self) -> dict:
        return {"family": self.family, "h0": self.h0, **self.params}


def _as_field(h, grid: DiscretizedDomain) -> np.ndarray:
    if isinstance(h, ExhaustionFunction):
        return h.evaluate(grid)
    return np.asarray(h, dtype=float)


# ---------------------------------------------------------------------------
# Radial primitives
# ---------------------------------------------------------------------------

def _log_profile(r1: float):
    return (lambda r: np.log(r / r1)), (lambda r: 1.0 / r)


def _power_profile(e: float):
    return (lambda r: np.power(r, e)), (lambda r: e * np.power(r, e - 1.0))


def _primitive_profile(e: float, r1: float):
    # int_{r1}^{r} t^(e-1) e dt / e ... written directly: e < 0 here
    c = 1.0 / e
    base = r1 ** e

    def phi(r):
        return c * (np.power(r, e) - base)

    def dphi(r):
        return np.power(r, e - 1.0)

    return phi, dphi


def _gauss_cumulative(fn, points: np.ndarray) -> np.ndarray:
    """Cumulative integral of fn along increasing sample points
    (5-point Gauss-Legendre per sub-interval)."""
    xg, wg = np.polynomial.legendre.leggauss(5)
    a = points[:-1]
    b = points[1:]
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    vals = np.zeros_like(a)
    for x, w in zip(xg, wg):
        vals += w * fn(mid + half * x)
    segments = vals * half
    return np.concatenate([[0.0], np.cumsum(segments)])


# ---------------------------------------------------------------------------
# Parabolicity of warped products
# ---------------------------------------------------------------------------

def warped_parabolicity(alpha: RadialCoefficient, beta: RadialCoefficient,
                        n: int, p: float, r1: float, r2: float = math.inf,
                        *, budget: int = 40):
    """Classify the warped product end by the radial integral of
    alpha / beta^((n-1)/(p-1)) and return (verdict, h, h0).

    Divergence is certified when the integral keeps growing by more than 1%
    per doubling of the upper limit at the budget end; convergence when the
    tail increment is negligible or the increments contract geometrically
    (the geometric tail is then added to h0).  Anything else raises
    IndeterminateTail.
    """
    if p <= 1:
        raise InvalidDomain("p must exceed 1")
    q = (n - 1) / (p - 1)

    def integrand(t):
        return alpha(t) / beta(t) ** q

    if math.isfinite(r2):
        ks = np.arange(1, 61)
        points = np.concatenate([[r1], r2 - (r2 - r1) * 0.5 ** ks])
    else:
        if r1 <= 0:
            raise InvalidDomain("infinite upper limit requires r1 > 0")
        points = r1 * 2.0 ** np.arange(0, budget + 1)

    increments = np.array([quad(integrand, a, b, limit=200)[0]
                           for a, b in zip(points[:-1], points[1:])])
    cumulative = np.cumsum(increments)
    total = cumulative[-1]

    rel_growth = increments[-3:] / np.maximum(cumulative[-3:], 1e-300)
    ratios = increments[1:] / np.maximum(increments[:-1], 1e-300)
    tail_ratios = ratios[-5:]

    if np.all(rel_growth > 0.01):
        verdict, h0 = PARABOLIC, math.inf
    elif increments[-1] < 1e-10:
        verdict, h0 = HYPERBOLIC, float(total)
    elif np.max(tail_ratios) <= 0.999:
        rho = float(np.clip(np.mean(tail_ratios), 0.0, 0.999))
        verdict, h0 = HYPERBOLIC, float(total + increments[-1] * rho / (1 - rho))
    elif np.min(tail_ratios) >= 1.0 - 1e-9:
        verdict, h0 = PARABOLIC, math.inf
    else:
        raise IndeterminateTail(
            "radial integral neither certified divergent nor convergent "
            f"within budget (last increments {increments[-3:]})")

    grid_points = None

    def phi(r):
        r = np.asarray(r, dtype=float)
        pts = np.unique(np.concatenate([[r1], np.atleast_1d(r)]))
        cum = _gauss_cumulative(integrand, pts)
        return np.interp(r, pts, cum)

    def dphi(r):
        return integrand(np.asarray(r, dtype=float))

    exh = ExhaustionFunction(
        family="WarpedIntegral",
        params={"n": n, "p": p, "r1": r1, "r2": r2,
                "alpha": alpha.describe(), "beta": beta.describe()},
        h0=h0, profile=phi, profile_derivative=dphi,
        exceptional_radius=r1)
    return verdict, exh, h0


# ---------------------------------------------------------------------------
# The catalog
# ---------------------------------------------------------------------------

def _slab_profiles(k: int, p: float, r1: float, n: int, family_power: str,
                   exponent: float | None):
    """Radial exhaustion profiles for k unbounded directions."""
    r1_eff = r1 if r1 > 0 else 1.0
    if abs(p - k) < 1e-12:
        phi, dphi = _log_profile(r1_eff)
        return "LogDk", phi, dphi, math.inf
    e = exponent if exponent is not None else (p - k) / (p - 1)
    if e > 0:
        phi, dphi = _power_profile(e)
        return family_power, phi, dphi, math.inf
    phi, dphi = _primitive_profile(e, r1_eff)
    h0 = -(r1_eff ** e) / e
    return family_power, phi, dphi, float(h0)


def make_special_exhaustion(domain: ModelDomain, p: float, *,
                            exponent: float | None = None) -> ExhaustionFunction:
    """Return the catalog special exhaustion function for (domain, p).

    ``exponent`` overrides the power-law exponent of the cylinder/product
    families (the default is derived from the radial equation); the
    verification operations report whether an override still solves the
    interior equation.

    Raises NoCatalogEntry for pairs outside the catalog (for instance a cone
    with p != n, which should be posed as a warped product instead).
    """
    if p <= 1:
        raise InvalidDomain("p must exceed 1")
    domain.validate()

    if domain.kind == KCYLINDER:
        fam = "CylinderPower" if abs(p - domain.n) < 1e-12 else "PowerDk"
        family, phi, dphi, h0 = _slab_profiles(domain.k, p, domain.r1,
                                               domain.n, fam, exponent)
        return ExhaustionFunction(
            family=family,
            params={"n": domain.n, "k": domain.k, "p": p, "r1": domain.r1,
                    "exponent": (exponent if exponent is not None
                                 else None if family == "LogDk"
                                 else (p - domain.k) / (p - 1))},
            h0=h0, profile=phi, profile_derivative=dphi,
            exceptional_radius=max(domain.r1, 0.0))

    if domain.kind == CONE:
        if abs(p - domain.n) > 1e-12:
            # flat cone = warped product with alpha = 1, beta = r
            verdict, exh, h0 = warped_parabolicity(
                RadialCoefficient.const(1.0), RadialCoefficient.power(1.0),
                domain.n, p, domain.r1, domain.r2)
            exh.params["angular"] = domain.angular.describe()
            return exh
        phi, dphi = _log_profile(domain.r1)
        return ExhaustionFunction(
            family="ConeLog",
            params={"n": domain.n, "p": p, "r1": domain.r1,
                    "angular": domain.angular.describe()},
            h0=math.inf, profile=phi, profile_derivative=dphi,
            exceptional_radius=domain.r1)

    if domain.kind in (WARPED, EUCLIDEAN):
        r1 = domain.r1 if domain.r1 > 0 else 1.0
        verdict, exh, h0 = warped_parabolicity(domain.alpha, domain.beta,
                                               domain.n, p, r1, domain.r2)
        return exh

    if domain.kind == PRODUCT:
        family, phi, dphi, h0 = _slab_profiles(domain.k, p, 0.0, domain.n,
                                               "ProductLift", exponent)
        return ExhaustionFunction(
            family="ProductLift",
            params={"n": domain.n, "k": domain.k, "p": p,
                    "compact": domain.base.describe(),
                    "exponent": (exponent if exponent is not None
                                 else None if family == "LogDk"
                                 else (p - domain.k) / (p - 1))},
            h0=h0, profile=phi, profile_derivative=dphi,
            exceptional_radius=0.0)

    raise NoCatalogEntry(f"no catalog entry for domain kind '{domain.kind}'")


def analytic_flux_profile(domain: ModelDomain, exh: ExhaustionFunction,
                          p: float, rho: np.ndarray) -> np.ndarray:
    """Flux of |grad h|^(p-2) grad h through the level {rho = const},
    evaluated from the radial profile and the level-set measure.

    Used as the grid-free witness for type classification; on a grid the
    shell quadrature of ``flux_through_sphere`` measures the same quantity.
    """
    rho = np.asarray(rho, dtype=float)
    dphi = exh.profile_derivative(rho)
    if domain.kind == KCYLINDER:
        sigma = sphere_area(domain.k) * domain.base.volume()
        return dphi ** (p - 1) * rho ** (domain.k - 1) * sigma
    if domain.kind == PRODUCT:
        sigma = sphere_area(domain.k) * domain.base.volume()
        return dphi ** (p - 1) * rho ** (domain.k - 1) * sigma
    if domain.kind in (CONE, WARPED, EUCLIDEAN):
        sigma = domain.angular.measure(domain.n)
        grad = dphi / domain.alpha(rho)
        return grad ** (p - 1) * domain.beta(rho) ** (domain.n - 1) * sigma
    raise NoCatalogEntry(f"no flux profile for domain kind '{domain.kind}'")


# ---------------------------------------------------------------------------
# Verification operations
# ---------------------------------------------------------------------------

@dataclass
class ResidualReport:
    field: np.ndarray
    max_abs: float
    relative: float
    excluded: int
    scale: float


def _exclusion_mask(h, grid: DiscretizedDomain) -> np.ndarray:
    """Interior nodes at least one cell away from the exceptional set."""
    mask = grid.interior.copy()
    if isinstance(h, ExhaustionFunction):
        rho = h.radius(grid)
        pad = h.exceptional_radius + 1.5 * grid.spacing[0]
        mask &= rho > pad
    return mask


def p_laplace_residual(h, grid: DiscretizedDomain, p: float, *,
                       delta: float = _FLUX_DELTA) -> ResidualReport:
    """Discrete div(|grad h|^(p-2) grad h) at interior nodes.

    The gradient norm is regularized by delta inside the divergence assembly
    only.  Nodes within one cell of the declared exceptional set, and nodes
    where the gradient degenerates, are excluded from the reported maximum.
    """
    hf = _as_field(h, grid)
    g = node_gradient(grid, hf)
    norm2 = np.sum(g * g, axis=1)
    m = np.power(norm2 + delta * delta, (p - 2) / 2.0)
    res = node_divergence(grid, m[:, None] * g)

    mask = _exclusion_mask(h, grid)
    degenerate = np.sqrt(norm2) < 10 * delta
    mask &= ~degenerate

    flux_mag = np.power(norm2 + delta * delta, (p - 1) / 2.0)
    rho = grid.coords[:, 0]
    extent = float(rho.max() - rho.min()) or 1.0
    scale = float(np.max(flux_mag[mask])) / extent if np.any(mask) else 1.0
    max_abs = float(np.max(np.abs(res[mask]))) if np.any(mask) else 0.0
    return ResidualReport(field=res, max_abs=max_abs,
                          relative=max_abs / scale if scale > 0 else max_abs,
                          excluded=int(np.sum(~mask)), scale=scale)


def flux_through_sphere(h, grid: DiscretizedDomain, p: float, t: float,
                        *, grad_tol: float = 1e-10) -> float:
    """Shell quadrature of |grad h|^(p-1) over the level set {h = t}: the
    flux of the p-Laplace field through the h-sphere."""
    hf = _as_field(h, grid)
    shell = level_shell(grid, hf, t)
    g = node_gradient(grid, hf)
    norm = np.sqrt(np.sum(g * g, axis=1))
    involved = np.union1d(shell.node_a, shell.node_b)
    if np.any(norm[involved] < grad_tol):
        raise DegenerateGradient(f"|grad h| degenerates on the level {t}")
    return shell.integrate(np.power(norm, p - 1.0))


def boundary_normal_pairing(h, grid: DiscretizedDomain, p: float,
                            *, delta: float = _FLUX_DELTA) -> float:
    """Max over manifold-boundary nodes of |<A(grad h), normal>| with
    A the p-Laplace flux.  Zero certifies boundary orthogonality."""
    boundary = grid.tag_mask(MANIFOLD_BOUNDARY)
    if not np.any(boundary):
        return 0.0
    hf = _as_field(h, grid)
    g = node_gradient(grid, hf)
    norm2 = np.sum(g * g, axis=1)
    m = np.power(norm2 + delta * delta, (p - 2) / 2.0)
    flux = m[:, None] * g

    # face membership count: corner/edge nodes have no tangent plane and are
    # excluded from the pairing
    faces = []
    face_count = np.zeros(grid.shape, dtype=np.int8)
    for axis in range(grid.ndim):
        if grid.periodic[axis]:
            continue
        for side in (0, -1):
            index = [slice(None)] * grid.ndim
            index[axis] = side
            face = np.zeros(grid.shape, dtype=bool)
            face[tuple(index)] = True
            face_count += face
            faces.append((axis, face))
    regular = (face_count == 1).ravel()

    worst = 0.0
    for axis, face in faces:
        sel = face.ravel() & boundary & regular
        if np.any(sel):
            worst = max(worst, float(np.max(np.abs(flux[sel, axis]))))
    return worst


def noncritical_levels(h, grid: DiscretizedDomain, count: int,
                       *, pad_cells: float = 2.0) -> np.ndarray:
    """Level samples inside the h-window, avoiding a one-cell neighbourhood
    of the window ends (where grid-aligned critical values sit)."""
    hf = _as_field(h, grid)
    span = float(hf.max() - hf.min())
    d = node_gradient(grid, hf)
    cell = float(np.percentile(np.sqrt(np.sum(d * d, axis=1)), 90)) * max(grid.spacing)
    pad = max(pad_cells * cell, 0.05 * span)
    lo, hi = float(hf.min()) + pad, float(hf.max()) - pad
    if not lo < hi:
        raise LevelOutOfRange("window too narrow for noncritical levels")
    return np.linspace(lo, hi, count)


@dataclass
class ExhaustionVerdict:
    """Verification record for a candidate special exhaustion function."""

    pde_residual_max: float
    pde_residual_relative: float
    flux_values: list[tuple[float, float]]
    flux_relative_spread: float
    boundary_pairing_max: float
    boundary_pairing_relative: float
    passed: dict[str, bool]
    tolerances: dict[str, float] = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def describe(self) -> dict:
        return {
            "pde_residual_max": self.pde_residual_max,
            "pde_residual_relative": self.pde_residual_relative,
            "flux": [{"t": t, "value": v} for t, v in self.flux_values],
            "flux_relative_spread": self.flux_relative_spread,
            "boundary_pairing_max": self.boundary_pairing_max,
            "boundary_pairing_relative": self.boundary_pairing_relative,
            "verdicts": dict(self.passed),
            "tolerances": dict(self.tolerances),
        }


def verify_special(h, grid: DiscretizedDomain, p: float, *, levels: int = 10,
                   flux_tol: float = 1e-2, residual_tol: float = 5e-2,
                   boundary_tol: float = 1e-6) -> ExhaustionVerdict:
    """Run the special-exhaustion checks: interior equation, flux constancy
    across h-spheres, boundary orthogonality."""
    residual = p_laplace_residual(h, grid, p)

    ts = noncritical_levels(h, grid, levels)
    flux = [(float(t), flux_through_sphere(h, grid, p, float(t))) for t in ts]
    vals = np.array([v for _, v in flux])
    mean = float(np.mean(vals))
    spread = float((vals.max() - vals.min()) / abs(mean)) if mean else math.inf

    pairing = boundary_normal_pairing(h, grid, p)
    hf = _as_field(h, grid)
    g = node_gradient(grid, hf)
    flux_scale = float(np.max(np.power(np.sum(g * g, axis=1), (p - 1) / 2.0)))
    pairing_rel = pairing / flux_scale if flux_scale > 0 else pairing

    passed = {
        "solves_equation": residual.relative <= residual_tol,
        "constant_flux": spread <= flux_tol,
        "boundary_orthogonal": pairing_rel <= max(boundary_tol, 1e-12) or
                               pairing <= boundary_tol,
    }
    return ExhaustionVerdict(
        pde_residual_max=residual.max_abs,
        pde_residual_relative=residual.relative,
        flux_values=flux,
        flux_relative_spread=spread,
        boundary_pairing_max=pairing,
        boundary_pairing_relative=pairing_rel,
        passed=passed,
        tolerances={"flux": flux_tol, "residual": residual_tol,
                    "boundary": boundary_tol})


# ---------------------------------------------------------------------------
# Reference catalog instances (used by tests and the CLI)
# ---------------------------------------------------------------------------

@dataclass
class CatalogEntry:
    name: str
    domain: ModelDomain
    p: float
    cut: float
    resolution: tuple[int, ...]

    def grid(self, refine: int = 1) -> DiscretizedDomain:
        res = tuple(r * refine for r in self.resolution)
        from .domains import build_grid
        return build_grid(self.domain, res, cut=self.cut)

    def exhaustion(self) -> ExhaustionFunction:
        return make_special_exhaustion(self.domain, self.p)


def catalog_entries() -> list[CatalogEntry]:
    """One reference instance per catalog family."""
    e = math.e
    return [
        CatalogEntry(
            name="slab_power_strip",
            domain=ModelDomain.kcylinder(2, 1, CrossSection.interval(0.0, math.pi)),
            p=2.0, cut=3.0, resolution=(128, 48)),
        CatalogEntry(
            name="cylinder_power",
            domain=ModelDomain.kcylinder(3, 2, CrossSection.interval(0.0, 1.0), r1=0.5),
            p=3.0, cut=4.0, resolution=(128, 32, 17)),
        CatalogEntry(
            name="slab_log",
            domain=ModelDomain.kcylinder(3, 2, CrossSection.interval(0.0, 1.0), r1=0.5),
            p=2.0, cut=4.0, resolution=(128, 32, 17)),
        CatalogEntry(
            name="cone_log",
            domain=ModelDomain.cone(2, AngularDomain("full"), r1=1.0),
            p=2.0, cut=e ** 2, resolution=(128, 48)),
        CatalogEntry(
            name="warped_integral",
            domain=ModelDomain.warped(3, RadialCoefficient.const(1.0),
                                      RadialCoefficient.power(1.0), 1.0),
            p=2.0, cut=4.0, resolution=(128, 16, 24)),
        CatalogEntry(
            name="product_lift",
            domain=ModelDomain.product(3, 1, CrossSection.box((0.0, math.pi), (0.0, 1.0))),
            p=2.0, cut=3.0, resolution=(96, 24, 12)),
    ]
