"""Quadratic finite elements in strike with Crank-Nicolson stepping in maturity.

Solves Dupire's forward equation for call prices

    V_T - 1/2 sigma^2 K^2 V_KK + (r - q) K V_K + q V = 0,
    V(K, 0) = max(S0 - K, 0),

on ``[K_min, K_max] x [0, T_max]`` with Dirichlet data at both strike ends.
Each element spans three nodes ``K_{2i-2}, K_{2i-1}, K_{2i}`` with the
interior node at the element midpoint. Matrices are kept in LAPACK band
storage with two sub- and super-diagonals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import LinAlgError, solve_banded

from .errors import (
    MaturityNotOnGrid,
    NonPositiveVolatility,
    SingularSystem,
    StrikeOutOfDomain,
    TooFewNodes,
)
from .market_data import MarketParams

BANDS = 2
GRID_TOL = 1e-10

_XI, _W = leggauss(4)
# basis values and xi-derivatives at the quadrature points, shape (3, 4)
_N = np.array([-0.5 * _XI * (1 - _XI), 1 - _XI**2, 0.5 * _XI * (1 + _XI)])
_DN = np.array([_XI - 0.5, -2.0 * _XI, _XI + 0.5])
_MASS_REF = np.array([[4.0, 2.0, -1.0], [2.0, 16.0, 2.0], [-1.0, 2.0, 4.0]]) / 30.0


def shape_functions(xi):
    xi = np.asarray(xi, dtype=float)
    return np.array([-0.5 * xi * (1 - xi), 1 - xi**2, 0.5 * xi * (1 + xi)])


@dataclass(frozen=True)
class MeshLevel:
    """Resolution of one forward solve: ``2 * n_elements + 1`` strike nodes and
    ``n_steps + 1`` uniform time levels (before quote maturities are merged in)."""

    n_elements: int
    n_steps: int
    stretch: float = 3.0

    @property
    def n_nodes(self) -> int:
        return 2 * self.n_elements + 1


COARSE = MeshLevel(5, 10)
FINE = MeshLevel(25, 50)
REFERENCE = MeshLevel(100, 200, stretch=1.0)
LEVELS = {"coarse": COARSE, "fine": FINE, "reference": REFERENCE}


@dataclass(frozen=True)
class StrikeMesh:
    nodes: np.ndarray
    stretch: float = 1.0

    def __post_init__(self):
        n = self.nodes.size
        if n < 5 or n % 2 == 0:
            raise TooFewNodes(f"need an odd node count >= 5, got {n}")
        if np.any(np.diff(self.nodes) <= 0):
            raise ValueError("strike nodes must be strictly increasing")

    @property
    def n_elements(self) -> int:
        return (self.nodes.size - 1) // 2

    @property
    def element_edges(self) -> np.ndarray:
        return self.nodes[::2]

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.nodes[::2])

    def quadrature_points(self) -> np.ndarray:
        """Physical Gauss points, shape ``(n_elements, 4)``."""
        edges = self.element_edges
        mid = 0.5 * (edges[:-1] + edges[1:])
        return mid[:, None] + 0.5 * self.widths[:, None] * _XI[None, :]


@dataclass(frozen=True)
class MaturityGrid:
    times: np.ndarray

    def __post_init__(self):
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("maturity grid must start at 0 and increase strictly")

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, maturity) -> np.ndarray:
        m = np.atleast_1d(np.asarray(maturity, dtype=float))
        idx = np.clip(np.searchsorted(self.times, m), 1, self.times.size - 1)
        idx = np.where(np.abs(self.times[idx - 1] - m) < np.abs(self.times[idx] - m), idx - 1, idx)
        bad = np.abs(self.times[idx] - m) > GRID_TOL
        if np.any(bad):
            raise MaturityNotOnGrid(f"maturities {m[bad]} are not grid levels")
        return idx


def stretched_nodes(k_min, k_max, center, n_elements, stretch=3.0) -> np.ndarray:
    """Quadratic-element nodes clustered around ``center`` by a sinh map.

    Element edges follow ``K(s) = center + alpha * sinh(s)`` for uniform ``s``;
    ``alpha`` is chosen so the edge density at ``center`` is ``stretch`` times
    the density at the farther domain end. ``stretch=1`` gives a uniform mesh.
    Interior nodes sit at element midpoints.
    """
    if stretch < 1:
        raise ValueError("stretch must be >= 1")
    if stretch == 1.0:
        edges = np.linspace(k_min, k_max, n_elements + 1)
    else:
        far = max(center - k_min, k_max - center)
        alpha = far / math.sqrt(stretch**2 - 1.0)
        s_lo = math.asinh((k_min - center) / alpha)
        s_hi = math.asinh((k_max - center) / alpha)
        # put an element edge on the payoff kink
        n_left = int(np.clip(round(n_elements * -s_lo / (s_hi - s_lo)), 1, n_elements - 1))
        s = np.concatenate([
            np.linspace(s_lo, 0.0, n_left + 1)[:-1], np.linspace(0.0, s_hi, n_elements - n_left + 1)
        ])
        edges = center + alpha * np.sinh(s)
        edges[0], edges[n_left], edges[-1] = k_min, center, k_max
    nodes = np.empty(2 * n_elements + 1)
    nodes[::2] = edges
    nodes[1::2] = 0.5 * (edges[:-1] + edges[1:])
    return nodes


def build_mesh(
    params: MarketParams,
    level: MeshLevel | str = "fine",
    maturities: Sequence[float] = (),
) -> tuple[StrikeMesh, MaturityGrid]:
    if isinstance(level, str):
        level = LEVELS[level]
    if level.n_elements < 2 or level.n_steps < 1:
        raise TooFewNodes(f"mesh level {level} is too small")
    nodes = stretched_nodes(params.k_min, params.k_max, params.spot, level.n_elements, level.stretch)
    times = np.linspace(0.0, params.t_max, level.n_steps + 1)
    extra = [t for t in maturities if np.min(np.abs(times - t)) > GRID_TOL]
    for t in maturities:
        if not 0 < t <= params.t_max + GRID_TOL:
            raise ValueError(f"maturity {t} outside (0, t_max]")
    # snap near-coincident uniform levels onto the quoted maturities
    for t in maturities:
        j = np.argmin(np.abs(times - t))
        if np.abs(times[j] - t) <= GRID_TOL:
            times[j] = t
    times = np.unique(np.concatenate([times, extra]))
    return StrikeMesh(nodes, level.stretch), MaturityGrid(times)


@dataclass
class PdeCoefficients:
    """Rates, spot and local volatility ``vol(T, K)`` (broadcasting callable).

    ``left_boundary`` selects the Dirichlet value at ``K_min``: ``"paper"``
    uses ``exp(-r T) (S0 - K_min)``; ``"forward"`` uses the deep in-the-money
    asymptote ``S0 exp(-q T) - K_min exp(-r T)``.
    """

    rate: float
    dividend: float
    spot: float
    vol: Callable[[np.ndarray, np.ndarray], np.ndarray]
    left_boundary: str = "forward"

    def boundary_values(self, t, k_min: float) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)
        if self.left_boundary == "paper":
            left = np.exp(-self.rate * t) * (self.spot - k_min)
        elif self.left_boundary == "forward":
            left = self.spot * np.exp(-self.dividend * t) - k_min * np.exp(-self.rate * t)
        else:
            raise ValueError(f"unknown left boundary {self.left_boundary!r}")
        return left, np.zeros_like(t)


def constant_vol(sigma: float) -> Callable:
    return lambda t, k: np.full(np.broadcast(np.asarray(t), np.asarray(k)).shape, float(sigma))


def _band_scatter(n_elements: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat band positions of each local (e, p, q) entry; band row = 2 + i - j."""
    e, p, q = np.meshgrid(np.arange(n_elements), np.arange(3), np.arange(3), indexing="ij")
    i, j = 2 * e + p, 2 * e + q
    return (BANDS + i - j).ravel(), j.ravel()


def _to_band(local: np.ndarray, n_nodes: int) -> np.ndarray:
    """Assemble element blocks ``(..., n_elements, 3, 3)`` into band storage ``(..., 5, n)``."""
    lead = local.shape[:-3]
    rows, cols = _band_scatter(local.shape[-3])
    flat = rows * n_nodes + cols
    out = np.zeros(lead + ((2 * BANDS + 1) * n_nodes,))
    vals = local.reshape(lead + (-1,))
    if lead:
        for idx in np.ndindex(*lead):
            out[idx] = np.bincount(flat, weights=vals[idx], minlength=out.shape[-1])
    else:
        out = np.bincount(flat, weights=vals, minlength=out.size)
    return out.reshape(lead + (2 * BANDS + 1, n_nodes))


def band_to_dense(ab: np.ndarray) -> np.ndarray:
    n = ab.shape[-1]
    a = np.zeros((n, n))
    for d in range(2 * BANDS + 1):
        off = d - BANDS
        for j in range(max(0, -off), min(n, n - off)):
            a[j + off, j] = ab[d, j]
    return a


def band_matvec(ab: np.ndarray, x: np.ndarray) -> np.ndarray:
    n = x.size
    y = np.zeros(n)
    for d in range(2 * BANDS + 1):
        off = d - BANDS
        if off >= 0:
            y[off:] += ab[d, : n - off] * x[: n - off]
        else:
            y[: n + off] += ab[d, -off:] * x[-off:]
    return y


def assemble_mass(mesh: StrikeMesh) -> np.ndarray:
    """Global mass matrix in band storage; element blocks ``h/30 [[4,2,-1],[2,16,2],[-1,2,4]]``."""
    local = mesh.widths[:, None, None] * _MASS_REF[None]
    return _to_band(local, mesh.nodes.size)


def element_parts(mesh: StrikeMesh, coeffs: PdeCoefficients, times) -> tuple[np.ndarray, ...]:
    """Diffusion, convection and reaction element blocks, each ``(n_times, n_elements, 3, 3)``."""
    kq = mesh.quadrature_points()
    h = mesh.widths
    t = np.asarray(times, dtype=float).reshape(-1)[:, None]
    sig_q = np.asarray(coeffs.vol(t, kq.ravel()[None, :]), dtype=float).reshape(t.size, *kq.shape)
    sig_n = np.asarray(coeffs.vol(t, mesh.nodes[None, :]), dtype=float).reshape(t.size, -1)
    if not (np.all(np.isfinite(sig_q) & (sig_q > 0)) and np.all(np.isfinite(sig_n) & (sig_n > 0))):
        raise NonPositiveVolatility("local volatility must be positive and finite")

    # d(sigma^2 K^2 / 2)/dK from nodal values, interpolated to Gauss points
    g = 0.5 * sig_n**2 * mesh.nodes**2
    dg = np.gradient(g, mesh.nodes, axis=-1, edge_order=2)
    conn = 2 * np.arange(mesh.n_elements)[:, None] + np.arange(3)[None, :]
    dg_q = np.einsum("tep,pg->teg", dg[:, conn], _N)

    diff = sig_q**2 * kq**2 / h[:, None]
    conv = dg_q + (coeffs.rate - coeffs.dividend) * kq
    diffusion = np.einsum("teg,g,pg,qg->tepq", diff, _W, _DN, _DN)
    convection = np.einsum("teg,g,pg,qg->tepq", conv, _W, _N, _DN)
    reaction = np.broadcast_to(
        coeffs.dividend * h[None, :, None, None] * _MASS_REF[None, None], diffusion.shape
    )
    return diffusion, convection, reaction


def _element_stiffness(mesh: StrikeMesh, coeffs: PdeCoefficients, times: np.ndarray) -> np.ndarray:
    """Element operator blocks for each time, shape ``(n_times, n_elements, 3, 3)``."""
    diffusion, convection, reaction = element_parts(mesh, coeffs, times)
    return diffusion + convection + reaction


def assemble_stiffness(mesh: StrikeMesh, coeffs: PdeCoefficients, t: float) -> np.ndarray:
    """Spatial operator at maturity ``t`` in band storage (diffusion, convection, reaction)."""
    return _to_band(_element_stiffness(mesh, coeffs, np.array([t]))[0], mesh.nodes.size)


@dataclass
class FemWorkspace:
    """Assembled operators for one mesh and coefficient set."""

    mesh: StrikeMesh
    grid: MaturityGrid
    coeffs: PdeCoefficients
    mass: np.ndarray = field(init=False)
    stiffness: np.ndarray = field(init=False)
    boundary: tuple[np.ndarray, np.ndarray] = field(init=False)
    solution: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.mesh.nodes.size
        self.mass = assemble_mass(self.mesh)
        self.stiffness = _to_band(
            _element_stiffness(self.mesh, self.coeffs, self.grid.times), n
        )
        self.boundary = self.coeffs.boundary_values(self.grid.times, self.mesh.nodes[0])
        self.solution = np.empty((self.grid.times.size, n))
        self.solution[0] = np.maximum(self.coeffs.spot - self.mesh.nodes, 0.0)


def _solve_interior(lhs: np.ndarray, rhs: np.ndarray, n: int) -> np.ndarray:
    try:
        x = solve_banded((BANDS, BANDS), lhs[:, 1:-1], rhs[1:-1], overwrite_ab=True,
                         check_finite=False)
    except (LinAlgError, ValueError) as exc:
        raise SingularSystem(f"linear system singular at step {n}") from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem(f"non-finite solution at step {n}")
    return x


def _boundary_vector(ws: FemWorkspace, n: int, left=None, right=None) -> np.ndarray:
    bnd = np.zeros(ws.mesh.nodes.size)
    bnd[0] = ws.boundary[0][n] if left is None else left
    bnd[-1] = ws.boundary[1][n] if right is None else right
    return bnd


def step_crank_nicolson(ws: FemWorkspace, n: int) -> np.ndarray:
    """Advance from level ``n-1`` to ``n``:
    ``(M + k/2 J^n) U^n = (M - k/2 J^{n-1}) U^{n-1}`` with Dirichlet ends."""
    k = ws.grid.times[n] - ws.grid.times[n - 1]
    lhs = ws.mass + 0.5 * k * ws.stiffness[n]
    rhs_op = ws.mass - 0.5 * k * ws.stiffness[n - 1]
    bnd = _boundary_vector(ws, n)
    rhs = band_matvec(rhs_op, ws.solution[n - 1]) - band_matvec(lhs, bnd)
    bnd[1:-1] = _solve_interior(lhs, rhs, n)
    ws.solution[n] = bnd
    return bnd


def step_implicit_substeps(ws: FemWorkspace, n: int, substeps: int = 4) -> np.ndarray:
    """Backward-Euler substeps from level ``n-1`` to ``n``.

    Used for the first interval to damp the Crank-Nicolson oscillations
    excited by the payoff kink (Rannacher start).
    """
    t0, t1 = ws.grid.times[n - 1], ws.grid.times[n]
    dt = (t1 - t0) / substeps
    u = ws.solution[n - 1]
    lhs_op = ws.mass + dt * ws.stiffness[n]
    for t in t0 + dt * np.arange(1, substeps + 1):
        left, right = ws.coeffs.boundary_values(t, ws.mesh.nodes[0])
        bnd = _boundary_vector(ws, n, float(left), float(right))
        rhs = band_matvec(ws.mass, u) - band_matvec(lhs_op, bnd)
        bnd[1:-1] = _solve_interior(lhs_op.copy(), rhs, n)
        u = bnd
    ws.solution[n] = u
    return u


@dataclass(frozen=True)
class PriceField:
    """Nodal prices for every maturity level; shape ``(n_times, n_nodes)``."""

    mesh: StrikeMesh
    grid: MaturityGrid
    values: np.ndarray

    def price(self, maturity, strike) -> np.ndarray:
        return extract_price(self, maturity, strike)


def price_surface(
    mesh: StrikeMesh,
    grid: MaturityGrid,
    coeffs: PdeCoefficients,
    smoothing_steps: int = 1,
    substeps: int = 4,
) -> PriceField:
    """One forward solve over all maturity levels.

    The first ``smoothing_steps`` intervals are each covered by ``substeps``
    backward-Euler steps; the rest are Crank-Nicolson.
    """
    ws = FemWorkspace(mesh, grid, coeffs)
    for n in range(1, grid.times.size):
        if n <= smoothing_steps:
            step_implicit_substeps(ws, n, substeps)
        else:
            step_crank_nicolson(ws, n)
    return PriceField(mesh, grid, ws.solution)


def interpolate_nodal(mesh: StrikeMesh, values: np.ndarray, strike) -> np.ndarray:
    """Evaluate the piecewise quadratic through nodal ``values`` at ``strike``."""
    k = np.atleast_1d(np.asarray(strike, dtype=float))
    lo, hi = mesh.nodes[0], mesh.nodes[-1]
    if np.any(k < lo - 1e-12) | np.any(k > hi + 1e-12):
        raise StrikeOutOfDomain(f"strikes outside [{lo}, {hi}]")
    edges = mesh.element_edges
    e = np.clip(np.searchsorted(edges, k, side="right") - 1, 0, mesh.n_elements - 1)
    mid = 0.5 * (edges[e] + edges[e + 1])
    xi = 2.0 * (k - mid) / (edges[e + 1] - edges[e])
    n = shape_functions(xi)
    vals = np.asarray(values)
    return n[0] * vals[..., 2 * e] + n[1] * vals[..., 2 * e + 1] + n[2] * vals[..., 2 * e + 2]


def extract_price(field: PriceField, maturity, strike) -> np.ndarray:
    """Model price at quoted (T, K) pairs, floored at zero."""
    t_idx = field.grid.index_of(maturity)
    k = np.atleast_1d(np.asarray(strike, dtype=float))
    t_idx = np.broadcast_to(t_idx, k.shape)
    out = np.empty(k.shape)
    for ti in np.unique(t_idx):
        sel = t_idx == ti
        out[sel] = interpolate_nodal(field.mesh, field.values[ti], k[sel])
    return np.maximum(out, 0.0)
