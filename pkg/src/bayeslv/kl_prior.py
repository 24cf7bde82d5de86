"""Analytic Karhunen-Loeve basis for a separable squared-exponential GP prior.

The 1D kernel is ``exp(-(x - x')**2 / (2 * l**2))`` and the eigenproblem is
posed with respect to a Gaussian measure ``N(center, sd**2)``. Eigenpairs are
indexed from Hermite order 0. In two dimensions the first coordinate is the
rescaled maturity ``u`` (lengthscale ``l1``) and the second the rescaled
strike ``v`` (lengthscale ``l2``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    NumericalError,
    OrderTooLarge,
    ThresholdUnreachable,
)

MAX_HERMITE_ORDER = 64
DEFAULT_SIGMA_MU = 0.68
DEFAULT_MAX_PER_DIM = 24
NORM_TOL = 1e-8


def hermite(k: int, x):
    """Physicists' Hermite polynomial ``H_k(x)`` by three-term recurrence."""
    if k < 0:
        raise ValueError("order must be nonnegative")
    if k > MAX_HERMITE_ORDER:
        raise OrderTooLarge(f"Hermite order {k} exceeds {MAX_HERMITE_ORDER}")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if k == 0:
        return h_prev[()] if h_prev.ndim == 0 else h_prev
    h = 2.0 * x
    for n in range(1, k):
        h_prev, h = h, 2.0 * x * h - 2.0 * n * h_prev
    return h[()] if h.ndim == 0 else h


def hermite_functions(n: int, y) -> np.ndarray:
    """Rows ``H_k(y) / sqrt(2**k k!)`` for k < n, shape ``(n,) + y.shape``.

    The scaled recurrence avoids the overflow of raw Hermite values at high
    order.
    """
    y = np.asarray(y, dtype=float)
    out = np.empty((n,) + y.shape)
    out[0] = 1.0
    if n > 1:
        out[1] = math.sqrt(2.0) * y
    for k in range(1, n - 1):
        out[k + 1] = math.sqrt(2.0 / (k + 1)) * y * out[k] - math.sqrt(k / (k + 1)) * out[k - 1]
    return out


@dataclass(frozen=True)
class GaussianMeasure1D:
    center: float = 0.0
    sd: float = DEFAULT_SIGMA_MU

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("measure sd must be positive")


@dataclass(frozen=True)
class KLEigen1D:
    k: int
    lengthscale: float
    measure: GaussianMeasure1D
    a: float
    b: float
    c: float
    A: float
    B: float
    eigenvalue: float
    norm_const: float

    def __call__(self, x):
        return eval_eigenfunctions_1d(self.k + 1, self.lengthscale, self.measure, x)[self.k]


def _constants(lengthscale: float, measure: GaussianMeasure1D):
    a = 1.0 / (4.0 * measure.sd**2)
    b = 1.0 / (2.0 * lengthscale**2)
    c = math.sqrt(a * a + 2.0 * a * b)
    A = a + b + c
    return a, b, c, A, b / A


def eigenvalues_1d(n: int, lengthscale: float, measure: GaussianMeasure1D) -> np.ndarray:
    a, _, _, A, B = _constants(lengthscale, measure)
    return math.sqrt(2.0 * a / A) * B ** np.arange(n)


def total_eigenvalue_1d(lengthscale: float, measure: GaussianMeasure1D) -> float:
    """Closed-form sum of all 1D eigenvalues (geometric series)."""
    a, _, _, A, B = _constants(lengthscale, measure)
    return math.sqrt(2.0 * a / A) / (1.0 - B)


def eval_eigenfunctions_1d(n: int, lengthscale: float, measure: GaussianMeasure1D, x) -> np.ndarray:
    """Unit-norm eigenfunctions of orders ``0..n-1`` at ``x``; shape ``(n,) + x.shape``."""
    a, _, c, _, _ = _constants(lengthscale, measure)
    x = np.asarray(x, dtype=float) - measure.center
    # h_k = (c/a)^(1/4) / sqrt(2^k k!); the factorial part lives in hermite_functions
    env = (c / a) ** 0.25 * np.exp(-(c - a) * x * x)
    return env * hermite_functions(n, math.sqrt(2.0 * c) * x)


def eigenpair_1d(k: int, lengthscale: float, measure: GaussianMeasure1D) -> KLEigen1D:
    if not lengthscale > 0:
        raise ValueError("lengthscale must be positive")
    a, b, c, A, B = _constants(lengthscale, measure)
    log_h = 0.25 * math.log(c / a) - 0.5 * (k * math.log(2.0) + math.lgamma(k + 1))
    return KLEigen1D(
        k=k, lengthscale=lengthscale, measure=measure, a=a, b=b, c=c, A=A, B=B,
        eigenvalue=math.sqrt(2.0 * a / A) * B**k, norm_const=math.exp(log_h),
    )


def gauss_hermite_measure(n: int, measure: GaussianMeasure1D):
    """Nodes and weights integrating against the probability measure ``N(center, sd**2)``."""
    t, w = np.polynomial.hermite.hermgauss(n)
    return measure.center + math.sqrt(2.0) * measure.sd * t, w / math.sqrt(math.pi)


def gram_error(n: int, lengthscale: float, measure: GaussianMeasure1D, nodes: int = 200) -> float:
    """Max deviation from the identity of the quadrature Gram matrix of orders ``< n``."""
    x, w = gauss_hermite_measure(nodes, measure)
    phi = eval_eigenfunctions_1d(n, lengthscale, measure, x)
    return float(np.max(np.abs((phi * w) @ phi.T - np.eye(n))))


@dataclass(frozen=True)
class KLBasis:
    """Tensor-product K-L basis with eigenvalues sorted in decreasing order.

    ``index`` holds the (i, j) Hermite orders of each sorted 2D term;
    ``n_kl`` is the number of leading terms used by the expansion.
    """

    l1: float
    l2: float
    measures: tuple[GaussianMeasure1D, GaussianMeasure1D]
    max_per_dim: int
    eigenvalues: np.ndarray = field(repr=False)
    index: np.ndarray = field(repr=False)
    n_kl: int
    sigma_y: float = 1.0
    mu_y: float = 0.0

    @property
    def total_eigenvalue(self) -> float:
        return total_eigenvalue_1d(self.l1, self.measures[0]) * total_eigenvalue_1d(
            self.l2, self.measures[1]
        )

    def with_hyper(self, l1: float, l2: float, sigma_y: float) -> "KLBasis":
        """Same measures, truncation and mean with new lengthscales and scale."""
        return tensor_basis_2d(
            l1, l2, self.measures, self.max_per_dim, n_kl=self.n_kl,
            sigma_y=sigma_y, mu_y=self.mu_y,
        )


def tensor_basis_2d(
    l1: float,
    l2: float,
    measures=(GaussianMeasure1D(), GaussianMeasure1D()),
    max_per_dim: int = DEFAULT_MAX_PER_DIM,
    *,
    n_kl: int | None = None,
    sigma_y: float = 1.0,
    mu_y: float = 0.0,
) -> KLBasis:
    """All products of 1D eigenpairs with orders below ``max_per_dim``, sorted.

    Ties in eigenvalue are broken by (i, j) lexicographic order. Without
    ``n_kl`` the whole generated set is retained.
    """
    if max_per_dim < 1:
        raise ValueError("max_per_dim must be at least 1")
    lam1 = eigenvalues_1d(max_per_dim, l1, measures[0])
    lam2 = eigenvalues_1d(max_per_dim, l2, measures[1])
    lam = np.outer(lam1, lam2).ravel()
    ii, jj = np.divmod(np.arange(lam.size), max_per_dim)
    # compare on a log scale so near-ties are detected at every magnitude
    key = np.round(np.log(lam), 9)
    order = np.lexsort((jj, ii, -key))
    n_full = lam.size
    if n_kl is None:
        n_kl = n_full
    if not 1 <= n_kl <= n_full:
        raise IndexOutOfRange(f"n_kl={n_kl} outside [1, {n_full}]")
    return KLBasis(
        l1=l1, l2=l2, measures=tuple(measures), max_per_dim=max_per_dim,
        eigenvalues=lam[order], index=np.column_stack([ii[order], jj[order]]),
        n_kl=n_kl, sigma_y=sigma_y, mu_y=mu_y,
    )


def energy_ratio(basis: KLBasis, n: int) -> float:
    if not 1 <= n <= basis.eigenvalues.size:
        raise IndexOutOfRange(f"n={n} outside [1, {basis.eigenvalues.size}]")
    return float(np.sum(basis.eigenvalues[:n]) / basis.total_eigenvalue)


def select_truncation(basis: KLBasis, threshold: float = 0.90) -> int:
    """Smallest number of leading terms whose energy ratio reaches ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    ratios = np.cumsum(basis.eigenvalues) / basis.total_eigenvalue
    # tolerate round-off in the cumulative sum
    hit = np.nonzero(ratios >= threshold - 1e-14)[0]
    if hit.size == 0:
        raise ThresholdUnreachable(
            f"max_per_dim={basis.max_per_dim} reaches only {ratios[-1]:.4f} < {threshold}"
        )
    return int(hit[0]) + 1


def build_basis(
    l1: float,
    l2: float,
    *,
    sigma_mu: float = DEFAULT_SIGMA_MU,
    centers: tuple[float, float] = (0.0, 0.0),
    max_per_dim: int = DEFAULT_MAX_PER_DIM,
    threshold: float = 0.90,
    n_kl: int | None = None,
    sigma_y: float = 1.0,
    mu_y: float = 0.0,
) -> KLBasis:
    """Convenience constructor; truncates by ``threshold`` unless ``n_kl`` is given."""
    measures = (GaussianMeasure1D(centers[0], sigma_mu), GaussianMeasure1D(centers[1], sigma_mu))
    full = tensor_basis_2d(l1, l2, measures, max_per_dim, sigma_y=sigma_y, mu_y=mu_y)
    if n_kl is None:
        n_kl = select_truncation(full, threshold)
    basis = replace(full, n_kl=n_kl)
    for dim, n in enumerate(_used_orders(basis)):
        err = gram_error(n, (l1, l2)[dim], measures[dim])
        if err > NORM_TOL:
            raise NumericalError(f"eigenfunctions of dimension {dim} not orthonormal: {err:.2e}")
    return basis


def _coefficient_matrix(basis: KLBasis, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (basis.n_kl,):
        raise DimensionMismatch(f"theta has shape {theta.shape}, expected ({basis.n_kl},)")
    coef = np.zeros((basis.max_per_dim, basis.max_per_dim))
    idx = basis.index[: basis.n_kl]
    coef[idx[:, 0], idx[:, 1]] = theta * np.sqrt(basis.eigenvalues[: basis.n_kl])
    return coef


def _used_orders(basis: KLBasis) -> tuple[int, int]:
    idx = basis.index[: basis.n_kl]
    return int(idx[:, 0].max()) + 1, int(idx[:, 1].max()) + 1


def eval_log_vol(basis: KLBasis, theta, points) -> np.ndarray:
    """Log-volatility ``mu_y + sigma_y * sum_k theta_k sqrt(lam_k) phi_k`` at (u, v) points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    coef = _coefficient_matrix(basis, theta)
    n1, n2 = _used_orders(basis)
    phi1 = eval_eigenfunctions_1d(n1, basis.l1, basis.measures[0], pts[:, 0])
    phi2 = eval_eigenfunctions_1d(n2, basis.l2, basis.measures[1], pts[:, 1])
    return basis.mu_y + basis.sigma_y * np.einsum("ip,ij,jp->p", phi1, coef[:n1, :n2], phi2)


def eval_log_vol_grid(basis: KLBasis, theta, u, v) -> np.ndarray:
    """Log-volatility on the tensor grid ``u x v``; shape ``(len(u), len(v))``."""
    coef = _coefficient_matrix(basis, theta)
    n1, n2 = _used_orders(basis)
    phi1 = eval_eigenfunctions_1d(n1, basis.l1, basis.measures[0], np.asarray(u, float))
    phi2 = eval_eigenfunctions_1d(n2, basis.l2, basis.measures[1], np.asarray(v, float))
    return basis.mu_y + basis.sigma_y * (phi1.T @ coef[:n1, :n2] @ phi2)


def sample_surface(basis: KLBasis, seed: int, n_grid: int = 41):
    """Draw ``theta ~ N(0, I)`` and return it with ``exp(Y)`` on a uniform unit-square grid."""
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(basis.n_kl)
    g = np.linspace(-0.5, 0.5, n_grid)
    return theta, np.exp(eval_log_vol_grid(basis, theta, g, g))
