"""Point patterns on the unit square: simulation, log-linear intensity fitting
and kernel-smoothed raw residuals.

Intensities are log-linear in lattice covariates, so the log-intensity is itself
bilinear inside every lattice cell.  Samplers exploit this: the largest corner
value of a cell bounds the intensity on the whole cell.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .randfield import DEFAULT_RESOLUTION, GridField, lattice_nodes

__all__ = [
    "PointPattern",
    "IntensityModel",
    "Quadrature",
    "FittedIntensity",
    "HardcoreModel",
    "IntensityFitError",
    "RankDeficiencyError",
    "InfeasibleHardcoreError",
    "BandwidthWarning",
    "sample_binomial_ipp",
    "sample_ipp",
    "sample_hardcore",
    "integrated_intensity",
    "build_quadrature",
    "fit_intensity",
    "fit_hardcore",
    "ResidualSmoother",
    "smoothed_residual_field",
    "loocv_objective",
    "select_bandwidth_loocv",
    "default_bandwidth_grid",
    "read_points_csv",
    "write_points_csv",
]


class IntensityFitError(RuntimeError):
    def __init__(self, message, grad_norm=float("nan")):
        super().__init__(message)
        self.grad_norm = grad_norm


class RankDeficiencyError(IntensityFitError):
    pass


class InfeasibleHardcoreError(RuntimeError):
    pass


class BandwidthWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PointPattern:
    points: np.ndarray
    time_index: int = 0
    marks: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(pts)) or np.any(pts < 0) or np.any(pts > 1):
            raise ValueError("all points must lie inside the unit square")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.marks is not None:
            marks = np.array(self.marks, dtype=float).ravel()
            if marks.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"marks length {marks.shape[0]} does not match point count {pts.shape[0]}"
                )
            marks.setflags(write=False)
            object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "time_index", int(self.time_index))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, PointPattern):
            return NotImplemented
        if self.time_index != other.time_index or not np.array_equal(self.points, other.points):
            return False
        if (self.marks is None) != (other.marks is None):
            return False
        return self.marks is None or np.array_equal(self.marks, other.marks)

    __hash__ = None

    def without(self, index):
        keep = np.ones(self.n, dtype=bool)
        keep[index] = False
        marks = None if self.marks is None else self.marks[keep]
        return PointPattern(self.points[keep], self.time_index, marks)

    def with_marks(self, marks):
        return PointPattern(self.points, self.time_index, marks)


@dataclass(frozen=True, eq=False)
class IntensityModel:
    """log lambda(s) = intercept + sum_k coefficients[k] * covariates[k](s)."""

    intercept: float
    coefficients: tuple = ()
    covariates: tuple = ()
    resolution: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        coefs = tuple(float(c) for c in np.atleast_1d(self.coefficients)) if len(self.coefficients) else ()
        covs = tuple(self.covariates)
        if len(coefs) != len(covs):
            raise ValueError(f"{len(coefs)} coefficients for {len(covs)} covariates")
        res = {c.resolution for c in covs}
        if len(res) > 1:
            raise ValueError(f"covariates have mixed resolutions {sorted(res)}")
        object.__setattr__(self, "coefficients", coefs)
        object.__setattr__(self, "covariates", covs)
        if covs:
            object.__setattr__(self, "resolution", covs[0].resolution)
        if np.isnan(self.intercept) or self.intercept == np.inf:
            raise ValueError("intercept must be finite or -inf (zero intensity)")
        if not np.all(np.isfinite(coefs)):
            raise ValueError("coefficients must be finite")

    @classmethod
    def constant(cls, intensity, resolution=DEFAULT_RESOLUTION):
        intensity = float(intensity)
        if intensity < 0:
            raise ValueError("intensity must be non-negative")
        return cls(math.log(intensity) if intensity > 0 else -np.inf, resolution=resolution)

    @property
    def is_zero(self):
        return self.intercept == -np.inf

    def log_lattice(self):
        out = np.full((self.resolution, self.resolution), float(self.intercept))
        if self.is_zero:
            return out
        for coef, cov in zip(self.coefficients, self.covariates):
            out = out + coef * cov.values
        return out

    def log_intensity(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(pts.shape[0], float(self.intercept))
        if self.is_zero:
            return out
        for coef, cov in zip(self.coefficients, self.covariates):
            out = out + coef * cov(pts)
        return out

    def intensity(self, points):
        return np.exp(self.log_intensity(points))

    def to_dict(self):
        return {
            "intercept": self.intercept,
            "coefficients": list(self.coefficients),
            "n_covariates": len(self.covariates),
            "resolution": self.resolution,
        }


@dataclass(frozen=True, eq=False)
class Quadrature:
    """Berman-Turner scheme: data points followed by lattice dummy nodes."""

    locations: np.ndarray
    weights: np.ndarray
    is_data: np.ndarray
    resolution: int

    @property
    def total_weight(self):
        return float(self.weights.sum())


@dataclass(frozen=True, eq=False)
class FittedIntensity:
    model: IntensityModel
    quadrature: Quadrature
    loglik: float
    n_points: int
    iterations: int = 0
    loglik_trace: tuple = ()

    def intensity(self, points):
        return self.model.intensity(points)

    @property
    def resolution(self):
        return self.model.resolution

    def to_json(self):
        return json.dumps(
            {
                "intercept": self.model.intercept,
                "coefficients": list(self.model.coefficients),
                "quadrature_resolution": self.quadrature.resolution,
                "n_quadrature": int(self.quadrature.weights.size),
                "loglik": self.loglik,
                "n_points": self.n_points,
                "iterations": self.iterations,
            },
            indent=2,
        )


@dataclass(frozen=True, eq=False)
class HardcoreModel:
    """Fixed-n hard core process, optionally with an inhomogeneous first-order term."""

    radius: float
    n: int
    intensity: IntensityModel | None = None
    burn_in_sweeps: int = 10_000

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius >= 0):
            raise ValueError("radius must be finite and >= 0")
        if int(self.n) < 1:
            raise ValueError("n must be >= 1")
        object.__setattr__(self, "n", int(self.n))
        if self.n * math.pi * (self.radius / 2) ** 2 >= 1.0:
            raise InfeasibleHardcoreError(
                f"{self.n} disks of radius {self.radius / 2:g} cannot fit in the unit square"
            )

    def to_dict(self):
        out = {"radius": self.radius, "n": self.n, "burn_in_sweeps": self.burn_in_sweeps}
        if self.intensity is not None:
            out["intensity"] = self.intensity.to_dict()
        return out


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


class _CellSampler:
    """Exact sampler for the density proportional to a lattice log-linear intensity.

    A cell is chosen with probability proportional to its corner-maximum envelope,
    then a uniform point in the cell is accepted with probability lambda / envelope.
    """

    def __init__(self, log_lattice):
        log_lattice = np.asarray(log_lattice, dtype=float)
        if np.all(log_lattice == -np.inf):
            raise ValueError("intensity is identically zero")
        self.log_lattice = np.ascontiguousarray(log_lattice)
        self.resolution = r = log_lattice.shape[0]
        corners = np.stack(
            [log_lattice[:-1, :-1], log_lattice[1:, :-1], log_lattice[:-1, 1:], log_lattice[1:, 1:]]
        )
        self.cell_max = np.ascontiguousarray(corners.max(axis=0).ravel())
        top = self.cell_max.max()
        env = np.exp(self.cell_max - top)
        self.cdf = np.cumsum(env)
        self.cdf /= self.cdf[-1]
        self.cdf[-1] = 1.0
        self.acceptance = float(
            np.mean(np.exp(corners - corners.max(axis=0)))
        )  # rough guide for batch sizing
        self.spacing = 1.0 / (r - 1)

    def sample(self, rng, n):
        out = []
        need = n
        while need > 0:
            m = int(need / max(self.acceptance, 0.05) * 1.2) + 16
            cells = np.searchsorted(self.cdf, rng.random(m), side="right")
            cells = np.minimum(cells, self.cdf.size - 1)
            ci, cj = np.divmod(cells, self.resolution - 1)
            u = rng.random((m, 2))
            logv = _bilinear_cells(self.log_lattice, ci, cj, u[:, 0], u[:, 1])
            keep = rng.random(m) < np.exp(logv - self.cell_max[cells])
            pts = np.column_stack([(ci + u[:, 0]) * self.spacing, (cj + u[:, 1]) * self.spacing])[keep]
            out.append(pts[:need])
            need -= min(need, pts.shape[0])
        pts = np.concatenate(out) if out else np.empty((0, 2))
        return np.clip(pts, 0.0, 1.0)


def _bilinear_cells(v, i, j, tx, ty):
    return (
        (1 - tx) * (1 - ty) * v[i, j]
        + tx * (1 - ty) * v[i + 1, j]
        + (1 - tx) * ty * v[i, j + 1]
        + tx * ty * v[i + 1, j + 1]
    )


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)


def integrated_intensity(intensity: IntensityModel, region=None) -> float:
    """Lambda(S): integral of the intensity over the unit square (4x4 Gauss-Legendre per cell)."""
    if intensity.is_zero:
        return 0.0
    v = intensity.log_lattice()
    r = v.shape[0]
    t = 0.5 * (_GL_NODES + 1.0)
    w = 0.5 * _GL_WEIGHTS
    tx, ty = np.meshgrid(t, t, indexing="ij")
    wxy = np.outer(w, w)
    a = v[:-1, :-1][..., None, None]
    b = v[1:, :-1][..., None, None]
    c = v[:-1, 1:][..., None, None]
    d = v[1:, 1:][..., None, None]
    vals = np.exp((1 - tx) * (1 - ty) * a + tx * (1 - ty) * b + (1 - tx) * ty * c + tx * ty * d)
    return float((vals * wxy).sum() / (r - 1) ** 2)


def sample_binomial_ipp(intensity: IntensityModel, n: int, rng, time_index=0) -> PointPattern:
    """n i.i.d. points with density proportional to the intensity."""
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    if intensity.is_zero:
        raise ValueError("intensity is identically zero")
    sampler = _CellSampler(intensity.log_lattice())
    return PointPattern(sampler.sample(rng, n), time_index)


def sample_ipp(intensity: IntensityModel, rng, time_index=0) -> PointPattern:
    """Inhomogeneous Poisson process: Poisson(Lambda(S)) count, then i.i.d. locations."""
    total = integrated_intensity(intensity)
    count = int(rng.poisson(total)) if total > 0 else 0
    if count == 0:
        return PointPattern(np.empty((0, 2)), time_index)
    sampler = _CellSampler(intensity.log_lattice())
    return PointPattern(sampler.sample(rng, count), time_index)


@numba.njit(cache=True)
def _propose(rng, cdf, cell_max, logv, r, spacing):
    while True:
        u = rng.random()
        lo = 0
        hi = cdf.size - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if cdf[mid] > u:
                hi = mid
            else:
                lo = mid + 1
        ci = lo // (r - 1)
        cj = lo - ci * (r - 1)
        tx = rng.random()
        ty = rng.random()
        val = (
            (1 - tx) * (1 - ty) * logv[ci, cj]
            + tx * (1 - ty) * logv[ci + 1, cj]
            + (1 - tx) * ty * logv[ci, cj + 1]
            + tx * ty * logv[ci + 1, cj + 1]
        )
        if rng.random() < math.exp(val - cell_max[lo]):
            return min((ci + tx) * spacing, 1.0), min((cj + ty) * spacing, 1.0)


@numba.njit(cache=True)
def _conflicts(px, py, k, x, y, r2, skip):
    for j in range(k):
        if j == skip:
            continue
        dx = px[j] - x
        dy = py[j] - y
        if dx * dx + dy * dy <= r2:
            return True
    return False


@numba.njit(cache=True)
def _hardcore_kernel(rng, n, radius, n_proposals, cdf, cell_max, logv, r, spacing, max_restarts):
    px = np.empty(n)
    py = np.empty(n)
    r2 = radius * radius
    ok = False
    for _attempt in range(max_restarts):
        k = 0
        budget = 1000 * n
        while k < n and budget > 0:
            x, y = _propose(rng, cdf, cell_max, logv, r, spacing)
            budget -= 1
            if not _conflicts(px, py, k, x, y, r2, -1):
                px[k] = x
                py[k] = y
                k += 1
        if k == n:
            ok = True
            break
    if not ok:
        return px, py, False
    for _ in range(n_proposals):
        i = int(rng.random() * n)
        x, y = _propose(rng, cdf, cell_max, logv, r, spacing)
        if not _conflicts(px, py, n, x, y, r2, i):
            px[i] = x
            py[i] = y
    return px, py, True


def sample_hardcore(model: HardcoreModel, rng, time_index=0, max_restarts=1000) -> PointPattern:
    """Fixed-n hard core process by Metropolis replacement moves.

    Each move relocates one uniformly chosen point to a location drawn from the
    first-order intensity; with that proposal the Metropolis-Hastings ratio
    reduces to the hard core indicator.
    """
    intensity = model.intensity or IntensityModel(0.0)
    sampler = _CellSampler(intensity.log_lattice())
    n_prop = int(model.burn_in_sweeps) * model.n
    px, py, ok = _hardcore_kernel(
        rng,
        model.n,
        float(model.radius),
        n_prop,
        sampler.cdf,
        sampler.cell_max,
        sampler.log_lattice,
        sampler.resolution,
        sampler.spacing,
        int(max_restarts),
    )
    if not ok:
        raise InfeasibleHardcoreError(
            f"sequential inhibition failed to place {model.n} points at radius {model.radius:g} "
            f"after {max_restarts} restarts"
        )
    return PointPattern(np.column_stack([px, py]), time_index)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _tile_weights_1d(resolution):
    w = np.full(resolution, 1.0 / (resolution - 1))
    w[0] = w[-1] = 0.5 / (resolution - 1)
    return w


def build_quadrature(pattern: PointPattern, resolution=DEFAULT_RESOLUTION) -> Quadrature:
    """Data points plus lattice dummy nodes with counting weights.

    Each lattice node owns the tile of points closer to it than to any other node
    (interior tiles are full cells, edge tiles half cells).  A tile's area is split
    evenly among its dummy node and the data points that fall inside it.
    """
    r = int(resolution)
    w1 = _tile_weights_1d(r)
    tile_area = np.outer(w1, w1).ravel()
    pts = pattern.points
    ti = np.clip(np.rint(pts[:, 0] * (r - 1)).astype(int), 0, r - 1)
    tj = np.clip(np.rint(pts[:, 1] * (r - 1)).astype(int), 0, r - 1)
    tile = ti * r + tj
    counts = 1 + np.bincount(tile, minlength=r * r)
    weights = np.concatenate([tile_area[tile] / counts[tile], tile_area / counts])
    locations = np.concatenate([pts, lattice_nodes(r)])
    is_data = np.zeros(weights.size, dtype=bool)
    is_data[: pattern.n] = True
    return Quadrature(locations, weights, is_data, r)


def _design(quad: Quadrature, covariates, include_intercept):
    n_data = int(quad.is_data.sum())
    cols = []
    if include_intercept:
        cols.append(np.ones(quad.weights.size))
    for cov in covariates:
        vals = np.empty(quad.weights.size)
        vals[:n_data] = cov(quad.locations[:n_data])
        if cov.resolution == quad.resolution:
            vals[n_data:] = cov.values.ravel()
        else:
            vals[n_data:] = cov(quad.locations[n_data:])
        cols.append(vals)
    if not cols:
        return np.empty((quad.weights.size, 0))
    return np.column_stack(cols)


def fit_intensity(
    pattern: PointPattern,
    covariates=(),
    include_intercept=True,
    *,
    resolution=None,
    max_iter=100,
    tol=1e-9,
    max_coef=50.0,
) -> FittedIntensity:
    """Maximum (quadrature-approximated) Poisson likelihood by damped Newton steps."""
    covariates = tuple(covariates)
    if pattern.n == 0:
        raise ValueError("cannot fit an intensity to an empty pattern")
    if resolution is None:
        resolution = covariates[0].resolution if covariates else DEFAULT_RESOLUTION
    quad = build_quadrature(pattern, resolution)
    X = _design(quad, covariates, include_intercept)
    w = quad.weights
    z = quad.is_data.astype(float)
    p = X.shape[1]
    area = quad.total_weight

    if p:
        if np.linalg.matrix_rank(X * np.sqrt(w)[:, None]) < p:
            raise RankDeficiencyError("design matrix is rank deficient (collinear covariates)")

    def loglik(beta):
        eta = X @ beta
        return area + float(z @ eta) - float(w @ np.exp(eta))

    beta = np.zeros(p)
    if include_intercept:
        beta[0] = math.log(pattern.n / area)
    ll = loglik(beta)
    trace = [ll]
    grad_norm = float("nan")
    it = 0
    for it in range(1, max_iter + 1):
        if p == 0:
            break
        lam = np.exp(X @ beta)
        grad = X.T @ (z - w * lam)
        grad_norm = float(np.linalg.norm(grad))
        hess = (X * (w * lam)[:, None]).T @ X
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise IntensityFitError("singular Hessian during Newton iterations", grad_norm) from None
        t = 1.0
        while True:
            cand = beta + t * step
            ll_c = loglik(cand)
            if np.isfinite(ll_c) and ll_c >= ll:
                break
            t *= 0.5
            if t < 1e-10:
                raise IntensityFitError("line search failed to increase the likelihood", grad_norm)
        beta, ll = cand, ll_c
        trace.append(ll)
        if np.max(np.abs(beta)) > max_coef:
            raise IntensityFitError(
                f"coefficients diverging (|beta| > {max_coef}); covariate may separate the points",
                grad_norm,
            )
        if float(np.abs(step).max()) * t < tol:
            break
    else:
        raise IntensityFitError(f"Newton iterations did not converge in {max_iter} steps", grad_norm)

    if include_intercept:
        intercept, coefs = float(beta[0]), tuple(beta[1:])
    else:
        intercept, coefs = 0.0, tuple(beta)
    model = IntensityModel(intercept, coefs, covariates, resolution=resolution)
    return FittedIntensity(model, quad, ll, pattern.n, it, tuple(trace))


def fit_hardcore(pattern: PointPattern, covariates=(), *, burn_in_sweeps=10_000, **kwargs) -> HardcoreModel:
    """Hard core null: radius = minimum interpoint distance, first-order term as for the IPP."""
    if pattern.n < 2:
        raise ValueError("need at least two points to estimate a hard core radius")
    from scipy.spatial import cKDTree

    d, _ = cKDTree(pattern.points).query(pattern.points, k=2)
    radius = float(d[:, 1].min())
    fitted = fit_intensity(pattern, covariates, **kwargs)
    return HardcoreModel(radius, pattern.n, fitted.model, burn_in_sweeps)


# ---------------------------------------------------------------------------
# Smoothed raw residuals
# ---------------------------------------------------------------------------


def _kernel_1d(u, nodes, h):
    d = u[:, None] - nodes[None, :]
    k = np.exp(-0.5 * (d / h) ** 2) / (math.sqrt(2.0 * math.pi) * h)
    k[np.abs(d) > 4.0 * h] = 0.0
    return k


class ResidualSmoother:
    """Edge-corrected Gaussian smoothing of the raw residual measure.

    s(u) = [sum_i k(u - s_i) - int k(u - v) lambda(v) dv] / int_S k(u - v) dv,
    with the integrals as tile-weighted lattice sums.  The kernel is the product
    of two 1-D Gaussians, each truncated at four bandwidths.
    """

    def __init__(self, fitted, bandwidth):
        if not (np.isfinite(bandwidth) and bandwidth > 0):
            raise ValueError("bandwidth must be a positive finite number")
        model = fitted.model if isinstance(fitted, FittedIntensity) else fitted
        self.model = model
        self.bandwidth = float(bandwidth)
        r = model.resolution
        self.resolution = r
        self.grid = np.linspace(0.0, 1.0, r)
        self.w1 = _tile_weights_1d(r)
        lam = np.exp(model.log_lattice())
        self.mass = np.outer(self.w1, self.w1) * lam
        self.total = float(self.mass.sum())

    def _terms(self, points):
        gx = _kernel_1d(points[:, 0], self.grid, self.bandwidth)
        gy = _kernel_1d(points[:, 1], self.grid, self.bandwidth)
        expected = np.einsum("ia,ab,ib->i", gx, self.mass, gy)
        edge = (gx @ self.w1) * (gy @ self.w1)
        return gx, gy, expected, edge

    def at(self, points, pattern: PointPattern, exclude=None):
        """Residual field at ``points``; ``exclude[i]`` drops one data index per target."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        _, _, expected, edge = self._terms(points)
        data = pattern.points
        kx = _kernel_1d(points[:, 0], data[:, 0], self.bandwidth)
        ky = _kernel_1d(points[:, 1], data[:, 1], self.bandwidth)
        kern = kx * ky
        if exclude is not None:
            kern[np.arange(points.shape[0]), np.asarray(exclude)] = 0.0
        return (kern.sum(axis=1) - expected) / edge

    def at_points(self, pattern: PointPattern, leave_one_out=False):
        exclude = np.arange(pattern.n) if leave_one_out else None
        return self.at(pattern.points, pattern, exclude)

    def field(self, pattern: PointPattern) -> GridField:
        nodes = self.grid
        gx = _kernel_1d(nodes, nodes, self.bandwidth)
        expected = gx @ self.mass @ gx.T
        edge = np.outer(gx @ self.w1, gx @ self.w1)
        data = pattern.points
        if pattern.n:
            kx = _kernel_1d(nodes, data[:, 0], self.bandwidth)
            ky = _kernel_1d(nodes, data[:, 1], self.bandwidth)
            observed = kx @ ky.T
        else:
            observed = np.zeros_like(expected)
        return GridField((observed - expected) / edge)


def smoothed_residual_field(pattern: PointPattern, fitted, bandwidth: float) -> GridField:
    return ResidualSmoother(fitted, bandwidth).field(pattern)


def loocv_objective(pattern: PointPattern, fitted, bandwidth: float) -> float:
    """Least-squares cross-validation score of the smoothed residual field.

    CV(h) = int s_h^2 - 2 [sum_i s_h^(-i)(s_i) - int s_h lambda_hat], an unbiased
    (up to a constant) estimate of the integrated squared error between the
    smoothed residual field and the true excess intensity lambda - lambda_hat.
    s_h^(-i) is the field built without point i.
    """
    sm = ResidualSmoother(fitted, bandwidth)
    field_ = sm.field(pattern).values
    tile = np.outer(sm.w1, sm.w1)
    lam = np.exp(sm.model.log_lattice())
    loo = sm.at_points(pattern, leave_one_out=True)
    return float((tile * field_**2).sum() - 2.0 * (loo.sum() - (tile * field_ * lam).sum()))


def default_bandwidth_grid(resolution=DEFAULT_RESOLUTION, num=10):
    return np.geomspace(0.5 / (resolution - 1), 0.25, num)


def select_bandwidth_loocv(pattern: PointPattern, fitted, grid=None) -> float:
    """Candidate bandwidth minimising the leave-one-out criterion."""
    if grid is None:
        grid = default_bandwidth_grid(fitted.model.resolution if isinstance(fitted, FittedIntensity) else fitted.resolution)
    grid = [float(h) for h in np.atleast_1d(grid)]
    if not grid:
        raise ValueError("bandwidth grid is empty")
    if pattern.n < 3:
        raise ValueError("LOOCV bandwidth selection needs at least 3 points")
    if len(grid) == 1:
        return grid[0]
    scores = np.array([loocv_objective(pattern, fitted, h) for h in grid])
    if not np.any(np.isfinite(scores)) or np.ptp(scores[np.isfinite(scores)]) == 0:
        warnings.warn("degenerate LOOCV bandwidth grid; using the first candidate", BandwidthWarning, stacklevel=2)
        return grid[0]
    scores[~np.isfinite(scores)] = np.inf
    return grid[int(np.argmin(scores))]


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_points_csv(patterns, path):
    """Write ``x,y,t[,mark]`` rows for one or more patterns."""
    if isinstance(patterns, PointPattern):
        patterns = [patterns]
    with_marks = any(p.marks is not None for p in patterns)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "t", "mark"] if with_marks else ["x", "y", "t"])
        for p in patterns:
            for i in range(p.n):
                row = [repr(float(p.points[i, 0])), repr(float(p.points[i, 1])), p.time_index]
                if with_marks:
                    row.append("" if p.marks is None else repr(float(p.marks[i])))
                writer.writerow(row)


def read_points_csv(path):
    """Parse an ``x,y,t[,mark]`` CSV into one pattern per time index (sorted by t)."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}:1: empty file (expected header 'x,y,t[,mark]')")
    header = [c.strip() for c in rows[0]]
    if header not in (["x", "y", "t"], ["x", "y", "t", "mark"]):
        raise ValueError(f"{path}:1: expected header 'x,y,t[,mark]', got {','.join(header)!r}")
    has_mark = len(header) == 4
    groups = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            x, y = float(row[0]), float(row[1])
            t = int(row[2])
            mark = float(row[3]) if has_mark and row[3].strip() else np.nan
        except ValueError:
            raise ValueError(f"{path}:{lineno}: could not parse {row!r}") from None
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"{path}:{lineno}: point ({x}, {y}) outside the unit square")
        groups.setdefault(t, []).append((x, y, mark))
    if not groups:
        raise ValueError(f"{path}: no data rows")
    out = []
    for t in sorted(groups):
        arr = np.asarray(groups[t], dtype=float)
        marks = arr[:, 2] if has_mark else None
        out.append(PointPattern(arr[:, :2], t, marks))
    return out
