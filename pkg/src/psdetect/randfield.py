"""Matérn Gaussian random fields on a regular lattice over the unit square.

Fields are stored as ``values[i, j]`` at node ``(i / (r - 1), j / (r - 1))``
and evaluated elsewhere by bilinear interpolation.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy import optimize, special

__all__ = [
    "MaternParams",
    "GridField",
    "FieldSimulationError",
    "matern_correlation",
    "matern_scale",
    "lattice_nodes",
    "lattice_covariance",
    "simulate_field",
    "simulate_values",
    "interpolate",
    "write_grid_csv",
    "read_grid_csv",
]

DEFAULT_RESOLUTION = 64
MAX_RESOLUTION = 128
PRACTICAL_RANGE_CORRELATION = 0.1


class FieldSimulationError(RuntimeError):
    """Covariance could not be factorized even after jitter escalation."""

    def __init__(self, message, jitter):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True)
class MaternParams:
    nu: float = 1.0
    sigma: float = 1.0
    range: float = 0.2

    def __post_init__(self):
        for name in ("nu", "sigma", "range"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"MaternParams.{name} must be finite and > 0, got {value!r}")

    def to_dict(self):
        return {"nu": self.nu, "sigma": self.sigma, "range": self.range}


def _log_space(x, nu, order, extra_power):
    """2^(1-nu)/Gamma(nu) * x^(nu+extra_power) * K_order(x), evaluated through logs."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        log_val = (
            (1.0 - nu) * math.log(2.0)
            - special.gammaln(nu)
            + (nu + extra_power) * np.log(x)
            + np.log(special.kve(order, x))
            - x
        )
        return np.exp(log_val)


def _unit_matern(x, nu):
    """Matérn correlation at scaled distance ``x`` (unit scale parameter)."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    if nu == 0.5:
        out[pos] = np.exp(-xp)
    elif nu == 1.0:
        out[pos] = xp * special.k1(xp)
    elif nu == 1.5:
        out[pos] = (1.0 + xp) * np.exp(-xp)
    elif nu == 2.5:
        out[pos] = (1.0 + xp + xp * xp / 3.0) * np.exp(-xp)
    else:
        vals = _log_space(xp, nu, nu, 0.0)
        # overflow only happens where the correlation is indistinguishable from 1
        out[pos] = np.where(np.isfinite(vals), vals, np.where(xp < nu, 1.0, 0.0))
    return out


def _unit_matern_dlogscale(x, nu):
    """Derivative of the unit Matérn correlation w.r.t. log of the scale parameter.

    With ``x = d / phi``: d/dlog(phi) f(x) = -x f'(x) = a x^(nu+1) K_{nu-1}(x).
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    xp = x[pos]
    if nu == 0.5:
        out[pos] = xp * np.exp(-xp)
    elif nu == 1.0:
        out[pos] = xp * xp * special.k0(xp)
    elif nu == 1.5:
        out[pos] = xp * xp * np.exp(-xp)
    elif nu == 2.5:
        out[pos] = xp * xp * (1.0 + xp) * np.exp(-xp) / 3.0
    else:
        vals = _log_space(xp, nu, nu - 1.0, 1.0)
        out[pos] = np.where(np.isfinite(vals), vals, 0.0)
    return out


@functools.lru_cache(maxsize=64)
def _range_constant(nu):
    """Scaled distance at which the unit Matérn correlation equals 0.1."""
    if nu == 0.5:
        return math.log(10.0)

    def g(x):
        return float(_unit_matern(np.array([x]), nu)[0]) - PRACTICAL_RANGE_CORRELATION

    hi = 1.0
    while g(hi) > 0:
        hi *= 2.0
    return optimize.bisect(g, 1e-12, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500)


def matern_scale(params: MaternParams) -> float:
    """Internal Matérn scale phi such that correlation(range) = 0.1."""
    return params.range / _range_constant(float(params.nu))


def matern_correlation(d, params: MaternParams):
    """Matérn correlation at distance(s) ``d`` using the practical-range convention."""
    d_arr = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d_arr)):
        raise ValueError("distances must be finite")
    if np.any(d_arr < 0):
        raise ValueError("distances must be non-negative")
    out = _unit_matern(d_arr / matern_scale(params), float(params.nu))
    if np.ndim(d) == 0:
        return float(out)
    return out


def lattice_nodes(resolution):
    g = np.linspace(0.0, 1.0, resolution)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def lattice_covariance(params: MaternParams, resolution: int) -> np.ndarray:
    """Covariance of the lattice nodes (row-major node order).

    Lattice distances only depend on the index offsets, so the correlation is
    tabulated on the ``resolution x resolution`` offset grid and gathered.
    """
    spacing = 1.0 / (resolution - 1)
    off = np.arange(resolution)
    table = matern_correlation(spacing * np.hypot(off[:, None], off[None, :]), params)
    ii, jj = np.divmod(np.arange(resolution * resolution), resolution)
    di = np.abs(ii[:, None] - ii[None, :])
    dj = np.abs(jj[:, None] - jj[None, :])
    return params.sigma**2 * table[di, dj]


@functools.lru_cache(maxsize=4)
def _unit_factor(nu, range_, resolution):
    cov = lattice_covariance(MaternParams(nu=nu, sigma=1.0, range=range_), resolution)
    diag = np.arange(cov.shape[0])
    jitter = 1e-10
    while True:
        trial = cov.copy()
        trial[diag, diag] += jitter
        try:
            factor = scipy.linalg.cholesky(trial, lower=True, overwrite_a=True, check_finite=False)
            factor.setflags(write=False)
            return factor
        except np.linalg.LinAlgError:
            if jitter >= 1e-6 * (1 - 1e-9):
                raise FieldSimulationError(
                    f"lattice covariance not positive definite (final jitter {jitter:g}·sigma^2)",
                    jitter,
                ) from None
            jitter *= 10.0


def simulate_values(params: MaternParams, resolution: int, rng, size=None, max_resolution=MAX_RESOLUTION):
    """Raw lattice samples, shape ``(r, r)`` or ``(size, r, r)``."""
    resolution = int(resolution)
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if resolution > max_resolution:
        raise ValueError(
            f"resolution {resolution} exceeds the Cholesky guard ({max_resolution}); "
            "raise max_resolution explicitly to proceed"
        )
    factor = _unit_factor(float(params.nu), float(params.range), resolution)
    npts = resolution * resolution
    if size is None:
        xi = rng.standard_normal(npts)
        return params.sigma * (factor @ xi).reshape(resolution, resolution)
    xi = rng.standard_normal((npts, int(size)))
    return params.sigma * (factor @ xi).T.reshape(int(size), resolution, resolution)


def simulate_field(params: MaternParams, resolution: int = DEFAULT_RESOLUTION, rng=None, *, max_resolution=MAX_RESOLUTION):
    """Draw a mean-zero Matérn Gaussian field on a ``resolution x resolution`` lattice."""
    if rng is None:
        raise ValueError("an explicit random generator is required")
    values = simulate_values(params, resolution, rng, max_resolution=max_resolution)
    return GridField(values, params=params)


@dataclass(frozen=True, eq=False)
class GridField:
    """Scalar field on a regular lattice over [0, 1]^2."""

    values: np.ndarray
    params: MaternParams | None = field(default=None)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("GridField values must be a square 2-D array")
        if values.shape[0] < 2:
            raise ValueError("GridField resolution must be >= 2")
        if not np.all(np.isfinite(values)):
            raise ValueError("GridField values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return 1.0 / (self.resolution - 1)

    def nodes(self):
        return lattice_nodes(self.resolution)

    def __call__(self, points):
        return interpolate(self, points)

    def __eq__(self, other):
        if not isinstance(other, GridField):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.values, other.values)

    __hash__ = None

    @classmethod
    def constant(cls, value, resolution=DEFAULT_RESOLUTION):
        return cls(np.full((resolution, resolution), float(value)))


def _cell_coords(coord, resolution):
    f = np.asarray(coord, dtype=float) * (resolution - 1)
    near = np.rint(f)
    # snap floating-point noise so nodes reproduce stored values exactly
    f = np.where(np.abs(f - near) < 1e-9, near, f)
    idx = np.clip(np.floor(f).astype(np.intp), 0, resolution - 2)
    return idx, f - idx


def interpolate(field_: GridField, location):
    """Bilinear interpolation at one point ``(x, y)`` or an ``(n, 2)`` array."""
    pts = np.asarray(location, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 2:
        raise ValueError("locations must have shape (n, 2)")
    if not np.all(np.isfinite(pts)) or np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ValueError("locations must lie inside the unit square")
    v = field_.values
    r = field_.resolution
    i, tx = _cell_coords(pts[:, 0], r)
    j, ty = _cell_coords(pts[:, 1], r)
    out = (
        (1 - tx) * (1 - ty) * v[i, j]
        + tx * (1 - ty) * v[i + 1, j]
        + (1 - tx) * ty * v[i, j + 1]
        + tx * ty * v[i + 1, j + 1]
    )
    return float(out[0]) if scalar else out


def write_grid_csv(field_: GridField, path):
    """Row-major ``x,y,value`` CSV preceded by a ``# resolution=... `` metadata line."""
    path = Path(path)
    meta = [f"resolution={field_.resolution}"]
    if field_.params is not None:
        meta += [f"{k}={v!r}" for k, v in field_.params.to_dict().items()]
    g = np.linspace(0.0, 1.0, field_.resolution)
    with path.open("w", newline="") as fh:
        fh.write("# " + " ".join(meta) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "value"])
        for i in range(field_.resolution):
            for j in range(field_.resolution):
                writer.writerow([repr(float(g[i])), repr(float(g[j])), repr(float(field_.values[i, j]))])


def read_grid_csv(path) -> GridField:
    path = Path(path)
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty grid file")
    meta = {}
    start = 0
    if lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            key, _, val = tok.partition("=")
            meta[key] = val
        start = 1
    rows = list(csv.reader(lines[start:]))
    if not rows or [c.strip() for c in rows[0]] != ["x", "y", "value"]:
        raise ValueError(f"{path}:{start + 1}: expected header 'x,y,value'")
    data = []
    for lineno, row in enumerate(rows[1:], start=start + 2):
        if not row:
            continue
        try:
            data.append([float(c) for c in row])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
        if len(row) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
    data = np.asarray(data)
    res = int(meta.get("resolution", round(math.sqrt(len(data)))))
    if res * res != len(data):
        raise ValueError(f"{path}: {len(data)} rows do not form a {res}x{res} lattice")
    g = np.linspace(0.0, 1.0, res)
    ii = np.rint(data[:, 0] * (res - 1)).astype(int)
    jj = np.rint(data[:, 1] * (res - 1)).astype(int)
    if not (np.allclose(g[ii], data[:, 0]) and np.allclose(g[jj], data[:, 1])):
        raise ValueError(f"{path}: coordinates are not on the {res}x{res} unit-square lattice")
    values = np.full((res, res), np.nan)
    values[ii, jj] = data[:, 2]
    if np.isnan(values).any():
        raise ValueError(f"{path}: lattice has missing nodes")
    params = None
    if {"nu", "sigma", "range"} <= meta.keys():
        params = MaternParams(float(meta["nu"]), float(meta["sigma"]), float(meta["range"]))
    return GridField(values, params=params)
