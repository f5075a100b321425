"""Maximum-likelihood kriging used to produce the naive latent-field estimates."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import optimize
from scipy.spatial.distance import cdist

from .pointproc import PointPattern
from .randfield import (
    DEFAULT_RESOLUTION,
    MaternParams,
    _range_constant,
    _unit_matern,
    _unit_matern_dlogscale,
    matern_scale,
)

__all__ = [
    "TRANSFORMS",
    "KrigingModel",
    "KrigingPredictor",
    "KrigingFitError",
    "DegenerateMarksError",
    "apply_transform",
    "fit_kriging",
    "predict_z",
]

TRANSFORMS = ("identity", "log-ratio", "anscombe")

# bounds relative to the variance of the OLS-detrended responses
SIGMA2_BOUNDS = (1e-4, 25.0)
NUGGET_BOUNDS = (1e-8, 25.0)
RANGE_MAX = 4.0
START_RANGES = (0.05, 0.15, 0.4, 1.0, 2.5)
START_NUGGET_FRACTIONS = (0.1, 0.01, 0.1, 0.01, 0.1)


class KrigingFitError(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateMarksError(ValueError):
    pass


def apply_transform(values, transform):
    y = np.asarray(values, dtype=float)
    if transform == "identity":
        return y.copy()
    if transform == "log-ratio":
        if np.any(y <= 0):
            raise ValueError("log-ratio transform requires strictly positive marks")
        logy = np.log(y)
        return logy - logy.mean()
    if transform == "anscombe":
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("anscombe transform requires non-negative integer counts")
        return 2.0 * np.sqrt(y + 3.0 / 8.0)
    raise ValueError(f"unknown transform {transform!r}; expected one of {TRANSFORMS}")


def _marked(pattern: PointPattern):
    if pattern.marks is None:
        raise ValueError("pattern carries no marks")
    ok = np.isfinite(pattern.marks)
    return pattern.points[ok], pattern.marks[ok]


def _design(points, covariates):
    cols = [np.ones(points.shape[0])]
    cols += [cov(points) for cov in covariates]
    return np.column_stack(cols)


@dataclass(frozen=True, eq=False)
class KrigingModel:
    params: MaternParams
    nugget: float
    mean: float = 0.0
    coefficients: tuple = ()
    covariates: tuple = ()
    transform: str = "identity"
    loglik: float = float("nan")

    def __post_init__(self):
        if not (np.isfinite(self.nugget) and self.nugget >= 0):
            raise ValueError("nugget must be finite and >= 0")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        coefs = tuple(float(c) for c in self.coefficients)
        if len(coefs) != len(self.covariates):
            raise ValueError("one coefficient per covariate required")
        object.__setattr__(self, "coefficients", coefs)
        object.__setattr__(self, "covariates", tuple(self.covariates))

    def predictor(self, pattern: PointPattern) -> "KrigingPredictor":
        return KrigingPredictor(self, pattern)

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "nugget": self.nugget,
            "mean": self.mean,
            "coefficients": list(self.coefficients),
            "transform": self.transform,
            "loglik": self.loglik,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _factor(cov, scale):
    """Cholesky with diagonal jitter escalation 1e-10 -> 1e-6 (relative to ``scale``)."""
    try:
        return scipy.linalg.cho_factor(cov, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    diag = np.arange(cov.shape[0])
    jitter = 1e-10
    while jitter <= 1e-6 * (1 + 1e-9):
        trial = cov.copy()
        trial[diag, diag] += jitter * scale
        try:
            return scipy.linalg.cho_factor(trial, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            jitter *= 10
    raise np.linalg.LinAlgError("kriging system singular after jitter escalation")


class KrigingPredictor:
    """Kriging system conditioned on the marks of one pattern."""

    def __init__(self, model: KrigingModel, pattern: PointPattern):
        self.model = model
        locs, marks = _marked(pattern)
        self.locations = locs
        self.y = apply_transform(marks, model.transform)
        beta = np.array([model.mean, *model.coefficients])
        self.residual = self.y - _design(locs, model.covariates) @ beta
        p = model.params
        self._scale = matern_scale(p)
        cov = p.sigma**2 * _unit_matern(cdist(locs, locs) / self._scale, p.nu)
        cov[np.diag_indices_from(cov)] += model.nugget
        try:
            self._cf = _factor(cov, p.sigma**2)
        except np.linalg.LinAlgError as exc:
            raise KrigingFitError(str(exc)) from None
        self.alpha = scipy.linalg.cho_solve(self._cf, self.residual, check_finite=False)

    def _cross(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        p = self.model.params
        return p.sigma**2 * _unit_matern(cdist(points, self.locations) / self._scale, p.nu)

    def z_at(self, points):
        """Posterior mean of the zero-mean latent field (trend removed)."""
        return self._cross(points) @ self.alpha

    def variance_at(self, points):
        k = self._cross(points)
        v = scipy.linalg.cho_solve(self._cf, k.T, check_finite=False)
        out = self.model.params.sigma**2 - np.einsum("ij,ji->i", k, v)
        return np.maximum(out, 0.0)

    __call__ = z_at


def predict_z(model: KrigingModel, pattern: PointPattern, targets):
    return KrigingPredictor(model, pattern).z_at(targets)


def _neg_loglik(theta, D, y, X, nu, range_const):
    sigma2, rng_, tau2 = np.exp(theta)
    n = y.size
    x = D * (range_const / rng_)
    R = _unit_matern(x, nu)
    C = sigma2 * R
    C[np.diag_indices(n)] += tau2
    try:
        cf = _factor(C, sigma2)
    except np.linalg.LinAlgError:
        return 1e20, np.zeros(3)
    Ci = scipy.linalg.cho_solve(cf, np.eye(n), check_finite=False)
    CiX = Ci @ X
    beta = np.linalg.solve(X.T @ CiX, CiX.T @ y)
    r = y - X @ beta
    alpha = Ci @ r
    logdet = 2.0 * np.log(np.diag(cf[0])).sum()
    nll = 0.5 * (logdet + r @ alpha + n * math.log(2 * math.pi))
    W = Ci - np.outer(alpha, alpha)
    dR = _unit_matern_dlogscale(x, nu)
    grad = 0.5 * np.array(
        [
            np.sum(W * (sigma2 * R)),
            np.sum(W * (sigma2 * dR)),
            tau2 * np.trace(W),
        ]
    )
    return float(nll), grad


def fit_kriging(
    pattern: PointPattern,
    covariates=(),
    transform="identity",
    *,
    nu=1.0,
    min_range=None,
    restarts=len(START_RANGES),
) -> KrigingModel:
    """Fit sigma, practical range, nugget and trend by maximum likelihood.

    The trend coefficients are profiled out by generalised least squares; the
    three covariance parameters are searched on the log scale with L-BFGS-B from
    several starting ranges and the best optimum is kept.
    """
    covariates = tuple(covariates)
    locs, marks = _marked(pattern)
    if locs.shape[0] < 5:
        raise ValueError(f"kriging needs at least 5 marked points, got {locs.shape[0]}")
    y = apply_transform(marks, transform)
    if np.ptp(y) == 0:
        raise DegenerateMarksError("all marks are identical; the field variance is not identifiable")
    X = _design(locs, covariates)
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    s2 = float(np.var(y - X @ ols))
    if s2 <= 0:
        raise DegenerateMarksError("marks are fully explained by the trend")
    if min_range is None:
        min_range = 1.0 / (DEFAULT_RESOLUTION - 1)
    D = cdist(locs, locs)
    rc = _range_constant(float(nu))
    bounds = [
        (math.log(SIGMA2_BOUNDS[0] * s2), math.log(SIGMA2_BOUNDS[1] * s2)),
        (math.log(min_range), math.log(RANGE_MAX)),
        (math.log(NUGGET_BOUNDS[0] * s2), math.log(NUGGET_BOUNDS[1] * s2)),
    ]
    best = None
    converged = False
    for k in range(max(1, int(restarts))):
        r0 = START_RANGES[k % len(START_RANGES)]
        f0 = START_NUGGET_FRACTIONS[k % len(START_NUGGET_FRACTIONS)]
        x0 = np.array([math.log(s2), math.log(r0), math.log(f0 * s2)])
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
        res = optimize.minimize(
            _neg_loglik,
            x0,
            args=(D, y, X, float(nu), rc),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": 200},
        )
        if not np.isfinite(res.fun) or res.fun >= 1e20:
            continue
        converged |= bool(res.success)
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise KrigingFitError("likelihood could not be evaluated at any starting point")
    sigma2, range_, tau2 = np.exp(best.x)
    params = MaternParams(nu=nu, sigma=math.sqrt(sigma2), range=float(range_))
    # recover the GLS trend at the optimum
    C = sigma2 * _unit_matern(D * (rc / range_), nu)
    C[np.diag_indices_from(C)] += tau2
    cf = _factor(C, sigma2)
    CiX = scipy.linalg.cho_solve(cf, X, check_finite=False)
    beta = np.linalg.solve(X.T @ CiX, CiX.T @ y)
    model = KrigingModel(
        params, float(tau2), float(beta[0]), tuple(beta[1:]), covariates, transform, -float(best.fun)
    )
    if not converged:
        raise KrigingFitError(f"optimizer did not converge: {best.message}", best=model)
    return model

