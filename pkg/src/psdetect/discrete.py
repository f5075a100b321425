"""Preferential-sampling test for areal units under a logistic selection model."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from ._parallel import parallel_map
from .latent import KrigingModel, fit_kriging
from .nnstats import UndefinedStatisticError, knn_table, spearman_rho
from .pointproc import PointPattern
from .pstest import MAX_REDRAWS, TestConfig, TestReport, _assemble, substream

__all__ = [
    "ArealPopulation",
    "SelectionModel",
    "SelectionFitError",
    "fit_selection",
    "estimate_unit_z",
    "run_discrete_test",
    "read_areal_csv",
    "write_areal_csv",
]

MAX_LOGIT_COEF = 30.0


class SelectionFitError(RuntimeError):
    pass


def _matrix(a, n):
    if a is None:
        return np.empty((n, 0))
    a = np.asarray(a, dtype=float)
    return a.reshape(n, -1)


@dataclass(frozen=True, eq=False)
class ArealPopulation:
    """Units of one time index: centroids, areas, selection flags and marks."""

    ids: tuple
    centroids: np.ndarray
    areas: np.ndarray
    selected: np.ndarray
    marks: np.ndarray
    w: np.ndarray = None
    x: np.ndarray = None
    time_index: int = 0

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=float).reshape(-1, 2)
        n = c.shape[0]
        if np.any(c < 0) or np.any(c > 1) or not np.all(np.isfinite(c)):
            raise ValueError("centroids must lie in the unit square")
        areas = np.asarray(self.areas, dtype=float).reshape(n)
        if np.any(~(areas > 0)):
            raise ValueError("areas must be positive")
        sel = np.asarray(self.selected).astype(bool).reshape(n)
        marks = np.asarray(self.marks, dtype=float).reshape(n).copy()
        if np.any(~np.isfinite(marks[sel])):
            raise ValueError("every selected unit needs a finite mark")
        marks[~sel] = np.nan
        ids = tuple(self.ids) if self.ids is not None else tuple(range(n))
        if len(ids) != n:
            raise ValueError("one id per unit required")
        for name, val in (("centroids", c), ("areas", areas), ("selected", sel), ("marks", marks)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "ids", ids)
        for name in ("w", "x"):
            m = _matrix(getattr(self, name), n)
            if not np.all(np.isfinite(m)):
                raise ValueError(f"covariate {name} must be finite")
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        object.__setattr__(self, "time_index", int(self.time_index))

    @property
    def size(self):
        return self.centroids.shape[0]

    @property
    def n_selected(self):
        return int(self.selected.sum())

    def selected_pattern(self) -> PointPattern:
        """Selected centroids as a marked point pattern."""
        return PointPattern(self.centroids[self.selected], self.time_index, self.marks[self.selected])

    def with_selection(self, selected, marks=None):
        marks = self.marks if marks is None else marks
        return ArealPopulation(self.ids, self.centroids, self.areas, selected, marks, self.w, self.x, self.time_index)


@dataclass(frozen=True)
class SelectionModel:
    """logit p = intercept + alpha . w[:, w_cols] + delta . x[:, x_cols]"""

    intercept: float
    alpha: tuple = ()
    delta: tuple = ()
    w_cols: tuple = ()
    x_cols: tuple = ()
    loglik: float = float("nan")

    def linear_predictor(self, pop: ArealPopulation):
        eta = np.full(pop.size, float(self.intercept))
        if self.w_cols:
            eta += pop.w[:, list(self.w_cols)] @ np.asarray(self.alpha)
        if self.x_cols:
            eta += pop.x[:, list(self.x_cols)] @ np.asarray(self.delta)
        return eta

    def probabilities(self, pop: ArealPopulation):
        return expit(self.linear_predictor(pop))

    def to_dict(self):
        return {
            "intercept": self.intercept,
            "alpha": list(self.alpha),
            "delta": list(self.delta),
            "w_cols": list(self.w_cols),
            "x_cols": list(self.x_cols),
            "loglik": self.loglik,
        }


def _parse_include(include):
    w_cols, x_cols = [], []
    for item in include or ():
        name = str(item)
        if len(name) < 2 or name[0] not in "wx" or not name[1:].isdigit() or int(name[1:]) < 1:
            raise ValueError(f"covariate names look like 'w1' or 'x2', got {item!r}")
        (w_cols if name[0] == "w" else x_cols).append(int(name[1:]) - 1)
    return tuple(w_cols), tuple(x_cols)


def _stack(pops):
    return pops if isinstance(pops, (list, tuple)) else [pops]


def fit_selection(pop, include=(), *, max_iter=100, tol=1e-10) -> SelectionModel:
    """Logistic maximum likelihood by Newton iterations with step halving.

    ``include`` names covariate columns, e.g. ``("w1", "x2")``. Several time
    indices may be pooled by passing a list of populations.
    """
    pops = _stack(pop)
    w_cols, x_cols = _parse_include(include)
    for p in pops:
        if w_cols and max(w_cols) >= p.w.shape[1]:
            raise ValueError(f"population has only {p.w.shape[1]} w covariates")
        if x_cols and max(x_cols) >= p.x.shape[1]:
            raise ValueError(f"population has only {p.x.shape[1]} x covariates")
    X = np.vstack(
        [np.column_stack([np.ones(p.size), p.w[:, list(w_cols)], p.x[:, list(x_cols)]]) for p in pops]
    )
    y = np.concatenate([p.selected.astype(float) for p in pops])
    if y.sum() == 0 or y.sum() == y.size:
        raise SelectionFitError("selection model needs both selected and unselected units")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SelectionFitError("selection design matrix is rank deficient")

    def loglik(beta):
        eta = X @ beta
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    beta = np.zeros(X.shape[1])
    beta[0] = math.log(y.mean() / (1 - y.mean()))
    ll = loglik(beta)
    for _ in range(max_iter):
        mu = expit(X @ beta)
        grad = X.T @ (y - mu)
        hess = (X * (mu * (1 - mu))[:, None]).T @ X
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise SelectionFitError("singular information matrix; covariates may separate the selection") from None
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        beta, ll_old, ll = cand, ll, ll_new
        if np.max(np.abs(beta)) > MAX_LOGIT_COEF:
            raise SelectionFitError(
                f"coefficients diverge (|beta| > {MAX_LOGIT_COEF}); a covariate perfectly separates selection"
            )
        if abs(ll - ll_old) < tol and np.max(np.abs(t * step)) < 1e-8:
            break
    else:
        raise SelectionFitError(f"Newton iterations did not converge; gradient norm {np.linalg.norm(grad):.3g}")
    return SelectionModel(
        float(beta[0]),
        tuple(beta[1 : 1 + len(w_cols)]),
        tuple(beta[1 + len(w_cols) :]),
        w_cols,
        x_cols,
        ll,
    )


class _UnitCovariate:
    """Nearest-centroid lookup of a per-unit covariate, usable as a kriging trend."""

    def __init__(self, centroids, values):
        self.tree = cKDTree(centroids)
        self.values = np.asarray(values, dtype=float)

    def __call__(self, points):
        _, idx = self.tree.query(np.atleast_2d(points))
        return self.values[idx]


def estimate_unit_z(pop: ArealPopulation, transform="identity", use_x=False, model: KrigingModel | None = None):
    """Kriging estimates of the latent value at every unit centroid.

    Units are treated as points located at their centroids. With ``use_x`` the
    x covariates enter the trend and the returned estimates are detrended.
    Returns ``(z_hat, model)``.
    """
    pattern = pop.selected_pattern()
    if model is None:
        covs = tuple(_UnitCovariate(pop.centroids, pop.x[:, j]) for j in range(pop.x.shape[1])) if use_x else ()
        model = fit_kriging(pattern, covs, transform)
    return model.predictor(pattern).z_at(pop.centroids), model


def _draw_selection(probs, n_fixed, rng):
    if n_fixed is None:
        return rng.random(probs.size) < probs
    # exponential keys: the n smallest of E_i / odds_i form a weighted draw without replacement
    with np.errstate(divide="ignore"):
        odds = probs / (1.0 - probs)
        keys = rng.standard_exponential(probs.size) / odds
    sel = np.zeros(probs.size, dtype=bool)
    sel[np.argsort(keys, kind="stable")[:n_fixed]] = True
    return sel


def _discrete_statistic(centroids, z, config):
    table = knn_table(centroids, config.k_values)
    return np.array([spearman_rho(z, table[:, j]) for j in range(table.shape[1])])


def _discrete_replicate(args):
    ti, m, centroids, z, probs, n_fixed, config = args
    rng = substream(config.seed, ti, m)
    need = max(config.k_values) + 1
    for _ in range(1 + MAX_REDRAWS):
        sel = _draw_selection(probs, n_fixed, rng)
        if sel.sum() >= max(need, 3):
            break
    else:
        return None
    try:
        return _discrete_statistic(centroids[sel], z[sel], config)
    except UndefinedStatisticError:
        return None


def run_discrete_test(pop, z_hat, model: SelectionModel, config: TestConfig, *, workers=1) -> TestReport:
    """Monte Carlo nearest-neighbour test for areal data.

    ``z_hat`` holds the latent estimate of every unit (one array per time index
    when ``pop`` is a list).  Replicate selections are independent Bernoulli
    draws from ``model``; with ``fix_n`` exactly the observed number of units is
    drawn without replacement with probability proportional to the fitted odds.
    """
    if config.statistic != "nn":
        raise ValueError("the areal test uses the nearest-neighbour statistic")
    pops = _stack(pop)
    zs = z_hat if isinstance(pop, (list, tuple)) else [z_hat]
    if isinstance(z_hat, dict):
        zs = [z_hat[p.time_index] for p in pops]
    models = model if isinstance(model, (list, tuple)) else [model] * len(pops)
    times, obs, jobs = [], [], []
    for ti, p in enumerate(pops):
        z = np.asarray(zs[ti], dtype=float).reshape(-1)
        if z.size != p.size:
            raise ValueError(f"need one latent estimate per unit ({p.size}), got {z.size}")
        if not np.all(np.isfinite(z)):
            raise ValueError("latent estimates must be finite")
        config.check_pattern(p.n_selected)
        times.append(p.time_index)
        obs.append(_discrete_statistic(p.centroids[p.selected], z[p.selected], config))
        probs = models[ti].probabilities(p)
        n_fixed = p.n_selected if config.fix_n else None
        jobs += [(ti, m, p.centroids, z, probs, n_fixed, config) for m in range(config.m)]
    results = parallel_map(_discrete_replicate, jobs, workers)
    mc = [results[i * config.m : (i + 1) * config.m] for i in range(len(times))]
    return _assemble("areal", config, times, obs, mc)


# ---------------------------------------------------------------- CSV

_BASE = ["id", "cx", "cy", "area", "t", "selected", "mark"]


def write_areal_csv(pops, path):
    pops = _stack(pops)
    p_w = pops[0].w.shape[1]
    p_x = pops[0].x.shape[1]
    header = _BASE + [f"w{j + 1}" for j in range(p_w)] + [f"x{j + 1}" for j in range(p_x)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for p in pops:
            for i in range(p.size):
                mark = repr(float(p.marks[i])) if p.selected[i] else ""
                row = [p.ids[i], repr(float(p.centroids[i, 0])), repr(float(p.centroids[i, 1])),
                       repr(float(p.areas[i])), p.time_index, int(p.selected[i]), mark]
                row += [repr(float(v)) for v in p.w[i]] + [repr(float(v)) for v in p.x[i]]
                out.writerow(row)


class ArealParseError(ValueError):
    pass


def read_areal_csv(path):
    """Parse the areal CSV into one ``ArealPopulation`` per time index (sorted by t)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and not r[0].startswith("#")]
    if not rows:
        raise ArealParseError(f"{path}: empty file")
    line, header = rows[0]
    header = [h.strip() for h in header]
    if header[: len(_BASE)] != _BASE:
        raise ArealParseError(f"{path}:{line}: header must start with {','.join(_BASE)}")
    extra = header[len(_BASE) :]
    w_idx = [j for j, h in enumerate(extra) if h.startswith("w")]
    x_idx = [j for j, h in enumerate(extra) if h.startswith("x")]
    expected = [f"w{j + 1}" for j in range(len(w_idx))] + [f"x{j + 1}" for j in range(len(x_idx))]
    if extra != expected:
        raise ArealParseError(f"{path}:{line}: covariate columns must be w1..wp followed by x1..xq")
    groups = {}
    if len(rows) == 1:
        raise ArealParseError(f"{path}: no data rows")
    for line, r in rows[1:]:
        if len(r) != len(header):
            raise ArealParseError(f"{path}:{line}: expected {len(header)} fields, got {len(r)}")
        try:
            cx, cy, area = float(r[1]), float(r[2]), float(r[3])
            t = int(r[4])
            sel = int(r[5])
            if sel not in (0, 1):
                raise ValueError("selected must be 0 or 1")
            mark = r[6].strip()
            if sel and not mark:
                raise ValueError("selected unit without a mark")
            if not sel and mark:
                raise ValueError("mark given for an unselected unit")
            mark = float(mark) if mark else math.nan
            cov = [float(v) for v in r[len(_BASE) :]]
        except ValueError as exc:
            raise ArealParseError(f"{path}:{line}: {exc}") from None
        if not (0 <= cx <= 1 and 0 <= cy <= 1):
            raise ArealParseError(f"{path}:{line}: centroid outside the unit square")
        if not area > 0:
            raise ArealParseError(f"{path}:{line}: area must be positive")
        groups.setdefault(t, []).append((r[0], cx, cy, area, sel, mark, cov))
    pops = []
    nw = len(w_idx)
    for t in sorted(groups):
        g = groups[t]
        cov = np.array([row[6] for row in g], dtype=float).reshape(len(g), -1)
        pops.append(
            ArealPopulation(
                tuple(row[0] for row in g),
                np.array([[row[1], row[2]] for row in g]),
                np.array([row[3] for row in g]),
                np.array([row[4] for row in g], dtype=bool),
                np.array([row[5] for row in g]),
                cov[:, :nw],
                cov[:, nw:],
                t,
            )
        )
    return pops
