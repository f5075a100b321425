"""Monte Carlo tests for preferential sampling in geostatistical data.

The nearest-neighbour test correlates latent-field estimates at the sampled
locations with each point's mean K-NN distance and calibrates the observed
Spearman coefficient against patterns re-simulated from a fitted null sampler.
The residual test swaps the K-NN distances for smoothed raw residuals of the
fitted null intensity.  The naive permutation test keeps the observed locations
and permutes the latent estimates; it ignores spatial dependence and serves as a
negative control.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ._parallel import parallel_map
from .latent import KrigingModel, KrigingPredictor
from .nnstats import UndefinedStatisticError, knn_table, spearman_rho
from .pointproc import (
    FittedIntensity,
    HardcoreModel,
    PointPattern,
    ResidualSmoother,
    sample_binomial_ipp,
    sample_hardcore,
    sample_ipp,
    select_bandwidth_loocv,
)
from .randfield import GridField

__all__ = [
    "SCHEMA_VERSION",
    "STATISTICS",
    "ALTERNATIVES",
    "TestConfig",
    "TestReport",
    "MonteCarloAbort",
    "mc_p_value",
    "latent_source",
    "run_nn_test",
    "run_residual_test",
    "run_naive_permutation_test",
    "substream",
]

SCHEMA_VERSION = 1
STATISTICS = ("nn", "residual")
ALTERNATIVES = ("positive-ps", "negative-ps", "two-sided")
# sign of the statistic under positive preferential sampling
_PS_SIGN = {"nn": -1.0, "residual": 1.0}
MAX_REDRAWS = 10
MAX_SKIP_FRACTION = 0.2


class MonteCarloAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class TestConfig:
    __test__ = False  # not a pytest class

    k_values: tuple = (1,)
    m: int = 19
    statistic: str = "nn"
    alternative: str = "two-sided"
    fix_n: bool = True
    seed: int = 0
    bandwidth: float | None = None

    def __post_init__(self):
        ks = tuple(int(k) for k in np.atleast_1d(self.k_values))
        object.__setattr__(self, "k_values", ks)
        errors = []
        if int(self.m) < 19:
            errors.append(f"m must be >= 19, got {self.m}")
        if self.statistic not in STATISTICS:
            errors.append(f"statistic must be one of {STATISTICS}, got {self.statistic!r}")
        if self.alternative not in ALTERNATIVES:
            errors.append(f"alternative must be one of {ALTERNATIVES}, got {self.alternative!r}")
        if self.statistic == "nn" and (not ks or min(ks) < 1):
            errors.append("k_values must be non-empty positive integers")
        if errors:
            raise ValueError("; ".join(errors))
        object.__setattr__(self, "m", int(self.m))

    def check_pattern(self, n):
        if self.statistic == "nn" and max(self.k_values) > n - 1:
            raise ValueError(f"k_values must lie within [1, {n - 1}] for a pattern of {n} points")

    def labels(self):
        if self.statistic == "nn":
            return [f"K={k}" for k in self.k_values]
        return ["residual"]

    def to_dict(self):
        d = asdict(self)
        d["k_values"] = list(self.k_values)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class TestReport:
    __test__ = False

    statistic: str
    labels: list
    times: list
    rho_obs: np.ndarray  # (n_times, n_labels)
    rho_mc: np.ndarray  # (n_times, m, n_labels), NaN rows for skipped replicates
    p_values: np.ndarray  # (n_times, n_labels)
    global_p: float
    skipped: int
    config: TestConfig
    test: str = "monte-carlo"
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        def arr(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]

        ks = [int(lbl.split("=")[1]) for lbl in self.labels if lbl.startswith("K=")]
        plot = [
            {"t": t, "x": ks if ks else self.labels, "p": [float(p) for p in self.p_values[i]]}
            for i, t in enumerate(self.times)
        ]
        return {
            "schema_version": SCHEMA_VERSION,
            "test": self.test,
            "statistic": self.statistic,
            "labels": list(self.labels),
            "times": [int(t) for t in self.times],
            "rho_obs": arr(self.rho_obs),
            "rho_mc": [arr(block) for block in self.rho_mc],
            "p_values": arr(self.p_values),
            "global_p": float(self.global_p),
            "skipped": int(self.skipped),
            "config": self.config.to_dict(),
            "extra": self.extra,
            "plot_data": plot,
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {d.get('schema_version')!r}")

        def arr(a):
            return np.array([[np.nan if v is None else v for v in row] for row in a], dtype=float)

        rho_mc = np.array([arr(b) for b in d["rho_mc"]], dtype=float)
        return cls(
            statistic=d["statistic"],
            labels=list(d["labels"]),
            times=list(d["times"]),
            rho_obs=arr(d["rho_obs"]),
            rho_mc=rho_mc,
            p_values=arr(d["p_values"]),
            global_p=float(d["global_p"]),
            skipped=int(d["skipped"]),
            config=TestConfig.from_dict(d["config"]),
            test=d.get("test", "monte-carlo"),
            extra=dict(d.get("extra", {})),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, TestReport):
            return NotImplemented
        same = lambda a, b: np.array_equal(a, b, equal_nan=True)  # noqa: E731
        return (
            self.statistic == other.statistic
            and self.labels == other.labels
            and self.times == other.times
            and same(self.rho_obs, other.rho_obs)
            and same(self.rho_mc, other.rho_mc)
            and same(self.p_values, other.p_values)
            and self.global_p == other.global_p
            and self.skipped == other.skipped
            and self.config == other.config
            and self.test == other.test
            and self.extra == other.extra
        )

    def p_value(self, label, t_index=0):
        return float(self.p_values[t_index, self.labels.index(label)])


def substream(seed, *key):
    """Independent generator keyed by (seed, *key), independent of scheduling."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def mc_p_value(rho_obs, rho_mc, alternative, statistic="nn"):
    """(1 + #replicates at least as extreme) / (M_eff + 1), ignoring NaN replicates."""
    rho_mc = np.asarray(rho_mc, dtype=float)
    valid = rho_mc[np.isfinite(rho_mc)]
    if alternative == "two-sided":
        count = np.sum(np.abs(valid) >= abs(rho_obs))
    else:
        sign = _PS_SIGN[statistic] * (1.0 if alternative == "positive-ps" else -1.0)
        count = np.sum(sign * valid >= sign * rho_obs)
    return (1.0 + count) / (valid.size + 1.0)


class _FieldSource:
    def __init__(self, field_):
        self.field = field_

    def z_at(self, points):
        return self.field(np.atleast_2d(points)) if len(points) else np.empty(0)


class _CallableSource:
    def __init__(self, fn):
        self.fn = fn

    def z_at(self, points):
        return np.asarray(self.fn(np.atleast_2d(points)), dtype=float)


def latent_source(source, pattern: PointPattern):
    """Resolve a latent estimate source into an object with ``z_at(points)``."""
    if isinstance(source, KrigingModel):
        return KrigingPredictor(source, pattern)
    if isinstance(source, KrigingPredictor):
        return source
    if isinstance(source, GridField):
        return _FieldSource(source)
    if callable(source):
        return _CallableSource(source)
    raise TypeError(f"unsupported latent source {type(source).__name__}")


def _per_time(obj, idx, t):
    if isinstance(obj, dict):
        return obj[t]
    if isinstance(obj, (list, tuple)):
        return obj[idx]
    return obj


def _as_patterns(pattern):
    if isinstance(pattern, PointPattern):
        return [pattern]
    return list(pattern)


def _statistics(points, zhat, config, smoother):
    """Spearman coefficients for every label; raises UndefinedStatisticError."""
    if config.statistic == "nn":
        table = knn_table(points, config.k_values)
        return np.array([spearman_rho(zhat, table[:, j]) for j in range(table.shape[1])])
    return np.array([spearman_rho(zhat, _residuals(smoother, PointPattern(points)))])


def _residuals(smoother, pattern):
    res = smoother.at_points(pattern)
    # rounding noise (relative to the size of the two cancelling terms) is not signal
    if np.ptp(res) <= 1e-8 * (pattern.n + smoother.total + float(np.max(np.abs(res)))):
        raise UndefinedStatisticError("smoothed residuals are constant at the points")
    return res


def _draw_null(null_model, n_obs, config, rng, t):
    if isinstance(null_model, HardcoreModel):
        return sample_hardcore(null_model, rng, t)
    model = null_model.model if isinstance(null_model, FittedIntensity) else null_model
    if config.fix_n:
        return sample_binomial_ipp(model, n_obs, rng, t)
    return sample_ipp(model, rng, t)


def _min_points(config):
    return max(config.k_values) + 1 if config.statistic == "nn" else 3


def _mc_replicate(args):
    ti, m, t, n_obs, source, null_model, config, smoother = args
    rng = substream(config.seed, ti, m)
    need = _min_points(config)
    for _ in range(1 + MAX_REDRAWS):
        pat = _draw_null(null_model, n_obs, config, rng, t)
        if pat.n >= max(need, 3):
            break
    else:
        return None
    try:
        return _statistics(pat.points, source.z_at(pat.points), config, smoother)
    except UndefinedStatisticError:
        return None


def _intensity_of(null_model):
    if isinstance(null_model, HardcoreModel):
        from .pointproc import IntensityModel

        return null_model.intensity or IntensityModel.constant(null_model.n)
    return null_model


def _assemble(kind, config, times, obs, mc, extra=None):
    labels = config.labels()
    n_lab = len(labels)
    rho_obs = np.array(obs).reshape(len(times), n_lab)
    rho_mc = np.full((len(times), config.m, n_lab), np.nan)
    skipped = 0
    for ti, rows in enumerate(mc):
        for m, row in enumerate(rows):
            if row is None:
                skipped += 1
            else:
                rho_mc[ti, m] = row
    total = len(times) * config.m
    if skipped > MAX_SKIP_FRACTION * total:
        raise MonteCarloAbort(
            f"{skipped} of {total} Monte Carlo replicates were degenerate "
            f"(> {MAX_SKIP_FRACTION:.0%}); the null sampler rarely yields enough points "
            f"for k={max(config.k_values) if config.statistic == 'nn' else '-'}"
        )
    pv = np.array(
        [
            [mc_p_value(rho_obs[ti, j], rho_mc[ti, :, j], config.alternative, config.statistic) for j in range(n_lab)]
            for ti in range(len(times))
        ]
    )
    global_p = float(min(1.0, pv.min() * pv.size))
    return TestReport(config.statistic, labels, list(times), rho_obs, rho_mc, pv, global_p, skipped, config, kind, extra or {})


def _run_mc(pattern, z_hat_source, null_model, config, workers, residual_fit=None):
    patterns = _as_patterns(pattern)
    times, obs, jobs, extra = [], [], [], {}
    for ti, pat in enumerate(patterns):
        t = pat.time_index
        times.append(t)
        config.check_pattern(pat.n)
        if pat.n < 3:
            raise ValueError(f"pattern at t={t} has fewer than 3 points")
        source = latent_source(_per_time(z_hat_source, ti, t), pat)
        null = _per_time(null_model, ti, t)
        smoother = None
        if config.statistic == "residual":
            base = null if residual_fit is None else _per_time(residual_fit, ti, t)
            intensity = _intensity_of(base)
            h = config.bandwidth or select_bandwidth_loocv(pat, intensity)
            extra.setdefault("bandwidth", {})[str(t)] = h
            smoother = ResidualSmoother(intensity, h)
        obs.append(_statistics(pat.points, source.z_at(pat.points), config, smoother))
        n_obs = null.n if isinstance(null, HardcoreModel) else pat.n
        jobs += [(ti, m, t, n_obs, source, null, config, smoother) for m in range(config.m)]
    results = parallel_map(_mc_replicate, jobs, workers)
    mc = [results[i * config.m : (i + 1) * config.m] for i in range(len(times))]
    return _assemble("monte-carlo", config, times, obs, mc, extra)


def run_nn_test(pattern, z_hat_source, null_model, config: TestConfig, *, workers=1) -> TestReport:
    """Monte Carlo nearest-neighbour test.

    ``pattern`` may be a single pattern or one pattern per time index; the latent
    source and null model may then be given per time (list or dict keyed by t).
    The latent source is a fitted ``KrigingModel`` (hyperparameters frozen and
    conditioned on the observed marks), a known ``GridField`` or a callable.
    """
    if config.statistic != "nn":
        config = TestConfig(**{**config.to_dict(), "statistic": "nn"})
    return _run_mc(pattern, z_hat_source, null_model, config, workers)


def run_residual_test(
    pattern, z_hat_source, null_model, config: TestConfig, *, workers=1, residual_fit=None
) -> TestReport:
    """Monte Carlo test on smoothed raw residuals of the fitted null intensity.

    The bandwidth is chosen once by LOOCV on the observed pattern (unless fixed in
    ``config``) and reused for every replicate.  ``residual_fit`` computes the
    residuals from a different intensity fit (for instance a homogeneous one)
    while replicates are still drawn from ``null_model``.
    """
    if config.statistic != "residual":
        config = TestConfig(**{**config.to_dict(), "statistic": "residual"})
    return _run_mc(pattern, z_hat_source, null_model, config, workers, residual_fit)


def run_naive_permutation_test(pattern, z_hat_source, config: TestConfig, fitted=None) -> TestReport:
    """Permutation test that treats (estimate, clustering) pairs as i.i.d."""
    patterns = _as_patterns(pattern)
    times, obs, mc, extra = [], [], [], {}
    for ti, pat in enumerate(patterns):
        t = pat.time_index
        times.append(t)
        config.check_pattern(pat.n)
        source = latent_source(_per_time(z_hat_source, ti, t), pat)
        z = source.z_at(pat.points)
        if config.statistic == "nn":
            table = knn_table(pat.points, config.k_values)
        else:
            if fitted is None:
                raise ValueError("the residual permutation test needs the fitted null intensity")
            intensity = _intensity_of(_per_time(fitted, ti, t))
            h = config.bandwidth or select_bandwidth_loocv(pat, intensity)
            extra.setdefault("bandwidth", {})[str(t)] = h
            table = _residuals(ResidualSmoother(intensity, h), pat)[:, None]
        obs.append([spearman_rho(z, table[:, j]) for j in range(table.shape[1])])
        rows = []
        for m in range(config.m):
            zp = substream(config.seed, ti, m).permutation(z)
            try:
                rows.append(np.array([spearman_rho(zp, table[:, j]) for j in range(table.shape[1])]))
            except UndefinedStatisticError:
                rows.append(None)
        mc.append(rows)
    return _assemble("permutation", config, times, obs, mc, extra)


def rejection(p, level=0.05):
    return bool(p <= level + 1e-12)


def critical_count(m, level=0.05):
    """Number of replicate statistics that may be at least as extreme while still rejecting."""
    return int(math.floor(level * (m + 1) + 1e-9)) - 1
