"""Simulation study: rejection rates of the preferential-sampling tests.

Each outer replicate simulates a latent Matérn field Z (and a covariate field w
when it has an effect), samples n locations with log-intensity
``alpha1 * w + gamma * Z``, attaches marks, fits the naive kriging model and the
null point process, and runs the requested tests.  Every replicate owns a seed
derived from the master seed and its index, so results do not depend on the
worker count or scheduling.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._parallel import parallel_map
from .latent import DegenerateMarksError, KrigingFitError, fit_kriging
from .pointproc import (
    HardcoreModel,
    InfeasibleHardcoreError,
    IntensityFitError,
    IntensityModel,
    fit_hardcore,
    fit_intensity,
    sample_binomial_ipp,
    sample_hardcore,
)
from .pstest import (
    MonteCarloAbort,
    TestConfig,
    run_naive_permutation_test,
    run_nn_test,
    run_residual_test,
)
from .randfield import DEFAULT_RESOLUTION, MaternParams, simulate_field

__all__ = [
    "TESTS",
    "ExperimentSpec",
    "ExperimentResult",
    "SpecError",
    "run_experiment",
    "simulate_dataset",
]

TESTS = ("nn-mc", "residual-mc", "residual-hpp-mc", "nn-perm", "residual-perm")
RESPONSES = ("gaussian", "poisson-count")
NULLS = ("ipp", "hardcore")
POISSON_INTERCEPT = 2.0
MAX_SKIP_FRACTION = 0.2
_HARDCORE_RE = re.compile(r"^hardcore\(\s*([0-9.eE+-]+)\s*\)$")


class SpecError(ValueError):
    """Invalid experiment specification; ``problems`` lists every offending field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid experiment spec: " + "; ".join(self.problems))


@dataclass(frozen=True)
class ExperimentSpec:
    n: int = 50
    gamma: float = 0.0
    alpha1: float = 0.0
    rho_z: float = 0.2
    rho_w: float = 1.0
    k_values: tuple = (1, 5, 10)
    replicates: int = 200
    m: int = 19
    response: str = "gaussian"
    truth: str = "binomial-ipp"
    null: str = "ipp"
    tests: tuple = ("nn-mc", "residual-mc")
    alternative: str = "two-sided"
    level: float = 0.05
    resolution: int = DEFAULT_RESOLUTION
    sigma_z: float = 1.0
    sigma_w: float = 1.0
    nu: float = 1.0
    burn_in_sweeps: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))
        object.__setattr__(self, "tests", tuple(self.tests))
        problems = self.validate()
        if problems:
            raise SpecError(problems)

    def validate(self):
        p = []
        if not isinstance(self.n, (int, np.integer)) or self.n < 10:
            p.append(f"n: integer >= 10 required, got {self.n!r}")
        for name in ("gamma", "alpha1"):
            if not math.isfinite(getattr(self, name)):
                p.append(f"{name}: must be finite")
        for name in ("rho_z", "rho_w", "sigma_z", "sigma_w", "nu"):
            if not getattr(self, name) > 0:
                p.append(f"{name}: must be positive")
        if not self.k_values or min(self.k_values) < 1:
            p.append("k_values: non-empty list of positive integers required")
        elif isinstance(self.n, (int, np.integer)) and max(self.k_values) > self.n - 1:
            p.append(f"k_values: must not exceed n - 1 = {self.n - 1}")
        if self.replicates < 50:
            p.append(f"replicates: must be >= 50, got {self.replicates}")
        if self.m < 19:
            p.append(f"m: must be >= 19, got {self.m}")
        if self.response not in RESPONSES:
            p.append(f"response: expected one of {RESPONSES}, got {self.response!r}")
        if self.truth != "binomial-ipp" and self.hardcore_radius is None:
            p.append(f"truth: expected 'binomial-ipp' or 'hardcore(R)', got {self.truth!r}")
        if self.null not in NULLS:
            p.append(f"null: expected one of {NULLS}, got {self.null!r}")
        bad = [t for t in self.tests if t not in TESTS]
        if bad or not self.tests:
            p.append(f"tests: unknown tag(s) {bad}; allowed {list(TESTS)}")
        if self.alternative not in ("positive-ps", "negative-ps", "two-sided"):
            p.append(f"alternative: unknown tag {self.alternative!r}")
        if not 0 < self.level < 1:
            p.append("level: must lie in (0, 1)")
        if not 2 <= self.resolution <= 128:
            p.append("resolution: must lie in [2, 128]")
        return p

    @property
    def hardcore_radius(self):
        m = _HARDCORE_RE.match(str(self.truth))
        if not m:
            return None
        try:
            r = float(m.group(1))
        except ValueError:
            return None
        return r if r >= 0 else None

    def to_dict(self):
        d = asdict(self)
        d["k_values"] = list(self.k_values)
        d["tests"] = list(self.tests)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SpecError([f"{k}: unknown field" for k in unknown])
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError([str(exc)]) from None

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError([f"not valid JSON: {exc}"]) from None
        if not isinstance(d, dict):
            raise SpecError(["spec must be a JSON object"])
        return cls.from_dict(d)

    def fast(self):
        """CI profile: the minimum replicate count."""
        return ExperimentSpec(**{**self.to_dict(), "replicates": 50})


def replicate_seed(seed, r):
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(r),)).generate_state(1, np.uint64)[0] >> 1)


def simulate_dataset(spec: ExperimentSpec, rng):
    """One synthetic dataset: (marked pattern, Z field, w field or None)."""
    res = spec.resolution
    z = simulate_field(MaternParams(spec.nu, spec.sigma_z, spec.rho_z), res, rng)
    w = None
    covs, coefs = [], []
    if spec.alpha1 != 0:
        w = simulate_field(MaternParams(spec.nu, spec.sigma_w, spec.rho_w), res, rng)
        covs.append(w)
        coefs.append(spec.alpha1)
    if spec.gamma != 0:
        covs.append(z)
        coefs.append(spec.gamma)
    intensity = IntensityModel(0.0, tuple(coefs), tuple(covs), resolution=res)
    radius = spec.hardcore_radius
    if radius is None:
        pattern = sample_binomial_ipp(intensity, spec.n, rng)
    else:
        pattern = sample_hardcore(HardcoreModel(radius, spec.n, intensity, spec.burn_in_sweeps), rng)
    zs = z(pattern.points)
    if spec.response == "gaussian":
        marks = zs
    else:
        marks = rng.poisson(np.exp(POISSON_INTERCEPT + zs)).astype(float)
    return pattern.with_marks(marks), z, w


def _labels(spec, test):
    return [f"K={k}" for k in spec.k_values] if test.startswith("nn") else ["residual"]


def _one_replicate(args):
    spec, seed, r = args
    rseed = replicate_seed(seed, r)
    rng = np.random.default_rng(rseed)
    out = {"p": {}, "error": None, "kriging_warning": False}
    try:
        pattern, _, w = simulate_dataset(spec, rng)
        transform = "identity" if spec.response == "gaussian" else "anscombe"
        try:
            km = fit_kriging(pattern, (), transform, nu=spec.nu, min_range=1.0 / (spec.resolution - 1))
        except KrigingFitError as exc:
            if exc.best is None:
                raise
            km, out["kriging_warning"] = exc.best, True
        covs = (w,) if w is not None else ()
        if spec.null == "ipp":
            null = fit_intensity(pattern, covs)
        else:
            null = fit_hardcore(pattern, covs, burn_in_sweeps=spec.burn_in_sweeps)
    except (DegenerateMarksError, KrigingFitError, IntensityFitError, InfeasibleHardcoreError, ValueError) as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
        return out
    base = dict(k_values=spec.k_values, m=spec.m, alternative=spec.alternative, fix_n=True, seed=rseed)
    for test in spec.tests:
        stat = "nn" if test.startswith("nn") else "residual"
        cfg = TestConfig(statistic=stat, **base)
        try:
            if test == "nn-mc":
                rep = run_nn_test(pattern, km, null, cfg)
            elif test == "residual-mc":
                rep = run_residual_test(pattern, km, null, cfg)
            elif test == "residual-hpp-mc":
                rep = run_residual_test(pattern, km, null, cfg, residual_fit=fit_intensity(pattern))
            else:
                fitted = null if stat == "residual" else None
                rep = run_naive_permutation_test(pattern, km, cfg, fitted=fitted)
        except (MonteCarloAbort, ValueError) as exc:
            out["p"][test] = None
            out.setdefault("test_errors", {})[test] = f"{type(exc).__name__}: {exc}"
            continue
        out["p"][test] = [float(v) for v in rep.p_values[0]]
    return out


@dataclass(eq=False)
class ExperimentResult:
    spec: ExperimentSpec
    seed: int
    p_values: dict  # test -> (replicates, labels) array, NaN rows for skipped replicates
    labels: dict
    errors: list = field(default_factory=list)
    kriging_warnings: int = 0

    def rejections(self, test):
        p = self.p_values[test]
        return np.where(np.isnan(p), np.nan, (p <= self.spec.level + 1e-12).astype(float))

    def skipped(self, test):
        return int(np.isnan(self.p_values[test][:, 0]).sum())

    def rate(self, test, label=None):
        """Rejection rate per label (or for one label), skipped replicates excluded."""
        rej = self.rejections(test)
        rates = np.nanmean(rej, axis=0) if np.isfinite(rej).any() else np.full(rej.shape[1], np.nan)
        if label is None:
            return rates
        return float(rates[self.labels[test].index(label)])

    def standard_error(self, test):
        n_eff = self.spec.replicates - self.skipped(test)
        r = self.rate(test)
        return np.sqrt(r * (1 - r) / max(n_eff, 1))

    def best_rate(self, test):
        return float(np.nanmax(self.rate(test)))

    def table(self):
        rows = []
        for test in self.spec.tests:
            rates, ses = self.rate(test), self.standard_error(test)
            for j, label in enumerate(self.labels[test]):
                rows.append(
                    {
                        "test": test,
                        "label": label,
                        "rate": float(rates[j]),
                        "se": float(ses[j]),
                        "replicates": self.spec.replicates,
                        "skipped": self.skipped(test),
                    }
                )
        return rows

    def to_csv(self):
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["test", "label", "rate", "se", "replicates", "skipped"])
        for row in self.table():
            out.writerow([row["test"], row["label"], f"{row['rate']:.6f}", f"{row['se']:.6f}", row["replicates"], row["skipped"]])
        return buf.getvalue()

    def to_dict(self):
        def clean(a):
            return [[None if np.isnan(v) else float(v) for v in row] for row in a]

        return {
            "spec": self.spec.to_dict(),
            "seed": int(self.seed),
            "table": self.table(),
            "labels": self.labels,
            "p_values": {t: clean(p) for t, p in self.p_values.items()},
            "errors": self.errors,
            "kriging_warnings": self.kriging_warnings,
            "plot_data": [
                {"test": t, "x": self.labels[t], "power": [float(v) for v in self.rate(t)]} for t in self.spec.tests
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def run_experiment(spec: ExperimentSpec, seed=0, *, workers=1) -> ExperimentResult:
    """Run ``spec.replicates`` outer replicates; deterministic given ``seed``."""
    outs = parallel_map(_one_replicate, [(spec, seed, r) for r in range(spec.replicates)], workers)
    labels = {t: _labels(spec, t) for t in spec.tests}
    pv = {t: np.full((spec.replicates, len(labels[t])), np.nan) for t in spec.tests}
    errors = []
    warned = 0
    for r, o in enumerate(outs):
        warned += bool(o["kriging_warning"])
        if o["error"]:
            errors.append({"replicate": r, "error": o["error"]})
            continue
        for t in spec.tests:
            if o["p"].get(t) is not None:
                pv[t][r] = o["p"][t]
            else:
                errors.append({"replicate": r, "test": t, "error": o.get("test_errors", {}).get(t)})
    result = ExperimentResult(spec, int(seed), pv, labels, errors, warned)
    for t in spec.tests:
        if result.skipped(t) > MAX_SKIP_FRACTION * spec.replicates:
            raise MonteCarloAbort(
                f"test {t}: {result.skipped(t)} of {spec.replicates} replicates failed; first error: "
                f"{errors[0]['error'] if errors else '?'}"
            )
    return result
