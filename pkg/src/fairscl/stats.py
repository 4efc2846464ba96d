"""Bootstrap intervals, paired t-tests and logistic regression odds ratios."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import betainc

from .errors import (
    BootstrapInfeasibleError,
    ConfigError,
    RankError,
    SeparationError,
    UndefinedMetricError,
    ValidationError,
)

Z95 = 1.96


# ---------------------------------------------------------------------- bootstrap


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    replicates: np.ndarray
    ci_low: float
    ci_high: float
    B: int
    seed: int
    redraws: int = 0

    def to_dict(self, with_replicates=False) -> dict:
        d = {
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "B": self.B,
            "seed": self.seed,
            "redraws": self.redraws,
        }
        if with_replicates:
            d["replicates"] = self.replicates.tolist()
        return d


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Independent generator for replicate ``b``; depends only on (seed, b)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


@dataclass
class Resamples:
    """Bootstrap index sets, one row per replicate, shareable across models."""

    indices: np.ndarray
    seed: int
    redraws: int = 0

    @property
    def B(self) -> int:
        return self.indices.shape[0]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.indices, dtype="<i8").tobytes()).hexdigest()


def draw_resamples(n: int, B: int, seed: int, valid: Callable[[np.ndarray], bool] | None = None) -> Resamples:
    """Draw B with-replacement index vectors of length n, redrawing invalid ones.

    Each replicate uses its own generator, so row ``b`` does not depend on
    how many redraws earlier replicates needed.
    """
    if B < 2:
        raise ConfigError(f"B must be >= 2, got {B}")
    out = np.empty((B, n), dtype=np.int64)
    attempts = 0
    for b in range(B):
        rng = replicate_rng(seed, b)
        while True:
            attempts += 1
            if attempts > 50 * B:
                raise BootstrapInfeasibleError(
                    f"metric undefined on more than {50 * B} attempted resamples"
                )
            idx = rng.integers(0, n, size=n)
            if valid is None or valid(idx):
                break
        out[b] = idx
    return Resamples(out, seed, attempts - B)


def percentile_ci(replicates, level=0.95) -> tuple[float, float]:
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(np.asarray(replicates, dtype=np.float64), [tail, 100.0 - tail])
    return float(lo), float(hi)


def bootstrap(metric: Callable, s, B: int = 200, seed: int = 0, resamples: Resamples | None = None) -> BootstrapResult:
    """Percentile bootstrap of ``metric`` over record-level resamples of ``s``.

    ``s`` must support ``len()`` and ``take(indices)`` (e.g. a ScoredSet).
    Resamples on which the metric raises UndefinedMetricError are redrawn.
    Pass precomputed ``resamples`` to evaluate several models on identical
    index sets.
    """
    point = float(metric(s))
    if resamples is not None:
        reps = np.array([metric(s.take(idx)) for idx in resamples.indices], dtype=np.float64)
        lo, hi = percentile_ci(reps)
        return BootstrapResult(point, reps, lo, hi, resamples.B, resamples.seed, resamples.redraws)

    if B < 2:
        raise ConfigError(f"B must be >= 2, got {B}")
    n = len(s)
    reps = np.empty(B, dtype=np.float64)
    attempts = 0
    for b in range(B):
        rng = replicate_rng(seed, b)
        while True:
            attempts += 1
            if attempts > 50 * B:
                raise BootstrapInfeasibleError(
                    f"metric undefined on more than {50 * B} attempted resamples"
                )
            idx = rng.integers(0, n, size=n)
            try:
                reps[b] = metric(s.take(idx))
                break
            except UndefinedMetricError:
                continue
    lo, hi = percentile_ci(reps)
    return BootstrapResult(point, reps, lo, hi, B, seed, attempts - B)


# ---------------------------------------------------------------------- t-test


def t_cdf(t: float, df: float) -> float:
    """Student-t CDF through the regularized incomplete beta function."""
    if df <= 0:
        raise ValueError("df must be positive")
    if t == 0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * float(betainc(df / 2.0, 0.5, x))
    return tail if t < 0 else 1.0 - tail


def t_sf_two_sided(t: float, df: float) -> float:
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    mean_diff: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"t": self.t, "p": self.p, "df": self.df, "mean_diff": self.mean_diff,
                "degenerate": self.degenerate}


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"paired samples need equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValidationError("paired t-test needs n >= 2")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, 0.0, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, mean, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = min(1.0, max(0.0, t_sf_two_sided(t, df)))
    return TTestResult(t, p, df, mean)


# ---------------------------------------------------------------------- logistic regression


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    std_errors: np.ndarray
    odds_ratios: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    converged: bool
    iterations: int
    names: tuple = ()

    def to_dict(self) -> dict:
        names = self.names or tuple(f"x{i}" for i in range(self.coefficients.size))
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "terms": [
                {
                    "name": nm,
                    "coef": float(c),
                    "se": float(se),
                    "odds_ratio": float(o),
                    "ci_low": float(lo),
                    "ci_high": float(hi),
                }
                for nm, c, se, o, lo, hi in zip(
                    names, self.coefficients, self.std_errors, self.odds_ratios, self.ci_low, self.ci_high
                )
            ],
        }


def logistic_fit(X, y, names=(), max_iter=100, tol=1e-8, ridge=1e-10) -> LogisticFit:
    """Maximum-likelihood logistic regression by iteratively reweighted least squares.

    ``X`` must already contain the intercept column. Wald intervals use 1.96.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    if y.shape != (n,):
        raise ValidationError(f"y has shape {y.shape}, expected ({n},)")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("y must be binary")
    if n <= k - 1:
        raise ValidationError(f"need more records ({n}) than predictors ({k - 1})")
    constant = [j for j in range(k) if np.ptp(X[:, j]) == 0]
    if len(constant) > 1 or (constant and not np.all(X[:, constant[0]] == 1.0)):
        raise ValidationError(f"constant predictor columns {constant}")
    if np.linalg.matrix_rank(X) < k:
        raise RankError("design matrix is rank deficient (collinear predictors)")

    beta = np.zeros(k)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = mu * (1.0 - mu)
        info = X.T @ (w[:, None] * X) + ridge * np.eye(k)
        score = X.T @ (y - mu)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise RankError("information matrix is singular") from None
        beta = beta + step
        if np.any(np.abs(beta) > 30):
            raise SeparationError(
                f"coefficients diverging (|beta| > 30 at iteration {it}); data look perfectly separated"
            )
        if np.max(np.abs(step)) < tol:
            converged = True
            break

    mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
    w = mu * (1.0 - mu)
    info = X.T @ (w[:, None] * X)
    if np.linalg.matrix_rank(info) < k:
        raise RankError("information matrix is rank deficient at the optimum")
    cov = np.linalg.inv(info + ridge * np.eye(k))
    se = np.sqrt(np.diag(cov))
    return LogisticFit(
        coefficients=beta,
        std_errors=se,
        odds_ratios=np.exp(beta),
        ci_low=np.exp(beta - Z95 * se),
        ci_high=np.exp(beta + Z95 * se),
        converged=converged,
        iterations=it,
        names=tuple(names),
    )


def group_association(ds, attribute: str, reference: str | None = None) -> LogisticFit:
    """Odds ratios of a positive label for each category versus a reference category."""
    cats = ds.categories(attribute)
    if len(cats) < 2:
        raise ValidationError(f"attribute {attribute!r} has a single category")
    ref = cats[0] if reference is None else reference
    if ref not in cats:
        raise ConfigError(f"reference {ref!r} not among {cats}")
    others = [c for c in cats if c != ref]
    arr = ds.groups[attribute]
    X = np.column_stack([np.ones(len(ds))] + [(arr == c).astype(float) for c in others])
    names = ["intercept"] + [f"{attribute}={c} vs {ref}" for c in others]
    return logistic_fit(X, ds.labels, names=names)
