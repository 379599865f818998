"""Log-domain moment accumulation, efficiency reports and decay-order fits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as sps
from scipy.special import logsumexp

NEG_INF = -math.inf


def _lae(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


@dataclass(frozen=True)
class LogMoments:
    """Mergeable first and second moments of exp(w), kept as log-sums."""

    n: int = 0
    log_sum_w: float = NEG_INF
    log_sum_2w: float = NEG_INF
    max_w: float = NEG_INF

    def push(self, w) -> "LogMoments":
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if w.size == 0:
            return self
        return self.merge(LogMoments(int(w.size), float(logsumexp(w)), float(logsumexp(2.0 * w)),
                                     float(np.max(w))))

    def merge(self, other: "LogMoments") -> "LogMoments":
        return LogMoments(self.n + other.n, _lae(self.log_sum_w, other.log_sum_w),
                          _lae(self.log_sum_2w, other.log_sum_2w), max(self.max_w, other.max_w))

    __add__ = merge


def accumulate(samples) -> LogMoments:
    """Single pass over log-values (an array, or an iterable of floats, arrays or samples)."""
    if isinstance(samples, np.ndarray):
        chunks: Iterable = [samples]
    else:
        chunks = samples
    acc = LogMoments()
    for chunk in chunks:
        if hasattr(chunk, "log_payoff"):
            chunk = chunk.log_payoff
        acc = acc.push(chunk)
    if acc.n == 0:
        raise ValueError("cannot accumulate an empty sample stream")
    return acc


@dataclass(frozen=True)
class EstimatorReport:
    epsilon: float
    control_kind: str
    log_A_hat: float
    Z_hat: float
    rho_hat: float
    R_hat: float
    rel_var: float
    n: int
    seed: int | None = None
    ci_R: tuple[float, float] | None = None
    log_rho_hat: float = field(default=math.nan, repr=False)

    @property
    def se_log_A(self) -> float:
        """Delta-method standard error of log A_hat."""
        return math.sqrt(max(self.rel_var, 0.0) / self.n)

    @property
    def se_Z(self) -> float:
        return self.epsilon * self.se_log_A


def report(moments: LogMoments, epsilon: float, control: str = "custom", seed: int | None = None,
           ci: tuple[float, float] | None = None, reference: LogMoments | None = None) -> EstimatorReport:
    """Estimates of A, Z = eps log A, rho and R = eps log rho.

    By default rho is self-normalised: both the second moment and the squared
    mean come from the same tilted sample. Passing ``reference`` (moments of an
    independent untilted run) takes the denominator from there instead.
    """
    n = moments.n
    if n < 2:
        raise ValueError("need at least two samples")
    log_n = math.log(n)
    log_A = moments.log_sum_w - log_n
    if reference is None:
        log_A_den = log_A
    else:
        if reference.n < 2:
            raise ValueError("reference run needs at least two samples")
        log_A_den = reference.log_sum_w - math.log(reference.n)
    log_rho = (moments.log_sum_2w - log_n) - 2.0 * log_A_den
    rho = math.exp(log_rho) if log_rho < 700 else math.inf
    return EstimatorReport(
        epsilon=float(epsilon), control_kind=str(control), log_A_hat=log_A, Z_hat=epsilon * log_A,
        rho_hat=rho, R_hat=epsilon * log_rho, rel_var=math.expm1(log_rho) if log_rho < 700 else math.inf,
        n=n, seed=seed, ci_R=ci, log_rho_hat=log_rho)


def _log_rho(w: np.ndarray) -> float:
    m = np.max(w)
    s1 = math.log(np.sum(np.exp(w - m)))
    s2 = math.log(np.sum(np.exp(2.0 * (w - m))))
    return s2 + math.log(w.size) - 2.0 * s1


def bootstrap_ci(samples, epsilon: float, n_resample: int = 200, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval for R_hat from per-sample log-payoffs."""
    if n_resample < 100:
        raise ValueError("n_resample must be at least 100")
    w = np.asarray(samples, dtype=float)
    if w.size < 2:
        raise ValueError("need at least two samples")
    if np.all(w == w[0]):
        return (0.0, 0.0)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB007]))
    n = w.size
    vals = np.empty(n_resample)
    for r in range(n_resample):
        vals[r] = epsilon * _log_rho(w[rng.integers(0, n, n)])
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(vals, [alpha, 1.0 - alpha])
    return (float(lo), float(hi))


@dataclass(frozen=True)
class DecayFit:
    slope: float
    stderr: float
    intercept: float
    epsilons: tuple[float, ...]
    excluded: tuple[float, ...] = ()


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> DecayFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points")
    if x.size == 2:
        slope = (math.log(y[1]) - math.log(y[0])) / (math.log(x[1]) - math.log(x[0]))
        return DecayFit(slope, math.nan, math.log(y[0]) - slope * math.log(x[0]), tuple(x))
    res = sps.linregress(np.log(x), np.log(y))
    return DecayFit(float(res.slope), float(res.stderr), float(res.intercept), tuple(x))


def fit_decay_order(reports, control: str | None = None) -> DecayFit:
    """Least-squares slope of log R_hat against log eps: the empirical log-efficiency order.

    ``reports`` holds ``EstimatorReport`` objects or ``(epsilon, R)`` pairs.
    Points with R <= 0 are dropped and listed in ``excluded``.
    """
    pts = []
    for r in reports:
        if isinstance(r, EstimatorReport):
            if control is not None and r.control_kind != control:
                continue
            pts.append((r.epsilon, r.R_hat))
        else:
            pts.append((float(r[0]), float(r[1])))
    eps = [p[0] for p in pts]
    if len(set(eps)) < 4:
        raise ValueError("need at least four distinct epsilon values")
    keep = [(e, R) for e, R in pts if R > 0 and math.isfinite(R)]
    excluded = tuple(e for e, R in pts if not (R > 0 and math.isfinite(R)))
    if len(keep) < 2:
        raise ValueError(f"too few positive R values to fit (excluded eps: {excluded})")
    fit = loglog_slope([k[0] for k in keep], [k[1] for k in keep])
    return DecayFit(fit.slope, fit.stderr, fit.intercept, fit.epsilons, excluded)


REPORT_COLUMNS = ["epsilon", "control", "n", "seed", "Z_hat", "R_hat", "ci_lo", "ci_hi", "rel_var"]


def report_row(r: EstimatorReport) -> list[str]:
    lo, hi = r.ci_R if r.ci_R is not None else (math.nan, math.nan)
    return [repr(r.epsilon), r.control_kind, str(r.n), str(r.seed), repr(r.Z_hat), repr(r.R_hat),
            repr(lo), repr(hi), repr(r.rel_var)]


def write_reports_csv(path, reports: Iterable[EstimatorReport], comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(report_row(r))


def read_reports_csv(path) -> list[EstimatorReport]:
    out = []
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in rows:
            eps = float(row["epsilon"])
            R = float(row["R_hat"])
            Z = float(row["Z_hat"])
            out.append(EstimatorReport(
                epsilon=eps, control_kind=row["control"], log_A_hat=Z / eps, Z_hat=Z,
                rho_hat=math.exp(R / eps), R_hat=R, rel_var=float(row["rel_var"]), n=int(row["n"]),
                seed=None if row["seed"] == "None" else int(row["seed"]),
                ci_R=(float(row["ci_lo"]), float(row["ci_hi"])), log_rho_hat=R / eps))
    return out
