"""Cox proportional hazards, Kaplan-Meier and log-rank on binary covariates."""
from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

Z95 = 1.96


class SurvivalDataError(ValueError):
    pass


class NoEventsError(SurvivalDataError):
    pass


class NonIdentifiableError(SurvivalDataError):
    pass


class SeparationWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# cohort handling


@dataclass
class Cohort:
    slide_ids: list
    time: np.ndarray
    event: np.ndarray
    x: np.ndarray = None
    names: list = None

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=np.float64)
        self.event = np.asarray(self.event, dtype=bool)
        if np.any(self.time <= 0):
            raise SurvivalDataError("follow-up times must be > 0")
        if len(set(self.slide_ids)) != len(self.slide_ids):
            raise SurvivalDataError("duplicate slide ids in cohort")


def _sniff(fh):
    head = fh.readline()
    fh.seek(0)
    return "\t" if "\t" in head else ","


def read_cohort(path):
    """Delimited cohort file with columns slide_id, time_months, event."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter=_sniff(fh)))
    ids = [r["slide_id"] for r in rows]
    return Cohort(ids, [float(r["time_months"]) for r in rows], [int(r["event"]) for r in rows])


def binarize_presence(cluster_rows, slide_ids, k):
    """Covariate j of a slide is 1 iff at least one of its tiles sits in cluster j.

    ``cluster_rows`` is an iterable of ``(slide_id, cluster)`` pairs.
    """
    index = {s: i for i, s in enumerate(slide_ids)}
    x = np.zeros((len(slide_ids), k), dtype=np.int8)
    for slide, cluster in cluster_rows:
        if slide not in index:
            raise SurvivalDataError(f"slide {slide!r} is not in the cohort")
        if not 0 <= int(cluster) < k:
            raise SurvivalDataError(f"cluster {cluster} out of range for k={k}")
        x[index[slide], int(cluster)] = 1
    for s, row in zip(slide_ids, x):
        if not row.any():
            warnings.warn(f"slide {s!r} has no clustered tiles", stacklevel=2)
    return x


# ---------------------------------------------------------------------------
# Cox model


def _prepare(time, event, x):
    order = np.argsort(time, kind="stable")
    time, event, x = time[order], event[order], x[order]
    # index of the first subject with each time (start of its risk set)
    uniq, first = np.unique(time, return_index=True)
    groups = []
    for j, t in enumerate(uniq):
        lo = first[j]
        hi = first[j + 1] if j + 1 < len(uniq) else len(time)
        d = np.nonzero(event[lo:hi])[0] + lo
        if len(d):
            groups.append((lo, d))
    return x, groups


def cox_loglik(beta, time, event, x, ties="efron", derivatives=True):
    """Log partial likelihood, score and observed information."""
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    x = np.asarray(x, dtype=np.float64).reshape(len(time), -1)
    xs, groups = _prepare(time, event, x)
    return _loglik(np.asarray(beta, dtype=np.float64), xs, groups, ties, derivatives)


def _loglik(beta, x, groups, ties, derivatives=True):
    n, p = x.shape
    eta = x @ beta
    eta = eta - eta.max()
    w = np.exp(eta)
    # suffix sums = risk-set sums
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w[:, None] * x)[::-1], axis=0)[::-1]
    s2 = np.cumsum((w[:, None, None] * x[:, :, None] * x[:, None, :])[::-1], axis=0)[::-1] if derivatives else None
    ll = 0.0
    score = np.zeros(p)
    info = np.zeros((p, p))
    for lo, d in groups:
        nd = len(d)
        ll += eta[d].sum()
        d0 = w[d].sum()
        d1 = (w[d, None] * x[d]).sum(axis=0)
        if derivatives:
            score += x[d].sum(axis=0)
            d2 = (w[d, None, None] * x[d, :, None] * x[d, None, :]).sum(axis=0)
        for r in range(nd):
            f = r / nd if ties == "efron" else 0.0
            phi = s0[lo] - f * d0
            ll -= math.log(phi)
            if derivatives:
                a1 = s1[lo] - f * d1
                a2 = s2[lo] - f * d2
                score -= a1 / phi
                info += a2 / phi - np.outer(a1, a1) / phi ** 2
    return ll, score, info


@dataclass
class TestStat:
    stat: float
    df: int
    p: float


@dataclass
class CoxFit:
    names: list
    coef: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    hr: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    z: np.ndarray
    p: np.ndarray
    loglik: float
    loglik0: float
    wald: TestStat
    lrt: TestStat
    score: TestStat
    iterations: int
    converged: bool
    separated: bool = False
    n: int = 0
    n_events: int = 0
    ties: str = "efron"


def _chi2(stat, df):
    return TestStat(float(stat), int(df), float(stats.chi2.sf(stat, df)))


def check_identifiable(x, names=None):
    x = np.asarray(x, dtype=np.float64)
    for j in range(x.shape[1]):
        if np.all(x[:, j] == x[0, j]):
            name = names[j] if names is not None else j
            raise NonIdentifiableError(f"covariate {name} is constant across the cohort")
    centered = x - x.mean(axis=0)
    if np.linalg.matrix_rank(centered) < x.shape[1]:
        raise NonIdentifiableError("covariates are linearly dependent")


def cox_fit(time, event, x, names=None, ties="efron", max_iter=50, tol=1e-9, bound=50.0):
    """Newton-Raphson with step halving on the log partial likelihood."""
    if ties not in ("efron", "breslow"):
        raise ValueError(f"unknown ties method {ties!r}")
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    x = np.asarray(x, dtype=np.float64).reshape(len(time), -1)
    p = x.shape[1]
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if not event.any():
        raise NoEventsError("no events in cohort")
    check_identifiable(x, names)
    xs, groups = _prepare(time, event, x)

    beta = np.zeros(p)
    ll0, u0, i0 = _loglik(beta, xs, groups, ties)
    try:
        score_stat = float(u0 @ np.linalg.solve(i0, u0))
    except np.linalg.LinAlgError:
        raise NonIdentifiableError("singular information matrix at beta = 0") from None

    ll, u, info = ll0, u0, i0
    converged = separated = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(info, u)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            if it == 1:
                raise NonIdentifiableError("singular information matrix") from None
            # information vanished while the likelihood kept rising: the
            # diverging coefficients run off to infinity
            step = np.where(np.abs(beta) > 10, np.sign(beta) * 2 * bound, 0.0)
        for _ in range(40):
            cand = beta + step
            ll_new = _loglik(cand, xs, groups, ties, derivatives=False)[0]
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        beta = cand
        ll, u, info = _loglik(beta, xs, groups, ties)
        if np.max(np.abs(beta)) > bound:
            separated = True
            beta = np.clip(beta, -bound, bound)
            ll, u, info = _loglik(beta, xs, groups, ties)
            warnings.warn(f"monotone likelihood: coefficients of {names} diverge; fit capped at |b| = {bound}",
                          SeparationWarning, stacklevel=2)
            break
        if np.max(np.abs(step)) < tol:
            converged = True
            break

    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full((p, p), np.nan)
    cov = (cov + cov.T) / 2
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = beta / se
    pvals = 2 * stats.norm.sf(np.abs(z))
    wald_stat = float(beta @ info @ beta)
    return CoxFit(
        names=names,
        coef=beta,
        cov=cov,
        se=se,
        hr=np.exp(beta),
        ci_low=np.exp(beta - Z95 * se),
        ci_high=np.exp(beta + Z95 * se),
        z=z,
        p=pvals,
        loglik=float(ll),
        loglik0=float(ll0),
        wald=_chi2(wald_stat, p),
        lrt=_chi2(max(0.0, 2 * (ll - ll0)), p),
        score=_chi2(score_stat, p),
        iterations=it,
        converged=converged,
        separated=separated,
        n=len(time),
        n_events=int(event.sum()),
        ties=ties,
    )


# ---------------------------------------------------------------------------
# Kaplan-Meier + log-rank


@dataclass
class KMCurve:
    """Rows are the distinct observed times; ``survival`` is S just after each time."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    censored: np.ndarray
    exact: list = field(default_factory=list)

    @property
    def event_times(self):
        return self.times[self.events > 0]

    @property
    def censor_times(self):
        return self.times[self.censored > 0]

    def at(self, t):
        """S(t), right-continuous; S = 1 before the first event."""
        i = np.searchsorted(self.times, t, side="right")
        return 1.0 if i == 0 else float(self.survival[i - 1])


def km_estimate(time, event, mask=None):
    """Product-limit estimator.  Subjects censored at an event time are still at risk for it."""
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        time, event = time[mask], event[mask]
    if len(time) == 0:
        raise SurvivalDataError("empty group")
    uniq = np.unique(time)
    n_at = len(time)
    s = Fraction(1)
    rows = []
    for t in uniq:
        here = time == t
        d = int(event[here].sum())
        c = int(here.sum()) - d
        if d:
            s *= Fraction(n_at - d, n_at)
        rows.append((t, s, n_at, d, c))
        n_at -= d + c
    return KMCurve(
        times=np.array([r[0] for r in rows]),
        survival=np.array([float(r[1]) for r in rows]),
        at_risk=np.array([r[2] for r in rows]),
        events=np.array([r[3] for r in rows]),
        censored=np.array([r[4] for r in rows]),
        exact=[r[1] for r in rows],
    )


def logrank_test(time, event, group):
    """Two-group log-rank test; returns ``(chi2, p, df)``."""
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    group = np.asarray(group, dtype=bool)
    if group.all() or not group.any():
        raise SurvivalDataError("both strata need at least one subject")
    o_minus_e = 0.0
    var = 0.0
    for t in np.unique(time[event]):
        at_risk = time >= t
        n = at_risk.sum()
        n1 = (at_risk & group).sum()
        dead = event & (time == t)
        d = dead.sum()
        d1 = (dead & group).sum()
        o_minus_e += d1 - d * n1 / n
        if n > 1:
            var += d * (n1 / n) * (1 - n1 / n) * (n - d) / (n - 1)
    if var == 0:
        return 0.0, 1.0, 1
    chi2 = o_minus_e ** 2 / var
    return float(chi2), float(stats.chi2.sf(chi2, 1)), 1


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class Sweep:
    fits: dict
    significant: list
    skipped: dict


def univariate_sweep(time, event, x, names=None, alpha=0.05, ties="efron"):
    """One Cox fit per column; columns with Wald p < alpha are significant."""
    x = np.asarray(x).reshape(len(time), -1)
    names = list(names) if names is not None else [str(j) for j in range(x.shape[1])]
    if not np.asarray(event, dtype=bool).any():
        raise NoEventsError("no events in cohort")
    fits, skipped, sig = {}, {}, []
    for j, name in enumerate(names):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", SeparationWarning)
                fit = cox_fit(time, event, x[:, [j]], [name], ties)
        except NonIdentifiableError as exc:
            log.warning("skipping covariate %s: %s", name, exc)
            skipped[name] = str(exc)
            continue
        fits[name] = fit
        if fit.p[0] < alpha and not fit.separated:
            sig.append(name)
    return Sweep(fits, sig, skipped)


def multivariate_combinations(time, event, x, names, significant, ties="efron"):
    """Every subset of size >= 2 of the significant covariates, smallest first."""
    col = {n: i for i, n in enumerate(names)}
    x = np.asarray(x).reshape(len(time), -1)
    out = {}
    for size in range(2, len(significant) + 1):
        for combo in itertools.combinations(significant, size):
            out[combo] = cox_fit(time, event, x[:, [col[c] for c in combo]], list(combo), ties)
    return out


def all_covariates_fit(time, event, x, names, ties="efron"):
    """Multivariate model over every usable column (constant and duplicated columns dropped)."""
    x = np.asarray(x, dtype=np.float64).reshape(len(time), -1)
    keep, dropped = [], []
    for j, name in enumerate(names):
        col = x[:, j]
        if np.all(col == col[0]):
            dropped.append(name)
            continue
        trial = keep + [j]
        centered = x[:, trial] - x[:, trial].mean(axis=0)
        if np.linalg.matrix_rank(centered) < len(trial):
            dropped.append(name)
            continue
        keep.append(j)
    if not keep:
        raise NonIdentifiableError("no usable covariates")
    return cox_fit(time, event, x[:, keep], [names[j] for j in keep], ties), dropped


# ---------------------------------------------------------------------------
# serialization


def fit_to_dict(fit):
    out = {}
    for k, v in vars(fit).items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif isinstance(v, TestStat):
            out[k] = vars(v).copy()
        else:
            out[k] = v
    return out


def fit_from_dict(d):
    d = dict(d)
    for k in ("coef", "cov", "se", "hr", "ci_low", "ci_high", "z", "p"):
        d[k] = np.asarray(d[k], dtype=np.float64)
    for k in ("wald", "lrt", "score"):
        d[k] = TestStat(**d[k])
    return CoxFit(**d)
