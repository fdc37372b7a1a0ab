"""Permutation tests and the random-intercept linear mixed model.

The mixed model is ``y = X b + Z u + e`` with one intercept ``u_g ~ N(0, s2_g)``
per group and ``e ~ N(0, s2)``. It is fitted by maximum likelihood: ``b`` and
``s2`` are profiled out for a given variance ratio ``lam = s2_g / s2`` and the
profiled log-likelihood is maximised over ``log(lam)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .errors import UsageError

# --------------------------------------------------------------------------
# permutation tests


def permutation_test(
    a, b, paired: bool = False, n_perm: int = 10000, seed: int | np.random.Generator = 0
) -> float:
    """Two-sided permutation p-value for a difference of means.

    Paired samples flip the sign of each difference; independent samples
    shuffle group labels. ``p = (1 + #{|T_perm| >= |T_obs|}) / (1 + n_perm)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise UsageError("permutation_test needs two nonempty samples")
    if paired and a.size != b.size:
        raise UsageError("paired samples must have equal length")
    if n_perm < 1000:
        raise UsageError("n_perm must be at least 1000")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if paired:
        d = a - b
        t_obs = abs(d.mean())
        scale = np.abs(d).max() if d.size else 0.0
    else:
        # canonical order so that swapping a and b draws the same permutations
        if (a.size, sorted(a.tolist())) > (b.size, sorted(b.tolist())):
            a, b = b, a
        pooled = np.concatenate([a, b])
        t_obs = abs(a.mean() - b.mean())
        scale = np.abs(pooled).max()
    # permuted statistics that equal the observed one up to rounding count as extreme
    tol = 1e-12 * max(scale, 1.0)
    count = 0
    chunk = 2048
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        if paired:
            signs = rng.integers(0, 2, size=(m, d.size)) * 2 - 1
            t = np.abs((signs * d).mean(axis=1))
        else:
            keys = rng.random((m, pooled.size))
            perm = np.argsort(keys, axis=1)
            shuffled = pooled[perm]
            t = np.abs(shuffled[:, : a.size].mean(axis=1) - shuffled[:, a.size :].mean(axis=1))
        count += int((t >= t_obs - tol).sum())
        done += m
    return (1 + count) / (1 + n_perm)


# --------------------------------------------------------------------------
# design


# record key -> Table-3 row name
COLUMN_NAMES = {
    "age": "Age",
    "sex": "Sex (M)",
    "bmi": "BMI",
    "pd": "PD",
    "ahi": "AHI",
    "rbd": "RBD",
    "pn1": "PN1 %",
    "stagec": "STAGEC #",
    "confidence": "U-Sleep Confidence %",
}
MODELS = {
    "A": ("age", "sex", "bmi", "pd"),
    "B": ("age", "sex", "bmi", "pd", "ahi", "rbd"),
    "C": ("age", "sex", "bmi", "pd", "pn1", "stagec", "confidence"),
}
INTERCEPT = "Intercept"
_TRUE = {"1", "true", "yes", "y", "m", "male"}
_FALSE = {"0", "false", "no", "n", "f", "female"}


@dataclass(frozen=True)
class LmeSpec:
    fixed: tuple[str, ...]
    response: str = "kappa"
    group: str = "cohort"

    @classmethod
    def model(cls, letter: str, response: str = "kappa", group: str = "cohort") -> "LmeSpec":
        key = letter.strip().upper()
        if key not in MODELS:
            raise UsageError(f"unknown model {letter!r}; choose one of {', '.join(MODELS)}")
        return cls(MODELS[key], response, group)

    def names(self) -> list[str]:
        return [INTERCEPT] + [COLUMN_NAMES.get(k, k) for k in self.fixed]


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    names: list[str]
    row_ids: list[str] = field(default_factory=list)
    dropped: int = 0


def _missing(v) -> bool:
    if v is None:
        return True
    if isinstance(v, str):
        return v.strip() == "" or v.strip().lower() in ("na", "nan", "none")
    try:
        return math.isnan(float(v))
    except (TypeError, ValueError):
        return False


def _encode(key: str, v) -> float:
    if key in ("sex", "pd", "rbd"):
        s = str(v).strip().lower()
        if s in _TRUE:
            return 1.0
        if s in _FALSE:
            return 0.0
        raise UsageError(f"cannot read {key}={v!r} as a 0/1 indicator")
    x = float(v)
    if key == "confidence":
        # percent points: a 0.80 mean confidence enters as 80
        return 100.0 * x
    return x


def build_design(records: Sequence[Mapping], spec: LmeSpec) -> Design:
    """Design matrix with intercept; rows missing a required value are dropped."""
    rows, ys, gs, ids = [], [], [], []
    dropped = 0
    for i, rec in enumerate(records):
        needed = (*spec.fixed, spec.response, spec.group)
        if any(_missing(rec.get(k)) for k in needed):
            dropped += 1
            continue
        rows.append([1.0] + [_encode(k, rec[k]) for k in spec.fixed])
        ys.append(float(rec[spec.response]))
        gs.append(str(rec[spec.group]))
        ids.append(str(rec.get("record", i)))
    if not rows:
        raise UsageError(f"all {dropped} rows dropped for missing covariates")
    return Design(np.asarray(rows), np.asarray(ys), np.asarray(gs), spec.names(), ids, dropped)


def check_rank(X: np.ndarray, names: Sequence[str], tol: float = 1e-10) -> None:
    """Raise UsageError naming columns that are linear combinations of others."""
    n, p = X.shape
    if n < p:
        raise UsageError(f"{n} rows cannot identify {p} coefficients")
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    _, r, piv = linalg.qr(X / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int((diag > tol * diag[0]).sum()) if diag.size else 0
    if rank < p:
        bad = sorted(piv[rank:])
        raise UsageError("collinear design columns: " + ", ".join(names[i] for i in bad))


# --------------------------------------------------------------------------
# mixed model


@dataclass
class LmeFit:
    names: list[str]
    beta: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    sigma2_group: float
    sigma2_resid: float
    loglik: float
    converged: bool
    n_obs: int
    n_groups: int
    group_effects: dict[str, float] = field(default_factory=dict)
    method: str = "ML"

    def table(self) -> list[dict]:
        return [
            {"parameter": n, "coef": float(b), "se": float(s), "z": float(z), "p": float(p)}
            for n, b, s, z, p in zip(self.names, self.beta, self.se, self.z, self.p)
        ]

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "coef", "se", "z", "p"])
        for row in self.table():
            w.writerow([row["parameter"]] + [repr(row[k]) for k in ("coef", "se", "z", "p")])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "coefficients": self.table(),
            "sigma2_group": self.sigma2_group,
            "sigma2_resid": self.sigma2_resid,
            "loglik": self.loglik,
            "converged": self.converged,
            "n_obs": self.n_obs,
            "n_groups": self.n_groups,
            "group_effects": self.group_effects,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def predict(self, X: np.ndarray, groups: Sequence[str] | None = None) -> np.ndarray:
        """Fixed effects plus the estimated intercept of groups seen in fitting."""
        yhat = np.asarray(X, dtype=np.float64) @ self.beta
        if groups is not None:
            yhat = yhat + np.array([self.group_effects.get(str(g), 0.0) for g in groups])
        return yhat


def two_sided_p(z) -> np.ndarray:
    """``2 (1 - Phi(|z|))`` evaluated as ``erfc(|z| / sqrt 2)``."""
    z = np.abs(np.asarray(z, dtype=np.float64))
    return np.array([math.erfc(v / math.sqrt(2.0)) for v in z.ravel()]).reshape(z.shape)


class _Profile:
    """Sufficient statistics for the profiled likelihood in ``log(lam)``."""

    def __init__(self, X, y, codes, n_groups):
        self.X, self.y = X, y
        self.n = y.size
        self.nj = np.bincount(codes, minlength=n_groups).astype(np.float64)
        p = X.shape[1]
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        # per-group column sums
        self.sx = np.zeros((n_groups, p))
        np.add.at(self.sx, codes, X)
        self.sy = np.bincount(codes, weights=y, minlength=n_groups)

    def solve(self, lam: float):
        c = lam / (1.0 + lam * self.nj)  # H_j^{-1} = I - c_j 11'
        A = self.XtX - (self.sx * c[:, None]).T @ self.sx
        b = self.Xty - self.sx.T @ (c * self.sy)
        cho = linalg.cho_factor(A)
        beta = linalg.cho_solve(cho, b)
        # r' H^{-1} r expanded through the sufficient statistics
        quad = self.yty - float(np.sum(c * self.sy * self.sy)) - 2 * beta @ b + beta @ A @ beta
        quad = max(quad, 0.0)
        logdet = float(np.sum(np.log1p(lam * self.nj)))
        return beta, quad, logdet, cho

    def loglik(self, lam: float) -> float:
        _, quad, logdet, _ = self.solve(lam)
        s2 = quad / self.n
        if s2 <= 0:
            return math.inf
        return -0.5 * (self.n * math.log(2 * math.pi * s2) + logdet + self.n)


_LOG_LO, _LOG_HI = math.log(1e-8), math.log(1e8)
_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_max(f, lo, hi, tol=1e-8, max_iter=500):
    a, b = lo, hi
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while b - a > tol and it < max_iter:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(d)
        it += 1
    x = 0.5 * (a + b)
    return x, f(x), b - a <= tol


def lme_fit_arrays(X, y, groups, names: Sequence[str] | None = None, tol: float = 1e-8) -> LmeFit:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    groups = np.asarray(groups).astype(str)
    names = list(names) if names is not None else [f"x{i}" for i in range(X.shape[1])]
    if X.ndim != 2 or X.shape[0] != y.size or groups.size != y.size:
        raise UsageError("X, y and groups must describe the same rows")
    check_rank(X, names)
    labels, codes = np.unique(groups, return_inverse=True)
    prof = _Profile(X, y, codes, labels.size)

    converged = True
    if labels.size < 2:
        lam = 0.0
    else:
        def f(theta):
            return prof.loglik(math.exp(theta))

        grid = np.linspace(_LOG_LO, _LOG_HI, 41)
        vals = [f(t) for t in grid]
        k = int(np.argmax(vals))
        lo = grid[max(k - 1, 0)]
        hi = grid[min(k + 1, grid.size - 1)]
        theta, best, converged = _golden_max(f, lo, hi, tol=tol)
        lam = math.exp(theta)
        # the boundary s2_g = 0 is part of the parameter space
        if prof.loglik(0.0) >= best:
            lam = 0.0

    beta, quad, logdet, cho = prof.solve(lam)
    n = y.size
    s2 = quad / n
    ll = prof.loglik(lam) if s2 > 0 else math.inf
    cov = s2 * linalg.cho_solve(cho, np.eye(X.shape[1]))
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf * np.sign(beta)))
    p = two_sided_p(z)
    resid = y - X @ beta
    c = lam / (1.0 + lam * prof.nj)
    blup = c * np.bincount(codes, weights=resid, minlength=labels.size)
    effects = {str(g): float(u) for g, u in zip(labels, blup)}
    return LmeFit(names, beta, se, z, p, float(lam * s2), float(s2), float(ll), bool(converged),
                  int(n), int(labels.size), effects)


def lme_fit(spec: LmeSpec, data) -> LmeFit:
    """Fit ``spec`` to a :class:`Design` or a list of record mappings."""
    design = data if isinstance(data, Design) else build_design(data, spec)
    return lme_fit_arrays(design.X, design.y, design.groups, design.names)


def ols(X, y) -> np.ndarray:
    beta, *_ = np.linalg.lstsq(np.asarray(X, float), np.asarray(y, float), rcond=None)
    return beta


@dataclass
class CvResult:
    mae: float
    folds: int
    residuals: list[dict]

    def residuals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["record", "group", "fold", "observed", "predicted", "residual"])
        for r in self.residuals:
            w.writerow([r["record"], r["group"], r["fold"], repr(r["observed"]), repr(r["predicted"]),
                        repr(r["residual"])])
        return buf.getvalue()


def lme_cv_mae(spec: LmeSpec, data, folds: int = 10, seed: int | np.random.Generator = 0) -> CvResult:
    """Record-level k-fold CV; held-out rows use the group intercept if the group was seen."""
    design = data if isinstance(data, Design) else build_design(data, spec)
    n = design.y.size
    if folds < 2 or folds > n:
        raise UsageError(f"folds must lie in [2, {n}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(n)
    ids = design.row_ids or [str(i) for i in range(n)]
    residuals = []
    for k, test in enumerate(np.array_split(order, folds)):
        train = np.setdiff1d(order, test)
        fit = lme_fit_arrays(design.X[train], design.y[train], design.groups[train], design.names)
        yhat = fit.predict(design.X[test], design.groups[test])
        for i, pred in zip(test, yhat):
            residuals.append({"record": ids[i], "group": str(design.groups[i]), "fold": k,
                              "observed": float(design.y[i]), "predicted": float(pred),
                              "residual": float(design.y[i] - pred)})
    residuals.sort(key=lambda r: r["record"])
    mae = float(np.mean([abs(r["residual"]) for r in residuals]))
    return CvResult(mae, folds, residuals)


def qq_csv(values) -> str:
    """Normal quantile-quantile pairs for visual normality checks."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.size
    theo = norm.ppf((np.arange(1, n + 1) - 0.5) / n) if n else np.zeros(0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["theoretical", "sample"])
    for t, s in zip(theo, x):
        w.writerow([repr(float(t)), repr(float(s))])
    return buf.getvalue()
