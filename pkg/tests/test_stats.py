import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypnokit.errors import UsageError
from hypnokit.stats import (
    LmeSpec,
    build_design,
    check_rank,
    lme_cv_mae,
    lme_fit,
    lme_fit_arrays,
    ols,
    permutation_test,
    qq_csv,
    two_sided_p,
)
from hypnokit.stats import _Profile


# ---------------------------------------------------------------- permutation

def exhaustive_independent(a, b):
    pooled = np.concatenate([a, b])
    t_obs = abs(np.mean(a) - np.mean(b))
    hits = total = 0
    for idx in itertools.combinations(range(pooled.size), len(a)):
        mask = np.zeros(pooled.size, bool)
        mask[list(idx)] = True
        t = abs(pooled[mask].mean() - pooled[~mask].mean())
        hits += t >= t_obs - 1e-12
        total += 1
    return hits / total


def exhaustive_paired(a, b):
    d = np.asarray(a, float) - np.asarray(b, float)
    t_obs = abs(d.mean())
    signs = np.array(list(itertools.product([-1, 1], repeat=d.size)))
    return float(np.mean(np.abs((signs * d).mean(axis=1)) >= t_obs - 1e-12))


def test_identical_paired_samples():
    x = [0.3, 0.5, 0.9, 0.1]
    assert permutation_test(x, x, paired=True, n_perm=1000) == 1.0


def test_separated_groups_match_enumeration():
    a, b = np.zeros(5), np.full(5, 10.0)
    exact = exhaustive_independent(a, b)
    assert exact == pytest.approx(2 / 252)
    p = permutation_test(a, b, n_perm=20000, seed=1)
    assert abs(p - exact) < 4 * math.sqrt(exact * (1 - exact) / 20000) + 1 / 20001


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monte_carlo_p_tracks_exhaustive(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(0, 1, 6), rng.normal(0.8, 1, 6)
    n = 5000
    for paired, exact in ((False, exhaustive_independent(a, b)), (True, exhaustive_paired(a, b))):
        p = permutation_test(a, b, paired=paired, n_perm=n, seed=seed)
        assert abs(p - exact) < 5 * math.sqrt(max(exact * (1 - exact), 1e-4) / n) + 2 / n


def test_null_p_values_are_uniform():
    rng = np.random.default_rng(42)
    ps = np.array([permutation_test(rng.normal(size=8), rng.normal(size=8), n_perm=1000, seed=rng)
                   for _ in range(1000)])
    grid = np.linspace(0.05, 0.95, 19)
    ecdf = np.array([(ps <= g).mean() for g in grid])
    assert np.max(np.abs(ecdf - grid)) < 0.05


def test_swap_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=9), rng.normal(0.5, size=11)
    assert permutation_test(a, b, n_perm=2000, seed=3) == permutation_test(b, a, n_perm=2000, seed=3)
    c = rng.normal(size=9)
    assert permutation_test(a, c, True, 2000, 3) == permutation_test(c, a, True, 2000, 3)


@pytest.mark.parametrize("kw", [dict(a=[], b=[1.0]), dict(a=[1.0], b=[1.0, 2.0], paired=True),
                                dict(a=[1.0], b=[2.0], n_perm=999)])
def test_permutation_preconditions(kw):
    with pytest.raises(UsageError):
        permutation_test(**kw)


# ---------------------------------------------------------------- design

def _rec(**kw):
    base = dict(record="r", cohort="c1", kappa=0.7, age=60, sex="M", bmi=25.0, pd=0,
                ahi=5.0, rbd="no", pn1=10.0, stagec=120, confidence=0.8)
    base.update(kw)
    return base


def test_design_encoding_and_drops():
    d = build_design([_rec(), _rec(sex="F", ahi=None), _rec(ahi="")], LmeSpec.model("B"))
    assert d.dropped == 2 and d.X.shape == (1, 7)
    assert d.X[0].tolist() == [1.0, 60.0, 1.0, 25.0, 0.0, 5.0, 0.0]
    c = build_design([_rec()], LmeSpec.model("c"))
    assert c.X[0, -1] == 80.0 and c.names[-1] == "U-Sleep Confidence %"
    with pytest.raises(UsageError):
        build_design([_rec(ahi=None)], LmeSpec.model("B"))
    with pytest.raises(UsageError):
        build_design([_rec(sex="maybe")], LmeSpec.model("A"))
    with pytest.raises(UsageError):
        LmeSpec.model("D")


def test_rank_check_names_collinear_column():
    rng = np.random.default_rng(0)
    age = rng.uniform(20, 80, 40)
    X = np.column_stack([np.ones(40), age, rng.random(40), 2 * age + 1])
    with pytest.raises(UsageError, match="dup"):
        check_rank(X, ["Intercept", "age", "bmi", "dup"])
    check_rank(X[:, :3], ["Intercept", "age", "bmi"])
    with pytest.raises(UsageError):
        check_rank(np.ones((2, 3)), list("abc"))


# ---------------------------------------------------------------- fits

def _synthetic(rng, n_groups=6, per=50, beta=(0.5, -0.003), sg=0.05, se=0.05):
    age = rng.uniform(20, 80, n_groups * per)
    g = np.repeat(np.arange(n_groups), per)
    u = rng.normal(0, sg, n_groups)
    y = beta[0] + beta[1] * age + u[g] + rng.normal(0, se, age.size)
    return np.column_stack([np.ones(age.size), age]), y, g.astype(str)


def test_single_group_equals_ols():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(100), rng.normal(size=(100, 3))])
    y = X @ [1, 2, -1, 0.5] + rng.normal(size=100)
    fit = lme_fit_arrays(X, y, ["a"] * 100)
    assert np.max(np.abs(fit.beta - ols(X, y))) < 1e-8
    assert fit.sigma2_group == 0.0
    resid = y - X @ fit.beta
    assert fit.sigma2_resid == pytest.approx(resid @ resid / 100, rel=1e-10)
    cov = fit.sigma2_resid * np.linalg.inv(X.T @ X)
    assert np.allclose(fit.se, np.sqrt(np.diag(cov)), rtol=1e-8)


def test_zero_noise_recovers_beta():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(60), rng.uniform(20, 80, 60)])
    fit = lme_fit_arrays(X, X @ [0.5, -0.003], np.repeat(list("abc"), 20))
    assert np.max(np.abs(fit.beta - [0.5, -0.003])) < 1e-6
    assert fit.sigma2_resid < 1e-12


def _dense_loglik(X, y, g, lam):
    """Direct multivariate normal log-likelihood at the profiled optimum."""
    Z = (g[:, None] == np.unique(g)[None, :]).astype(float)
    H = np.eye(y.size) + lam * Z @ Z.T
    Hi = np.linalg.inv(H)
    beta = np.linalg.solve(X.T @ Hi @ X, X.T @ Hi @ y)
    r = y - X @ beta
    s2 = r @ Hi @ r / y.size
    _, logdet = np.linalg.slogdet(s2 * H)
    return beta, -0.5 * (y.size * math.log(2 * math.pi) + logdet + y.size)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 100))
def test_profile_matches_dense_likelihood(seed, lam):
    rng = np.random.default_rng(seed)
    X, y, g = _synthetic(rng, n_groups=4, per=8)
    codes = np.unique(g, return_inverse=True)[1]
    prof = _Profile(X, y, codes, 4)
    beta, ll = _dense_loglik(X, y, g, lam)
    assert np.allclose(prof.solve(lam)[0], beta, rtol=1e-8, atol=1e-10)
    assert prof.loglik(lam) == pytest.approx(ll, rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fit_is_at_least_as_likely_as_ols(seed):
    rng = np.random.default_rng(seed)
    X, y, g = _synthetic(rng, sg=rng.uniform(0, 0.1))
    fit = lme_fit_arrays(X, y, g)
    prof = _Profile(X, y, np.unique(g, return_inverse=True)[1], 6)
    assert fit.loglik >= prof.loglik(0.0) - 1e-9
    grid = [prof.loglik(math.exp(t)) for t in np.linspace(math.log(1e-8), math.log(1e8), 200)]
    assert fit.loglik >= max(grid) - 1e-6
    assert fit.sigma2_group >= 0 and fit.sigma2_resid >= 0 and np.all((fit.p >= 0) & (fit.p <= 1))


def test_recovers_group_sd_monte_carlo():
    # with 30 groups the sd estimate has enough degrees of freedom for the
    # 50% band; at 6 groups it cannot reach 90% coverage
    hits = beta_hits = 0
    for seed in range(100):
        X, y, g = _synthetic(np.random.default_rng(seed), n_groups=30, per=20)
        fit = lme_fit_arrays(X, y, g, ["Intercept", "Age"])
        assert fit.converged
        hits += abs(math.sqrt(fit.sigma2_group) - 0.05) < 0.025
        beta_hits += bool(np.all(np.abs(fit.beta - [0.5, -0.003]) < 3 * fit.se))
    assert hits >= 90 and beta_hits >= 90


def test_p_values_against_high_precision():
    z = np.array([0.0, 0.5, 1.96, 3.0, 6.0, -2.5, 9.0])
    got = two_sided_p(z)
    mpmath.mp.dps = 50
    for zi, pi in zip(z, got):
        exact = float(mpmath.erfc(abs(mpmath.mpf(float(zi))) / mpmath.sqrt(2)))
        assert abs(pi - exact) <= 1e-12 * max(exact, 1e-300) or abs(pi - exact) < 1e-300


def test_fit_outputs():
    rng = np.random.default_rng(3)
    recs = []
    for i in range(60):
        recs.append(_rec(record=f"r{i:02d}", cohort=f"c{i % 3}", age=rng.uniform(30, 80), sex=rng.choice(["M", "F"]),
                         bmi=rng.uniform(18, 35), pd=int(rng.random() < 0.3), kappa=rng.uniform(0.5, 0.9)))
    fit = lme_fit(LmeSpec.model("A"), recs)
    assert [r["parameter"] for r in fit.table()] == ["Intercept", "Age", "Sex (M)", "BMI", "PD"]
    lines = fit.table_csv().splitlines()
    assert lines[0] == "parameter,coef,se,z,p" and len(lines) == 6
    assert '"method": "ML"' in fit.to_json()


# ---------------------------------------------------------------- CV

def test_cv_zero_noise_and_determinism():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(50), rng.uniform(20, 80, 50), rng.random(50)])
    recs = [dict(record=f"r{i}", cohort=f"c{i % 2}", kappa=float(x @ [0.5, -0.003, 0.1]), age=x[1], bmi=x[2])
            for i, x in enumerate(X)]
    spec = LmeSpec(("age", "bmi"))
    cv = lme_cv_mae(spec, recs, folds=10, seed=0)
    assert cv.mae < 1e-6 and len(cv.residuals) == 50
    assert lme_cv_mae(spec, recs, folds=10, seed=0).residuals_csv() == cv.residuals_csv()
    with pytest.raises(UsageError):
        lme_cv_mae(spec, recs, folds=51)


def test_cv_pure_noise_matches_mean_absolute_deviation():
    rng = np.random.default_rng(5)
    y = rng.normal(0.7, 0.1, 300)
    recs = [dict(record=f"r{i}", cohort=f"c{i % 3}", kappa=v, age=rng.uniform(20, 80)) for i, v in enumerate(y)]
    cv = lme_cv_mae(LmeSpec(("age",)), recs)
    mad = np.mean(np.abs(y - y.mean()))
    assert abs(cv.mae - mad) < 0.1 * mad


def test_qq_csv():
    text = qq_csv([3.0, 1.0, 2.0]).splitlines()
    assert text[0] == "theoretical,sample"
    assert [float(r.split(",")[1]) for r in text[1:]] == [1.0, 2.0, 3.0]
    assert float(text[2].split(",")[0]) == 0.0
