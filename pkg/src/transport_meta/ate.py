"""Target-population average treatment effect estimators.

All estimators take a :class:`~transport_meta.data.StudyDataset` and the
nuisance values of :class:`~transport_meta.nuisance.FittedNuisances`.
Influence values are returned per row so that standard errors, variance
comparisons and Monte Carlo checks can be built on them.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import numkit
from .nuisance import WeightChoice, at_rows, design_matrix


@dataclass
class EstimateReport:
    """Point estimate with influence values and a Wald interval."""

    estimator: str
    psi_hat: float
    se: float
    ci: tuple
    if_values: np.ndarray = None
    level: float = 0.95
    diagnostics: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "estimator": self.estimator,
            "psi_hat": float(self.psi_hat),
            "se": None if not np.isfinite(self.se) else float(self.se),
            "ci": [None if not np.isfinite(c) else float(c) for c in self.ci],
            "level": self.level,
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def z_value(level):
    if not 0 < level < 1:
        raise ValueError("confidence level must lie in (0, 1)")
    return float(norm.ppf(0.5 + level / 2))


def wald(psi, se, level=0.95):
    z = z_value(level)
    return (psi - z * se, psi + z * se)


def _report(name, psi, phi, n, level, diagnostics):
    se = float(np.sqrt(np.mean(phi ** 2) / n))
    diagnostics = dict(diagnostics)
    diagnostics.setdefault("ee_residual", float(np.mean(phi)))
    return EstimateReport(name, float(psi), se, wald(psi, se, level), phi, level, diagnostics)


def _effect_values(data, effect):
    """Accept a model with ``effect(X)`` or an array of D(X) values."""
    if hasattr(effect, "effect"):
        return effect.effect(data.X)
    return np.asarray(effect, dtype=float)


def gformula_ate(data, effect, level=0.95):
    """Plug-in ``P_n{G D(X)} / alpha_hat``. No standard error."""
    if data.n1 == 0:
        raise ValueError("no target rows")
    D = _effect_values(data, effect)
    psi = float(np.mean(D[data.target]))
    return EstimateReport("gformula", psi, np.nan, (np.nan, np.nan), None, level,
                          {"plug_in_only": True})


def _row_terms(data, nuis):
    """Per-row pieces shared by the augmented estimators (source rows only)."""
    a = data.a0()
    src = data.source
    e1 = at_rows(nuis.e1, data.s)
    ea = np.where(a == 1, e1, 1 - e1)
    qa = at_rows(nuis.q(1), data.s) * a + at_rows(nuis.q(0), data.s) * (1 - a)
    odds = nuis.pi / (1 - nuis.pi)
    return a, src, ea, qa, odds


def ipw_ate(data, nuis, h=None, level=0.95):
    """``P_n[(1-G) pi/(1-pi) h (2A-1)/e(A|X,S) Y] / alpha_hat``.

    ``h`` is a per-row array, a :class:`WeightChoice` (normalized weights) or
    None for ``h = 1``.
    """
    a, src, ea, _, odds = _row_terms(data, nuis)
    if h is None:
        hv = np.ones(data.n)
    elif isinstance(h, WeightChoice):
        hv = at_rows(nuis.normalized(h), data.s)
    else:
        hv = np.asarray(h, dtype=float)
    y = data.y0()
    term = np.zeros(data.n)
    term[src] = odds[src] * hv[src] * (2 * a[src] - 1) / ea[src] * y[src]
    alpha = data.alpha
    psi = float(np.mean(term) / alpha)
    phi = term / alpha - data.g / alpha * psi
    return _report("ipw", psi, phi, data.n, level, dict(nuis.diagnostics))


def _augmentation(data, nuis, choice):
    a, src, ea, qa, odds = _row_terms(data, nuis)
    Hn = nuis.normalized(choice)
    h = at_rows(Hn, data.s)
    own_ok = at_rows(nuis.eligible.astype(float), data.s) == 1
    keep = src & own_ok
    aug = np.zeros(data.n)
    aug[keep] = (odds[keep] * h[keep] * (2 * a[keep] - 1) / ea[keep]
                 * (data.y[keep] - qa[keep]))
    W = nuis.trial_weights(choice)[nuis.eligible]
    diag = {"n_outside_support": int(np.sum(src & ~own_ok)),
            "weight_min": float(W.min()), "weight_max": float(W.max())}
    return aug, diag


def eif_ate(data, nuis, choice=WeightChoice(), level=0.95):
    """Closed-form root of the efficient estimating equation.

    ``psi = P_n[aug + G D(X)] / alpha_hat`` with influence values
    ``aug/alpha + G/alpha (D - psi)``; the estimating-equation residual is
    zero up to rounding.
    """
    aug, diag = _augmentation(data, nuis, choice)
    alpha = data.alpha
    D = nuis.effect
    gD = np.where(data.target, D, 0.0)
    psi = float((aug.sum() + gD.sum()) / data.n1)
    phi = aug / alpha + data.g / alpha * (np.where(data.target, D, 0.0) - psi)
    diag.update(nuis.diagnostics)
    diag["weights"] = str(choice)
    return _report("eif", psi, phi, data.n, level, diag)


def variant_coefficients(data, nuis, model):
    """Per-row ``c_i`` and pooled ``Q(A_i, X_i)`` for the two stronger models.

    ``pooled``: ``c = 1/e(A|X)`` with ``e(a|x)`` mixed over trials.
    ``armwise``: ``c = w(A,X,S) / sum_s' w(A,X,s') e(A|X,s') eta(s'|X)`` with ``w = 1/V``.
    """
    a = data.a0()
    ep1 = nuis.pooled_propensity()
    qp1, qp0 = nuis.pooled_outcome(1), nuis.pooled_outcome(0)
    qa = np.where(a == 1, qp1, qp0)
    if model == "pooled":
        coef = 1.0 / np.where(a == 1, ep1, 1 - ep1)
    elif model == "armwise":
        elig = nuis.eligible
        coef = np.empty(data.n)
        for arm, V, E in ((1, nuis.v1, nuis.e1), (0, nuis.v0, 1 - nuis.e1)):
            wd = np.where(elig, 1.0 / V, 0.0)
            den = np.sum(wd * E * nuis.eta, axis=1)
            rows = a == arm
            coef[rows] = at_rows(wd, data.s)[rows] / den[rows]
    else:
        raise ValueError(f"unknown variant {model!r}; use 'pooled' or 'armwise'")
    return coef, qa, qp1, qp0


def eif_ate_variant(data, nuis, model="pooled", level=0.95):
    """Estimators efficient under ``Y indep S | X, A`` (pooled) or equal arm means (armwise)."""
    coef, qa, qp1, qp0 = variant_coefficients(data, nuis, model)
    a = data.a0()
    src = data.source
    odds = nuis.pi / (1 - nuis.pi)
    aug = np.zeros(data.n)
    aug[src] = odds[src] * (2 * a[src] - 1) * coef[src] * (data.y[src] - qa[src])
    D = qp1 - qp0
    alpha = data.alpha
    psi = float((aug.sum() + D[data.target].sum()) / data.n1)
    phi = aug / alpha + data.g / alpha * (np.where(data.target, D, 0.0) - psi)
    return _report(f"eif_{model}", psi, phi, data.n, level, dict(nuis.diagnostics))


def efficiency_gap(data, nuis, alt=WeightChoice("constant"), choice=WeightChoice()):
    """Plug-in difference of asymptotic variances, weight ``choice`` minus weight ``alt``.

    With the optimal ``choice`` the value is nonpositive (Cauchy-Schwarz).
    Averaged over the empirical covariate distribution of all rows.
    """
    W = np.where(nuis.eligible, nuis.trial_weights(choice), 0.0)
    Wt = np.where(nuis.eligible, nuis.trial_weights(alt), 0.0)
    eta = nuis.eta
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(nuis.eligible, 1.0 / W, 0.0)
    first = 1.0 / np.sum(eta * W, axis=1)
    second = np.sum(eta * inv * Wt ** 2, axis=1) / np.sum(eta * Wt, axis=1) ** 2
    pi = nuis.pi
    alpha = data.alpha
    return float(np.mean(pi ** 2 / (alpha ** 2 * (1 - pi)) * (first - second)))


# ---------------------------------------------------------------------------
# DR-learner

def drlearner_pseudo(data, nuis, choice=WeightChoice()):
    """Pseudo-outcomes on source rows; NaN on target rows."""
    a, src, ea, qa, _ = _row_terms(data, nuis)
    h = at_rows(nuis.normalized(choice), data.s)
    zeta = np.full(data.n, np.nan)
    zeta[src] = (h[src] * (2 * a[src] - 1) / ea[src] * (data.y[src] - qa[src])
                 + nuis.effect[src])
    return zeta


@dataclass
class LinearEffect:
    """``D(x) = basis(x) @ coef``."""

    terms: list
    coef: np.ndarray
    vcov: np.ndarray = None

    def __call__(self, X):
        return design_matrix(X, self.terms) @ self.coef

    effect = __call__


def drlearner_fit(zeta, X, terms):
    """OLS of pseudo-outcomes on a basis (rows with NaN pseudo-outcome are dropped)."""
    zeta = np.asarray(zeta, dtype=float)
    keep = ~np.isnan(zeta)
    B = design_matrix(np.asarray(X)[keep], terms)
    res = numkit.ols_fit(B, zeta[keep], names=list(terms))
    resid = zeta[keep] - B @ res.coef
    bread = np.linalg.inv(B.T @ B)
    meat = (B * resid[:, None] ** 2).T @ B
    return LinearEffect(list(terms), res.coef, bread @ meat @ bread)


# ---------------------------------------------------------------------------
# parametric CATE via the efficient score

@dataclass
class ScoreInputs:
    """Nuisance values at each row's own trial (placeholders on target rows)."""

    q0: np.ndarray
    v1: np.ndarray
    v0: np.ndarray
    e1: np.ndarray

    @classmethod
    def from_nuisances(cls, data, nuis):
        fill = {"q0": 1.0, "v1": 1.0, "v0": 1.0, "e1": 0.5}
        vals = {}
        for name, M in (("q0", nuis.q0), ("v1", nuis.v1), ("v0", nuis.v0), ("e1", nuis.e1)):
            v = at_rows(M, data.s)
            vals[name] = np.where(data.source, v, fill[name])
        return cls(**vals)


@dataclass
class ParametricCate:
    terms: list
    beta: np.ndarray
    vcov: np.ndarray
    M: np.ndarray = None
    scores: np.ndarray = None
    iterations: int = 0

    def effect(self, X):
        return design_matrix(X, self.terms) @ self.beta


def efficient_score_D(data, beta, terms, inp):
    """Efficient score rows for ``D(x; beta) = basis(x) @ beta``; zero on target rows."""
    B = design_matrix(data.X, terms)
    a = data.a0()
    src = data.source.astype(float)
    n1 = inp.e1 / inp.v1
    n0 = (1 - inp.e1) / inp.v0
    c = n1 / (n1 + n0)
    va = np.where(a == 1, inp.v1, inp.v0)
    resid = data.y0() - inp.q0 - a * (B @ beta)
    coef = src * (a - c) / va * resid
    return B * coef[:, None]


def m_matrix_D(data, terms, inp):
    """``P_n dS/dbeta^T``; exact because the score is linear in ``beta``."""
    B = design_matrix(data.X, terms)
    a = data.a0()
    src = data.source.astype(float)
    n1 = inp.e1 / inp.v1
    n0 = (1 - inp.e1) / inp.v0
    k = src * a / inp.v1 * n0 / (n1 + n0)
    return -(B * k[:, None]).T @ B / data.n


def solve_beta_D(data, terms, inp, beta0=None, tol=numkit.GRAD_TOL, max_iter=50):
    q = len(terms)
    beta = np.zeros(q) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    numkit.check_rank(design_matrix(data.X[data.source & (data.a0() == 1)], terms), terms)
    M = m_matrix_D(data, terms, inp)
    trace = []
    for it in range(1, max_iter + 1):
        g = efficient_score_D(data, beta, terms, inp).mean(axis=0)
        trace.append(float(np.max(np.abs(g))))
        if trace[-1] <= tol:
            break
        beta = beta - np.linalg.solve(M, g)
    else:
        raise numkit.ConvergenceError("efficient-score Newton did not converge", trace)
    S = efficient_score_D(data, beta, terms, inp)
    Minv = np.linalg.inv(M)
    vcov = Minv @ (S.T @ S / data.n) @ Minv.T / data.n
    return ParametricCate(list(terms), beta, vcov, M, S, it)


def psi_sp_D(data, fit, level=0.95):
    """Plug-in ``P_n{G D(X; beta_hat)}/alpha_hat`` with score propagation in the SE."""
    B = design_matrix(data.X, fit.terms)
    D = B @ fit.beta
    tgt = data.target
    alpha = data.alpha
    psi = float(D[tgt].mean())
    grad = B[tgt].mean(axis=0)
    prop = fit.scores @ np.linalg.solve(fit.M.T, grad) if fit.scores is not None else 0.0
    phi = data.g / alpha * (np.where(tgt, D, 0.0) - psi) - prop
    return _report("psi_sp", psi, phi, data.n, level, {"iterations": fit.iterations})
