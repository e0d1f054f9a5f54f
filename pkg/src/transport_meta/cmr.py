"""Target-population causal mean ratio estimators.

The ratio ``psi = psi1 / psi0`` has numerator ``E{R(X) Y | G=1}`` and
denominator ``E(Y | G=1)``. Intervals are built on the log scale, so their
lower end is always positive.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import numkit
from .ate import ScoreInputs, _jsonable, variant_coefficients, z_value
from .nuisance import WeightChoice, at_rows, design_matrix


class RatioError(ValueError):
    """A ratio estimate is undefined (nonpositive numerator or denominator)."""


@dataclass
class RatioEstimate:
    estimator: str
    psi_hat: float
    log_se: float
    ci: tuple
    psi1: float
    psi0: float
    if_values: np.ndarray = None
    if1: np.ndarray = None
    if0: np.ndarray = None
    level: float = 0.95
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self):
        """Natural-scale standard error by the delta method."""
        return self.psi_hat * self.log_se

    def to_json(self):
        return {
            "estimator": self.estimator,
            "psi_hat": float(self.psi_hat),
            "se": None if not np.isfinite(self.log_se) else float(self.se),
            "log_psi_hat": float(np.log(self.psi_hat)),
            "log_se": None if not np.isfinite(self.log_se) else float(self.log_se),
            "ci": [None if not np.isfinite(c) else float(c) for c in self.ci],
            "level": self.level,
            "psi1": float(self.psi1),
            "psi0": float(self.psi0),
            "diagnostics": _jsonable(self.diagnostics),
        }


def target_mean_outcome(data):
    """``psi0 = P_n(G Y)/alpha_hat`` with influence ``G/alpha (Y - psi0)``."""
    y = data.y0()
    tgt = data.target
    psi0 = float(y[tgt].mean())
    if psi0 <= 0:
        raise RatioError("mean target outcome is not positive")
    phi0 = data.g / data.alpha * (np.where(tgt, y, 0.0) - psi0)
    return psi0, phi0


def combine(name, data, psi1, phi1, level=0.95, diagnostics=None):
    """Ratio ``psi1/psi0`` with influence ``phi1/psi0 - psi phi0/psi0`` and log-scale interval."""
    psi0, phi0 = target_mean_outcome(data)
    if psi1 <= 0:
        raise RatioError("numerator estimate is not positive")
    psi = psi1 / psi0
    phi = phi1 / psi0 - psi * phi0 / psi0
    log_se = float(np.std(phi / psi) / np.sqrt(data.n))
    z = z_value(level)
    ci = (float(np.exp(np.log(psi) - z * log_se)), float(np.exp(np.log(psi) + z * log_se)))
    return RatioEstimate(name, float(psi), log_se, ci, float(psi1), psi0, phi, phi1, phi0,
                         level, dict(diagnostics or {}))


def _plugin_numerator(data, R):
    y = data.y0()
    tgt = data.target
    return float(np.mean(R[tgt] * y[tgt]))


def gformula_cmr(data, R, level=0.95):
    """Plug-in ``P_n{G R(X) Y} / P_n{G Y}``; ``R`` is an array or a model with ``effect``."""
    R = R.effect(data.X) if hasattr(R, "effect") else np.asarray(R, dtype=float)
    y = data.y0()
    tgt = data.target
    den = float(np.sum(y[tgt]))
    if den == 0:
        raise RatioError("target outcomes sum to zero")
    psi = float(np.sum(R[tgt] * y[tgt]) / den)
    return RatioEstimate("gformula", psi, np.nan, (np.nan, np.nan),
                         _plugin_numerator(data, R), den / data.n1, level=level,
                         diagnostics={"plug_in_only": True})


def _log_onestep(data, R, aug_coef, literal_divisor):
    """One-step update of ``log psi1`` given the augmentation term of each row.

    Returns the updated ``psi1``, its influence values and the starting value.
    """
    alpha = data.alpha
    y = data.y0()
    tgt = data.target
    init = _plugin_numerator(data, R)
    if init <= 0:
        raise RatioError("initial numerator estimate is not positive")
    gRY = np.where(tgt, R * y, 0.0)

    def phi1(psi1):
        return aug_coef / alpha + data.g / alpha * (gRY - psi1)

    corr = float(np.mean(phi1(init)))
    div = np.log(init) if literal_divisor else init
    psi1 = float(np.exp(np.log(init) + corr / div))
    return psi1, phi1(psi1), init


def _cmr_augmentation(data, nuis, h_rows, q_rows_a, ea_rows):
    a = data.a0()
    src = data.source
    odds = nuis.pi / (1 - nuis.pi)
    aug = np.zeros(data.n)
    aug[src] = (odds[src] * nuis.effect[src] * nuis.target_mean[src] * h_rows[src]
                * (2 * a[src] - 1) / ea_rows[src]
                * (data.y[src] - q_rows_a[src]) / q_rows_a[src])
    return aug


def onestep_psi1(data, nuis, choice=WeightChoice(), literal_divisor=False):
    """One-step numerator on the log scale.

    ``log psi1 = log psi1_init + P_n phi1 / psi1_init``. With
    ``literal_divisor=True`` the correction is divided by ``log psi1_init``
    instead, for comparison only.
    """
    if nuis.target_mean is None:
        raise ValueError("ratio estimation needs a target mean model")
    a = data.a0()
    e1 = at_rows(nuis.e1, data.s)
    ea = np.where(a == 1, e1, 1 - e1)
    qa = np.where(a == 1, at_rows(nuis.q(1), data.s), at_rows(nuis.q(0), data.s))
    h = at_rows(nuis.normalized(choice), data.s)
    own_ok = at_rows(nuis.eligible.astype(float), data.s) == 1
    h = np.where(own_ok, h, 0.0)
    aug = _cmr_augmentation(data, nuis, h, qa, ea)
    psi1, phi1, init = _log_onestep(data, nuis.effect, aug, literal_divisor)
    return psi1, phi1, {"psi1_init": init, "n_outside_support": int(np.sum(data.source & ~own_ok))}


def cmr_estimate(data, nuis, choice=WeightChoice(), level=0.95, literal_divisor=False):
    psi1, phi1, diag = onestep_psi1(data, nuis, choice, literal_divisor)
    diag.update(nuis.diagnostics)
    diag["weights"] = str(choice)
    return combine("eif", data, psi1, phi1, level, diag)


def cmr_variant(data, nuis, model="pooled", level=0.95, literal_divisor=False):
    """Ratio estimators under the pooled or armwise transportability models."""
    if nuis.target_mean is None:
        raise ValueError("ratio estimation needs a target mean model")
    coef, qa, qp1, qp0 = variant_coefficients(data, nuis, model)
    a = data.a0()
    src = data.source
    odds = nuis.pi / (1 - nuis.pi)
    Rp = qp1 / qp0
    aug = np.zeros(data.n)
    aug[src] = (odds[src] * Rp[src] * nuis.target_mean[src] * (2 * a[src] - 1) * coef[src]
                * (data.y[src] - qa[src]) / qa[src])
    psi1, phi1, init = _log_onestep(data, Rp, aug, literal_divisor)
    return combine(f"eif_{model}", data, psi1, phi1, level, {"psi1_init": init})


def single_source_cmr(data, nuis, level=0.95, literal_divisor=False):
    """Single-trial estimator written with ``e(a|x)`` and ``Q(a,x)`` directly."""
    if data.m != 1:
        raise ValueError("single-source estimator needs exactly one trial")
    a = data.a0()
    e1 = nuis.e1[:, 0]
    q1 = nuis.q(1)[:, 0]
    q0 = nuis.q(0)[:, 0]
    R = q1 / q0
    ea = np.where(a == 1, e1, 1 - e1)
    qa = np.where(a == 1, q1, q0)
    src = data.source
    odds = nuis.pi / (1 - nuis.pi)
    aug = np.zeros(data.n)
    aug[src] = (odds[src] * R[src] * nuis.target_mean[src] * (2 * a[src] - 1)
                / (ea[src] * qa[src]) * (data.y[src] - qa[src]))
    psi1, phi1, init = _log_onestep(data, R, aug, literal_divisor)
    return combine("single_source", data, psi1, phi1, level, {"psi1_init": init})


# ---------------------------------------------------------------------------
# parametric ratio via the efficient score

@dataclass
class ParametricRatio:
    terms: list
    beta: np.ndarray
    vcov: np.ndarray
    M: np.ndarray = None
    scores: np.ndarray = None
    iterations: int = 0

    def effect(self, X):
        return np.exp(design_matrix(X, self.terms) @ self.beta)


def _score_parts(data, beta, terms, inp):
    B = design_matrix(data.X, terms)
    a = data.a0()
    src = data.source.astype(float)
    R = np.exp(B @ beta)
    e1, e0 = inp.e1, 1 - inp.e1
    den = R ** 2 * e1 / inp.v1 + e0 / inp.v0
    k = R ** (1 + a) * e1 / inp.v1 / den
    va = np.where(a == 1, inp.v1, inp.v0)
    r = (data.y0() - inp.q0 * R ** a) / va
    return B, a, src, R, den, k, va, r


def efficient_score_R(data, beta, terms, inp):
    """Efficient score rows for ``R(x; beta) = exp(basis(x) @ beta)``; zero on target rows."""
    if np.any(inp.q0[data.source] <= 0):
        raise ValueError("control-arm means must be positive")
    B, a, src, R, _, k, _, r = _score_parts(data, beta, terms, inp)
    coef = src * inp.q0 * R * (a - k) * r
    return B * coef[:, None]


def jacobian_R(data, beta, terms, inp):
    """Exact ``P_n dS/dbeta^T`` of the ratio efficient score."""
    B, a, src, R, den, k, va, r = _score_parts(data, beta, terms, inp)
    q0 = inp.q0
    dk = k * ((1 + a) - 2 * R ** 2 * inp.e1 / inp.v1 / den)
    c = src * (q0 * R * (a - k) * r
               - q0 * R * dk * r
               - q0 ** 2 * R ** (1 + a) * (a - k) * a / va)
    return (B * c[:, None]).T @ B / data.n


def m_matrix_R(data, beta, terms, inp):
    """``-P_n[(1-G) Q0^2 A/V1 (e0/V0)/den grad R grad R^T]``: the part of the Jacobian
    that does not vanish in expectation at the truth."""
    B, a, src, R, den, _, _, _ = _score_parts(data, beta, terms, inp)
    c = src * inp.q0 ** 2 * a / inp.v1 * (1 - inp.e1) / inp.v0 / den * R ** 2
    return -(B * c[:, None]).T @ B / data.n


def _root_fallback(pn, jac, beta, tol, trace):
    """Hybrid Powell from the stalled Newton iterate."""
    sol = optimize.root(pn, beta, jac=jac, method="hybr", options={"xtol": 1e-12})
    g = pn(sol.x)
    if not np.all(np.isfinite(g)) or np.max(np.abs(g)) > max(tol, 1e-7):
        raise numkit.ConvergenceError("step halving failed in ratio score solve", trace)
    return sol.x, g


def initial_beta_R(data, terms, inp):
    """Start value: log-link fit of treated outcomes with ``Q0_hat`` as multiplicative offset.

    Quasi-Poisson on ``y / q0`` with weights ``q0`` solves
    ``sum B (y - q0 exp(B beta)) = 0`` over treated source rows.
    """
    rows = data.source & (data.a0() == 1) & (data.y0() > 0)
    B = design_matrix(data.X[rows], terms)
    q0 = inp.q0[rows]
    try:
        return numkit.loglink_fit(B, data.y0()[rows] / q0, family="quasi", weights=q0).coef
    except (numkit.NumericError, ValueError):
        return np.zeros(len(terms))


def solve_beta_R(data, terms, inp, beta0=None, tol=numkit.GRAD_TOL, max_iter=100):
    """Damped Newton on ``P_n S(beta) = 0`` with the exact Jacobian.

    The sandwich variance and the plug-in propagation use :func:`m_matrix_R`.
    """
    numkit.check_rank(design_matrix(data.X[data.source & (data.a0() == 1)], terms), terms)
    if beta0 is None:
        beta = initial_beta_R(data, terms, inp)
    else:
        beta = np.asarray(beta0, dtype=float).copy()

    def pn(b):
        with np.errstate(over="ignore", invalid="ignore"):
            return efficient_score_R(data, b, terms, inp).mean(axis=0)

    def jac(b):
        return jacobian_R(data, b, terms, inp)

    g = pn(beta)
    trace = [float(np.max(np.abs(g)))]
    it = 0
    while trace[-1] > tol:
        it += 1
        if it > max_iter:
            raise numkit.ConvergenceError("ratio efficient-score Newton did not converge", trace)
        step = np.linalg.solve(jac(beta), g)
        # the exact-Jacobian step is a descent direction for |g|_2^2
        merit = g @ g
        t = 1.0
        for _ in range(numkit.MAX_HALVING):
            cand = beta - t * step
            gc = pn(cand)
            if np.all(np.isfinite(gc)) and gc @ gc < merit:
                break
            t /= 2
        else:
            beta, g = _root_fallback(pn, jac, beta, tol, trace)
            trace.append(float(np.max(np.abs(g))))
            break
        beta, g = cand, gc
        trace.append(float(np.max(np.abs(g))))
    S = efficient_score_R(data, beta, terms, inp)
    M = m_matrix_R(data, beta, terms, inp)
    Minv = np.linalg.inv(M)
    vcov = Minv @ (S.T @ S / data.n) @ Minv.T / data.n
    return ParametricRatio(list(terms), beta, vcov, M, S, it)


def psi_sp_R(data, fit, level=0.95):
    """Plug-in ratio with ``R(x; beta_hat)`` and score propagation in the SE."""
    B = design_matrix(data.X, fit.terms)
    R = np.exp(B @ fit.beta)
    y = data.y0()
    tgt = data.target
    alpha = data.alpha
    psi1 = float(np.mean(R[tgt] * y[tgt]))
    grad = (B[tgt] * (R[tgt] * y[tgt])[:, None]).mean(axis=0)
    prop = fit.scores @ np.linalg.solve(fit.M.T, grad)
    phi1 = data.g / alpha * (np.where(tgt, R * y, 0.0) - psi1) - prop
    return combine("psi_sp", data, psi1, phi1, level, {"iterations": fit.iterations})
