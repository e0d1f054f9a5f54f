"""Nuisance models and trial weights.

Every model exposes array-valued predictions so estimators can work on
whole samples at once. Matrices indexed ``[i, k]`` refer to row ``i``
evaluated as if it came from trial ``k + 1``.

Model specs are plain dicts (JSON-compatible), for example::

    {"selection": {"terms": ["1", "x1", "x2", "x3"]},
     "affiliation": {"kind": "segmented", "variable": "x1",
                     "cuts": [-0.8, -0.25, 0.25, 0.8], "terms": ["1", "x1", "x2", "x3"]},
     "propensity": {"kind": "fitted", "terms": ["1"]},
     "outcome": {"control": {"terms": ["1", "x1", "x2", "x3"], "per_trial": true},
                 "effect": {"terms": ["1", "x1", "x2", "x3"]}},
     "variance": {"kind": "empirical"},
     "target_mean": {"terms": ["1", "x1", "x2", "x3"]},
     "support_tau": 0.001}
"""
import re
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit
from .data import support_from_probs

PROB_CLIP = (1e-6, 1 - 1e-6)
WEIGHT_CAP = 1e12

_FACTOR = re.compile(r"^(1|s|x[1-9][0-9]*)$")


class NuisanceError(ValueError):
    """A nuisance model cannot be fitted or evaluated."""


# ---------------------------------------------------------------------------
# designs

def parse_terms(terms):
    """Validate term strings such as ``"1"``, ``"x2"``, ``"s"``, ``"s*x1"``, ``"x1*x2"``."""
    out = []
    for t in terms:
        factors = [f.strip() for f in str(t).split("*")]
        if not factors or not all(_FACTOR.match(f) for f in factors):
            raise NuisanceError(f"bad design term {t!r}")
        out.append(tuple(factors))
    return out


def design_matrix(X, terms, s=None):
    """Columns for each product term; ``s`` is the numeric trial id."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, p = X.shape
    cols = []
    for factors in parse_terms(terms):
        col = np.ones(n)
        for f in factors:
            if f == "1":
                continue
            if f == "s":
                if s is None:
                    raise NuisanceError("term uses s but no trial id is available")
                col = col * np.asarray(s, dtype=float)
            else:
                j = int(f[1:]) - 1
                if j >= p:
                    raise NuisanceError(f"term {f!r} exceeds covariate dimension {p}")
                col = col * X[:, j]
        cols.append(col)
    return np.column_stack(cols) if cols else np.empty((n, 0))


def uses_trial(terms):
    return any("s" in f for f in parse_terms(terms))


# ---------------------------------------------------------------------------
# selection score pi(x)

@dataclass
class SelectionModel:
    terms: list
    coef: np.ndarray
    clip: tuple = PROB_CLIP
    fit: object = None

    def predict(self, X):
        p = numkit.expit(design_matrix(X, self.terms) @ self.coef)
        return np.clip(p, *self.clip)


def fit_selection(data, spec=None):
    terms = (spec or {}).get("terms", ["1"] + [f"x{j + 1}" for j in range(data.p)])
    if data.n1 == data.n or data.n1 == 0:
        raise NuisanceError("selection model needs both target and source rows")
    res = numkit.logistic_fit(design_matrix(data.X, terms), data.g, names=terms)
    return SelectionModel(list(terms), res.coef, fit=res)


# ---------------------------------------------------------------------------
# affiliation score eta(s|x)

@dataclass
class AffiliationModel:
    """Multinomial affiliation, optionally fitted separately on covariate segments.

    ``segments`` is a list of ``(trials, coef)`` pairs; ``trials`` lists the
    trial ids seen in the segment (first one is the reference) and ``coef``
    has shape ``(len(trials) - 1, len(terms))``.
    """

    m: int
    terms: list
    segments: list
    variable: int = 0
    cuts: tuple = ()
    fits: list = field(default_factory=list)

    def segment_of(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not self.cuts:
            return np.zeros(len(X), dtype=int)
        return np.searchsorted(np.asarray(self.cuts), X[:, self.variable], side="left")

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros((len(X), self.m))
        seg = self.segment_of(X)
        B = design_matrix(X, self.terms) if self.terms else None
        for j, (trials, coef) in enumerate(self.segments):
            rows = seg == j
            if not rows.any() or not trials:
                continue
            cols = np.asarray(trials) - 1
            if len(trials) == 1:
                out[np.ix_(rows, cols)] = 1.0
            else:
                out[np.ix_(rows, cols)] = numkit.softmax_ref(B[rows] @ coef.T)
        return out


def fit_affiliation(data, spec=None):
    spec = spec or {}
    kind = spec.get("kind", "multinomial")
    terms = spec.get("terms", ["1"] + [f"x{j + 1}" for j in range(data.p)])
    src = data.source
    X, s = data.X[src], data.s[src]
    if data.m == 1:
        return AffiliationModel(1, [], [([1], None)])
    for k in range(1, data.m + 1):
        if not np.any(s == k):
            raise NuisanceError(f"trial {k} is empty")
    if kind == "multinomial":
        res = numkit.multinomial_fit(design_matrix(X, terms), s,
                                     categories=range(1, data.m + 1))
        return AffiliationModel(data.m, list(terms), [(list(range(1, data.m + 1)), res.coef)],
                                fits=[res])
    if kind != "segmented":
        raise NuisanceError(f"unknown affiliation kind {kind!r}")
    variable = int(str(spec.get("variable", "x1"))[1:]) - 1
    cuts = tuple(float(c) for c in spec["cuts"])
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise NuisanceError("segment cuts must be strictly increasing")
    model = AffiliationModel(data.m, list(terms), [], variable, cuts)
    seg = model.segment_of(X)
    B = design_matrix(X, terms)
    for j in range(len(cuts) + 1):
        rows = seg == j
        trials = sorted(int(k) for k in np.unique(s[rows]))
        if len(trials) <= 1:
            model.segments.append((trials, None))
            continue
        res = numkit.multinomial_fit(B[rows], s[rows], categories=trials, names=terms)
        model.segments.append((trials, res.coef))
        model.fits.append(res)
    return model


@dataclass
class KnownAffiliation:
    """Wraps a callable ``X -> (n, m)`` probability matrix."""

    m: int
    func: object

    def predict(self, X):
        return self.func(np.atleast_2d(np.asarray(X, dtype=float)))


# ---------------------------------------------------------------------------
# propensity e(1|x,s)

@dataclass
class PropensityModel:
    """``kind`` is ``known`` (per-trial constants), ``constant`` or ``fitted``."""

    kind: str
    m: int
    values: np.ndarray = None
    terms: list = None
    coefs: list = None

    def predict_matrix(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = len(X)
        if self.kind in ("known", "constant"):
            return np.broadcast_to(np.asarray(self.values, dtype=float), (n, self.m)).copy()
        B = design_matrix(X, self.terms)
        return np.column_stack([numkit.expit(B @ c) for c in self.coefs])

    def predict(self, X, s):
        E = self.predict_matrix(X)
        return E[np.arange(len(E)), np.asarray(s) - 1]


def fit_propensity(data, spec=None):
    spec = spec or {}
    kind = spec.get("kind", "fitted")
    if kind == "known":
        vals = np.asarray(spec["values"], dtype=float)
        if vals.shape != (data.m,):
            raise NuisanceError(f"need {data.m} known propensities, got {vals.shape}")
        model = PropensityModel("known", data.m, values=vals)
    elif kind == "constant":
        model = PropensityModel("constant", data.m, values=np.full(data.m, float(spec.get("value", 0.5))))
    elif kind == "fitted":
        terms = list(spec.get("terms", ["1"]))
        coefs = []
        for k in range(1, data.m + 1):
            rows = data.s == k
            a = data.a[rows]
            if np.all(a == a[0]):
                raise NuisanceError(f"trial {k} has a single treatment arm")
            coefs.append(numkit.logistic_fit(design_matrix(data.X[rows], terms), a, names=terms).coef)
        model = PropensityModel("fitted", data.m, terms=terms, coefs=coefs)
    else:
        raise NuisanceError(f"unknown propensity kind {kind!r}")
    vals = model.predict_matrix(data.X[:1])
    if np.any((vals <= 0) | (vals >= 1)):
        raise NuisanceError("propensity outside (0, 1)")
    return model


# ---------------------------------------------------------------------------
# outcome regressions with the transportability constraint built in

@dataclass
class OutcomeModel:
    """``Q(a,x,s) = Q0(x,s) + a D(x)`` (difference) or ``Q0(x,s) R(x)^a`` (ratio).

    The effect part does not depend on ``s``, so the sample constraint holds exactly.
    """

    mode: str
    m: int
    control_terms: list
    per_trial: bool
    effect_terms: list
    control_coef: np.ndarray
    effect_coef: np.ndarray
    fit: object = None

    def _control_design(self, X, s):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s = np.broadcast_to(np.asarray(s), (len(X),))
        if not self.per_trial:
            return design_matrix(X, self.control_terms, s)
        B = design_matrix(X, self.control_terms)
        blocks = [B * (s == k)[:, None] for k in range(1, self.m + 1)]
        return np.hstack(blocks)

    def linear_control(self, X, s):
        return self._control_design(X, s) @ self.control_coef

    def effect_index(self, X):
        """D(x) in difference mode, log R(x) in ratio mode."""
        return design_matrix(X, self.effect_terms) @ self.effect_coef

    def effect(self, X):
        r = self.effect_index(X)
        return r if self.mode == "difference" else np.exp(r)

    def q0(self, X, s):
        f = self.linear_control(X, s)
        return f if self.mode == "difference" else np.exp(f)

    def q0_matrix(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.column_stack([self.q0(X, np.full(len(X), k)) for k in range(1, self.m + 1)])

    def predict(self, a, X, s):
        a = np.asarray(a, dtype=float)
        if self.mode == "difference":
            return self.q0(X, s) + a * self.effect(X)
        return np.exp(self.linear_control(X, s) + a * self.effect_index(X))


def _outcome_design(data, control, effect, rows):
    terms_c = list(control.get("terms", ["1"]))
    per_trial = bool(control.get("per_trial", True))
    terms_e = list(effect.get("terms", ["1"]))
    if per_trial and uses_trial(terms_c):
        raise NuisanceError("per-trial control basis must not contain s terms")
    if uses_trial(terms_e):
        raise NuisanceError("effect basis must not depend on the trial")
    proto = OutcomeModel(data.mode, data.m, terms_c, per_trial, terms_e, None, None)
    Xr, sr, ar = data.X[rows], data.s[rows], data.a[rows]
    C = proto._control_design(Xr, sr)
    E = design_matrix(Xr, terms_e) * ar[:, None]
    names = ([f"s{k}:{t}" for k in range(1, data.m + 1) for t in terms_c] if per_trial
             else [f"ctl:{t}" for t in terms_c]) + [f"a:{t}" for t in terms_e]
    return proto, np.hstack([C, E]), C.shape[1], names


def fit_outcome_difference(data, control=None, effect=None):
    """Joint OLS of ``Y`` on ``[control columns | a * effect columns]`` over source rows."""
    if data.mode != "difference":
        raise NuisanceError("difference outcome model needs a difference-mode dataset")
    rows = data.source
    proto, Z, kc, names = _outcome_design(data, control or {}, effect or {}, rows)
    res = numkit.ols_fit(Z, data.y[rows], names=names)
    return replace(proto, control_coef=res.coef[:kc], effect_coef=res.coef[kc:], fit=res)


def fit_outcome_ratio(data, control=None, effect=None, family="gamma", stagewise=False):
    """Log-link fit ``log Q(a,x,s) = f0(x,s) + a r(x)`` over source rows.

    By default both parts are fitted jointly. With ``stagewise=True`` the
    control part is fitted on control-arm rows alone, then ``r`` on treated
    rows with ``f0`` as an offset; a misspecified ``f0`` then no longer leaks
    into the treated arm.
    """
    rows = data.source
    y = data.y[rows]
    if np.any(y <= 0):
        raise NuisanceError("ratio outcome model needs positive source outcomes")
    proto, Z, kc, names = _outcome_design(data, control or {}, effect or {}, rows)
    proto = replace(proto, mode="ratio")
    if not stagewise:
        res = numkit.loglink_fit(Z, y, family=family, names=names)
        return replace(proto, control_coef=res.coef[:kc], effect_coef=res.coef[kc:], fit=res)
    treated = data.a[rows] == 1
    ctl = numkit.loglink_fit(Z[~treated, :kc], y[~treated], family=family, names=names[:kc])
    offset = np.exp(Z[treated, :kc] @ ctl.coef)
    # gamma and quasi deviances with a log offset reduce to a fit of y / offset
    eff = numkit.loglink_fit(Z[treated, kc:], y[treated] / offset, family=family,
                             weights=offset if family == "quasi" else None, names=names[kc:])
    return replace(proto, control_coef=ctl.coef, effect_coef=eff.coef, fit=(ctl, eff))


@dataclass
class TargetMeanModel:
    """Log-link regression of ``Y`` on ``x`` among target rows."""

    terms: list
    coef: np.ndarray

    def predict(self, X):
        return np.exp(design_matrix(X, self.terms) @ self.coef)


def fit_target_mean(data, spec=None):
    terms = (spec or {}).get("terms", ["1"] + [f"x{j + 1}" for j in range(data.p)])
    rows = data.target
    y = data.y[rows]
    if np.any(np.isnan(y)):
        raise NuisanceError("target outcomes are missing")
    if np.any(y <= 0):
        raise NuisanceError("target mean model needs positive outcomes")
    res = numkit.loglink_fit(design_matrix(data.X[rows], terms), y, names=terms)
    return TargetMeanModel(list(terms), res.coef)


# ---------------------------------------------------------------------------
# conditional variance V(a,x,s)

@dataclass
class VarianceModel:
    """``empirical``: per (a, s) constant; ``snr``: Q^2 / rho; ``constant``: user value."""

    kind: str
    m: int
    cell: np.ndarray = None  # shape (2, m), empirical
    rho: float = None
    value: float = None

    def predict_matrix(self, a, q):
        """V(a, x, s) for every trial given ``q = Q(a, x, s)`` as an (n, m) matrix."""
        q = np.asarray(q, dtype=float)
        if self.kind == "empirical":
            return np.broadcast_to(self.cell[a], q.shape).copy()
        if self.kind == "snr":
            return q ** 2 / self.rho
        return np.full(q.shape, self.value)


def fit_variance(data, outcome, spec=None):
    spec = spec or {}
    kind = spec.get("kind", "empirical")
    rows = data.source
    a, s, y = data.a[rows].astype(int), data.s[rows], data.y[rows]
    q = outcome.predict(a, data.X[rows], s)
    resid = y - q
    if kind == "empirical":
        cell = np.empty((2, data.m))
        for arm in (0, 1):
            for k in range(1, data.m + 1):
                mask = (a == arm) & (s == k)
                if not mask.any():
                    raise NuisanceError(f"empty cell a={arm}, s={k} in variance model")
                cell[arm, k - 1] = np.mean(resid[mask] ** 2)
        if np.any(cell <= 0):
            raise NuisanceError("zero residual variance in some (a, s) cell")
        return VarianceModel("empirical", data.m, cell=cell)
    if kind == "snr":
        if np.any(q <= 0):
            raise NuisanceError("constant-SNR variance needs positive fitted means")
        rho = 1.0 / np.mean((resid / q) ** 2)
        return VarianceModel("snr", data.m, rho=float(rho))
    if kind == "constant":
        value = float(spec.get("value", 1.0))
        if value <= 0:
            raise NuisanceError("variance must be positive")
        return VarianceModel("constant", data.m, value=value)
    raise NuisanceError(f"unknown variance kind {kind!r}")


# ---------------------------------------------------------------------------
# weights

@dataclass(frozen=True)
class WeightChoice:
    kind: str = "optimal"
    lam1: float = 1.0
    lam0: float = 1.0

    def __post_init__(self):
        if self.kind not in ("optimal", "constant", "custom"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if self.lam1 <= 0 or self.lam0 <= 0:
            raise ValueError("weight multipliers must be positive")

    @classmethod
    def parse(cls, text):
        """``optimal``, ``constant`` or ``custom:l1,l0``."""
        text = text.strip()
        if text.startswith("custom:"):
            try:
                l1, l0 = (float(v) for v in text[len("custom:"):].split(","))
            except ValueError:
                raise ValueError(f"bad custom weight {text!r}; use custom:l1,l0") from None
            return cls("custom", l1, l0)
        return cls(text)

    def __str__(self):
        if self.kind == "custom":
            return f"custom:{self.lam1:g},{self.lam0:g}"
        return self.kind


def _check_inputs(v1, v0, e1):
    if np.any(v1 <= 0) or np.any(v0 <= 0):
        raise NuisanceError("variance must be positive")
    if np.any((e1 <= 0) | (e1 >= 1)):
        raise NuisanceError("propensity outside (0, 1)")


def _cap(w):
    if np.any(~np.isfinite(w) | (w > WEIGHT_CAP)):
        warnings.warn(f"trial weights clipped at {WEIGHT_CAP:g}")
        w = np.minimum(np.nan_to_num(w, nan=WEIGHT_CAP, posinf=WEIGHT_CAP), WEIGHT_CAP)
    return w


def weight_difference(v1, v0, e1, choice=WeightChoice()):
    """``{l1 V1/e1 + l0 V0/e0}^{-1}``; the optimal choice has ``l1 = l0 = 1``."""
    v1, v0, e1 = (np.asarray(t, dtype=float) for t in (v1, v0, e1))
    if choice.kind == "constant":
        return np.ones(np.broadcast(v1, v0, e1).shape)
    _check_inputs(v1, v0, e1)
    with np.errstate(divide="ignore"):
        return _cap(1.0 / (choice.lam1 * v1 / e1 + choice.lam0 * v0 / (1 - e1)))


def weight_ratio(v1, v0, e1, q1, q0, choice=WeightChoice()):
    """``[l1 V1/(e1 Q1^2) + l0 V0/(e0 Q0^2)]^{-1}``."""
    v1, v0, e1, q1, q0 = (np.asarray(t, dtype=float) for t in (v1, v0, e1, q1, q0))
    if choice.kind == "constant":
        return np.ones(np.broadcast(v1, v0, e1).shape)
    _check_inputs(v1, v0, e1)
    if np.any(q1 <= 0) or np.any(q0 <= 0):
        raise NuisanceError("ratio weights need positive outcome means")
    with np.errstate(divide="ignore"):
        return _cap(1.0 / (choice.lam1 * v1 / (e1 * q1 ** 2)
                           + choice.lam0 * v0 / ((1 - e1) * q0 ** 2)))


def normalized_weight(W, eta, eligible=None):
    """``w(x,s) / sum_s' eta(s'|x) w(x,s')`` for every trial, as an (n, m) matrix.

    Ineligible pairs are excluded from the denominator and get 0.
    """
    W = np.asarray(W, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if eligible is None:
        eligible = np.ones(W.shape, dtype=bool)
    Wm = np.where(eligible, W, 0.0)
    den = np.sum(eta * Wm, axis=1)
    bad = np.flatnonzero(~(den > 0))
    if bad.size:
        raise NuisanceError(f"zero normalized-weight denominator at row {int(bad[0])}")
    return Wm / den[:, None]


# ---------------------------------------------------------------------------
# bundle

@dataclass
class FittedNuisances:
    """Nuisance values evaluated on every row of one dataset.

    ``eta``, ``e1``, ``q0``, ``v1``, ``v0`` and ``eligible`` are (n, m);
    ``pi``, ``effect`` (D or R) and ``target_mean`` are (n,).
    """

    mode: str
    pi: np.ndarray
    eta: np.ndarray
    e1: np.ndarray
    q0: np.ndarray
    effect: np.ndarray
    v1: np.ndarray
    v0: np.ndarray
    eligible: np.ndarray
    target_mean: np.ndarray = None
    models: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def m(self):
        return self.eta.shape[1]

    def q(self, a):
        """Q(a, x, s) as an (n, m) matrix."""
        if self.mode == "difference":
            return self.q0 + a * self.effect[:, None]
        return self.q0 * self.effect[:, None] ** a

    def trial_weights(self, choice=WeightChoice()):
        if self.mode == "difference":
            return weight_difference(self.v1, self.v0, self.e1, choice)
        return weight_ratio(self.v1, self.v0, self.e1, self.q(1), self.q(0), choice)

    def normalized(self, choice=WeightChoice()):
        return normalized_weight(self.trial_weights(choice), self.eta, self.eligible)

    def pooled_propensity(self):
        """e(1|x) = sum_s eta(s|x) e(1|x,s)."""
        return np.sum(self.eta * self.e1, axis=1)

    def pooled_outcome(self, a):
        """Q(a,x) = E(Y | A=a, X=x, G=0), mixing trials by P(S=s | A=a, X=x, G=0)."""
        ea = self.e1 if a == 1 else 1 - self.e1
        mix = self.eta * ea
        return np.sum(mix * self.q(a), axis=1) / np.sum(mix, axis=1)


def at_rows(M, s):
    """Pick ``M[i, s_i - 1]``; rows with ``s_i == 0`` (target) get NaN."""
    s = np.asarray(s)
    out = np.full(len(s), np.nan)
    src = s > 0
    out[src] = M[np.flatnonzero(src), s[src] - 1]
    return out


def evaluate(data, selection, affiliation, propensity, outcome, variance,
             target_mean=None, tau=1e-3, models=None):
    """Evaluate fitted (or known) models on every row of ``data``."""
    X = data.X
    pi = selection.predict(X)
    eta = affiliation.predict(X)
    e1 = propensity.predict_matrix(X)
    q0 = outcome.q0_matrix(X)
    eff = outcome.effect(X)
    if data.mode == "difference":
        q1 = q0 + eff[:, None]
    else:
        q1 = q0 * eff[:, None]
    v1 = variance.predict_matrix(1, q1)
    v0 = variance.predict_matrix(0, q0)
    eligible = support_from_probs(eta, tau)
    tm = target_mean.predict(X) if target_mean is not None else None
    n_clip = int(np.sum((pi <= PROB_CLIP[0]) | (pi >= PROB_CLIP[1])))
    diag = {"pi_clipped": n_clip}
    if n_clip > 0.01 * data.n:
        diag["warning"] = f"selection score clipped on {n_clip} rows"
    allm = dict(models or {})
    allm.update(selection=selection, affiliation=affiliation, propensity=propensity,
                outcome=outcome, variance=variance, target_mean=target_mean)
    return FittedNuisances(data.mode, pi, eta, e1, q0, eff, v1, v0, eligible, tm, allm, diag)


DEFAULT_SPEC = {
    "selection": {},
    "affiliation": {"kind": "multinomial"},
    "propensity": {"kind": "fitted", "terms": ["1"]},
    "outcome": {"control": {"per_trial": True}, "effect": {}},
    "variance": {"kind": "empirical"},
    "target_mean": {},
    "support_tau": 1e-3,
}


def _with_default_terms(block, p):
    block = dict(block or {})
    block.setdefault("terms", ["1"] + [f"x{j + 1}" for j in range(p)])
    return block


@contextmanager
def _stage(name):
    """Tag any failure with the nuisance model that raised it."""
    try:
        yield
    except (NuisanceError, numkit.NumericError) as exc:
        if not hasattr(exc, "nuisance"):
            exc.nuisance = name
        raise


def fit_nuisances(data, spec=None):
    """Fit every nuisance model named in ``spec`` (a JSON-style dict) on ``data``.

    Failures carry a ``nuisance`` attribute naming the model that failed.
    """
    unknown = set(spec or {}) - set(DEFAULT_SPEC)
    if unknown:
        raise NuisanceError(f"unknown model-spec keys {sorted(unknown)}")
    spec = {**DEFAULT_SPEC, **(spec or {})}
    p = data.p
    with _stage("selection"):
        sel = fit_selection(data, _with_default_terms(spec["selection"], p))
    with _stage("affiliation"):
        aff = fit_affiliation(data, _with_default_terms(spec["affiliation"], p))
    with _stage("propensity"):
        prop = fit_propensity(data, spec["propensity"])
    out_spec = spec["outcome"]
    control = _with_default_terms(out_spec.get("control"), p)
    effect = _with_default_terms(out_spec.get("effect"), p)
    tmean = None
    with _stage("outcome"):
        if data.mode == "difference":
            outcome = fit_outcome_difference(data, control, effect)
        else:
            outcome = fit_outcome_ratio(data, control, effect,
                                        stagewise=bool(out_spec.get("stagewise", False)))
    if data.mode == "ratio":
        with _stage("target_mean"):
            tmean = fit_target_mean(data, _with_default_terms(spec.get("target_mean"), p))
    with _stage("variance"):
        var = fit_variance(data, outcome, spec["variance"])
    with _stage("weights"):
        return evaluate(data, sel, aff, prop, outcome, var, tmean, float(spec["support_tau"]))
