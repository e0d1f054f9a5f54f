"""Monte Carlo laboratory for the two multi-trial data-generating processes.

Covariates are trivariate normal with equicorrelation 0.5. Target membership
is logistic in the covariates. Source-trial membership is restricted by hard
thresholds on ``x1``: below ``c1`` only trial 1, then {1,2}, {1,2,3}, {2,3}
and finally {3}. Treatment is randomized within each trial.

``difference`` mode draws normal outcomes with a shared CATE; ``ratio`` mode
draws gamma outcomes with a shared conditional mean ratio, and target rows
carry untreated outcomes.
"""
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import numkit
from .ate import ScoreInputs, eif_ate, eif_ate_variant, gformula_ate, ipw_ate
from .ate import psi_sp_D, solve_beta_D
from .cmr import cmr_estimate, cmr_variant, psi_sp_R, solve_beta_R
from .data import StudyDataset
from .nuisance import (FittedNuisances, WeightChoice, fit_nuisances,
                       support_from_probs)

LOG15 = float(np.log(1.5))
LOG125 = float(np.log(1.25))
LOG075 = float(np.log(0.75))


@dataclass(frozen=True)
class DgpSpec:
    """All constants of one data-generating process.

    ``selection_slope`` defaults to ``log 1.25``; with this value the
    estimand truths are 2.869 (difference) and 2.066 (ratio).
    """

    mode: str = "difference"
    rho: float = 0.5
    selection_intercept: float = float(-np.log(3.0))
    selection_slope: tuple = (LOG125, LOG125, LOG125)
    cuts: tuple = (-0.8, -0.25, 0.25, 0.8)
    gamma10: float = LOG15
    gamma1: tuple = (LOG15, LOG15, LOG15)
    gamma20: float = -LOG075
    gamma2: tuple = (LOG075, LOG075, LOG075)
    propensity: tuple = (0.5, 0.4, 0.6)
    # difference mode: D = d0 + d1 * sum(x); Q0 = s + (s - 1) sum(x)
    cate: tuple = (1.0, 2.0)
    sigma2: tuple = (1.0, 5.0, 10.0)
    # ratio mode: R = exp(r0 + r1 sum(x)); Q0 = scale exp(-1 + 0.2 s + 0.05 (s+1) sum(x))
    log_ratio: tuple = (0.2, 0.2)
    gamma_shape: float = 9.0
    mean_scale: float = 9.0
    target_log_mean: tuple = (-0.75, 0.2)

    def __post_init__(self):
        if self.mode not in ("difference", "ratio"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if any(b <= a for a, b in zip(self.cuts, self.cuts[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if not all(0 < e < 1 for e in self.propensity):
            raise ValueError("propensities must lie in (0, 1)")
        np.linalg.cholesky(self.cov)

    @property
    def m(self):
        return 3

    @property
    def p(self):
        return 3

    @property
    def cov(self):
        return np.full((3, 3), self.rho) + (1 - self.rho) * np.eye(3)

    def key(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # true nuisance functions -------------------------------------------------

    def pi(self, X):
        return numkit.expit(self.selection_intercept + X @ np.asarray(self.selection_slope))

    def segment(self, X):
        return np.searchsorted(np.asarray(self.cuts), X[:, 0], side="left")

    def eta(self, X):
        """True affiliation probabilities, shape (n, 3)."""
        l1 = self.gamma10 + X @ np.asarray(self.gamma1)
        l2 = self.gamma20 + X @ np.asarray(self.gamma2)
        seg = self.segment(X)
        out = np.zeros((len(X), 3))
        out[seg == 0, 0] = 1.0
        p2 = numkit.expit(l1)
        out[seg == 1, 0] = 1 - p2[seg == 1]
        out[seg == 1, 1] = p2[seg == 1]
        mid = seg == 2
        out[mid] = numkit.softmax_ref(np.column_stack([l1[mid], l2[mid]]))
        p3 = numkit.expit(l2)
        out[seg == 3, 1] = 1 - p3[seg == 3]
        out[seg == 3, 2] = p3[seg == 3]
        out[seg == 4, 2] = 1.0
        return out

    def q0(self, X, s):
        t = X.sum(axis=1)
        s = np.asarray(s, dtype=float)
        if self.mode == "difference":
            return s + (s - 1) * t
        return self.mean_scale * np.exp(-1 + 0.2 * s + 0.05 * (s + 1) * t)

    def effect(self, X):
        t = X.sum(axis=1)
        if self.mode == "difference":
            return self.cate[0] + self.cate[1] * t
        return np.exp(self.log_ratio[0] + self.log_ratio[1] * t)

    def target_mean(self, X):
        return self.mean_scale * np.exp(self.target_log_mean[0] + self.target_log_mean[1] * X.sum(axis=1))


# ---------------------------------------------------------------------------
# data generation

def gen_dataset(spec, n, rng):
    """Draw one pooled sample of size ``n``; ``rng`` is a Generator or RngStream."""
    if isinstance(rng, numkit.RngStream):
        rng = rng.generator()
    X = numkit.sample(rng, numkit.MVNormal((0.0, 0.0, 0.0), spec.cov), n)
    g = numkit.sample(rng, numkit.Bernoulli(spec.pi(X)), n)
    u_s = rng.random(n)
    u_a = rng.random(n)
    src = g == 0
    eta = spec.eta(X)
    s = np.minimum((u_s[:, None] >= np.cumsum(eta, axis=1)).sum(axis=1), 2) + 1
    s = np.where(src, s, 0)
    e = np.asarray(spec.propensity)[np.maximum(s, 1) - 1]
    a = np.where(src, (u_a < e).astype(float), np.nan)
    if spec.mode == "difference":
        noise = rng.standard_normal(n)
        sd = np.sqrt(np.asarray(spec.sigma2))[np.maximum(s, 1) - 1]
        mean = spec.q0(X, s) + np.nan_to_num(a) * spec.effect(X)
        y = np.where(src, mean + sd * noise, np.nan)
    else:
        a = np.where(src, a, 0.0)
        mean = np.where(src, spec.q0(X, s) * spec.effect(X) ** a, spec.target_mean(X))
        y = rng.gamma(spec.gamma_shape, mean / spec.gamma_shape)
    return StudyDataset(g.astype(int), s.astype(int), a, y, X, spec.m, spec.mode)


def true_nuisances(spec, data, tau=0.0):
    """Nuisance bundle holding the true functions evaluated on ``data``."""
    X = data.X
    n = len(X)
    q0 = np.column_stack([spec.q0(X, np.full(n, k)) for k in (1, 2, 3)])
    eff = spec.effect(X)
    e1 = np.broadcast_to(np.asarray(spec.propensity), (n, 3)).copy()
    if spec.mode == "difference":
        v = np.broadcast_to(np.asarray(spec.sigma2, dtype=float), (n, 3)).copy()
        v1, v0, tm = v, v.copy(), None
    else:
        v1 = (q0 * eff[:, None]) ** 2 / spec.gamma_shape
        v0 = q0 ** 2 / spec.gamma_shape
        tm = spec.target_mean(X)
    eta = spec.eta(X)
    elig = (eta > 0) if tau == 0 else support_from_probs(eta, tau)
    return FittedNuisances(spec.mode, spec.pi(X), eta, e1, q0, eff, v1, v0, elig, tm,
                           {"truth": spec}, {})


# ---------------------------------------------------------------------------
# truths

def truth_quadrature(spec, order=80):
    """Estimand by Gauss-Hermite quadrature over ``(beta'X, 1'X)``, which carries all
    the dependence on ``X``."""
    b = np.asarray(spec.selection_slope)
    one = np.ones(3)
    S = spec.cov
    C = np.array([[b @ S @ b, b @ S @ one], [one @ S @ b, one @ S @ one]])
    lam, vec = np.linalg.eigh(C)  # C is singular when beta is parallel to 1
    L = vec * np.sqrt(np.clip(lam, 0.0, None))
    z, w = np.polynomial.hermite_e.hermegauss(order)
    Z1, Z2 = np.meshgrid(z, z, indexing="ij")
    W = np.outer(w, w).ravel()
    UV = np.column_stack([Z1.ravel(), Z2.ravel()]) @ L.T
    u, t = UV[:, 0], UV[:, 1]
    pi = numkit.expit(spec.selection_intercept + u)
    if spec.mode == "difference":
        f = spec.cate[0] + spec.cate[1] * t
        return float(np.sum(W * pi * f) / np.sum(W * pi))
    R = np.exp(spec.log_ratio[0] + spec.log_ratio[1] * t)
    Q = spec.mean_scale * np.exp(spec.target_log_mean[0] + spec.target_log_mean[1] * t)
    return float(np.sum(W * pi * R * Q) / np.sum(W * pi * Q))


def _oracle_mc(spec, n_oracle, seed, chunk=10 ** 6):
    """Antithetic Monte Carlo with quadratic control variates.

    ``n_oracle / 2`` draws of ``X`` are paired with ``-X``; the pair means of
    ``pi f`` and ``pi`` are then regressed on centered quadratic forms of
    ``(beta'X, 1'X)`` whose expectations are known.
    """
    gen = numkit.RngStream(seed, 2 ** 40).generator()
    b = np.asarray(spec.selection_slope)
    one = np.ones(3)
    S = spec.cov
    known = np.array([b @ S @ b, one @ S @ one, b @ S @ one])
    half = n_oracle // 2
    nums, dens, ctrls = [], [], []
    done = 0
    while done < half:
        k = min(chunk, half - done)
        Xh = numkit.sample(gen, numkit.MVNormal((0.0, 0.0, 0.0), S), k)
        pair = []
        for X in (Xh, -Xh):
            pi = spec.pi(X)
            if spec.mode == "difference":
                pair.append((pi * spec.effect(X), pi))
            else:
                qx = spec.target_mean(X)
                pair.append((pi * spec.effect(X) * qx, pi * qx))
        nums.append((pair[0][0] + pair[1][0]) / 2)
        dens.append((pair[0][1] + pair[1][1]) / 2)
        u, t = Xh @ b, Xh @ one
        ctrls.append(np.column_stack([u * u, t * t, u * t]) - known)
        done += k
    num, den, C = np.concatenate(nums), np.concatenate(dens), np.concatenate(ctrls)
    Z = np.column_stack([np.ones(half), C])
    rn = num - C @ np.linalg.lstsq(Z, num, rcond=None)[0][1:]
    rd = den - C @ np.linalg.lstsq(Z, den, rcond=None)[0][1:]
    mn, md = rn.mean(), rd.mean()
    est = mn / md
    infl = (rn - mn - est * (rd - md)) / md
    return float(est), float(infl.std() / np.sqrt(half))


def cache_dir():
    path = os.environ.get("TRANSPORT_META_CACHE")
    if path is None:
        path = os.path.join(os.path.expanduser("~"), ".cache", "transport_meta")
    return path


def oracle_truth(spec, n_oracle=10 ** 7, seed=20240229, use_cache=True):
    """Monte Carlo estimand value and its standard error, cached on disk as JSON.

    The ratio ``E{pi(X) f(X)} / E{pi(X)}`` form is used, which equals the
    conditional mean given ``G = 1`` without drawing ``G``.
    """
    key = f"{spec.key()}-{n_oracle}-{seed}"
    path = os.path.join(cache_dir(), "oracle.json")
    if use_cache and os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            table = json.load(fh)
        if key in table:
            return tuple(table[key])
    value = _oracle_mc(spec, n_oracle, seed)
    if use_cache:
        os.makedirs(cache_dir(), exist_ok=True)
        table = {}
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                table = json.load(fh)
        table[key] = list(value)
        tmp = f"{path}.{os.getpid()}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(table, fh, indent=1, sort_keys=True)
        os.replace(tmp, path)
    return value


# ---------------------------------------------------------------------------
# scenarios

LINEAR = ["1", "x1", "x2", "x3"]
ESTIMATORS = {
    "difference": ("eif_ate", "eif_ate_pooled", "eif_ate_armwise", "ipw_ate",
                   "gformula_ate", "psi_sp_D"),
    "ratio": ("eif_cmr", "eif_cmr_pooled", "eif_cmr_armwise", "psi_sp_R"),
}
MISSPEC_FLAGS = {"D", "Q0", "e", "eta", "pi", "V", "Qx"}


def nuisance_spec(dgp, misspec=()):
    """Model spec dict (same schema as the CLI) for the correct or misspecified fits.

    Flags: ``D`` / ``Q0`` misspecify the outcome regression, ``e`` sets the
    propensity to 0.5, ``eta`` uses one global multinomial, ``pi`` keeps only
    ``x1``, ``V`` uses the wrong variance family, ``Qx`` drops covariates from
    the target mean model.
    """
    misspec = set(misspec)
    bad = misspec - MISSPEC_FLAGS
    if bad:
        raise ValueError(f"unknown misspecification flags {sorted(bad)}")
    spec = {
        "selection": {"terms": ["1", "x1"] if "pi" in misspec else LINEAR},
        "affiliation": ({"kind": "multinomial", "terms": LINEAR} if "eta" in misspec else
                        {"kind": "segmented", "variable": "x1", "cuts": list(dgp.cuts),
                         "terms": LINEAR}),
        "propensity": ({"kind": "constant", "value": 0.5} if "e" in misspec
                       else {"kind": "fitted", "terms": ["1"]}),
        "support_tau": 1e-3,
    }
    if dgp.mode == "difference":
        if "D" in misspec or "Q0" in misspec:
            spec["outcome"] = {"control": {"per_trial": False,
                                           "terms": ["1", "s", "x1", "x2", "x3",
                                                     "s*x1", "s*x2", "s*x3"]},
                               "effect": {"terms": ["1"]}}
        else:
            spec["outcome"] = {"control": {"per_trial": True, "terms": LINEAR},
                               "effect": {"terms": LINEAR}}
        spec["variance"] = {"kind": "constant", "value": 1.0} if "V" in misspec else {"kind": "empirical"}
    else:
        if "Q0" in misspec or "D" in misspec:
            spec["outcome"] = {"control": {"per_trial": False,
                                           "terms": ["1", "s", "x1", "x2", "x3"]},
                               "effect": {"terms": ["1"]}, "stagewise": True}
        else:
            spec["outcome"] = {"control": {"per_trial": True, "terms": LINEAR},
                               "effect": {"terms": LINEAR}}
        spec["variance"] = {"kind": "empirical"} if "V" in misspec else {"kind": "snr"}
        spec["target_mean"] = {"terms": ["1"] if "Qx" in misspec else LINEAR}
    return spec


@dataclass(frozen=True)
class ScenarioConfig:
    dgp: DgpSpec
    n: int
    reps: int
    seed: int
    estimator: str = "eif_ate"
    misspec: tuple = ()
    weights: str = "optimal"
    label: str = ""
    effect_terms: tuple = tuple(LINEAR)

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.estimator not in ESTIMATORS[self.dgp.mode]:
            raise ValueError(f"estimator {self.estimator!r} does not fit {self.dgp.mode} mode")
        WeightChoice.parse(self.weights)
        bad = set(self.misspec) - MISSPEC_FLAGS
        if bad:
            raise ValueError(f"unknown misspecification flags {sorted(bad)}")

    def to_dict(self):
        d = asdict(self)
        d["misspec"] = list(self.misspec)
        d["effect_terms"] = list(self.effect_terms)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        dgp = d.pop("dgp", {})
        dgp = DgpSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in dgp.items()})
        for k in ("misspec", "effect_terms"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(dgp=dgp, **d)


def estimate_once(config, data):
    """Fit the scenario's nuisances and return ``(psi_hat, se, ci)``."""
    choice = WeightChoice.parse(config.weights)
    est = config.estimator
    nuis = fit_nuisances(data, nuisance_spec(config.dgp, config.misspec))
    if est == "eif_ate":
        r = eif_ate(data, nuis, choice)
    elif est in ("eif_ate_pooled", "eif_ate_armwise"):
        r = eif_ate_variant(data, nuis, est.rsplit("_", 1)[1])
    elif est == "ipw_ate":
        r = ipw_ate(data, nuis, choice)
    elif est == "gformula_ate":
        r = gformula_ate(data, nuis.effect)
    elif est == "psi_sp_D":
        inp = ScoreInputs.from_nuisances(data, nuis)
        beta0 = nuis.models["outcome"].effect_coef
        terms = list(config.effect_terms)
        fit = solve_beta_D(data, terms, inp, beta0 if len(beta0) == len(terms) else None)
        r = psi_sp_D(data, fit)
    elif est == "eif_cmr":
        r = cmr_estimate(data, nuis, choice)
    elif est in ("eif_cmr_pooled", "eif_cmr_armwise"):
        r = cmr_variant(data, nuis, est.rsplit("_", 1)[1])
    elif est == "psi_sp_R":
        inp = ScoreInputs.from_nuisances(data, nuis)
        fit = solve_beta_R(data, list(config.effect_terms), inp)
        r = psi_sp_R(data, fit)
    else:
        raise ValueError(f"unknown estimator {est!r}")
    se = r.se
    return r.psi_hat, se, r.ci


def _run_chunk(config, reps):
    out = []
    with threadpool_limits(limits=1):
        for rep in reps:
            data = gen_dataset(config.dgp, config.n, numkit.RngStream(config.seed, rep))
            try:
                psi, se, ci = estimate_once(config, data)
                out.append((rep, psi, se, ci[0], ci[1], ""))
            except (numkit.NumericError, ValueError, ArithmeticError) as exc:
                out.append((rep, np.nan, np.nan, np.nan, np.nan, f"{type(exc).__name__}: {exc}"))
    return out


@dataclass
class SummaryRow:
    """Monte Carlo summary of one cell; values are on their natural scale."""

    label: str
    n: int
    reps: int
    truth: float
    mean: float
    bias: float
    rmse: float
    se_mean: float
    coverage: float
    variance: float
    failures: int = 0

    @classmethod
    def from_estimates(cls, label, n, truth, psi, se, lo, hi, failures=0):
        ok = ~np.isnan(psi)
        psi, se, lo, hi = psi[ok], se[ok], lo[ok], hi[ok]
        if psi.size == 0:
            nan = float("nan")
            return cls(label, n, 0, truth, nan, nan, nan, nan, nan, nan, failures)
        err = psi - truth
        covered = (lo <= truth) & (truth <= hi)
        return cls(label, n, int(psi.size), float(truth), float(psi.mean()),
                   float(err.mean()), float(np.sqrt(np.mean(err ** 2))),
                   float(se.mean()), float(100 * covered.mean()),
                   float(np.mean((psi - psi.mean()) ** 2)), failures)


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    row: SummaryRow
    estimates: np.ndarray  # columns psi, se, lo, hi, indexed by replication
    errors: list = field(default_factory=list)


def run_scenario(config, threads=1, truth=None):
    """Run every replication; results do not depend on ``threads``.

    Replication ``r`` always uses stream ``(seed, r)``; failures are recorded
    and excluded from the summary.
    """
    reps = list(range(config.reps))
    if threads <= 1:
        results = _run_chunk(config, reps)
    else:
        chunks = [reps[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(_run_chunk, [config] * len(chunks), chunks)
            results = [r for part in parts for r in part]
    results.sort(key=lambda r: r[0])
    est = np.array([r[1:5] for r in results], dtype=float)
    errors = [(r[0], r[5]) for r in results if r[5]]
    if truth is None:
        truth = oracle_truth(config.dgp)[0]
    row = SummaryRow.from_estimates(config.label, config.n, truth, est[:, 0], est[:, 1],
                                    est[:, 2], est[:, 3], len(errors))
    return ScenarioResult(config, row, est, errors)


# ---------------------------------------------------------------------------
# presets and tables

def preset(name, reps=1000, seed=1, sizes=(1250, 5000)):
    """Scenario grids laid out like the three published summary tables."""
    cells = []
    if name == "table1":
        dgp = DgpSpec("difference")
        types = [(), ("D",), ("e", "eta", "pi"), ("D", "e", "eta", "pi")]
        for n in sizes:
            for j, mis in enumerate(types, 1):
                cells.append(ScenarioConfig(dgp, n, reps, seed, "eif_ate", mis, "optimal", str(j)))
    elif name == "table2":
        dgp = DgpSpec("ratio")
        types = ["optimal", "constant", "custom:1,10", "custom:10,1"]
        for n in sizes:
            for j, w in enumerate(types, 1):
                cells.append(ScenarioConfig(dgp, n, reps, seed, "eif_cmr", (), w, str(j)))
    elif name == "table3":
        dgp = DgpSpec("ratio")
        types = [("V",), ("Q0", "V"), ("e", "V"), ("Q0", "e", "V"), ()]
        for n in sizes:
            for j, mis in enumerate(types, 1):
                cells.append(ScenarioConfig(dgp, n, reps, seed, "psi_sp_R", mis, "optimal", str(j)))
    else:
        raise ValueError(f"unknown preset {name!r}")
    return cells


# statistic name, attribute, multiplier per layout
_ROWS = {
    "table1": [("Mean", "mean", 1), ("Bias", "bias", 100), ("RMSE", "rmse", 1),
               ("Coverage", "coverage", 1), ("SE", "se_mean", 1)],
    "table2": [("Mean", "mean", 1), ("Bias", "bias", 100), ("RMSE", "rmse", 100),
               ("Coverage", "coverage", 1), ("SE", "se_mean", 100)],
}
_ROWS["table3"] = _ROWS["table2"]


def emit_table(rows, layout="table1", digits=2):
    """Render summary rows as ``(csv_text, aligned_text)``.

    Columns are ``n=<size>:<type>`` in input order; bias (and for the ratio
    tables RMSE and SE) are shown in units of 1e-2, coverage in percent.
    """
    if layout not in _ROWS:
        raise ValueError(f"unknown layout {layout!r}")
    header = ["stat"] + [f"n={r.n}:{r.label}" for r in rows]
    body = []
    for name, attr, mult in _ROWS[layout]:
        body.append([name] + [f"{getattr(r, attr) * mult:.{digits}f}" for r in rows])
    csv_text = "\n".join(",".join(line) for line in [header] + body) + "\n"
    table = [header] + body
    widths = [max(len(line[j]) for line in table) for j in range(len(header))]
    text = "\n".join(
        "  ".join(cell.ljust(widths[0]) if j == 0 else cell.rjust(widths[j])
                  for j, cell in enumerate(line))
        for line in table) + "\n"
    return csv_text, text


def parse_table_csv(text):
    """Inverse of the CSV rendering: ``{column: {stat: value}}``."""
    lines = [ln.split(",") for ln in text.strip().splitlines()]
    header = lines[0][1:]
    out = {c: {} for c in header}
    for line in lines[1:]:
        for c, v in zip(header, line[1:]):
            out[c][line[0]] = float(v)
    return out


def with_reps(configs, reps):
    return [replace(c, reps=reps) for c in configs]
