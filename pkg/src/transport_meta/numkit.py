"""Small deterministic numerical core.

Dense linear solves, GLM fitters (least squares, logistic, multinomial
logistic, log-link), reproducible random streams and finite differences.
Everything here is a pure function of its inputs.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack, qr


GRAD_TOL = 1e-8
MAX_ITER = 100
MAX_HALVING = 30
SEPARATION_NORM = 1e4


class NumericError(RuntimeError):
    """A numerical routine failed (non-SPD matrix, divergence, ...)."""


class RankError(NumericError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SeparationError(NumericError):
    pass


class ConvergenceError(NumericError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass
class FitResult:
    coef: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# linear algebra

def solve_spd(A, b):
    """Solve ``A x = b`` for symmetric positive definite ``A`` via Cholesky.

    Raises NumericError naming the first failing pivot (0-based).
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(b)):
        raise NumericError("non-finite entries in linear system")
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NumericError(f"matrix is not positive definite: pivot {info - 1} failed")
    if info < 0:
        raise NumericError(f"dpotrf argument {-info} invalid")
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise NumericError(f"dpotrs failed with info={info}")
    return x


def check_rank(X, names=None, rtol=None):
    """Raise RankError listing the columns that are linear combinations of others."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if p == 0:
        return
    if n < p:
        raise RankError(f"design has {p} columns but only {n} rows", range(p))
    _, R, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if rtol is None:
        rtol = max(n, p) * np.finfo(float).eps * 1e3
    if diag[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(diag > rtol * diag[0]))
    if rank < p:
        bad = sorted(int(j) for j in piv[rank:])
        labels = [names[j] for j in bad] if names is not None else bad
        raise RankError(f"rank-deficient design; collinear columns: {labels}", bad)


def ols_fit(X, y, weights=None, names=None):
    """Weighted least squares. Residual of the normal equations reported as grad_norm."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    keep = w > 0
    sw = np.sqrt(w[keep])
    Xw = X[keep] * sw[:, None]
    yw = y[keep] * sw
    check_rank(Xw, names)
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    # one step of iterative refinement on the normal equations
    r = Xw.T @ (yw - Xw @ coef)
    coef = coef + np.linalg.solve(Xw.T @ Xw, r)
    grad = Xw.T @ (yw - Xw @ coef) / max(len(yw), 1)
    return FitResult(coef, True, 1, float(np.max(np.abs(grad), initial=0.0)))


# ---------------------------------------------------------------------------
# GLM fitters

def expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _newton(objective, grad_hess, beta, tol, max_iter, what, guard=None):
    """Damped Newton with step halving; objective is asserted non-increasing.

    With ``guard`` set, a vanishing gradient paired with a Newton step that
    stays large is treated as divergence to infinity (separation).
    """
    f = objective(beta)
    trace = [f]
    g, H = grad_hess(beta)
    gnorm = float(np.max(np.abs(g)))
    it = 0
    while it < max_iter:
        try:
            step = solve_spd(H, g)
        except NumericError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        if gnorm <= tol:
            if guard is not None and np.max(np.abs(step)) > 1e-3:
                raise SeparationError(
                    f"{what} fit diverging (coefficient norm {np.linalg.norm(beta):.3g} "
                    "and growing); data appear separated")
            break
        it += 1
        t = 1.0
        for _ in range(MAX_HALVING):
            cand = beta - t * step
            fc = objective(cand)
            if np.isfinite(fc) and fc <= f + 1e-14 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            # no decrease possible at machine precision; we are at the optimum
            break
        beta, f = cand, fc
        trace.append(f)
        if guard is not None:
            guard(beta)
        g, H = grad_hess(beta)
        gnorm = float(np.max(np.abs(g)))
    assert all(b <= a + 1e-12 * max(1.0, abs(a)) for a, b in zip(trace, trace[1:])), trace
    return FitResult(beta, gnorm <= tol, it, gnorm, trace)


def _separation_guard(beta):
    if np.linalg.norm(beta) > SEPARATION_NORM:
        raise SeparationError(
            f"coefficient norm exceeded {SEPARATION_NORM:g}; data appear separated")


def logistic_fit(X, y, weights=None, tol=GRAD_TOL, max_iter=MAX_ITER, names=None):
    """Logistic regression by IRLS (Newton) with step halving."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic_fit needs a 0/1 response")
    ybar = np.sum(w * y) / np.sum(w)
    if ybar in (0.0, 1.0):
        raise SeparationError("response has no variation")
    check_rank(X[w > 0], names)
    wsum = np.sum(w)

    def objective(b):
        eta = X @ b
        return float(np.sum(w * (np.logaddexp(0.0, eta) - y * eta)) / wsum)

    def grad_hess(b):
        mu = expit(X @ b)
        g = X.T @ (w * (mu - y)) / wsum
        H = (X * (w * mu * (1 - mu))[:, None]).T @ X / wsum
        return g, H

    beta0 = np.zeros(p)
    res = _newton(objective, grad_hess, beta0, tol, max_iter, "logistic", _separation_guard)
    return res


def softmax_ref(eta):
    """Row softmax of ``[0, eta]`` (reference category logit fixed at zero)."""
    z = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
    z -= z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def multinomial_fit(X, labels, categories=None, tol=GRAD_TOL, max_iter=MAX_ITER, names=None):
    """Multinomial logistic regression by Newton's method.

    The first entry of ``categories`` is the reference; its coefficients are
    fixed at zero. Returns coef with shape ``(K - 1, p)``.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    if categories is None:
        categories = np.unique(labels)
    categories = list(categories)
    K = len(categories)
    n, p = X.shape
    if K < 2:
        raise ValueError("need at least two categories")
    Y = np.stack([labels == c for c in categories], axis=1).astype(float)
    counts = Y.sum(axis=0)
    if np.any(counts == 0):
        empty = [categories[k] for k in np.flatnonzero(counts == 0)]
        raise ValueError(f"empty category: {empty}")
    check_rank(X, names)

    def unpack(b):
        return b.reshape(K - 1, p)

    def objective(b):
        eta = X @ unpack(b).T
        z = np.concatenate([np.zeros((n, 1)), eta], axis=1)
        lse = np.logaddexp.reduce(z, axis=1)
        return float(np.mean(lse - np.sum(Y * z, axis=1)))

    def grad_hess(b):
        P = softmax_ref(X @ unpack(b).T)[:, 1:]
        R = P - Y[:, 1:]
        g = (R.T @ X / n).ravel()
        H = np.empty(((K - 1) * p, (K - 1) * p))
        for k in range(K - 1):
            for l in range(k, K - 1):
                wkl = P[:, k] * ((k == l) - P[:, l])
                blk = (X * wkl[:, None]).T @ X / n
                H[k * p:(k + 1) * p, l * p:(l + 1) * p] = blk
                H[l * p:(l + 1) * p, k * p:(k + 1) * p] = blk.T
        return g, H

    res = _newton(objective, grad_hess, np.zeros((K - 1) * p), tol, max_iter,
                  "multinomial", _separation_guard)
    res.coef = unpack(res.coef)
    return res


def loglink_fit(X, y, family="gamma", weights=None, tol=GRAD_TOL, max_iter=MAX_ITER,
                names=None):
    """Log-link mean regression ``E(y|x) = exp(x'b)``.

    ``family="gamma"`` minimises the gamma quasi-deviance (variance
    proportional to the squared mean); ``family="quasi"`` uses the Poisson
    quasi-likelihood (variance proportional to the mean).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if family not in ("gamma", "quasi"):
        raise ValueError(f"unknown family {family!r}")
    if np.any(y <= 0):
        raise ValueError("log-link fit needs strictly positive outcomes")
    check_rank(X[w > 0], names)
    wsum = np.sum(w)

    if family == "gamma":
        def objective(b):
            eta = X @ b
            return float(np.sum(w * (y * np.exp(-eta) + eta)) / wsum)

        def grad_hess(b):
            ratio = y * np.exp(-(X @ b))
            g = X.T @ (w * (1.0 - ratio)) / wsum
            H = (X * (w * ratio)[:, None]).T @ X / wsum
            return g, H
    else:
        def objective(b):
            eta = X @ b
            return float(np.sum(w * (np.exp(eta) - y * eta)) / wsum)

        def grad_hess(b):
            mu = np.exp(X @ b)
            g = X.T @ (w * (mu - y)) / wsum
            H = (X * (w * mu)[:, None]).T @ X / wsum
            return g, H

    beta0 = ols_fit(X, np.log(y), weights=w).coef
    res = _newton(objective, grad_hess, beta0, tol, max_iter, "loglink")
    if not res.converged:
        raise ConvergenceError(
            f"log-link fit did not converge in {max_iter} iterations "
            f"(gradient norm {res.grad_norm:.3g})", res.trace)
    return res


# ---------------------------------------------------------------------------
# random numbers

@dataclass(frozen=True)
class RngStream:
    """Independent random stream identified by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0

    def generator(self):
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class MVNormal:
    mean: tuple
    cov: tuple


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    var: float = 1.0


@dataclass(frozen=True)
class Bernoulli:
    p: object


@dataclass(frozen=True)
class Multinomial:
    probs: object


@dataclass(frozen=True)
class Gamma:
    shape: float
    scale: object


def sample(rng, dist, n):
    """Draw ``n`` values of ``dist`` from ``rng`` (a Generator or RngStream).

    Bernoulli, Multinomial and Gamma accept per-row parameter arrays.
    Multinomial returns 0-based category indices.
    """
    if isinstance(rng, RngStream):
        rng = rng.generator()
    if isinstance(dist, MVNormal):
        mean = np.asarray(dist.mean, dtype=float)
        cov = np.asarray(dist.cov, dtype=float)
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        c, info = lapack.dpotrf(cov, lower=1, clean=1)
        if info != 0:
            raise ValueError("covariance must be positive definite")
        z = rng.standard_normal((n, len(mean)))
        return mean + z @ c.T
    if isinstance(dist, Normal):
        if dist.var < 0:
            raise ValueError("variance must be nonnegative")
        return dist.mean + np.sqrt(dist.var) * rng.standard_normal(n)
    if isinstance(dist, Bernoulli):
        p = np.broadcast_to(np.asarray(dist.p, dtype=float), (n,))
        if np.any((p < 0) | (p > 1)):
            raise ValueError("Bernoulli probability outside [0, 1]")
        return (rng.random(n) < p).astype(int)
    if isinstance(dist, Multinomial):
        probs = np.asarray(dist.probs, dtype=float)
        probs = np.broadcast_to(probs, (n, probs.shape[-1]))
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1) > 1e-12):
            raise ValueError("multinomial probabilities must be nonnegative and sum to 1")
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(n)
        return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)
    if isinstance(dist, Gamma):
        scale = np.broadcast_to(np.asarray(dist.scale, dtype=float), (n,))
        if dist.shape <= 0 or np.any(scale <= 0):
            raise ValueError("gamma shape and scale must be positive")
        return rng.gamma(dist.shape, scale)
    raise TypeError(f"unsupported distribution {dist!r}")


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def finite_diff_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian ``J[i, j] = d f_i / d x_j``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)
