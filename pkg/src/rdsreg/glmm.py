"""Weighted random-intercept regression for RDS samples.

Linear models are fitted by restricted maximum likelihood with the variance
ratio ``theta = sigma0^2 / sigma_res^2`` profiled out; Poisson and logistic
models maximise a Laplace approximation over ``sigma0^2``.  Weights act as
unit-level pseudo-likelihood multipliers after rescaling to sum to ``n``.

Everything reduces to per-group sums, so one likelihood evaluation costs
O(G p^2) regardless of group sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import minimize_scalar
from scipy.special import expit, gammaln
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (DesignError, check_design, check_groups, check_link, check_response,
                          normalize_weights)
from .network import ConvergenceError
from .weights import WeightScheme

THETA_FLOOR = 1e-10
ETA_CAP = 30.0
# Poisson linear predictors are legitimately large; only runaway values signal trouble
ETA_CAP_BY_LINK = {"logit": ETA_CAP, "log": 50.0}


class SeparationError(RuntimeError):
    """Linear predictor runs off to infinity: the data are (quasi-)separated."""


@dataclass(frozen=True)
class ModelSpec:
    link: str = "identity"
    clustering: str = "seed"
    weight_scheme: WeightScheme = field(default_factory=WeightScheme)
    include_homophily_term: bool = False
    fixed_effect_columns: tuple[str, ...] = ("x",)

    def __post_init__(self):
        check_link(self.link)
        if self.clustering not in ("seed", "recruiter"):
            raise ValueError("clustering must be 'seed' or 'recruiter'")
        object.__setattr__(self, "fixed_effect_columns", tuple(self.fixed_effect_columns))

    @property
    def term_names(self) -> tuple[str, ...]:
        names = ("intercept",) + self.fixed_effect_columns
        return names + ("homophily",) if self.include_homophily_term else names


@dataclass(frozen=True, eq=False)
class FitResult:
    names: tuple[str, ...]
    coef: np.ndarray
    vcov: np.ndarray
    sigma0: float
    sigma_res: float
    loglik: float
    converged: bool
    n_groups: int
    n_obs: int
    link: str = "identity"
    boundary: bool = False
    iterations: int = 0

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, self.coef.tolist()))

    @property
    def icc(self) -> float:
        """``sigma0^2 / (sigma0^2 + sigma_res^2)``; latent logistic scale for logit."""
        if self.link == "identity":
            resid = self.sigma_res ** 2
        elif self.link == "logit":
            resid = math.pi ** 2 / 3
        else:
            return float("nan")
        total = self.sigma0 ** 2 + resid
        return 0.0 if total == 0 else self.sigma0 ** 2 / total

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])


class Design(NamedTuple):
    y: np.ndarray
    X: np.ndarray
    groups: np.ndarray
    weights: np.ndarray
    names: tuple[str, ...]
    isolated: np.ndarray


def group_labels(data: Mapping[str, np.ndarray], clustering: str) -> np.ndarray:
    """Seed id, or recruiter id with each seed grouped with its own recruits."""
    if clustering == "seed":
        return np.asarray(data["seed_id"])
    rec = np.asarray(data["recruiter_id"])
    node = np.asarray(data["node_id"])
    missing = rec < 0 if np.issubdtype(rec.dtype, np.number) else np.array([r in ("", None) for r in rec])
    return np.where(missing, node, rec)


def observed_neighbor_mean(data: Mapping[str, np.ndarray], column: str = "x") -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``column`` over each row's recruiter and recruits present in ``data``."""
    node = np.asarray(data["node_id"])
    rec = np.asarray(data["recruiter_id"])
    x = np.asarray(data[column], dtype=float)
    pos = {int(v): i for i, v in enumerate(node)}
    total = np.zeros(len(node))
    count = np.zeros(len(node))
    for i, r in enumerate(rec):
        p = pos.get(int(r), -1) if r >= 0 else -1
        if p >= 0:
            total[i] += x[p]
            count[i] += 1
            total[p] += x[i]
            count[p] += 1
    iso = count == 0
    return np.where(iso, 0.0, total / np.maximum(count, 1)), iso


def build_design(dataset, spec: ModelSpec, response: str = "y", weight: str = "weight") -> Design:
    """Response, design matrix (intercept first), group labels, normalised weights.

    ``dataset`` is a DataFrame or a mapping of equal-length columns.
    """
    cols = set(dataset.keys()) if hasattr(dataset, "keys") else set(dataset.columns)
    group_cols = ("seed_id",) if spec.clustering == "seed" else ("recruiter_id", "node_id")
    needed = [response, *spec.fixed_effect_columns, *group_cols]
    if spec.include_homophily_term:
        needed += ["node_id", "recruiter_id"]
    missing = [c for c in needed if c not in cols]
    if missing:
        raise DesignError(f"dataset lacks column(s) {missing}")
    y = np.asarray(dataset[response], dtype=float)
    n = len(y)
    if np.any(~np.isfinite(y)):
        raise DesignError("response has missing values")
    parts = [np.ones(n)]
    for c in spec.fixed_effect_columns:
        v = np.asarray(dataset[c], dtype=float)
        if np.any(~np.isfinite(v)):
            raise DesignError(f"column {c!r} has missing values")
        parts.append(v)
    iso = np.zeros(n, dtype=bool)
    if spec.include_homophily_term:
        nbm, iso = observed_neighbor_mean(dataset, spec.fixed_effect_columns[0])
        parts.append(nbm)
    X = check_design(np.column_stack(parts))
    w = normalize_weights(np.asarray(dataset[weight], dtype=float) if weight in cols else None, n)
    groups = group_labels(dataset, spec.clustering)
    return Design(y, X, groups, w, spec.term_names, iso)


# ---------------------------------------------------------------- linear model


class _GroupSums:
    def __init__(self, y, X, codes, n_groups, w):
        self.n, self.p = X.shape
        wx = X * w[:, None]
        self.Wg = np.bincount(codes, weights=w, minlength=n_groups)
        self.Sg = np.zeros((n_groups, self.p))
        np.add.at(self.Sg, codes, wx)
        self.Tg = np.bincount(codes, weights=w * y, minlength=n_groups)
        self.XtWX = X.T @ wx
        self.XtWy = wx.T @ y
        self.ytWy = float(y @ (w * y))
        self.logw = float(np.log(w).sum())

    def solve(self, theta: float):
        c = theta / (1.0 + theta * self.Wg)
        A = self.XtWX - (self.Sg * c[:, None]).T @ self.Sg
        b = self.XtWy - self.Sg.T @ (c * self.Tg)
        q = self.ytWy - float(c @ self.Tg ** 2)
        L = np.linalg.cholesky(A)
        beta = np.linalg.solve(A, b)
        rss = max(q - float(b @ beta), 1e-300)
        logdet_a = 2.0 * float(np.log(np.diag(L)).sum())
        return beta, A, rss, logdet_a

    def neg2_reml(self, theta: float) -> float:
        _, _, rss, logdet_a = self.solve(theta)
        dof = self.n - self.p
        return dof * math.log(rss / dof) + float(np.log1p(theta * self.Wg).sum()) + logdet_a


def _minimize_log_scale(fun, lo: float, hi: float, grid: int = 25, xatol: float = 1e-10,
                        polish: bool = False):
    """Grid scan on ``log(t)`` then bounded Brent around the best grid point."""
    xs = np.linspace(math.log(lo), math.log(hi), grid)
    vals = np.array([fun(math.exp(x)) for x in xs])
    k = int(np.argmin(vals))
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, grid - 1)]
    res = minimize_scalar(lambda x: fun(math.exp(x)), bounds=(a, b), method="bounded",
                          options={"xatol": xatol, "maxiter": 500})
    x, fx = (res.x, res.fun) if res.fun <= vals[k] else (xs[k], vals[k])
    nfev = int(res.nfev) + grid
    if polish:
        # Brent stops at ~sqrt(eps) relative; Newton on a finite-difference
        # derivative pins the root so tiny input perturbations do not move it
        h = 1e-4
        for _ in range(8):
            if not xs[0] + h < x < xs[-1] - h:
                break
            fu, fd = fun(math.exp(x + h)), fun(math.exp(x - h))
            nfev += 2
            d1, d2 = (fu - fd) / (2 * h), (fu - 2 * fx + fd) / h ** 2
            if d2 <= 0:
                break
            cand = min(max(x - d1 / d2, xs[0]), xs[-1])
            fc = fun(math.exp(cand))
            nfev += 1
            if fc > fx + 1e-12 * (1 + abs(fx)):
                break
            done = abs(cand - x) < 1e-13 * (1 + abs(x))
            x, fx = cand, fc
            if done:
                break
    return math.exp(x), float(fx), bool(res.success), nfev


def fit_lmm(response, design, groups, weights=None, *, names: Sequence[str] | None = None,
            theta: float | None = None, theta_max: float = 1e6) -> FitResult:
    """Weighted REML fit of ``y = X beta + b_group + e``.

    ``theta`` pins the variance ratio (0 gives weighted least squares);
    otherwise it is optimised on ``[1e-10, theta_max]``.  Estimates on the
    floor are reported as ``sigma0 = 0`` with ``boundary=True``.
    """
    y = check_response(response, "identity")
    X = check_design(design)
    n, p = X.shape
    codes, n_groups = check_groups(groups, n)
    if theta is None and n_groups < 2:
        raise DesignError("need at least two groups")
    if n <= p + 2:
        raise DesignError(f"need more than {p + 2} rows, got {n}")
    w = normalize_weights(weights, n)
    sums = _GroupSums(y, X, codes, n_groups, w)
    converged, nfev = True, 0
    if theta is None:
        theta, _, converged, nfev = _minimize_log_scale(sums.neg2_reml, THETA_FLOOR, theta_max, polish=True)
    boundary = theta <= THETA_FLOOR * 1.0001
    if boundary:
        theta = 0.0
    beta, A, rss, logdet_a = sums.solve(theta)
    dof = n - p
    sigma2 = rss / dof
    vcov = sigma2 * np.linalg.inv(A)
    vcov = 0.5 * (vcov + vcov.T)
    neg2 = dof * math.log(rss / dof) + float(np.log1p(theta * sums.Wg).sum()) + logdet_a
    loglik = -0.5 * (neg2 + dof * (1.0 + math.log(2 * math.pi)) - sums.logw)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))
    return FitResult(names, beta, vcov, math.sqrt(theta * sigma2), math.sqrt(sigma2), loglik,
                     converged, n_groups, n, "identity", boundary, nfev)


# ---------------------------------------------------------------- GLMM (Laplace)


class _Family:
    def __init__(self, link: str):
        self.link = link

    def mean_var(self, eta):
        if self.link == "log":
            mu = np.exp(eta)
            return mu, mu, mu
        mu = expit(eta)
        v = mu * (1.0 - mu)
        return mu, v, v * (1.0 - 2.0 * mu)

    def loglik(self, y, eta):
        if self.link == "log":
            return y * eta - np.exp(eta) - gammaln(y + 1.0)
        return y * eta - np.logaddexp(0.0, eta)


class _Laplace:
    """Laplace-approximated weighted log-likelihood for one random intercept.

    ``L(beta, tau) = sum_g [ sum_i w_i l_i(x_i beta + b_g) - b_g^2 / (2 tau)
                             - log(1 + tau sum_i w_i v_i) / 2 ]``
    with ``b_g`` the conditional mode.  ``tau = 0`` gives the single-level GLM.
    """

    def __init__(self, y, X, codes, n_groups, w, link):
        self.y, self.X, self.codes, self.G, self.w = y, X, codes, n_groups, w
        self.fam = _Family(link)
        self.cap = ETA_CAP_BY_LINK[link]
        self.b = np.zeros(n_groups)

    def _gsum(self, v):
        return np.bincount(self.codes, weights=v, minlength=self.G)

    def modes(self, beta, tau, max_iter: int = 100):
        off = self.X @ beta
        if np.any(np.abs(off) > self.cap * 2):
            raise SeparationError(f"|linear predictor| exceeds {self.cap * 2:g}")
        if tau == 0:
            return np.zeros(self.G), off
        b = np.clip(self.b, -self.cap, self.cap)
        for _ in range(max_iter):
            eta = off + b[self.codes]
            mu, v, _ = self.fam.mean_var(eta)
            grad = self._gsum(self.w * (self.y - mu)) - b / tau
            hess = self._gsum(self.w * v) + 1.0 / tau
            step = np.clip(grad / hess, -2.0, 2.0)
            b = b + step
            if np.max(np.abs(step)) < 1e-12:
                break
        else:
            raise ConvergenceError("conditional-mode Newton iteration did not settle", max_iter)
        if np.any(np.abs(b) > self.cap):
            raise SeparationError("a group intercept ran past the separation cap")
        self.b = b
        return b, off + b[self.codes]

    def value(self, beta, tau) -> float:
        b, eta = self.modes(beta, tau)
        ll = float(self.w @ self.fam.loglik(self.y, eta))
        if tau == 0:
            return ll
        _, v, _ = self.fam.mean_var(eta)
        V = self._gsum(self.w * v)
        return ll - float(b @ b) / (2 * tau) - 0.5 * float(np.log1p(tau * V).sum())

    def value_grad(self, beta, tau):
        """Objective, its analytic gradient in ``beta`` and the working information."""
        b, eta = self.modes(beta, tau)
        mu, v, dv = self.fam.mean_var(eta)
        X, w = self.X, self.w
        ll = float(w @ self.fam.loglik(self.y, eta))
        grad = X.T @ (w * (self.y - mu))
        info = X.T @ (X * (w * v)[:, None])
        if tau == 0:
            return ll, grad, info
        V = self._gsum(w * v)
        S = np.zeros((self.G, X.shape[1]))
        np.add.at(S, self.codes, X * (w * v)[:, None])
        D = np.zeros((self.G, X.shape[1]))
        np.add.at(D, self.codes, X * (w * dv)[:, None])
        Vd = self._gsum(w * dv)
        denom = 1.0 + tau * V
        db = -tau * S / denom[:, None]
        # d/dbeta of -log(1 + tau V_g)/2 through eta and through the mode b_g(beta)
        grad = grad - 0.5 * tau * ((D + Vd[:, None] * db) / denom[:, None]).sum(axis=0)
        info = info - (S * (tau / denom)[:, None]).T @ S
        val = ll - float(b @ b) / (2 * tau) - 0.5 * float(np.log1p(tau * V).sum())
        return val, grad, info

    def maximize_beta(self, beta, tau, tol: float = 1e-10, max_iter: int = 200):
        val, grad, info = self.value_grad(beta, tau)
        for it in range(max_iter):
            step = np.linalg.solve(info, grad)
            t = 1.0
            for _ in range(30):
                cand = beta + t * step
                try:
                    cval, cgrad, cinfo = self.value_grad(cand, tau)
                except SeparationError:
                    cval = -np.inf
                if cval >= val - 1e-12 * (1 + abs(val)):
                    break
                t *= 0.5
            else:
                raise ConvergenceError("step halving failed in the fixed-effect update", it)
            beta, val, grad, info = cand, cval, cgrad, cinfo
            if np.max(np.abs(self.X @ beta)) > self.cap:
                raise SeparationError(f"|linear predictor| exceeds {self.cap:g}; the response looks separated")
            # Newton decrement: predicted gain of a further full step, in log-likelihood units
            try:
                decrement = float(grad @ np.linalg.solve(info, grad))
            except np.linalg.LinAlgError:
                decrement = np.inf
            small_step = np.max(np.abs(t * step)) < tol * (1 + np.max(np.abs(beta)))
            if decrement < 1e-14 * (1 + abs(val)) or (small_step and decrement < 1e-9 * (1 + abs(val))):
                return beta, val, it + 1
        raise ConvergenceError("fixed-effect Newton iteration did not converge", max_iter)


def _glm_start(y, X, w, link):
    mu0 = np.clip((y + y.mean()) / 2, 0.05, None) if link == "log" else np.clip((y + 0.5) / 2, 0.05, 0.95)
    eta = np.log(mu0) if link == "log" else np.log(mu0 / (1 - mu0))
    return np.linalg.lstsq(X * np.sqrt(w)[:, None], eta * np.sqrt(w), rcond=None)[0]


def fit_glmm(response, design, groups, weights=None, link: str = "logit", *,
             names: Sequence[str] | None = None, sigma0_sq: float | None = None,
             upper: float | None = None) -> FitResult:
    """Laplace fit of a Poisson or logistic random-intercept model.

    ``sigma0_sq`` pins the random-intercept variance (0 gives the weighted
    single-level GLM).  Otherwise it is optimised on the log scale over
    ``[1e-10, upper]``, ``upper`` defaulting to ``max(10 s, 10)`` where ``s`` is
    the variance of ``y`` (logit) or of ``log(y + 1/2)`` (log).
    The covariance is the fixed-effect block of the inverse negative Hessian
    of the Laplace objective in ``(beta, log sigma0^2)``.
    """
    check_link(link)
    if link == "identity":
        if sigma0_sq not in (None, 0, 0.0):
            raise ValueError("for the identity link only sigma0_sq=0 can be pinned; use fit_lmm(theta=...)")
        return fit_lmm(response, design, groups, weights, names=names, theta=sigma0_sq)
    y = check_response(response, link)
    X = check_design(design)
    n, p = X.shape
    codes, n_groups = check_groups(groups, n)
    if sigma0_sq is None and n_groups < 2:
        raise DesignError("need at least two groups")
    if n <= p + 2:
        raise DesignError(f"need more than {p + 2} rows, got {n}")
    w = normalize_weights(weights, n)
    lap = _Laplace(y, X, codes, n_groups, w, link)
    beta0, _, _ = lap.maximize_beta(_glm_start(y, X, w, link), 0.0)
    state = {"beta": beta0}
    total_iter = 0

    def neg_profile(tau):
        nonlocal total_iter
        lap.b = np.zeros(n_groups)
        beta, val, it = lap.maximize_beta(state["beta"], tau)
        total_iter += it
        return -val

    converged = True
    if sigma0_sq is None:
        # bound on the link scale: counts enter through log(y + 1/2)
        spread = float(np.var(np.log(y + 0.5))) if link == "log" else float(np.var(y))
        upper = upper if upper is not None else max(10.0 * spread, 10.0)
        tau, _, converged, _ = _minimize_log_scale(neg_profile, THETA_FLOOR, upper, grid=15)
        boundary = tau <= THETA_FLOOR * 1.0001
        if boundary:
            tau = 0.0
    else:
        tau = float(sigma0_sq)
        boundary = tau == 0.0
    lap.b = np.zeros(n_groups)
    beta, val, it = lap.maximize_beta(state["beta"], tau)
    vcov = _laplace_vcov(lap, beta, tau, free_tau=sigma0_sq is None and not boundary)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))
    return FitResult(names, beta, vcov, math.sqrt(tau), float("nan"), val, converged,
                     n_groups, n, link, boundary, total_iter + it)


def _laplace_vcov(lap: _Laplace, beta, tau, free_tau: bool, rel_step: float = 1e-5) -> np.ndarray:
    """Fixed-effect block of ``(-Hessian)^-1`` by central differences of the gradient."""
    p = len(beta)

    def grad_full(par):
        b = par[:p]
        if not free_tau:
            return lap.value_grad(b, tau)[1]
        lt = par[p]
        _, g, _ = lap.value_grad(b, math.exp(lt))
        h = 1e-4
        gt = (lap.value(b, math.exp(lt + h)) - lap.value(b, math.exp(lt - h))) / (2 * h)
        return np.append(g, gt)

    par = np.append(beta, math.log(tau)) if free_tau else np.asarray(beta, dtype=float)
    k = len(par)
    H = np.zeros((k, k))
    for j in range(k):
        h = rel_step * max(1.0, abs(par[j]))
        up, dn = par.copy(), par.copy()
        up[j] += h
        dn[j] -= h
        H[:, j] = (grad_full(up) - grad_full(dn)) / (2 * h)
    H = 0.5 * (H + H.T)
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(-H)
    cov = cov[:p, :p]
    if np.any(np.diag(cov) < 0):
        # curvature in tau is unreliable; fall back to the conditional block
        cov = np.linalg.inv(-H[:p, :p])
    return 0.5 * (cov + cov.T)


def laplace_objective(response, design, groups, weights, link: str, beta, sigma0_sq: float) -> float:
    """Laplace objective at given fixed effects and variance (for diagnostics and tests)."""
    y = check_response(response, link)
    X = np.asarray(design, dtype=float)
    codes, G = check_groups(groups, len(y))
    lap = _Laplace(y, X, codes, G, normalize_weights(weights, len(y)), link)
    return lap.value(np.asarray(beta, dtype=float), float(sigma0_sq))


def laplace_gradient(response, design, groups, weights, link: str, beta, sigma0_sq: float) -> np.ndarray:
    y = check_response(response, link)
    X = np.asarray(design, dtype=float)
    codes, G = check_groups(groups, len(y))
    lap = _Laplace(y, X, codes, G, normalize_weights(weights, len(y)), link)
    return lap.value_grad(np.asarray(beta, dtype=float), float(sigma0_sq))[1]


def fit_design(d: Design, link: str) -> FitResult:
    if link == "identity":
        return fit_lmm(d.y, d.X, d.groups, d.weights, names=d.names)
    return fit_glmm(d.y, d.X, d.groups, d.weights, link, names=d.names)


def fit_model(dataset, spec: ModelSpec) -> FitResult:
    """Build the design for ``spec`` and fit it."""
    return fit_design(build_design(dataset, spec), spec.link)


def wald_ci(fit: FitResult, level: float = 0.95) -> np.ndarray:
    """``coef +/- z se`` as a ``(p, 2)`` array."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = stats.norm.ppf(0.5 + level / 2)
    se = fit.se
    return np.column_stack([fit.coef - z * se, fit.coef + z * se])


class RandomInterceptRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_lmm` / :func:`fit_glmm`.

    ``fit(X, y, groups=..., sample_weight=...)``; ``predict`` returns the
    population-level mean (random intercept set to zero).
    """

    def __init__(self, link="identity", fit_intercept=True):
        self.link = link
        self.fit_intercept = fit_intercept

    def _design(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return np.column_stack([np.ones(len(X)), X]) if self.fit_intercept else X

    def fit(self, X, y, groups=None, sample_weight=None):
        check_link(self.link)
        D = self._design(X)
        self.n_features_in_ = D.shape[1] - int(self.fit_intercept)
        res = (fit_lmm(y, D, groups, sample_weight) if self.link == "identity"
               else fit_glmm(y, D, groups, sample_weight, self.link))
        self.result_ = res
        self.coef_ = res.coef[1:] if self.fit_intercept else res.coef
        self.intercept_ = float(res.coef[0]) if self.fit_intercept else 0.0
        self.sigma0_ = res.sigma0
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        eta = self._design(X) @ self.result_.coef
        if self.link == "log":
            return np.exp(eta)
        if self.link == "logit":
            return expit(eta)
        return eta

    def score(self, X, y, sample_weight=None):
        if self.link == "identity":
            return super().score(X, y, sample_weight=sample_weight)
        return float(np.mean(_Family(self.link).loglik(np.asarray(y, float), self._eta(X))))

    def _eta(self, X):
        return self._design(X) @ self.result_.coef
