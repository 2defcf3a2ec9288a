"""Unit-level linear mixed model with a domain random intercept.

y_id = x_id' beta + u_d + e_id, with u_d ~ N(0, sigma2_u) and
e_id ~ N(0, sigma2_e).  Variance components are estimated by maximum
likelihood via Fisher scoring, fixed effects by GLS, area means by the
composite predictor (sampled part plus model predictions for unsampled
units) and its MSE by the Prasad-Rao component decomposition.

The nested-error structure gives V_d = sigma2_e I + sigma2_u 11', whose
inverse and determinant have closed forms; everything below works with
per-domain sufficient statistics instead of dense matrices.
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

VARIANCE_FLOOR = 1e-10


class SingularDesignError(np.linalg.LinAlgError):
    """GLS normal equations are singular; names the offending columns."""

    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is collinear in columns {self.columns}")


@dataclass(frozen=True)
class UnitSample:
    """Sampled units plus the population totals needed for area prediction.

    Parameters
    ----------
    y : ndarray, shape (n,)
    x : ndarray, shape (n, p)
        Design matrix; include an explicit intercept column if wanted.
    domain : ndarray, shape (n,)
        1-based domain codes in 1..n_domains.
    n_domains : int
    pop_sizes : ndarray, shape (D,)
        Population size N_d per domain.
    pop_x_means : ndarray, shape (D, p)
        Population means of the design columns per domain.
    """

    y: np.ndarray
    x: np.ndarray
    domain: np.ndarray
    n_domains: int
    pop_sizes: np.ndarray
    pop_x_means: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        dom = np.asarray(self.domain, dtype=np.int64)
        if y.ndim != 1 or x.shape[0] != y.size or dom.shape != y.shape:
            raise ValueError("y, x and domain must align")
        if self.n_domains < 1:
            raise ValueError("n_domains must be >= 1")
        if dom.size and (dom.min() < 1 or dom.max() > self.n_domains):
            raise ValueError("domain codes must lie in 1..n_domains")
        sizes = np.asarray(self.pop_sizes, dtype=float)
        xbar = np.asarray(self.pop_x_means, dtype=float)
        if xbar.ndim == 1:
            xbar = xbar[:, None]
        if sizes.shape != (self.n_domains,) or xbar.shape != (self.n_domains, x.shape[1]):
            raise ValueError("population totals must cover every domain")
        for arr in (y, x, dom, sizes, xbar):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "domain", dom)
        object.__setattr__(self, "pop_sizes", sizes)
        object.__setattr__(self, "pop_x_means", xbar)

    @property
    def n_units(self):
        return self.y.size

    @property
    def n_coefs(self):
        return self.x.shape[1]

    def domain_counts(self):
        return np.bincount(self.domain - 1, minlength=self.n_domains).astype(float)


@dataclass(frozen=True)
class MixedFit:
    """Fitted mixed model: coefficients, variance components, predictions.

    ``fisher_info`` is the 2x2 expected information for
    (sigma2_e, sigma2_u), in that order.  The g1/g2/g3 components and the
    MSE estimate g1 + g2 + 2 g3 are stored per domain.
    """

    beta: np.ndarray
    sigma2_u: float
    sigma2_e: float
    u_hat: np.ndarray = None
    area_pred: np.ndarray = None
    g1: np.ndarray = None
    g2: np.ndarray = None
    g3: np.ndarray = None
    mse: np.ndarray = None
    fisher_info: np.ndarray = None
    loglik_trace: tuple = ()
    converged: bool = True
    flags: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "sigma2_u", max(float(self.sigma2_u), VARIANCE_FLOOR))
        object.__setattr__(self, "sigma2_e", max(float(self.sigma2_e), VARIANCE_FLOOR))


class _Stats:
    """Per-domain sufficient statistics of (y, x, domain)."""

    def __init__(self, sample):
        y, x, dom = sample.y, sample.x, sample.domain
        D = sample.n_domains
        d0 = dom - 1
        self.n = sample.n_units
        self.D = D
        self.n_d = np.bincount(d0, minlength=D).astype(float)
        p = x.shape[1]
        self.sx = np.zeros((D, p))
        np.add.at(self.sx, d0, x)
        self.sy = np.bincount(d0, weights=y, minlength=D)
        self.xtx = x.T @ x
        self.xty = x.T @ y
        self.yty = float(y @ y)
        self.nonempty = self.n_d > 0

    def gls_matrices(self, s2e, s2u):
        a = s2e + self.n_d * s2u
        w = np.where(self.nonempty, s2u / a, 0.0)
        xtvx = (self.xtx - (self.sx * w[:, None]).T @ self.sx) / s2e
        xtvy = (self.xty - self.sx.T @ (w * self.sy)) / s2e
        return xtvx, xtvy

    def residual_stats(self, beta):
        sr = self.sy - self.sx @ beta
        ssr = self.yty - 2 * beta @ self.xty + beta @ self.xtx @ beta
        with np.errstate(invalid="ignore", divide="ignore"):
            between = np.where(self.nonempty, sr**2 / np.maximum(self.n_d, 1), 0.0)
        ssw = max(ssr - between.sum(), 0.0)
        return sr, ssw

    def loglik(self, beta, s2e, s2u):
        ne = self.nonempty
        a = s2e + self.n_d * s2u
        sr, ssw = self.residual_stats(beta)
        quad = ssw / s2e + (sr[ne] ** 2 / (self.n_d[ne] * a[ne])).sum()
        logdet = ((self.n_d[ne] - 1) * np.log(s2e)).sum() + np.log(a[ne]).sum()
        return -0.5 * (self.n * np.log(2 * np.pi) + logdet + quad)

    def score_and_info(self, beta, s2e, s2u):
        ne = self.nonempty
        n_d = self.n_d[ne]
        a = s2e + n_d * s2u
        sr = (self.sy - self.sx @ beta)[ne]
        _, ssw = self.residual_stats(beta)
        rv2r = ssw / s2e**2 + (sr**2 / (n_d * a**2)).sum()
        rvzzvr = (sr**2 / a**2).sum()
        tr_v = (n_d - 1).sum() / s2e + (1 / a).sum()
        tr_vz = (n_d / a).sum()
        score = np.array([
            -0.5 * tr_v + 0.5 * rv2r,
            -0.5 * tr_vz + 0.5 * rvzzvr,
        ])
        i_ee = 0.5 * ((n_d - 1).sum() / s2e**2 + (1 / a**2).sum())
        i_eu = 0.5 * (n_d / a**2).sum()
        i_uu = 0.5 * (n_d**2 / a**2).sum()
        info = np.array([[i_ee, i_eu], [i_eu, i_uu]])
        return score, info


def _solve_gls(xtvx, xtvy, x):
    try:
        beta = np.linalg.solve(xtvx, xtvy)
    except np.linalg.LinAlgError:
        beta = None
    if beta is None or not np.all(np.isfinite(beta)) or np.linalg.cond(xtvx) > 1e12:
        _, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        cutoff = diag.max(initial=0.0) * max(x.shape) * np.finfo(float).eps
        rank = int((diag > cutoff).sum())
        raise SingularDesignError(sorted(piv[rank:].tolist()))
    return beta


def fit_ml(sample, tol=1e-10, max_iter=200):
    """Maximum-likelihood fit of the nested-error model.

    Alternates GLS for beta with Fisher-scoring updates of
    (sigma2_e, sigma2_u), halving the scoring step whenever it would
    decrease the log-likelihood.  Variance components are floored at
    VARIANCE_FLOOR (flagged when a floor is active at convergence).

    Returns a fully populated MixedFit: random-effect predictions, area
    means and Prasad-Rao MSE components are computed at the estimates.

    Raises
    ------
    ValueError
        Fewer than two domains, or n <= p + 2.
    SingularDesignError
        Collinear design columns.
    """
    if sample.n_domains < 2:
        raise ValueError("at least 2 domains are required")
    if sample.n_units <= sample.n_coefs + 2:
        raise ValueError("need n > p + 2 observations")
    stats = _Stats(sample)
    # OLS-based starting values
    xtvx0, xtvy0 = stats.gls_matrices(1.0, 0.0)
    beta = _solve_gls(xtvx0, xtvy0, sample.x)
    ssr0 = stats.yty - 2 * beta @ stats.xty + beta @ stats.xtx @ beta
    s2_total = max(ssr0 / max(stats.n - sample.n_coefs, 1), 1e-8)
    s2e, s2u = 0.75 * s2_total, 0.25 * s2_total
    trace = [stats.loglik(beta, s2e, s2u)]
    flags = []
    converged = False
    for _ in range(max_iter):
        score, info = stats.score_and_info(beta, s2e, s2u)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = score / max(np.diag(info).max(), 1.0)
        prev = (s2e, s2u, beta)
        prev_ll = trace[-1]
        scale = 1.0
        for _ in range(40):
            s2e_new = max(prev[0] + scale * step[0], VARIANCE_FLOOR)
            s2u_new = max(prev[1] + scale * step[1], VARIANCE_FLOOR)
            xtvx, xtvy = stats.gls_matrices(s2e_new, s2u_new)
            beta_new = _solve_gls(xtvx, xtvy, sample.x)
            ll = stats.loglik(beta_new, s2e_new, s2u_new)
            if ll >= prev_ll - 1e-8:
                break
            scale *= 0.5
        s2e, s2u, beta = s2e_new, s2u_new, beta_new
        trace.append(ll)
        rel = max(
            abs(s2e - prev[0]) / (abs(prev[0]) + 1e-12),
            abs(s2u - prev[1]) / (abs(prev[1]) + 1e-12),
            float(np.max(np.abs(beta - prev[2])) / (np.max(np.abs(prev[2])) + 1e-12)),
        )
        if rel < tol:
            converged = True
            break
    if not converged:
        flags.append("not_converged")
    if s2e <= VARIANCE_FLOOR * (1 + 1e-6):
        flags.append("sigma2_e_at_floor")
    if s2u <= VARIANCE_FLOOR * (1 + 1e-6):
        flags.append("sigma2_u_at_floor")
    _, info = stats.score_and_info(beta, s2e, s2u)
    fit = MixedFit(
        beta=beta,
        sigma2_u=s2u,
        sigma2_e=s2e,
        fisher_info=info,
        loglik_trace=tuple(trace),
        converged=converged,
        flags=tuple(flags),
    )
    u_hat = blup_random_effects(fit, sample)
    fit = replace(fit, u_hat=u_hat)
    area = eblup_area_means(fit, sample)
    comp = prasad_rao_mse(fit, sample)
    return replace(
        fit,
        area_pred=area,
        g1=comp.g1,
        g2=comp.g2,
        g3=comp.g3,
        mse=comp.mse,
        flags=tuple(list(fit.flags) + [f for f in comp.flags if f not in fit.flags]),
    )


def shrinkage_factors(sample, sigma2_u, sigma2_e):
    """Per-domain shrinkage phi_d = sigma2_u / (sigma2_u + sigma2_e / n_d)."""
    n_d = sample.domain_counts()
    a = sigma2_e + n_d * sigma2_u
    return np.where(n_d > 0, n_d * sigma2_u / a, 0.0)


def blup_random_effects(fit, sample):
    """Random-effect predictions u_hat_d = phi_d (ybar_d - xbar_d' beta).

    Domains without sampled units get the prior mean 0.
    """
    stats = _Stats(sample)
    phi = shrinkage_factors(sample, fit.sigma2_u, fit.sigma2_e)
    sr = stats.sy - stats.sx @ fit.beta
    with np.errstate(invalid="ignore", divide="ignore"):
        rbar = np.where(stats.n_d > 0, sr / np.maximum(stats.n_d, 1), 0.0)
    return phi * rbar


def eblup_area_means(fit, sample):
    """Composite area-mean predictions.

    Sampled responses enter directly; unsampled units contribute
    x' beta + u_hat_d, accumulated as population totals minus sample
    totals.  A fully sampled domain therefore returns its sample mean.
    """
    stats = _Stats(sample)
    n_d = stats.n_d
    N_d = sample.pop_sizes
    if np.any(N_d < n_d):
        bad = np.flatnonzero(N_d < n_d) + 1
        raise ValueError(f"population smaller than sample in domains {bad.tolist()}")
    u_hat = fit.u_hat if fit.u_hat is not None else blup_random_effects(fit, sample)
    pop_total_xb = N_d * (sample.pop_x_means @ fit.beta)
    sample_xb = stats.sx @ fit.beta
    totals = stats.sy + (pop_total_xb - sample_xb) + (N_d - n_d) * u_hat
    return totals / N_d


@dataclass(frozen=True)
class MseComponents:
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    mse: np.ndarray
    flags: tuple = ()


def prasad_rao_mse(fit, sample):
    """Prasad-Rao MSE components of the area-mean predictor.

    g1 = (1 - phi_d) sigma2_u is the shrinkage variance, g2 the
    fixed-effect contribution through (Xbar_d - phi_d xbar_d), and g3 the
    variance-component estimation term

        g3_d = n_d^{-2} (sigma2_u + sigma2_e/n_d)^{-3}
               [sigma_e^4 V(s2u) + sigma_u^4 V(s2e) - 2 sigma_e^2 sigma_u^2 C],

    with the (co)variances read off the inverse Fisher information.  The
    MSE estimate is g1 + g2 + 2 g3.  A singular information matrix flags
    the fit and reports g3 as NaN.
    """
    stats = _Stats(sample)
    n_d = stats.n_d
    s2e, s2u = fit.sigma2_e, fit.sigma2_u
    a = s2e + n_d * s2u
    phi = np.where(n_d > 0, n_d * s2u / a, 0.0)
    g1 = (1 - phi) * s2u
    xtvx, _ = stats.gls_matrices(s2e, s2u)
    with np.errstate(invalid="ignore", divide="ignore"):
        xbar_s = np.where(
            (n_d > 0)[:, None], stats.sx / np.maximum(n_d, 1)[:, None], 0.0
        )
    c_vec = sample.pop_x_means - phi[:, None] * xbar_s
    try:
        sol = np.linalg.solve(xtvx, c_vec.T)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(xtvx, c_vec.T, rcond=None)[0]
    g2 = np.einsum("dp,pd->d", c_vec, sol)
    flags = []
    info = fit.fisher_info
    g3 = np.full(sample.n_domains, np.nan)
    if info is None:
        flags.append("missing_fisher_info")
    else:
        try:
            cov = np.linalg.inv(info)
            v_ee, v_eu, v_uu = cov[0, 0], cov[0, 1], cov[1, 1]
            h = s2e**2 * v_uu + s2u**2 * v_ee - 2 * s2e * s2u * v_eu
            g3 = np.where(n_d > 0, n_d / a**3 * h, 0.0)
        except np.linalg.LinAlgError:
            flags.append("singular_fisher_info")
    mse = g1 + g2 + 2 * g3
    return MseComponents(g1=g1, g2=g2, g3=g3, mse=mse, flags=tuple(flags))
