"""ML and REML fitting of the nested error regression model.

The likelihood is profiled onto the variance ratio ``psi = sigma2_alpha /
sigma2_e``.  For fixed ``psi`` the coefficients are GLS and ``sigma2_e`` has a
closed form, so the remaining problem is a bounded scalar search.  Every
quantity is assembled from per-area sufficient statistics using

    V_i^{-1} = sigma2_e^{-1} (I - (gamma_i / n_i) J),
    log|V_i| = (n_i - 1) log sigma2_e + log(sigma2_e + n_i sigma2_alpha).
"""

from __future__ import annotations

import enum
import math
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import optimize

from .core import ModelParams, SampleData, SuffStats, sufficient_stats

log = logging.getLogger(__name__)

PSI_TOL = 1e-10
MAX_ITER = 200
_LOG2PI = np.log(2.0 * np.pi)


class Method(str, enum.Enum):
    ML = "ML"
    REML = "REML"
    FIXED_EFFECTS = "FIXED_EFFECTS"


class MomentSource(str, enum.Enum):
    NORMAL_THEORY = "NORMAL_THEORY"
    RESIDUAL_MOMENTS = "RESIDUAL_MOMENTS"
    FISHER_INFORMATION = "FISHER_INFORMATION"


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, columns, what="design"):
        self.columns = list(columns)
        super().__init__(
            f"{what} is rank deficient; collinear columns: {', '.join(self.columns)}"
        )


class ConvergenceError(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class FittedModel:
    params: ModelParams
    method: Method
    loglik: float
    converged: bool
    n: int
    g: int
    boundary_alpha: bool
    psi: float
    cov_beta: np.ndarray
    column_names: tuple = ()
    iterations: int = 0

    @property
    def p(self) -> int:
        return self.cov_beta.shape[0]

    def summary(self) -> dict:
        """Flat mapping of the fit, suitable for key-value output."""
        out = {
            "method": self.method.value,
            "n": self.n,
            "g": self.g,
            "loglik": self.loglik,
            "converged": self.converged,
            "boundary_alpha": self.boundary_alpha,
        }
        for name, b in zip(self.column_names, self.params.beta):
            out[f"coef[{name}]"] = float(b)
        out["sigma2_alpha"] = self.params.sigma2_alpha
        out["sigma2_e"] = self.params.sigma2_e
        return out


def collinear_columns(gram: np.ndarray, names, order=None, rtol=1e-10) -> list:
    """Names of columns that add no rank, scanning in ``order``.

    Runs a sequential Cholesky on the Gram matrix: a column is redundant when
    its squared residual on the already accepted columns is below
    ``rtol * gram[j, j]``.
    """
    p = gram.shape[0]
    order = list(range(p)) if order is None else list(order)
    kept: list = []
    bad = []
    for j in order:
        gjj = gram[j, j]
        if gjj <= 0:
            bad.append(j)
            continue
        if kept:
            Gkk = gram[np.ix_(kept, kept)]
            gkj = gram[kept, j]
            try:
                r = gjj - gkj @ np.linalg.solve(Gkk, gkj)
            except np.linalg.LinAlgError:
                r = 0.0
        else:
            r = gjj
        if r > rtol * gjj:
            kept.append(j)
        else:
            bad.append(j)
    return [names[j] for j in sorted(bad)]


class _Profile:
    """Concentrated (restricted) log-likelihood as a function of ``psi``."""

    def __init__(self, stats: SuffStats, method: Method):
        self.s = stats
        self.method = method
        self.nt = float(stats.n.sum())
        self.p = stats.p
        self.dof = self.nt - self.p if method is Method.REML else self.nt
        # psi-independent parts
        self.Wzz = stats.Wzz.sum(axis=0)
        self.Wzy = stats.Wzy.sum(axis=0)
        self.Wyy = float(stats.Wyy.sum())
        self.zz = stats.zbar[:, :, None] * stats.zbar[:, None, :]
        self.zy = stats.zbar * stats.ybar[:, None]
        self.nevals = 0

    def solve(self, psi: float):
        """GLS pieces at ``psi``: ``(beta, A, rss)`` with A = sum X'H^-1 X."""
        w = self.s.n / (1.0 + self.s.n * psi)  # n_i (1 - gamma_i)
        A = self.Wzz + np.einsum("i,ijk->jk", w, self.zz)
        b = self.Wzy + w @ self.zy
        beta = np.linalg.solve(A, b)
        resid = self.s.ybar - self.s.zbar @ beta
        within = self.Wyy - 2.0 * beta @ self.Wzy + beta @ self.Wzz @ beta
        rss = max(within + w @ resid**2, 0.0)
        return beta, A, rss

    def __call__(self, psi: float) -> float:
        self.nevals += 1
        beta, A, rss = self.solve(psi)
        return self._value(psi, A, rss)

    def _value(self, psi, A, rss):
        dof = self.dof
        if rss <= 0:
            return np.inf
        val = dof * np.log(rss / dof) + np.log1p(self.s.n * psi).sum() + dof * (1 + _LOG2PI)
        if self.method is Method.REML:
            val += np.linalg.slogdet(A)[1]
        return -0.5 * val

    def score(self, psi: float) -> float:
        n = self.s.n
        beta, A, rss = self.solve(psi)
        d = 1.0 + n * psi
        resid = self.s.ybar - self.s.zbar @ beta
        drss = -np.sum((n * resid / d) ** 2)
        dlogh = np.sum(n / d)
        val = self.dof * drss / rss + dlogh
        if self.method is Method.REML:
            dA = -np.einsum("i,ijk->jk", (n / d) ** 2, self.zz)
            val += np.trace(np.linalg.solve(A, dA))
        return -0.5 * val


def _sym_inv(A):
    """Inverse of a symmetric matrix, symmetrized to remove rounding asymmetry."""
    inv = np.linalg.inv(A)
    return 0.5 * (inv + inv.T)


def _centered_stats(sample: SampleData):
    """Sufficient statistics with the response shifted by its grand mean.

    The intercept absorbs the shift exactly, so working with centered
    responses keeps the solution invariant to the response location.
    """
    stats = sufficient_stats(sample)
    shift = float(np.dot(stats.n, stats.ybar) / stats.n.sum())
    return replace(stats, ybar=stats.ybar - shift), shift


def _check_rank(stats: SuffStats, names):
    G = stats.Wzz.sum(axis=0) + np.einsum(
        "i,ij,ik->jk", stats.n, stats.zbar, stats.zbar
    )
    bad = collinear_columns(G, names)
    if bad:
        raise RankDeficiencyError(bad)


def gls_beta(sample: SampleData, sigma2_alpha: float, sigma2_e: float):
    """GLS coefficients and their model-based covariance for a known variance pair.

    Returns
    -------
    beta : ndarray, shape (p,)
    cov : ndarray, shape (p, p)
        ``(sum_i X_i' V_i^{-1} X_i)^{-1}``.
    """
    if sigma2_e <= 0 or sigma2_alpha < 0:
        raise ValueError("need sigma2_e > 0 and sigma2_alpha >= 0")
    stats, shift = _centered_stats(sample)
    _check_rank(stats, sample.column_names)
    prof = _Profile(stats, Method.ML)
    beta, A, _ = prof.solve(sigma2_alpha / sigma2_e)
    beta[0] += shift
    return beta, sigma2_e * _sym_inv(A)


def _maximize(prof: _Profile):
    """Bracketed search for the maximizing ``psi``; returns (psi, converged, iters)."""
    hi, fhi = 1.0, prof(1.0)
    grow = 0
    while grow < 60:
        f2 = prof(2.0 * hi)
        if not f2 > fhi:
            hi = 2.0 * hi
            break
        hi, fhi = 2.0 * hi, f2
        grow += 1
    else:
        raise ConvergenceError(
            "variance ratio diverges (no within-area variation?)", best=hi
        )

    res = optimize.minimize_scalar(
        lambda t: -prof(t),
        bounds=(0.0, hi),
        method="bounded",
        options={"xatol": PSI_TOL, "maxiter": MAX_ITER},
    )
    psi = float(res.x)
    converged = bool(res.success)
    iters = int(res.nfev)
    if psi > 0:
        polished = _polish(prof, psi)
        # the objective is flat at the top, so compare up to round-off
        if polished is not None and prof(polished) >= prof(psi) - 1e-12 * max(1.0, abs(prof(psi))):
            psi = polished
    if prof(0.0) >= prof(psi):
        psi = 0.0
    return psi, converged, iters


def _polish(prof: _Profile, psi: float):
    """Root of the analytic score near ``psi``.

    Golden/parabolic search locates a flat maximum only to about sqrt(eps)
    in relative terms; the score pins it down to rounding level.
    """
    step = max(1e-6 * psi, 1e-9)
    for _ in range(40):
        lo, hi = max(0.0, psi - step), psi + step
        s_lo, s_hi = prof.score(lo), prof.score(hi)
        if s_lo > 0 > s_hi:
            return optimize.brentq(prof.score, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=MAX_ITER)
        if lo == 0.0 and s_lo <= 0:
            return 0.0
        step *= 4.0
    return None


def _fit(sample: SampleData, method: Method) -> FittedModel:
    names = tuple(sample.column_names)
    if sample.g < 2:
        raise ValueError("need at least two areas")
    if sample.n <= sample.p:
        raise ValueError("total sample size must exceed the number of coefficients")
    stats, shift = _centered_stats(sample)
    _check_rank(stats, list(names))
    prof = _Profile(stats, method)

    beta0, A0, rss0 = prof.solve(0.0)
    beta0[0] += shift
    scale = max(stats.Wyy.sum() + (stats.n * (stats.ybar - stats.ybar.mean()) ** 2).sum(), 1.0)
    if rss0 <= 1e-24 * scale:
        # responses exactly explained by the fixed part
        s2e = rss0 / prof.dof
        params = ModelParams(beta0[: sample.p_b + 1], beta0[sample.p_b + 1 :], 0.0, s2e)
        cov = s2e * _sym_inv(A0)
        return FittedModel(params, method, np.inf, True, sample.n, sample.g, True, 0.0, cov, names, 0)

    psi, converged, iters = _maximize(prof)
    if not converged:
        raise ConvergenceError(f"no convergence in {MAX_ITER} iterations", best=psi)
    beta, A, rss = prof.solve(psi)
    beta[0] += shift
    s2e = rss / prof.dof
    s2a = psi * s2e
    params = ModelParams(beta[: sample.p_b + 1], beta[sample.p_b + 1 :], s2a, s2e)
    cov = s2e * _sym_inv(A)
    return FittedModel(
        params=params,
        method=method,
        loglik=float(prof._value(psi, A, rss)),
        converged=converged,
        n=sample.n,
        g=sample.g,
        boundary_alpha=psi == 0.0,
        psi=psi,
        cov_beta=cov,
        column_names=names,
        iterations=iters,
    )


def fit_ml(sample: SampleData) -> FittedModel:
    """Maximum likelihood fit."""
    return _fit(sample, Method.ML)


def fit_reml(sample: SampleData) -> FittedModel:
    """Restricted maximum likelihood fit."""
    return _fit(sample, Method.REML)


def _method(method) -> Method:
    m = method if isinstance(method, Method) else Method(str(method).upper())
    if m is Method.FIXED_EFFECTS:
        raise ValueError("fixed area effects are fitted by predict.fit_fixed_effects")
    return m


def fit(sample: SampleData, method="REML") -> FittedModel:
    """ML or REML fit, selected by name or :class:`Method`."""
    return _fit(sample, _method(method))


def profile_objective(sample: SampleData, method="REML"):
    """Callable ``psi -> concentrated objective`` for diagnostics."""
    return _Profile(_centered_stats(sample)[0], _method(method))


@dataclass(frozen=True)
class AsymptoticCovariance:
    """Plug-in asymptotic covariance of the estimator of ``omega``.

    ``omega`` is ordered ``[xi, sigma2_alpha, beta2, sigma2_e]``; the scaled
    estimator ``K^{1/2}(omega_hat - omega)`` has covariance ``C``.
    """

    C: np.ndarray
    K: np.ndarray
    moment_plugins: dict
    source: MomentSource
    labels: tuple = ()
    alpha_index: int = 0
    e_index: int = -1
    B_u: Optional[np.ndarray] = field(default=None, repr=False)
    B_3: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def covariance(self) -> np.ndarray:
        """Estimated ``Var(omega_hat) = K^{-1/2} C K^{-1/2}``."""
        s = 1.0 / np.sqrt(self.K)
        return self.C * np.outer(s, s)

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def var_sigma2_alpha(self) -> float:
        i = self.alpha_index
        return float(self.covariance[i, i])

    @property
    def var_sigma2_e(self) -> float:
        i = self.e_index
        return float(self.covariance[i, i])

    @property
    def cov_sigma2(self) -> float:
        return float(self.covariance[self.alpha_index, self.e_index])


def variance_component_information_inverse(sample: SampleData, sigma2_alpha: float, sigma2_e: float):
    """Inverse of the finite-sample normal information for ``(sigma2_alpha, sigma2_e)``.

    Per area the covariance ``s2e I + s2a J`` has eigenvalue ``s2e + n s2a``
    on the constant vector and ``s2e`` on its ``n - 1`` dimensional complement.
    """
    n = np.array([a.n for a in sample.areas], dtype=float)
    lam = sigma2_e + n * sigma2_alpha
    if sigma2_e <= 0:
        return np.full((2, 2), np.nan)
    info = 0.5 * np.array(
        [
            [np.sum(n**2 / lam**2), np.sum(n / lam**2)],
            [np.sum(n / lam**2), np.sum((n - 1) / sigma2_e**2 + 1 / lam**2)],
        ]
    )
    return _sym_inv(info)


def _residual_pieces(fitm: FittedModel, sample: SampleData):
    pr = fitm.params
    s2a, s2e = pr.sigma2_alpha, pr.sigma2_e
    alphas = []
    resid = []
    for a in sample.areas:
        fitted = a.design() @ pr.beta
        gam = 0.0 if s2a == 0 else a.n * s2a / (s2e + a.n * s2a)
        al = gam * float(np.mean(a.y - fitted))
        alphas.append(al)
        resid.append(a.y - fitted - al)
    return np.asarray(alphas), np.concatenate(resid)


def asymptotic_covariance(
    fitm: FittedModel,
    sample: SampleData,
    moment_source=MomentSource.NORMAL_THEORY,
) -> AsymptoticCovariance:
    """Assemble the limiting covariance with finite-sample design averages.

    ``B_u`` is the average of ``u_i u_i'`` over areas and ``B_3`` the average
    over sampled units of the outer product of the within covariates centered
    at their population area means (sample means when those are unknown).
    """
    source = MomentSource(moment_source)
    pr = fitm.params
    s2a, s2e = pr.sigma2_alpha, pr.sigma2_e
    g, n = sample.g, sample.n
    pb1, pw = sample.p_b + 1, sample.p_w
    names = list(sample.column_names)

    U = np.array([a.u for a in sample.areas])
    B_u = U.T @ U / g
    B_3 = np.zeros((pw, pw))
    for a in sample.areas:
        center = a.xbar_w_pop if a.xbar_w_pop is not None else a.xbar_w_samp
        xc = a.x_w - center
        B_3 += xc.T @ xc
    B_3 /= n
    bad = collinear_columns(B_u, names[:pb1])
    if pw:
        bad += collinear_columns(B_3, names[pb1:])
    if bad:
        raise RankDeficiencyError(bad, what="asymptotic design average")

    if source is not MomentSource.RESIDUAL_MOMENTS:
        m3a, m4a, m4e = 0.0, 3.0 * s2a**2, 3.0 * s2e**2
    else:
        alphas, resid = _residual_pieces(fitm, sample)
        m3a = float(np.mean(alphas**3))
        m4a = float(np.mean(alphas**4))
        m4e = float(np.mean(resid**4))

    dim = pb1 + pw + 2
    ia = pb1
    ie = dim - 1
    C = np.zeros((dim, dim))
    C[:pb1, :pb1] = s2a * _sym_inv(B_u)
    # B_u^{-1} times the mean of u_i is the first unit vector
    C[0, ia] = C[ia, 0] = m3a
    C[ia, ia] = m4a - s2a**2
    if pw:
        C[ia + 1 : ie, ia + 1 : ie] = s2e * _sym_inv(B_3)
    C[ie, ie] = m4e - s2e**2
    K = np.concatenate([np.full(pb1 + 1, float(g)), np.full(pw + 1, float(n))])
    if source is MomentSource.FISHER_INFORMATION:
        V = variance_component_information_inverse(sample, s2a, s2e)
        C[ia, ia] = g * V[0, 0]
        C[ie, ie] = n * V[1, 1]
        C[ia, ie] = C[ie, ia] = math.sqrt(g * n) * V[0, 1]
    labels = tuple(names[:pb1] + ["sigma2_alpha"] + names[pb1:] + ["sigma2_e"])
    return AsymptoticCovariance(
        C=C,
        K=K,
        moment_plugins={"E_alpha3": m3a, "E_alpha4": m4a, "E_e4": m4e, "source": source.value},
        source=source,
        labels=labels,
        alpha_index=ia,
        e_index=ie,
        B_u=B_u,
        B_3=B_3,
    )
