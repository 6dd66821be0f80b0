"""Area-level point predictors, MSE estimators and prediction intervals.

Mixed-model predictors of the area mean:

* ``sam``: composite estimator targeting the finite-population mean,
  ``(1 - k) ybar_s + k (u' xi + xbar_rest' beta2 + alpha_hat)``;
* ``clp``: synthetic estimator targeting the conditional linear predictor,
  ``u' xi + xbar_pop' beta2 + alpha_hat``;
* ``sam_star``: the composite estimator with the non-sample covariate mean
  replaced by the sample mean, for when population means are unknown.

The Prasad-Rao comparator ``mse_pr`` is a reconstruction of the usual
``g1 + g2 + 2 g3`` decomposition for the nested error model with the
variance-component covariance taken from :class:`AsymptoticCovariance`.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .core import AreaSample, SampleData
from .fit import (
    AsymptoticCovariance,
    FittedModel,
    MomentSource,
    RankDeficiencyError,
    asymptotic_covariance,
    collinear_columns,
)

log = logging.getLogger(__name__)


class Target(str, enum.Enum):
    SMALL_AREA_MEAN = "SMALL_AREA_MEAN"
    CONDITIONAL_LINEAR_PREDICTOR = "CONDITIONAL_LINEAR_PREDICTOR"


class FixedKind(str, enum.Enum):
    COMPOSITE = "COMPOSITE"
    SYNTHETIC = "SYNTHETIC"


class MissingPopulationMeans(ValueError):
    pass


def _gamma_hat(area: AreaSample, fit: FittedModel) -> float:
    s2a, s2e = fit.params.sigma2_alpha, fit.params.sigma2_e
    if s2a == 0:
        return 0.0
    return area.n * s2a / (s2e + area.n * s2a)


def eblup_alpha(area: AreaSample, fit: FittedModel) -> float:
    """EBLUP of the area random effect: ``gamma_i`` times the mean residual."""
    pr = fit.params
    resid = area.ybar - area.u @ pr.xi - area.xbar_w_samp @ pr.beta2
    return _gamma_hat(area, fit) * float(resid)


def _require_pop(area: AreaSample):
    if area.xbar_w_pop is None and area.x_w.shape[1] > 0:
        raise MissingPopulationMeans(
            f"area {area.area_id!r}: population covariate means unknown; "
            "use predict_sam_star instead"
        )


def _synthetic(area: AreaSample, fit: FittedModel, xbar_w: np.ndarray, alpha: float) -> float:
    pr = fit.params
    return float(area.u @ pr.xi + xbar_w @ pr.beta2 + alpha)


def predict_sam(area: AreaSample, fit: FittedModel) -> float:
    _require_pop(area)
    a = eblup_alpha(area, fit)
    xr = area.xbar_w_rest if area.x_w.shape[1] else np.zeros(0)
    k = area.k
    return (1.0 - k) * area.ybar + k * _synthetic(area, fit, xr, a)


def predict_clp(area: AreaSample, fit: FittedModel) -> float:
    _require_pop(area)
    a = eblup_alpha(area, fit)
    xp = area.xbar_w_pop if area.x_w.shape[1] else np.zeros(0)
    return _synthetic(area, fit, xp, a)


def predict_sam_star(area: AreaSample, fit: FittedModel) -> float:
    a = eblup_alpha(area, fit)
    k = area.k
    return (1.0 - k) * area.ybar + k * _synthetic(area, fit, area.xbar_w_samp, a)


def mse_lw(area: AreaSample, fit: FittedModel, target=Target.SMALL_AREA_MEAN) -> float:
    """Asymptotic MSE estimate ``k sigma2_e / n`` (mean) or ``sigma2_e / n`` (clp)."""
    s2e = fit.params.sigma2_e
    if Target(target) is Target.SMALL_AREA_MEAN:
        return area.k * s2e / area.n
    return s2e / area.n


def pr_components(area: AreaSample, fit: FittedModel, cov: AsymptoticCovariance):
    """Return ``(g1, g2, g3)`` of the Prasad-Rao decomposition."""
    s2a, s2e = fit.params.sigma2_alpha, fit.params.sigma2_e
    n = area.n
    gam = _gamma_hat(area, fit)
    g1 = (1.0 - gam) * s2a
    d = area.zbar_pop - gam * area.zbar_samp
    g2 = float(d @ fit.cov_beta @ d)
    if s2a == 0:
        return g1, g2, 0.0
    v_a = cov.var_sigma2_alpha
    v_e = cov.var_sigma2_e
    c_ae = cov.cov_sigma2
    g3 = (s2e**2 * v_a + s2a**2 * v_e - 2.0 * s2a * s2e * c_ae) / (
        n**2 * (s2a + s2e / n) ** 3
    )
    return g1, g2, g3


def mse_pr(area: AreaSample, fit: FittedModel, cov: AsymptoticCovariance) -> float:
    g1, g2, g3 = pr_components(area, fit, cov)
    return g1 + g2 + 2.0 * g3


def normal_quantile(epsilon: float) -> float:
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    return float(norm.ppf(1.0 - epsilon / 2.0))


def prediction_interval(point: float, mse: float, epsilon: float = 0.05):
    """Symmetric normal interval ``point -/+ z_{1-eps/2} sqrt(mse)``."""
    if mse < 0:
        raise ValueError("mse must be >= 0")
    h = normal_quantile(epsilon) * np.sqrt(mse)
    return (point - h, point + h)


@dataclass(frozen=True)
class AreaPrediction:
    area_id: str
    N: int
    n: int
    alpha_hat: float
    sam: float
    clp: float
    sam_star: float
    mse_lw: float
    mse_pr: float
    interval_sam_lw: tuple
    interval_clp_lw: tuple
    interval_clp_pr: tuple
    target: Target = Target.SMALL_AREA_MEAN


def predict_areas(
    sample: SampleData,
    fit: FittedModel,
    cov: Optional[AsymptoticCovariance] = None,
    epsilon: float = 0.05,
    sam_star: bool = False,
) -> list:
    """Predictions, MSE estimates and intervals for every sampled area.

    With ``sam_star`` the population covariate means are not used; ``sam``,
    ``clp`` and ``mse_pr`` are then NaN and the sam-LW interval is centered
    on ``sam_star``.
    """
    if cov is None:
        cov = asymptotic_covariance(fit, sample, MomentSource.NORMAL_THEORY)
    nan = float("nan")
    out = []
    for a in sample.areas:
        al = eblup_alpha(a, fit)
        star = predict_sam_star(a, fit)
        lw = mse_lw(a, fit)
        if sam_star:
            sam = clp = pr = nan
            centre = star
        else:
            sam = predict_sam(a, fit)
            clp = predict_clp(a, fit)
            pr = mse_pr(a, fit, cov)
            centre = sam
        out.append(
            AreaPrediction(
                area_id=a.area_id,
                N=a.N,
                n=a.n,
                alpha_hat=al,
                sam=sam,
                clp=clp,
                sam_star=star,
                mse_lw=lw,
                mse_pr=pr,
                interval_sam_lw=prediction_interval(centre, lw, epsilon),
                interval_clp_lw=(nan, nan) if sam_star else prediction_interval(clp, lw, epsilon),
                interval_clp_pr=(nan, nan) if sam_star else prediction_interval(clp, pr, epsilon),
            )
        )
    return out


# fixed area effects --------------------------------------------------------


@dataclass(frozen=True)
class FixedEffectsFit:
    """Least squares fit with fixed, sum-to-zero area effects.

    ``chi`` holds the retained regression coefficients followed by one effect
    per area.  Between-area covariates collinear with the area effects are
    listed in ``dropped`` and excluded from ``chi``.
    """

    chi: np.ndarray
    V_chi: np.ndarray
    sigma2_e: float
    labels: tuple
    dropped: tuple
    area_ids: tuple
    keep_u: np.ndarray
    keep_w: np.ndarray
    rank: int

    @property
    def alpha(self) -> np.ndarray:
        return self.chi[-len(self.area_ids) :]

    def area_position(self, area_id) -> int:
        return self.area_ids.index(area_id)


def fit_fixed_effects(sample: SampleData, drop_collinear: bool = True, warn: bool = True) -> FixedEffectsFit:
    """Constrained OLS with fixed area effects summing to zero.

    Parameters
    ----------
    sample : SampleData
    drop_collinear : bool
        Between-area covariates are always collinear with a full set of area
        effects.  When True they are dropped (and reported in ``dropped``,
        with a log warning unless ``warn`` is False); when False a
        :class:`RankDeficiencyError` is raised instead.  Collinearity among the within covariates is always an
        error.
    """
    g = sample.g
    pb1, pw = sample.p_b + 1, sample.p_w
    names = sample.column_names
    idx, Z, y = sample.stacked()
    n = y.shape[0]
    # deviation coding: alpha_g = -(alpha_1 + ... + alpha_{g-1})
    D = np.zeros((n, g - 1))
    rows = np.arange(n)
    last = idx == g - 1
    D[rows[~last], idx[~last]] = 1.0
    D[last, :] = -1.0
    full = np.hstack([Z, D])
    full_names = list(names) + [f"alpha[{a.area_id}]" for a in sample.areas[:-1]]
    gram = full.T @ full
    order = [0] + list(range(pb1, pb1 + pw)) + list(range(pb1 + pw, full.shape[1])) + list(range(1, pb1))
    bad = collinear_columns(gram, full_names, order=order)
    between_bad = [b for b in bad if b in names[1:pb1]]
    hard_bad = [b for b in bad if b not in between_bad]
    if hard_bad or (between_bad and not drop_collinear):
        raise RankDeficiencyError(bad, what="fixed-effects design")
    if between_bad and warn:
        log.warning("dropping between-area columns collinear with area effects: %s", between_bad)

    keep_u = np.array([names[j] not in between_bad for j in range(pb1)])
    keep_w = np.ones(pw, dtype=bool)
    cols = np.concatenate([keep_u, keep_w, np.ones(g - 1, dtype=bool)])
    X = full[:, cols]
    XtX = X.T @ X
    theta = np.linalg.solve(XtX, X.T @ y)
    resid = y - X @ theta
    rank = X.shape[1]
    if n <= rank:
        raise ValueError("no residual degrees of freedom for the fixed-effects fit")
    s2e = float(resid @ resid) / (n - rank)
    V_theta = s2e * np.linalg.inv(XtX)

    c = int(keep_u.sum() + keep_w.sum())
    T = np.zeros((c + g, c + g - 1))
    T[:c, :c] = np.eye(c)
    T[c : c + g - 1, c:] = np.eye(g - 1)
    T[c + g - 1, c:] = -1.0
    chi = T @ theta
    V_chi = T @ V_theta @ T.T
    kept_names = [nm for nm, k in zip(names, np.concatenate([keep_u, keep_w])) if k]
    labels = tuple(kept_names + [f"alpha[{a.area_id}]" for a in sample.areas])
    return FixedEffectsFit(
        chi=chi,
        V_chi=V_chi,
        sigma2_e=s2e,
        labels=labels,
        dropped=tuple(between_bad),
        area_ids=tuple(a.area_id for a in sample.areas),
        keep_u=keep_u,
        keep_w=keep_w,
        rank=rank,
    )


@dataclass(frozen=True)
class FixedPrediction:
    point: float
    lower: float
    upper: float
    half_width: float
    kind: FixedKind

    @property
    def interval(self):
        return (self.lower, self.upper)


def _zstar(area: AreaSample, ffit: FixedEffectsFit, xbar_w: np.ndarray) -> np.ndarray:
    v = np.zeros(len(ffit.area_ids))
    v[ffit.area_position(area.area_id)] = 1.0
    return np.concatenate([area.u[ffit.keep_u], xbar_w[ffit.keep_w], v])


def predict_fixed(
    area: AreaSample, ffit: FixedEffectsFit, kind=FixedKind.COMPOSITE, epsilon: float = 0.05
) -> FixedPrediction:
    """Composite or synthetic predictor of the area mean under fixed area effects."""
    kind = FixedKind(kind)
    z = normal_quantile(epsilon)
    if kind is FixedKind.COMPOSITE:
        k = area.k
        if area.n == area.N:
            p = area.ybar
            return FixedPrediction(p, p, p, 0.0, kind)
        _require_pop(area)
        zr = _zstar(area, ffit, area.xbar_w_rest if area.x_w.shape[1] else np.zeros(0))
        point = (1.0 - k) * area.ybar + k * float(zr @ ffit.chi)
        hw = z * k * np.sqrt(ffit.sigma2_e / (area.N - area.n) + zr @ ffit.V_chi @ zr)
    else:
        _require_pop(area)
        zb = _zstar(area, ffit, area.xbar_w_pop if area.x_w.shape[1] else np.zeros(0))
        point = float(zb @ ffit.chi)
        hw = z * np.sqrt(max(zb @ ffit.V_chi @ zb, 0.0))
    hw = float(hw)
    return FixedPrediction(point, point - hw, point + hw, hw, kind)
