"""Monte Carlo harness for model-based and design-based evaluation.

Model-based runs redraw the random effects and errors (and optionally the
covariates) for every replication, then sample.  Design-based runs freeze one
population and redraw only the sample.  Each replication draws from its own
Philox stream keyed by ``(seed, replication index)``, so results do not depend
on the number of worker processes.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Optional

import numpy as np

from .core import PopulationFrame, build_design
from .fit import ConvergenceError, MomentSource, asymptotic_covariance, fit as fit_model
from .predict import (
    FixedKind,
    eblup_alpha,
    fit_fixed_effects,
    mse_lw,
    mse_pr,
    normal_quantile,
    predict_clp,
    predict_fixed,
    predict_sam,
)

log = logging.getLogger(__name__)

MIX_WEIGHT = 0.3
MIX_LOC = 0.5
MIX_MU = -MIX_WEIGHT * MIX_LOC / (1.0 - MIX_WEIGHT)
# half-width slack when scoring coverage, so zero-width intervals at the
# truth are not lost to rounding
COVER_RTOL = 1e-10

_STREAM_DESIGN = 0
_STREAM_REPLICATION = 1


class Dist(str, enum.Enum):
    NORMAL = "NORMAL"
    MIXTURE = "MIXTURE"


class Mode(str, enum.Enum):
    MODEL_BASED = "MODEL_BASED"
    DESIGN_BASED = "DESIGN_BASED"
    DESIGN_BASED_FIXED_EFFECTS = "DESIGN_BASED_FIXED_EFFECTS"


class SamplingRuleError(ValueError):
    pass


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the given seed and key path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


# distributions --------------------------------------------------------------


def mixture_variance_bound() -> float:
    """Smallest admissible target variance of the two-component mixture."""
    return MIX_WEIGHT * (1.0 + MIX_LOC**2) + (1.0 - MIX_WEIGHT) * MIX_MU**2


def mixture_scale2(variance: float) -> float:
    """Variance of the second mixture component for a given total variance."""
    w = 1.0 - MIX_WEIGHT
    return (variance - MIX_WEIGHT * (1.0 + MIX_LOC**2) - w * MIX_MU**2) / w


def mixture_sample(rng: np.random.Generator, variance: float, n: int) -> np.ndarray:
    """Draws from ``0.3 N(0.5, 1) + 0.7 N(mu, s2)`` with mean 0 and the given variance."""
    bound = mixture_variance_bound()
    if not variance > bound:
        raise ValueError(f"mixture needs variance > {bound:.6g}, got {variance}")
    s = math.sqrt(mixture_scale2(variance))
    first = rng.random(n) < MIX_WEIGHT
    z = rng.standard_normal(n)
    return np.where(first, MIX_LOC + z, MIX_MU + s * z)


def draw(rng: np.random.Generator, dist: Dist, variance: float, n: int) -> np.ndarray:
    if variance == 0:
        return np.zeros(n)
    if Dist(dist) is Dist.NORMAL:
        return math.sqrt(variance) * rng.standard_normal(n)
    return mixture_sample(rng, variance, n)


# sampling -------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingRule:
    """Threshold rule mapping an area size to its sample size.

    Areas below ``half_from`` get ``small_n`` units, areas below
    ``quarter_from`` get ``half_fraction * N`` and larger areas get
    ``quarter_fraction * N``.  ``rounding`` is ``"half_even"`` or ``"floor"``.
    """

    small_n: int = 25
    half_from: int = 50
    quarter_from: int = 100
    half_fraction: float = 0.5
    quarter_fraction: float = 0.25
    rounding: str = "half_even"

    def __post_init__(self):
        if self.rounding not in ("half_even", "floor"):
            raise SamplingRuleError(f"unknown rounding {self.rounding!r}")
        if not self.half_from <= self.quarter_from:
            raise SamplingRuleError("thresholds must satisfy half_from <= quarter_from")

    def _round(self, x: float) -> int:
        return int(round(x)) if self.rounding == "half_even" else int(math.floor(x))

    def __call__(self, N: int) -> int:
        N = int(N)
        if N < self.half_from:
            n = self.small_n
        elif N < self.quarter_from:
            n = self._round(self.half_fraction * N)
        else:
            n = self._round(self.quarter_fraction * N)
        if not 1 <= n <= N:
            raise SamplingRuleError(f"rule gives n={n} for N={N}")
        return n


def srswor(sizes, rule, rng: np.random.Generator) -> list:
    """Independent simple random samples without replacement, one per area."""
    out = []
    for N in sizes:
        if callable(rule):
            n = rule(int(N))
        elif int(N) in rule:
            n = int(rule[int(N)])
        else:
            raise SamplingRuleError(f"sampling rule has no entry for N={int(N)}")
        if not 1 <= n <= N:
            raise SamplingRuleError(f"rule gives n={n} for N={int(N)}")
        if n == N:
            out.append(np.arange(N))
        else:
            out.append(np.sort(rng.choice(int(N), size=n, replace=False)))
    return out


def _enum(cls, value):
    return value if isinstance(value, cls) else cls(str(value).upper())


# configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    g: int = 15
    area_sizes: Optional[tuple] = None
    first_area_size: int = 40
    size_low: int = 40
    size_high: int = 400
    beta: tuple = (5.0, 7.0, 3.0)
    sigma2_alpha: float = 4.0
    sigma2_e: float = 100.0
    dist_alpha: Dist = Dist.NORMAL
    dist_e: Dist = Dist.NORMAL
    sampling_rule: SamplingRule = field(default_factory=SamplingRule)
    replications: int = 1000
    epsilon: float = 0.05
    seed: int = 0
    mode: Mode = Mode.MODEL_BASED
    method: str = "REML"
    redraw_covariates: bool = False
    clp_truth: str = "mean"
    pr_source: MomentSource = MomentSource.NORMAL_THEORY
    # covariate generator x = x_loc + x_between * u_i + x_within * v_ij
    x_loc: float = 3.0
    x_between: float = 2.0
    x_within: float = 4.0
    # design-based runs on an ingested population
    population_csv: Optional[str] = None
    response: str = "y"
    within: tuple = ()
    between: tuple = ()
    center: bool = True
    contextual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dist_alpha", _enum(Dist, self.dist_alpha))
        object.__setattr__(self, "dist_e", _enum(Dist, self.dist_e))
        object.__setattr__(self, "mode", _enum(Mode, self.mode))
        if self.area_sizes is not None:
            sizes = tuple(int(v) for v in self.area_sizes)
            object.__setattr__(self, "area_sizes", sizes)
            object.__setattr__(self, "g", len(sizes))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "pr_source", _enum(MomentSource, self.pr_source))
        object.__setattr__(self, "method", str(getattr(self.method, "value", self.method)).upper())
        if self.method not in ("ML", "REML"):
            raise ValueError("method must be ML or REML")
        if self.clp_truth not in ("mean", "eta"):
            raise ValueError("clp_truth must be 'mean' or 'eta'")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.sigma2_alpha < 0 or self.sigma2_e < 0:
            raise ValueError("variances must be >= 0")
        bound = mixture_variance_bound()
        for d, v, nm in ((self.dist_alpha, self.sigma2_alpha, "alpha"), (self.dist_e, self.sigma2_e, "e")):
            if d is Dist.MIXTURE and not v > bound:
                raise ValueError(f"mixture for {nm} needs variance > {bound:.6g}")
        if self.population_csv is None and self.g < 2:
            raise ValueError("need g >= 2")


# population generation ---------------------------------------------------------


@dataclass(frozen=True)
class PopulationTruth:
    ybar: np.ndarray
    eta: np.ndarray
    alpha: np.ndarray
    ebar: np.ndarray


def area_sizes(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    if config.area_sizes is not None:
        return np.asarray(config.area_sizes, dtype=np.int64)
    rest = np.floor(rng.uniform(config.size_low, config.size_high, config.g - 1)).astype(np.int64)
    # areas are labelled in order of increasing size
    return np.concatenate([[config.first_area_size], np.sort(rest)])


def generate_design(config: SimConfig, rng: np.random.Generator, sizes=None) -> PopulationFrame:
    """Area sizes and covariates, with centered within and contextual-mean columns."""
    if sizes is None:
        sizes = area_sizes(config, rng)
    g = len(sizes)
    u = rng.standard_normal(g)
    area = np.repeat(np.arange(g), sizes)
    x = config.x_loc + config.x_between * u[area] + config.x_within * rng.standard_normal(area.size)
    ids = [f"{i + 1}" for i in range(g)]
    return build_design(
        np.asarray(ids)[area],
        x_within=x,
        center_within=True,
        add_contextual_means=True,
        within_names=("x",),
    )


def draw_population(design: PopulationFrame, config: SimConfig, rng: np.random.Generator):
    """Fill responses on a fixed design; returns ``(frame, truth)``."""
    beta = np.asarray(config.beta)
    pb1 = design.p_b + 1
    if beta.size != pb1 + design.p_w:
        raise ValueError(f"beta has {beta.size} entries, design needs {pb1 + design.p_w}")
    xi, b2 = beta[:pb1], beta[pb1:]
    alpha = draw(rng, config.dist_alpha, config.sigma2_alpha, design.g)
    e_all = draw(rng, config.dist_e, config.sigma2_e, int(design.sizes.sum()))
    areas, ybar, eta, ebar = [], [], [], []
    start = 0
    for i, a in enumerate(design.areas):
        e = e_all[start : start + a.N]
        start += a.N
        mean_part = a.u @ xi + a.x_w @ b2
        y = mean_part + alpha[i] + e
        areas.append(replace(a, y=y))
        ybar.append(y.mean())
        eta.append(a.u @ xi + a.xbar_w @ b2 + alpha[i])
        ebar.append(e.mean())
    frame = PopulationFrame(tuple(areas), design.between_names, design.within_names)
    return frame, PopulationTruth(np.array(ybar), np.array(eta), alpha, np.array(ebar))


def generate_population(config: SimConfig, rng: np.random.Generator):
    """Sizes, covariates and responses from one stream; returns ``(frame, truth)``."""
    return draw_population(generate_design(config, rng), config, rng)


def truth_from_frame(frame: PopulationFrame) -> PopulationTruth:
    ybar = np.array([a.ybar for a in frame.areas])
    nan = np.full(frame.g, np.nan)
    return PopulationTruth(ybar, nan, nan, nan)


# replication pipelines ---------------------------------------------------------

MIXED_METHODS = ("sam_lw", "clp_lw", "clp_pr")
FIXED_METHODS = ("com_fixed", "syn_fixed")


@dataclass
class _Rep:
    est: dict
    mse: dict
    n: np.ndarray


def _mixed_rep(frame: PopulationFrame, config: SimConfig, rng) -> _Rep:
    sample = frame.sample(srswor(frame.sizes, config.sampling_rule, rng))
    f = fit_model(sample, config.method)
    cov = asymptotic_covariance(f, sample, config.pr_source)
    g = sample.g
    sam, clp, lw, pr = (np.empty(g) for _ in range(4))
    for i, a in enumerate(sample.areas):
        sam[i] = predict_sam(a, f)
        clp[i] = predict_clp(a, f)
        lw[i] = mse_lw(a, f)
        pr[i] = mse_pr(a, f, cov)
    n = np.array([a.n for a in sample.areas])
    return _Rep({"sam_lw": sam, "clp_lw": clp, "clp_pr": clp}, {"sam_lw": lw, "clp_lw": lw, "clp_pr": pr}, n)


def _fixed_rep(frame: PopulationFrame, config: SimConfig, rng) -> _Rep:
    sample = frame.sample(srswor(frame.sizes, config.sampling_rule, rng))
    ff = fit_fixed_effects(sample, warn=False)
    z2 = normal_quantile(config.epsilon) ** 2
    g = sample.g
    est = {m: np.empty(g) for m in FIXED_METHODS}
    mse = {m: np.empty(g) for m in FIXED_METHODS}
    for i, a in enumerate(sample.areas):
        for m, kind in (("com_fixed", FixedKind.COMPOSITE), ("syn_fixed", FixedKind.SYNTHETIC)):
            pf = predict_fixed(a, ff, kind, config.epsilon)
            est[m][i] = pf.point
            mse[m][i] = pf.half_width**2 / z2
    return _Rep(est, mse, np.array([a.n for a in sample.areas]))


_FAILURES = (ConvergenceError, np.linalg.LinAlgError, ValueError, FloatingPointError)


def _model_based_task(r: int, design: PopulationFrame, config: SimConfig):
    rng = stream(config.seed, _STREAM_REPLICATION, r)
    if config.redraw_covariates:
        design = generate_design(config, rng, sizes=design.sizes)
    frame, truth = draw_population(design, config, rng)
    try:
        rep = _mixed_rep(frame, config, rng)
    except _FAILURES as exc:
        log.debug("replication %d failed: %s", r, exc)
        return None
    return rep, truth.ybar, truth.eta


def _design_based_task(r: int, frame: PopulationFrame, config: SimConfig, fixed: bool):
    rng = stream(config.seed, _STREAM_REPLICATION, r)
    try:
        return (_fixed_rep if fixed else _mixed_rep)(frame, config, rng)
    except _FAILURES as exc:
        log.debug("replication %d failed: %s", r, exc)
        return None


def _map(task, R: int, workers: int):
    if workers <= 1:
        return [task(r) for r in range(R)]
    chunk = max(1, R // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(task, range(R), chunksize=chunk))


# reporting ---------------------------------------------------------------------


@dataclass(frozen=True)
class MethodStats:
    cvge: np.ndarray
    alen: np.ndarray
    rmse: np.ndarray
    rlen: np.ndarray
    rel_bias: np.ndarray
    mc_se: np.ndarray
    mean_mse: np.ndarray
    hits: np.ndarray
    errors: np.ndarray = field(repr=False)
    cvge_eta: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SimReport:
    area_ids: tuple
    N: np.ndarray
    n: np.ndarray
    std_eblup: Optional[np.ndarray]
    methods: dict
    replications: int
    completed: int
    failures: int
    mode: Mode
    epsilon: float

    @property
    def method_names(self):
        return tuple(self.methods)

    def table_header(self):
        cols = ["area", "N_i", "n_i", "std_eblup"]
        for m in self.methods:
            cols += [f"cvge_{m}", f"rlen_{m}"]
        return cols

    def table_rows(self):
        rows = []
        for i, aid in enumerate(self.area_ids):
            se = np.nan if self.std_eblup is None else self.std_eblup[i]
            row = [aid, int(self.N[i]), int(self.n[i]), se]
            for st in self.methods.values():
                row += [st.cvge[i], st.rlen[i]]
            rows.append(row)
        return rows

    def long_header(self):
        return ["area", "method", "cvge", "cvge_eta", "alen", "rmse_s", "rlen", "rel_bias", "mc_se_coverage", "mean_mse"]

    def long_rows(self):
        rows = []
        for i, aid in enumerate(self.area_ids):
            for m, st in self.methods.items():
                ce = np.nan if st.cvge_eta is None else st.cvge_eta[i]
                rows.append([aid, m, st.cvge[i], ce, st.alen[i], st.rmse[i], st.rlen[i], st.rel_bias[i], st.mc_se[i], st.mean_mse[i]])
        return rows


def _covered(est, mse, truth, z):
    h = z * np.sqrt(mse)
    slack = COVER_RTOL * np.maximum(1.0, np.abs(truth))
    return np.abs(est - truth) <= h + slack


def _stats(est, mse, truth, z, truth_eta=None) -> MethodStats:
    R = est.shape[0]
    hits = _covered(est, mse, truth, z).sum(axis=0)
    cvge = hits / R
    alen = np.sqrt(mse).mean(axis=0)
    err = est - truth
    rmse = np.sqrt((err**2).mean(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        rlen = np.where(rmse > 0, np.abs(alen - rmse) / rmse, np.where(alen > 0, np.inf, 0.0))
        rel_bias = err.mean(axis=0) / np.abs(truth).mean(axis=0)
    mc_se = np.sqrt(cvge * (1 - cvge) / R)
    cvge_eta = None
    if truth_eta is not None and np.all(np.isfinite(truth_eta)):
        cvge_eta = _covered(est, mse, truth_eta, z).mean(axis=0)
    return MethodStats(cvge, alen, rmse, rlen, rel_bias, mc_se, mse.mean(axis=0), hits, err, cvge_eta)


def _aggregate(results, methods, truth_mean, truth_eta, config, frame, std_eblup, mode) -> SimReport:
    ok = [r for r in results if r is not None]
    failures = len(results) - len(ok)
    if not ok:
        raise RuntimeError("every replication failed")
    z = normal_quantile(config.epsilon)
    out = {}
    for m in methods:
        est = np.array([r.est[m] for r in ok])
        mse = np.array([r.mse[m] for r in ok])
        if m.startswith("clp") and config.clp_truth == "eta":
            out[m] = _stats(est, mse, truth_eta, z, truth_mean)
        else:
            eta = truth_eta if m.startswith("clp") else None
            out[m] = _stats(est, mse, truth_mean, z, eta)
    return SimReport(
        area_ids=tuple(a.area_id for a in frame.areas),
        N=frame.sizes,
        n=ok[0].n,
        std_eblup=std_eblup,
        methods=out,
        replications=len(results),
        completed=len(ok),
        failures=failures,
        mode=mode,
        epsilon=config.epsilon,
    )


def run_model_based(config: SimConfig, workers: int = 1) -> SimReport:
    design = generate_design(config, stream(config.seed, _STREAM_DESIGN))
    task = partial(_model_based_task, design=design, config=config)
    raw = _map(task, config.replications, workers)
    reps = [None if r is None else r[0] for r in raw]
    # truths change with every replication; align them with the kept reps
    kept = [r for r in raw if r is not None]
    if not kept:
        raise RuntimeError("every replication failed")
    tm = np.array([r[1] for r in kept])
    te = np.array([r[2] for r in kept])
    return _aggregate(reps, MIXED_METHODS, tm, te, config, design, None, Mode.MODEL_BASED)


def population_std_eblups(frame: PopulationFrame, method="REML") -> np.ndarray:
    """``alpha_hat_i / sigma_alpha_hat`` from a fit to the whole population."""
    full = frame.sample([np.arange(a.N) for a in frame.areas])
    f = fit_model(full, method)
    sa = math.sqrt(f.params.sigma2_alpha)
    al = np.array([eblup_alpha(a, f) for a in full.areas])
    return al / sa if sa > 0 else np.zeros_like(al)


def design_population(config: SimConfig):
    """The frozen population of a design-based run: ``(frame, truth)``."""
    if config.population_csv is not None:
        from .io import load_population

        frame = load_population(
            config.population_csv,
            response=config.response,
            within=config.within or None,
            between=config.between or None,
            center=config.center,
            contextual=config.contextual,
        )
        return frame, truth_from_frame(frame)
    return generate_population(config, stream(config.seed, _STREAM_DESIGN))


def run_design_based(config: SimConfig, population=None, workers: int = 1) -> SimReport:
    """Design-based run with the mixed-model predictors.

    ``population`` is a ``(frame, truth)`` pair or a bare frame; when omitted
    it is generated (or ingested) from ``config``.
    """
    return _run_design(config, population, workers, fixed=False)


def run_design_based_fixed(population, config: SimConfig, workers: int = 1) -> SimReport:
    """Design-based run with fixed area effects (composite and synthetic)."""
    return _run_design(config, population, workers, fixed=True)


def _run_design(config, population, workers, fixed):
    if population is None:
        frame, truth = design_population(config)
    elif isinstance(population, PopulationFrame):
        frame, truth = population, truth_from_frame(population)
    else:
        frame, truth = population
    std = population_std_eblups(frame, config.method)
    if fixed and frame.p_b:
        # area-level columns are always spanned by a full set of area effects
        log.warning("fixed-effects runs drop between-area columns: %s", list(frame.between_names))
    task = partial(_design_based_task, frame=frame, config=config, fixed=fixed)
    reps = _map(task, config.replications, workers)
    R_ok = sum(r is not None for r in reps)
    tm = np.tile(truth.ybar, (R_ok, 1))
    te = np.tile(truth.eta, (R_ok, 1))
    methods = FIXED_METHODS if fixed else MIXED_METHODS
    mode = Mode.DESIGN_BASED_FIXED_EFFECTS if fixed else Mode.DESIGN_BASED
    return _aggregate(reps, methods, tm, te, config, frame, std, mode)


def run(config: SimConfig, workers: int = 1, population=None) -> SimReport:
    if config.mode is Mode.MODEL_BASED:
        return run_model_based(config, workers)
    if config.mode is Mode.DESIGN_BASED:
        return run_design_based(config, population, workers)
    return run_design_based_fixed(population, config, workers)


# presets -----------------------------------------------------------------------

# area sizes of the reference settings
TABLE1_SIZES = (40, 51, 82, 86, 100, 110, 113, 120, 122, 135, 141, 147, 150, 152, 175)
TABLE2_SIZES = (40, 45, 58, 65, 81, 85, 103, 109, 115, 150, 151, 162, 163, 180, 193)
TABLE3_SIZES = (
    40, 40, 43, 50, 61, 72, 74, 79, 81, 88, 89, 92, 96, 101, 105,
    113, 127, 129, 131, 138, 152, 162, 169, 170, 173, 177, 186, 190, 197, 199,
)
TABLE4_SIZES = (
    40, 44, 54, 58, 68, 80, 80, 91, 95, 96, 101, 104, 109, 109, 111,
    112, 117, 119, 123, 136, 137, 147, 159, 189, 190, 194, 196, 199, 199, 200,
)

_RULE20 = SamplingRule(small_n=20)

PRESETS = {
    "table1": dict(area_sizes=TABLE1_SIZES, sigma2_alpha=4.0, sigma2_e=100.0, sampling_rule=_RULE20),
    "table2": dict(
        area_sizes=TABLE2_SIZES, sigma2_alpha=64.0, sigma2_e=100.0, dist_alpha=Dist.MIXTURE, sampling_rule=_RULE20
    ),
    "table3": dict(
        area_sizes=TABLE3_SIZES, sigma2_alpha=4.0, sigma2_e=100.0, mode=Mode.DESIGN_BASED, sampling_rule=_RULE20
    ),
    "table4": dict(
        area_sizes=TABLE4_SIZES,
        sigma2_alpha=4.0,
        sigma2_e=100.0,
        dist_alpha=Dist.MIXTURE,
        mode=Mode.DESIGN_BASED,
        sampling_rule=_RULE20,
    ),
    "milk-protocol": dict(
        mode=Mode.DESIGN_BASED,
        sampling_rule=_RULE20,
        response="MILKPROD",
        within=("FOODTOT", "PERSLT18", "FINCBEFX"),
        center=True,
        contextual=True,
    ),
}


def preset(name: str, **overrides) -> SimConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    base.update(overrides)
    return SimConfig(**base)
