"""Domain types, design construction and per-area sufficient statistics.

The nested error regression model for unit ``j`` of area ``i`` is

    y_ij = u_i' xi + x_ij' beta2 + alpha_i + e_ij

where ``u_i`` is the between-area design row (leading 1 for the intercept)
and ``x_ij`` holds the within-area covariates.  Everything downstream works
from :class:`SampleData`, which stores each sampled area together with its
population size and, when known, the population mean of the within-area
covariates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class DesignError(ValueError):
    """Inconsistent dimensions or empty areas in a design."""


@dataclass(frozen=True)
class ModelParams:
    xi: np.ndarray
    beta2: np.ndarray
    sigma2_alpha: float
    sigma2_e: float

    def __post_init__(self):
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float).reshape(-1))
        object.__setattr__(self, "beta2", np.asarray(self.beta2, dtype=float).reshape(-1))
        object.__setattr__(self, "sigma2_alpha", float(self.sigma2_alpha))
        object.__setattr__(self, "sigma2_e", float(self.sigma2_e))
        if self.sigma2_alpha < 0:
            raise ValueError("sigma2_alpha must be >= 0")
        if self.sigma2_e < 0:
            raise ValueError("sigma2_e must be >= 0")

    @property
    def beta(self) -> np.ndarray:
        """Stacked coefficient vector ``[xi, beta2]``."""
        return np.concatenate([self.xi, self.beta2])

    @property
    def omega(self) -> np.ndarray:
        """Full parameter vector ordered ``[xi, sigma2_alpha, beta2, sigma2_e]``."""
        return np.concatenate(
            [self.xi, [self.sigma2_alpha], self.beta2, [self.sigma2_e]]
        )


@dataclass(frozen=True)
class AreaPopulation:
    """All ``N_i`` units of one area.

    ``y`` may be ``None`` when the frame is only used for prediction.
    """

    area_id: str
    u: np.ndarray
    x_w: np.ndarray
    y: Optional[np.ndarray] = None

    def __post_init__(self):
        x_w = np.asarray(self.x_w, dtype=float)
        if x_w.ndim == 1:
            x_w = x_w.reshape(-1, 1) if x_w.size else x_w.reshape(0, 0)
        object.__setattr__(self, "x_w", x_w)
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        if x_w.shape[0] < 1:
            raise DesignError(f"area {self.area_id!r} has no unit records")
        if self.y is not None:
            y = np.asarray(self.y, dtype=float)
            if y.shape != (x_w.shape[0],):
                raise DesignError(f"area {self.area_id!r}: y length != unit count")
            object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return int(self.x_w.shape[0])

    @property
    def xbar_w(self) -> np.ndarray:
        return self.x_w.mean(axis=0)

    @property
    def ybar(self) -> float:
        return float(self.y.mean())


@dataclass(frozen=True)
class PopulationFrame:
    areas: tuple
    between_names: tuple = ()
    within_names: tuple = ()

    def __post_init__(self):
        areas = tuple(self.areas)
        object.__setattr__(self, "areas", areas)
        if not areas:
            raise DesignError("population frame has no areas")
        pu = {a.u.shape for a in areas}
        pw = {a.x_w.shape[1] for a in areas}
        if len(pu) != 1 or len(pw) != 1:
            raise DesignError("inconsistent covariate dimensions across areas")

    @property
    def g(self) -> int:
        return len(self.areas)

    @property
    def p_b(self) -> int:
        return self.areas[0].u.shape[0] - 1

    @property
    def p_w(self) -> int:
        return self.areas[0].x_w.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([a.N for a in self.areas], dtype=np.int64)

    def sample(self, indices: Sequence[np.ndarray]) -> "SampleData":
        """Restrict every area to the given unit indices.

        Population means of the within covariates are carried along so the
        result supports the full-information predictors.
        """
        if len(indices) != self.g:
            raise DesignError("need one index set per area")
        out = []
        for area, idx in zip(self.areas, indices):
            idx = np.asarray(idx, dtype=np.int64)
            if area.y is None:
                raise DesignError(f"area {area.area_id!r} has no responses")
            out.append(
                AreaSample(
                    area_id=area.area_id,
                    N=area.N,
                    u=area.u,
                    x_w=area.x_w[idx],
                    y=area.y[idx],
                    xbar_w_pop=area.xbar_w,
                )
            )
        return SampleData(tuple(out), self.between_names, self.within_names)


@dataclass(frozen=True)
class AreaSample:
    """Sampled units of one area plus what is known about the rest of it."""

    area_id: str
    N: int
    u: np.ndarray
    x_w: np.ndarray
    y: np.ndarray
    xbar_w_pop: Optional[np.ndarray] = None

    def __post_init__(self):
        x_w = np.asarray(self.x_w, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x_w.ndim == 1:
            x_w = x_w.reshape(-1, 1) if x_w.size else np.zeros((y.shape[0], 0))
        object.__setattr__(self, "x_w", x_w)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        object.__setattr__(self, "N", int(self.N))
        n = y.shape[0]
        if n < 1:
            raise DesignError(f"area {self.area_id!r} has no sampled units")
        if x_w.shape[0] != n:
            raise DesignError(f"area {self.area_id!r}: x_w rows != len(y)")
        if not 1 <= n <= self.N:
            raise DesignError(f"area {self.area_id!r}: need 1 <= n_i <= N_i")
        if self.xbar_w_pop is not None:
            xp = np.asarray(self.xbar_w_pop, dtype=float).reshape(-1)
            if xp.shape[0] != x_w.shape[1]:
                raise DesignError(f"area {self.area_id!r}: xbar_w_pop has wrong length")
            object.__setattr__(self, "xbar_w_pop", xp)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def k(self) -> float:
        """Non-sampled fraction ``(N_i - n_i) / N_i``."""
        return (self.N - self.n) / self.N

    @property
    def f(self) -> float:
        return 1.0 - self.k

    @property
    def ybar(self) -> float:
        return float(self.y.mean())

    @property
    def xbar_w_samp(self) -> np.ndarray:
        return self.x_w.mean(axis=0)

    @property
    def has_population_means(self) -> bool:
        return self.xbar_w_pop is not None

    @property
    def xbar_w_rest(self) -> np.ndarray:
        """Mean of the within covariates over the non-sampled units."""
        if self.xbar_w_pop is None:
            raise ValueError(f"area {self.area_id!r}: population means unknown")
        if self.n == self.N:
            # no non-sampled units; the value is multiplied by k_i = 0 anyway
            return self.xbar_w_pop.copy()
        return (self.N * self.xbar_w_pop - self.n * self.xbar_w_samp) / (
            self.N - self.n
        )

    @property
    def zbar_samp(self) -> np.ndarray:
        return np.concatenate([self.u, self.xbar_w_samp])

    @property
    def zbar_pop(self) -> np.ndarray:
        xp = self.xbar_w_pop if self.xbar_w_pop is not None else self.xbar_w_samp
        return np.concatenate([self.u, xp])

    @property
    def zbar_rest(self) -> np.ndarray:
        return np.concatenate([self.u, self.xbar_w_rest])

    def design(self) -> np.ndarray:
        """Unit-level design rows ``z_ij = [u_i, x_ij]``."""
        return np.hstack([np.broadcast_to(self.u, (self.n, self.u.size)), self.x_w])


@dataclass(frozen=True)
class SampleData:
    areas: tuple
    between_names: tuple = ()
    within_names: tuple = ()

    def __post_init__(self):
        areas = tuple(self.areas)
        object.__setattr__(self, "areas", areas)
        if not areas:
            raise DesignError("sample has no areas")
        if len({a.u.shape for a in areas}) != 1 or len({a.x_w.shape[1] for a in areas}) != 1:
            raise DesignError("inconsistent covariate dimensions across areas")

    def __len__(self):
        return len(self.areas)

    def __iter__(self):
        return iter(self.areas)

    @property
    def g(self) -> int:
        return len(self.areas)

    @property
    def n(self) -> int:
        return int(sum(a.n for a in self.areas))

    @property
    def p_b(self) -> int:
        return self.areas[0].u.shape[0] - 1

    @property
    def p_w(self) -> int:
        return self.areas[0].x_w.shape[1]

    @property
    def p(self) -> int:
        return self.p_b + 1 + self.p_w

    @property
    def column_names(self) -> list:
        between = list(self.between_names) or [f"b{j + 1}" for j in range(self.p_b)]
        within = list(self.within_names) or [f"w{j + 1}" for j in range(self.p_w)]
        return ["(Intercept)"] + between + within

    def stacked(self):
        """Return ``(area_index, Z, y)`` with all areas stacked."""
        idx = np.concatenate([np.full(a.n, i) for i, a in enumerate(self.areas)])
        Z = np.vstack([a.design() for a in self.areas])
        y = np.concatenate([a.y for a in self.areas])
        return idx, Z, y

    def shifted(self, c: float) -> "SampleData":
        """Copy with ``c`` added to every response."""
        return SampleData(
            tuple(
                AreaSample(a.area_id, a.N, a.u, a.x_w, a.y + c, a.xbar_w_pop)
                for a in self.areas
            ),
            self.between_names,
            self.within_names,
        )


def gamma(n_i, sigma2_alpha: float, sigma2_e: float):
    """Shrinkage factor ``n sigma2_alpha / (sigma2_e + n sigma2_alpha)``.

    Works elementwise on array ``n_i``.  Returns exactly 0 when
    ``sigma2_alpha == 0``.
    """
    if sigma2_alpha < 0:
        raise ValueError("sigma2_alpha must be >= 0")
    n_i = np.asarray(n_i, dtype=float)
    if np.any(n_i < 1):
        raise ValueError("n_i must be >= 1")
    if sigma2_alpha == 0:
        out = np.zeros_like(n_i)
    else:
        if sigma2_e <= 0:
            raise ValueError("sigma2_e must be > 0")
        s = n_i * sigma2_alpha
        out = s / (sigma2_e + s)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SuffStats:
    """Per-area reductions of a sample.

    ``Wzz``, ``Wzy`` and ``Wyy`` are within-area cross-products of the design
    and response centered at the area sample means.  ``gamma`` is filled only
    when a variance pair was supplied.
    """

    n: np.ndarray  # (g,)
    ybar: np.ndarray  # (g,)
    zbar: np.ndarray  # (g, p)
    Wzz: np.ndarray  # (g, p, p)
    Wzy: np.ndarray  # (g, p)
    Wyy: np.ndarray  # (g,)
    gamma: Optional[np.ndarray] = field(default=None)

    @property
    def g(self) -> int:
        return self.n.shape[0]

    @property
    def p(self) -> int:
        return self.zbar.shape[1]

    def shrinkage(self, sigma2_alpha: float, sigma2_e: float) -> np.ndarray:
        return np.asarray(gamma(self.n, sigma2_alpha, sigma2_e), dtype=float)


def sufficient_stats(sample: SampleData, sigma2_alpha=None, sigma2_e=None) -> SuffStats:
    g, p = sample.g, sample.p
    n = np.empty(g)
    ybar = np.empty(g)
    zbar = np.empty((g, p))
    Wzz = np.empty((g, p, p))
    Wzy = np.empty((g, p))
    Wyy = np.empty(g)
    pb1 = sample.p_b + 1
    for i, a in enumerate(sample.areas):
        n[i] = a.n
        ybar[i] = a.ybar
        xs = a.xbar_w_samp
        zbar[i, :pb1] = a.u
        zbar[i, pb1:] = xs
        # u_i is constant within the area so its centered columns vanish
        xc = a.x_w - xs
        yc = a.y - ybar[i]
        Wzz[i] = 0.0
        Wzz[i, pb1:, pb1:] = xc.T @ xc
        Wzy[i] = 0.0
        Wzy[i, pb1:] = xc.T @ yc
        Wyy[i] = yc @ yc
    gam = None
    if sigma2_alpha is not None:
        gam = np.asarray(gamma(n, sigma2_alpha, sigma2_e), dtype=float)
    return SuffStats(n, ybar, zbar, Wzz, Wzy, Wyy, gam)


def _group_means(area_index: np.ndarray, values: np.ndarray, g: int) -> np.ndarray:
    counts = np.bincount(area_index, minlength=g).astype(float)
    out = np.zeros((g, values.shape[1]))
    np.add.at(out, area_index, values)
    return out / counts[:, None]


def _encode_areas(area_ids):
    labels, index = np.unique(np.asarray(area_ids).astype(str), return_inverse=True)
    # keep first-appearance order instead of lexical order
    first = np.array([np.flatnonzero(index == k)[0] for k in range(len(labels))])
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return [str(labels[k]) for k in order], remap[index]


def _as_2d(x, n, name):
    if x is None:
        return np.zeros((n, 0))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[0] != n:
        raise DesignError(f"{name} has {x.shape[0]} rows, expected {n}")
    return x


def build_design(
    area_ids,
    x_within=None,
    x_between=None,
    y=None,
    center_within: bool = False,
    add_contextual_means: bool = False,
    within_names: Sequence[str] = (),
    between_names: Sequence[str] = (),
) -> PopulationFrame:
    """Assemble a :class:`PopulationFrame` from unit-level rows.

    Parameters
    ----------
    area_ids : array-like, shape (N,)
        Area label of each unit.
    x_within : array-like, shape (N, q), optional
        Covariates varying within areas.
    x_between : array-like, shape (N, r), optional
        Area-level covariates; must be constant within each area.
    y : array-like, shape (N,), optional
    center_within : bool
        Replace each within covariate by its deviation from the population
        area mean.
    add_contextual_means : bool
        Append the population area means of the raw within covariates to the
        between-area row.
    """
    area_ids = np.asarray(area_ids)
    N = area_ids.shape[0]
    if N == 0:
        raise DesignError("no unit records")
    labels, idx = _encode_areas(area_ids)
    g = len(labels)
    xw = _as_2d(x_within, N, "x_within")
    xb = _as_2d(x_between, N, "x_between")
    yv = None if y is None else np.asarray(y, dtype=float).reshape(-1)
    if yv is not None and yv.shape[0] != N:
        raise DesignError("y length does not match area_ids")

    wnames = list(within_names) or [f"x{j + 1}" for j in range(xw.shape[1])]
    bnames = list(between_names) or [f"b{j + 1}" for j in range(xb.shape[1])]
    if len(wnames) != xw.shape[1] or len(bnames) != xb.shape[1]:
        raise DesignError("covariate names do not match column counts")

    xw_means = _group_means(idx, xw, g) if xw.shape[1] else np.zeros((g, 0))
    xb_means = _group_means(idx, xb, g) if xb.shape[1] else np.zeros((g, 0))
    if xb.shape[1] and not np.allclose(xb, xb_means[idx], rtol=1e-12, atol=1e-12):
        raise DesignError("between-area covariates vary within an area")

    u_rows = [np.ones((g, 1)), xb_means]
    if add_contextual_means:
        u_rows.append(xw_means)
        bnames = bnames + [f"{nm}_avg" for nm in wnames]
    U = np.hstack(u_rows)
    if center_within:
        xw = xw - xw_means[idx]
        wnames = [f"{nm}_cent" for nm in wnames]

    areas = []
    for i, lab in enumerate(labels):
        sel = idx == i
        areas.append(
            AreaPopulation(
                area_id=lab,
                u=U[i],
                x_w=xw[sel],
                y=None if yv is None else yv[sel],
            )
        )
    return PopulationFrame(tuple(areas), tuple(bnames), tuple(wnames))


def build_sample(
    area_ids,
    y,
    area_sizes: dict,
    x_within=None,
    x_between=None,
    population_means: Optional[dict] = None,
    center_within: bool = False,
    add_contextual_means: bool = False,
    within_names: Sequence[str] = (),
    between_names: Sequence[str] = (),
) -> SampleData:
    """Assemble :class:`SampleData` when only the sample is held at unit level.

    ``area_sizes`` maps area id to ``N_i``; ``population_means`` maps area id
    to the population means of the raw within covariates.  Centering and
    contextual means need the population means.
    """
    area_ids = np.asarray(area_ids)
    n = area_ids.shape[0]
    labels, idx = _encode_areas(area_ids)
    g = len(labels)
    xw = _as_2d(x_within, n, "x_within")
    xb = _as_2d(x_between, n, "x_between")
    yv = np.asarray(y, dtype=float).reshape(-1)
    if yv.shape[0] != n:
        raise DesignError("y length does not match area_ids")
    q = xw.shape[1]
    if (center_within or add_contextual_means) and population_means is None:
        raise DesignError("centering and contextual means need population area means")

    wnames = list(within_names) or [f"x{j + 1}" for j in range(q)]
    bnames = list(between_names) or [f"b{j + 1}" for j in range(xb.shape[1])]
    if add_contextual_means:
        bnames = bnames + [f"{nm}_avg" for nm in wnames]
    if center_within:
        wnames_out = [f"{nm}_cent" for nm in wnames]
    else:
        wnames_out = wnames

    xb_means = _group_means(idx, xb, g) if xb.shape[1] else np.zeros((g, 0))
    if xb.shape[1] and not np.allclose(xb, xb_means[idx], rtol=1e-12, atol=1e-12):
        raise DesignError("between-area covariates vary within an area")

    areas = []
    for i, lab in enumerate(labels):
        if lab not in area_sizes:
            raise DesignError(f"no population size for area {lab!r}")
        sel = idx == i
        pm = None
        if population_means is not None:
            if lab not in population_means:
                raise DesignError(f"no population means for area {lab!r}")
            pm = np.asarray(population_means[lab], dtype=float).reshape(-1)
            if pm.shape[0] != q:
                raise DesignError(f"area {lab!r}: population means have wrong length")
        u = [1.0, *xb_means[i]]
        if add_contextual_means:
            u.extend(pm)
        xwi = xw[sel]
        xpop = pm
        if center_within:
            xwi = xwi - pm
            xpop = np.zeros(q)
        areas.append(
            AreaSample(
                area_id=lab,
                N=int(area_sizes[lab]),
                u=np.asarray(u),
                x_w=xwi,
                y=yv[sel],
                xbar_w_pop=xpop,
            )
        )
    return SampleData(tuple(areas), tuple(bnames), tuple(wnames_out))
