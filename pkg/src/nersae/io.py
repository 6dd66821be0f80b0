"""CSV and config-file input/output.

File formats
------------
population CSV
    ``area,y,<covariate columns>``, one row per population unit.
sample CSV
    Same columns plus an optional ``sampled`` flag (0/1).  With the flag the
    file is a full population and the flagged rows are the sample.
area-means CSV
    ``area,N_i,<xbar columns>``, the area sizes and the population means of
    the raw within-area covariates.

Every reader reports schema violations with the offending line number.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import DesignError, PopulationFrame, SampleData, build_design, build_sample

AREA = "area"
SIZE = "N_i"
FLAG = "sampled"


class SchemaError(ValueError):
    """Malformed input file; ``line`` is 1-based (the header is line 1)."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line else self.path
        super().__init__(f"{where}: {message}")


@dataclasses.dataclass(frozen=True)
class Table:
    path: str
    header: tuple
    rows: tuple  # tuples of raw strings
    lines: tuple  # file line of each row

    def column(self, name) -> list:
        j = self.header.index(name)
        return [r[j] for r in self.rows]

    def numeric(self, name) -> np.ndarray:
        j = self.header.index(name)
        out = np.empty(len(self.rows))
        for k, (r, ln) in enumerate(zip(self.rows, self.lines)):
            out[k] = _number(r[j], self.path, ln, name)
        return out

    def numeric_block(self, names) -> np.ndarray:
        if not names:
            return np.zeros((len(self.rows), 0))
        return np.column_stack([self.numeric(nm) for nm in names])


def _number(text, path, line, column) -> float:
    try:
        v = float(text)
    except ValueError:
        raise SchemaError(path, line, f"column {column!r}: {text!r} is not a number") from None
    if not math.isfinite(v):
        raise SchemaError(path, line, f"column {column!r}: non-finite value {text!r}")
    return v


def read_table(path, required: Sequence[str] = ()) -> Table:
    """Read a headed UTF-8 CSV and check required columns and row widths."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(path, 1, "empty file, header required") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise SchemaError(path, 1, "duplicate column names")
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(path, 1, f"missing required columns {missing}")
        rows, lines = [], []
        for row in reader:
            ln = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(path, ln, f"expected {len(header)} fields, found {len(row)}")
            rows.append(tuple(c.strip() for c in row))
            lines.append(ln)
    if not rows:
        raise SchemaError(path, 2, "no data rows")
    return Table(str(path), tuple(header), tuple(rows), tuple(lines))


def _covariates(table: Table, response, within, between, exclude=()):
    skip = {AREA, response, FLAG, *exclude}
    between = list(between or [])
    if within is None:
        within = [c for c in table.header if c not in skip and c not in between]
    within = list(within)
    for c in within + between:
        if c not in table.header:
            raise SchemaError(table.path, 1, f"unknown covariate column {c!r}")
    return within, between


def _flags(table: Table) -> np.ndarray:
    out = np.empty(len(table.rows), dtype=bool)
    for k, (v, ln) in enumerate(zip(table.column(FLAG), table.lines)):
        if v not in ("0", "1"):
            raise SchemaError(table.path, ln, f"column {FLAG!r} must be 0 or 1, got {v!r}")
        out[k] = v == "1"
    return out


def load_population(
    path,
    response: str = "y",
    within: Optional[Sequence[str]] = None,
    between: Optional[Sequence[str]] = None,
    center: bool = False,
    contextual: bool = False,
) -> PopulationFrame:
    """Read a unit-level population file into a :class:`PopulationFrame`."""
    t = read_table(path, [AREA, response])
    w, b = _covariates(t, response, within, between)
    try:
        return build_design(
            t.column(AREA),
            x_within=t.numeric_block(w),
            x_between=t.numeric_block(b),
            y=t.numeric(response),
            center_within=center,
            add_contextual_means=contextual,
            within_names=w,
            between_names=b,
        )
    except DesignError as exc:
        raise SchemaError(path, None, str(exc)) from None


@dataclasses.dataclass(frozen=True)
class AreaMeans:
    sizes: dict
    means: Optional[dict]  # None when the file carries sizes only
    columns: tuple


def load_area_means(path, columns: Optional[Sequence[str]] = None) -> AreaMeans:
    t = read_table(path, [AREA, SIZE])
    cols = [c for c in t.header if c not in (AREA, SIZE)] if columns is None else list(columns)
    missing = [c for c in cols if c not in t.header]
    # a file with sizes only is allowed; a partial set of means is not
    if missing and len(missing) != len(cols):
        raise SchemaError(path, 1, f"missing area-mean columns {missing}")
    has_means = bool(cols) and not missing
    sizes, means = {}, {}
    for r, ln in zip(t.rows, t.lines):
        d = dict(zip(t.header, r))
        a = d[AREA]
        if a in sizes:
            raise SchemaError(path, ln, f"duplicate area {a!r}")
        N = _number(d[SIZE], path, ln, SIZE)
        if N < 1 or N != int(N):
            raise SchemaError(path, ln, f"{SIZE} must be a positive integer, got {d[SIZE]!r}")
        sizes[a] = int(N)
        if has_means:
            means[a] = np.array([_number(d[c], path, ln, c) for c in cols])
    return AreaMeans(sizes, means if has_means else None, tuple(cols) if has_means else ())


def load_sample(
    path,
    area_means=None,
    response: str = "y",
    within: Optional[Sequence[str]] = None,
    between: Optional[Sequence[str]] = None,
    center: bool = False,
    contextual: bool = False,
    require_sizes: bool = True,
) -> SampleData:
    """Read a sample file into :class:`SampleData`.

    Area sizes and covariate means come from the ``sampled`` flag (full
    population in the file) or from the area-means file.  Without either,
    ``require_sizes=False`` treats each area as fully enumerated, which is
    only meaningful for fitting.
    """
    t = read_table(path, [AREA, response])
    w, b = _covariates(t, response, within, between)
    ids = np.asarray(t.column(AREA))
    y = t.numeric(response)
    xw = t.numeric_block(w)
    xb = t.numeric_block(b)

    if FLAG in t.header:
        if area_means is not None:
            raise SchemaError(path, 1, f"column {FLAG!r} and an area-means file are mutually exclusive")
        flag = _flags(t)
        labels = list(dict.fromkeys(ids.tolist()))
        sizes = {a: int(np.sum(ids == a)) for a in labels}
        means = {a: xw[ids == a].mean(axis=0) for a in labels}
        unsampled = [a for a in labels if not flag[ids == a].any()]
        if unsampled:
            raise SchemaError(path, None, f"areas with no sampled unit: {unsampled}")
        ids, y, xw, xb = ids[flag], y[flag], xw[flag], xb[flag]
    elif area_means is not None:
        am = area_means if isinstance(area_means, AreaMeans) else load_area_means(area_means, w)
        sizes, means = am.sizes, am.means
    else:
        if require_sizes:
            raise SchemaError(path, None, "area sizes unknown: supply an area-means file or a 'sampled' column")
        labels = list(dict.fromkeys(ids.tolist()))
        sizes = {a: int(np.sum(ids == a)) for a in labels}
        means = None
    try:
        return build_sample(
            ids,
            y,
            sizes,
            x_within=xw,
            x_between=xb,
            population_means=means,
            center_within=center,
            add_contextual_means=contextual,
            within_names=w,
            between_names=b,
        )
    except DesignError as exc:
        raise SchemaError(path, None, str(exc)) from None


# writers -------------------------------------------------------------------


def format_value(v, digits: int = 6) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        s = f"{v:.{digits}g}"
        return "0" if s == "-0" else s
    return str(v)


def write_csv(path, header, rows, digits: int = 6) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format_value(v, digits) for v in r])
    return path


def write_key_values(path, items) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for k, v in items:
            fh.write(f"{k} = {format_value(v, 17)}\n")
    return path


# simulation config -----------------------------------------------------------

_TUPLE_FIELDS = {"area_sizes", "beta", "within", "between"}


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(name, text, ftype):
    text = text.strip()
    if name in _TUPLE_FIELDS:
        parts = [p.strip() for p in text.replace(";", ",").split(",") if p.strip()]
        if name == "area_sizes":
            return tuple(int(p) for p in parts) or None
        if name == "beta":
            return tuple(float(p) for p in parts)
        return tuple(parts)
    if text.lower() in ("none", "") and "Optional" in str(ftype):
        return None
    if ftype in (bool, "bool"):
        return _parse_bool(text)
    if ftype in (int, "int"):
        return int(text)
    if ftype in (float, "float"):
        return float(text)
    return text


def read_sim_config(path) -> dict:
    """Parse an INI file into keyword overrides for :class:`SimConfig`.

    Section ``[simulation]`` holds :class:`SimConfig` fields (plus an optional
    ``preset``), section ``[sampling]`` holds :class:`SamplingRule` fields.
    """
    from .sim import SamplingRule, SimConfig

    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise SchemaError(path, getattr(exc, "lineno", None), str(exc)) from None
    unknown = [s for s in cp.sections() if s not in ("simulation", "sampling")]
    if unknown:
        raise SchemaError(path, None, f"unknown sections {unknown}")
    types = {f.name: f.type for f in dataclasses.fields(SimConfig)}
    out = {}
    if cp.has_section("simulation"):
        for k, v in cp.items("simulation"):
            if k == "preset":
                out["preset"] = v.strip()
                continue
            if k not in types or k == "sampling_rule":
                raise SchemaError(path, None, f"unknown simulation key {k!r}")
            try:
                out[k] = _coerce(k, v, types[k])
            except ValueError as exc:
                raise SchemaError(path, None, f"key {k!r}: {exc}") from None
    if cp.has_section("sampling"):
        rtypes = {f.name: f.type for f in dataclasses.fields(SamplingRule)}
        rule = {}
        for k, v in cp.items("sampling"):
            if k not in rtypes:
                raise SchemaError(path, None, f"unknown sampling key {k!r}")
            try:
                rule[k] = _coerce(k, v, rtypes[k])
            except ValueError as exc:
                raise SchemaError(path, None, f"key {k!r}: {exc}") from None
        out["sampling_rule"] = rule
    return out


def _ini_value(v) -> str:
    if v is None:
        return "none"
    if hasattr(v, "value"):
        return str(v.value)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_sim_config(path, config) -> Path:
    """Write every field of a :class:`SimConfig` as an INI file."""
    cp = configparser.ConfigParser(interpolation=None)
    sim, samp = {}, {}
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if f.name == "sampling_rule":
            for rf in dataclasses.fields(v):
                samp[rf.name] = str(getattr(v, rf.name))
            continue
        if isinstance(v, tuple):
            sim[f.name] = ", ".join(_ini_value(x) for x in v)
        else:
            sim[f.name] = _ini_value(v)
    cp["simulation"] = sim
    cp["sampling"] = samp
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        cp.write(fh)
    return path
