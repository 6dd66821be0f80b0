"""Command-line front end.

Subcommands ``fit``, ``predict``, ``simulate`` and ``replay``.  Every command
writes its outputs to ``--out-dir`` (default ``$NERSAE_OUT_DIR`` or the
current directory) together with ``manifest.json``, which records the argv,
the seed, the tool version and SHA-256 digests of inputs and outputs.
``replay`` reruns a manifest and checks that the outputs are bit-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .core import DesignError
from .fit import ConvergenceError, MomentSource, RankDeficiencyError, asymptotic_covariance, fit as fit_model
from .io import (
    FLAG,
    SchemaError,
    load_area_means,
    load_sample,
    read_table,
    read_sim_config,
    write_csv,
    write_key_values,
    write_sim_config,
)
from .predict import FixedKind, MissingPopulationMeans, fit_fixed_effects, predict_areas, predict_fixed
from .sim import PRESETS, SamplingRule, SamplingRuleError, SimConfig, run

log = logging.getLogger("nersae")

OUT_DIR_ENV = "NERSAE_OUT_DIR"
MANIFEST = "manifest.json"

PREDICTION_HEADER = [
    "area", "N_i", "n_i", "alpha_hat", "sam", "clp", "sam_star", "mse_lw", "mse_pr",
    "lo_sam_lw", "hi_sam_lw", "lo_clp_lw", "hi_clp_lw", "lo_clp_pr", "hi_clp_pr",
]
FIXED_HEADER = [
    "area", "N_i", "n_i", "com_fixed", "lo_com_fixed", "hi_com_fixed", "syn_fixed", "lo_syn_fixed", "hi_syn_fixed",
]

# errors that end a command with exit status 1
USER_ERRORS = (
    SchemaError,
    DesignError,
    RankDeficiencyError,
    MissingPopulationMeans,
    ConvergenceError,
    SamplingRuleError,
    OSError,
    ValueError,
)


class UsageError(ValueError):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _names(text):
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def _write_manifest(out: Path, command, argv, inputs, outputs, started, seed=None, config=None, extra=None):
    doc = {
        "command": command,
        "argv": list(argv),
        "config": None if config is None else str(config),
        "seed": seed,
        "version": __version__,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
        "started": started,
        "finished": _now(),
    }
    if extra:
        doc.update(extra)
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# fit -----------------------------------------------------------------------


def _load(args, require_sizes):
    return load_sample(
        args.sample,
        area_means=args.area_means,
        response=args.response,
        within=_names(args.within),
        between=_names(args.between),
        center=args.center,
        contextual=args.contextual,
        require_sizes=require_sizes,
    )


def cmd_fit(args, argv) -> int:
    started = _now()
    sample = _load(args, require_sizes=False)
    f = fit_model(sample, args.method)
    cov = asymptotic_covariance(f, sample, args.pr_source)
    se = dict(zip(cov.labels, cov.standard_errors))
    rows = [[nm, b, se[nm]] for nm, b in zip(f.column_names, f.params.beta)]
    rows.append(["sigma2_alpha", f.params.sigma2_alpha, se["sigma2_alpha"]])
    rows.append(["sigma2_e", f.params.sigma2_e, se["sigma2_e"]])
    out = _out_dir(args)
    table = write_csv(out / "fit.csv", ["effect", "estimate", "std_error"], rows)
    summary = write_key_values(out / "fit.txt", list(f.summary().items()))
    _write_manifest(out, "fit", argv, [args.sample, args.area_means], [table, summary], started)
    print(summary.read_text(encoding="utf-8"), end="")
    return 0


# predict -------------------------------------------------------------------


def cmd_predict(args, argv) -> int:
    started = _now()
    am = None
    if args.area_means is not None:
        am = load_area_means(args.area_means, _names(args.within))
    elif FLAG not in read_table(args.sample).header:
        raise MissingPopulationMeans("area sizes and means required: pass --area-means")
    if am is not None and am.means is None and not args.sam_star:
        raise MissingPopulationMeans(f"{args.area_means} has no covariate means; pass --sam-star")
    sample = load_sample(
        args.sample,
        area_means=am,
        response=args.response,
        within=_names(args.within),
        between=_names(args.between),
        center=args.center,
        contextual=args.contextual,
        require_sizes=True,
    )
    out = _out_dir(args)
    outputs = []
    if args.fixed_effects:
        ff = fit_fixed_effects(sample)
        rows = []
        for a in sample.areas:
            c = predict_fixed(a, ff, FixedKind.COMPOSITE, args.epsilon)
            s = predict_fixed(a, ff, FixedKind.SYNTHETIC, args.epsilon)
            rows.append([a.area_id, a.N, a.n, c.point, c.lower, c.upper, s.point, s.lower, s.upper])
        outputs.append(write_csv(out / "predictions_fixed.csv", FIXED_HEADER, rows))
    else:
        f = fit_model(sample, args.method)
        cov = asymptotic_covariance(f, sample, args.pr_source)
        rows = []
        for p in predict_areas(sample, f, cov, args.epsilon, sam_star=args.sam_star):
            rows.append([
                p.area_id, p.N, p.n, p.alpha_hat, p.sam, p.clp, p.sam_star, p.mse_lw, p.mse_pr,
                *p.interval_sam_lw, *p.interval_clp_lw, *p.interval_clp_pr,
            ])
        outputs.append(write_csv(out / "predictions.csv", PREDICTION_HEADER, rows))
    _write_manifest(out, "predict", argv, [args.sample, args.area_means], outputs, started)
    return 0


# simulate ------------------------------------------------------------------


def build_config(args) -> SimConfig:
    """Preset, then config file, then command-line flags."""
    file_kw = read_sim_config(args.config) if args.config else {}
    name = args.preset or file_kw.pop("preset", None)
    file_kw.pop("preset", None)
    kw = {}
    if name is not None:
        if name not in PRESETS:
            raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        kw.update(PRESETS[name])
    rule = file_kw.pop("sampling_rule", None)
    kw.update(file_kw)
    if rule is not None:
        base = kw.get("sampling_rule", SamplingRule())
        kw["sampling_rule"] = dataclasses.replace(base, **rule)
    for flag, key in (
        ("seed", "seed"),
        ("replications", "replications"),
        ("epsilon", "epsilon"),
        ("method", "method"),
        ("population", "population_csv"),
        ("pr_source", "pr_source"),
        ("clp_truth", "clp_truth"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    if args.fixed_effects:
        kw["mode"] = "DESIGN_BASED_FIXED_EFFECTS"
    elif kw.get("population_csv") is not None and str(kw.get("mode", "MODEL_BASED")).upper().endswith("MODEL_BASED"):
        # a supplied population only makes sense for a design-based run
        kw["mode"] = "DESIGN_BASED"
    if args.center is not None:
        kw["center"] = args.center
    if args.contextual is not None:
        kw["contextual"] = args.contextual
    cfg = SimConfig(**kw)
    if name == "milk-protocol" and cfg.population_csv is None:
        raise UsageError("preset milk-protocol needs --population (the data are not bundled)")
    return cfg


def cmd_simulate(args, argv) -> int:
    started = _now()
    cfg = build_config(args)
    if cfg.population_csv is not None and not Path(cfg.population_csv).is_file():
        raise OSError(f"cannot read population file {cfg.population_csv}")
    rep = run(cfg, workers=args.workers)
    out = _out_dir(args)
    outputs = [write_csv(out / "report.csv", rep.table_header(), rep.table_rows())]
    if args.verbose:
        outputs.append(write_csv(out / "report_long.csv", rep.long_header(), rep.long_rows()))
    if args.raw:
        outputs.append(write_csv(out / "report_raw.csv", rep.long_header(), rep.long_rows(), digits=17))
    outputs.append(write_sim_config(out / "config_used.ini", cfg))
    _write_manifest(
        out, "simulate", argv, [args.config, cfg.population_csv], outputs, started,
        seed=cfg.seed, config=args.config,
        extra={"replications": rep.replications, "completed": rep.completed, "failures": rep.failures},
    )
    print(f"{rep.completed}/{rep.replications} replications completed, {rep.failures} failed")
    return 0


# replay --------------------------------------------------------------------


def cmd_replay(args, argv) -> int:
    doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    old = [a for a in doc["argv"]]
    # drop the recorded output directory and substitute the replay target
    cleaned, skip = [], False
    for a in old:
        if skip:
            skip = False
            continue
        if a == "--out-dir":
            skip = True
            continue
        if a.startswith("--out-dir="):
            continue
        cleaned.append(a)
    out = Path(args.out_dir or Path(args.manifest).parent / "replay")
    code = main(cleaned + ["--out-dir", str(out)])
    if code != 0:
        return code
    mismatched = [
        name for name, digest in doc["outputs"].items() if not (out / name).is_file() or _sha256(out / name) != digest
    ]
    if mismatched:
        print(f"replay differs in {mismatched}", file=sys.stderr)
        return 1
    print(f"replay reproduced {len(doc['outputs'])} outputs")
    return 0


# parser --------------------------------------------------------------------


def _common(p, data=True):
    p.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or .)")
    p.add_argument("--verbose", "-v", action="store_true")
    if data:
        p.add_argument("sample", help="sample CSV: area,y,<covariates>[,sampled]")
        p.add_argument("--area-means", help="area-means CSV: area,N_i,<xbar columns>")
        p.add_argument("--response", default="y")
        p.add_argument("--within", help="comma-separated within-area covariates (default: all others)")
        p.add_argument("--between", help="comma-separated area-level covariates")
        p.add_argument("--center", action="store_true", help="center within covariates at area means")
        p.add_argument("--contextual", action="store_true", help="add area means of within covariates")
        p.add_argument("--method", type=str.upper, choices=["ML", "REML"], default="REML")
        p.add_argument("--pr-source", type=str.upper, choices=[m.value for m in MomentSource],
                       default=MomentSource.NORMAL_THEORY.value)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nersae", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the nested error model")
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="area predictions and intervals")
    _common(p)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--sam-star", action="store_true", help="use sample covariate means for the non-sampled part")
    p.add_argument("--fixed-effects", action="store_true", help="fixed area effects (composite and synthetic)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="Monte Carlo evaluation")
    _common(p, data=False)
    p.add_argument("--config", help="INI file with [simulation] and [sampling] sections")
    p.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--method", type=str.upper, choices=["ML", "REML"])
    p.add_argument("--population", help="population CSV for design-based runs")
    p.add_argument("--fixed-effects", action="store_true", help="design-based run with fixed area effects")
    p.add_argument("--center", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--contextual", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--pr-source", type=str.upper, choices=[m.value for m in MomentSource])
    p.add_argument("--clp-truth", choices=["mean", "eta"])
    p.add_argument("--raw", action="store_true", help="also write full-precision long report")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="rerun a manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out-dir")
    p.add_argument("--verbose", "-v", action="store_true")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args, argv)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
