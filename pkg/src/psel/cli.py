"""Command-line interface.

Subcommands::

    psel bound CONFIG [--method closed|definition|score|hessian]
    psel estimate DATA CONFIG [--estimator NAME ...]
    psel simulate CONFIG [--seed S] [--reps R] [--fast] [--workers W]
    psel preset NAME [--seed S] [--reps R] [--fast] [--workers W]

Every command writes its CSV output plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 input error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._mc import McOptions, resolve_workers
from .bounds import psi_crb
from .config import config_from_dict, config_to_dict, dump_config, load_json
from .errors import InputError, NumericalError, PselError
from .estimators import (ESTIMATORS, MbpVariant, SolverConfig, _cfg_from, ipsml,
                         psml_exponential_closed, psml_fisher_scoring, psml_grid_search,
                         psml_mbp, psml_newton_raphson, uv_estimate)
from .model import Family, ModelSpec, ObservationSet, ml_estimate, mvu_estimate_uniform
from .montecarlo import (PRESET_ALIASES, McSummary, ZetaTable, preset_config, run_experiment,
                         run_preset)
from .selection import RuleKind, select

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3
SEED_ENV = "PSEL_SEED"


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def fmt(v) -> str:
    """Shortest round-trip text for numbers; ``nan`` for missing values."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def summary_csv(summary: McSummary) -> str:
    """One row per sweep point and estimator."""
    M = summary.config.model.M
    ix = range(1, M + 1)
    header = (["sweep_value", "estimator", "psmse", "psmse_se", "bias_sel", "bias_unsel"]
              + [f"freq_{j}" for j in ix] + ["psi_crb", "biased_psi_crb", "bias_sel_se",
                                             "bias_unsel_se"]
              + [f"freq_se_{j}" for j in ix] + [f"cmse_{j}" for j in ix]
              + [f"cbias_{j}" for j in ix] + [f"ibias_{j}" for j in ix]
              + ["n_used", "failures"])
    rows = []
    for r in summary.rows:
        diag = np.arange(M)
        rows.append([r.sweep_value, r.estimator, r.psmse, r.psmse_se, r.bias_sel, r.bias_unsel,
                     *r.freq, r.psi_crb, r.biased_psi_crb, r.bias_sel_se, r.bias_unsel_se,
                     *r.freq_se, *r.cmse, *r.cond_bias[diag, diag], *r.ind_bias[diag, diag],
                     r.n_used, r.failures])
    return _csv_text(header, rows)


def zeta_csv(table: ZetaTable) -> str:
    rows = []
    for i, s1 in enumerate(table.sigma1_sq):
        for j, d in enumerate(table.deltas):
            rows.append([d, s1, table.sigma2_sq, table.N, table.kappa[i], table.zeta[i, j]])
    return _csv_text(["delta", "sigma1_sq", "sigma2_sq", "N", "kappa", "zeta"], rows)


def read_observations(path) -> ObservationSet:
    """Read a CSV with header ``pop_1..pop_M`` and one row per sample."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise InputError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    expected = [f"pop_{j}" for j in range(1, len(header) + 1)]
    if header != expected:
        raise InputError(f"{path}: header must be {','.join(expected)}")
    data = rows[1:]
    if not data:
        raise InputError(f"{path} has no samples")
    try:
        arr = np.array([[float(v) for v in r] for r in data])
    except ValueError:
        raise InputError(f"{path}: non-numeric value") from None
    if arr.ndim != 2 or arr.shape[1] != len(header):
        raise InputError(f"{path}: every row needs {len(header)} values")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{path}: values must be finite")
    return ObservationSet(tuple(arr.T))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _write_outputs(out_dir: Path, files: dict[str, str], manifest: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    sums = {}
    for name, text in files.items():
        data = text.encode("utf-8")
        (out_dir / name).write_bytes(data)
        sums[name] = {"sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}
    manifest = {"tool": "psel", "version": __version__, **manifest, "outputs": sums}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")


def _resolve_seed(flag, configured, default=0):
    """Seed precedence: ``--seed``, then the config file, then the environment."""
    if flag is not None:
        return int(flag)
    if configured is not None:
        return int(configured)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise InputError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return default


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_bound(args) -> int:
    raw = load_json(args.config)
    cfg = config_from_dict(raw)
    seed = _resolve_seed(args.seed, raw.get("seed"))
    opts = McOptions(replications=args.reps or cfg.replications, seed=seed,
                     workers=args.workers)
    t0 = time.perf_counter()
    rep = psi_crb(cfg.model, cfg.rule, cfg.theta_true, args.method, opts)
    M = cfg.model.M
    nan = float("nan")
    rows = []
    for m in range(M):
        se = nan if rep.component_se is None else rep.component_se[m]
        rows.append([m + 1, rep.pr_select[m], rep.component_bound[m], se])
    rows.append(["aggregate", float(np.sum(rep.pr_select)), rep.aggregate,
                 nan if rep.aggregate_se is None else rep.aggregate_se])
    text = _csv_text(["m", "pr_select", "component_bound", "se"], rows)
    _write_outputs(Path(args.out), {"psi_crb.csv": text},
                   {"command": "bound", "method": args.method, "config": config_to_dict(cfg),
                    "seed": seed, "workers": resolve_workers(opts.workers),
                    "wall_time_s": time.perf_counter() - t0})
    return EXIT_OK


def _estimate_one(name: str, model: ModelSpec, rule, x, m, opts: dict, seed: int):
    """Returns (theta, iterations, score_norm, converged)."""
    if name == "ml":
        return ml_estimate(model, x), 0, float("nan"), True
    if name == "mvu":
        return mvu_estimate_uniform(model, x), 0, float("nan"), True
    if name == "uv":
        return uv_estimate(model, x), 0, float("nan"), True
    if name == "ipsml":
        known = {"K", "fd_step", "variant"}
        cfg = _cfg_from({k: v for k, v in opts.items() if k not in known})
        r = ipsml(model, rule, x, cfg, K=int(opts.get("K", 100_000)), fd_step=opts.get("fd_step"),
                  seed=seed, m=m, variant=opts.get("variant", "fisher"))
    elif name == "psml_grid":
        if "bounds" not in opts:
            raise InputError("psml_grid needs a 'bounds' option")
        r = psml_grid_search(model, rule, x, opts["bounds"], int(opts.get("resolution", 201)), m=m)
    else:
        cfg = _cfg_from(opts)
        if name == "psml":
            if (rule.kind is RuleKind.SMS and model.family is Family.EXPONENTIAL
                    and model.M == 2):
                r = psml_exponential_closed(x, m=m, cfg=cfg)
            else:
                r = psml_newton_raphson(model, rule, x, cfg, m=m)
        elif name == "psml_nr":
            r = psml_newton_raphson(model, rule, x, cfg, m=m)
        elif name == "psml_fs":
            r = psml_fisher_scoring(model, rule, x, cfg, m=m)
        elif name in ("mbp", "mbp_newton", "mbp_fisher"):
            variant = {"mbp": MbpVariant.EXACT, "mbp_newton": MbpVariant.NEWTON_RELAXED,
                       "mbp_fisher": MbpVariant.FISHER_RELAXED}[name]
            r = psml_mbp(model, rule, x, cfg, variant, m=m)
        else:
            raise InputError(f"unknown estimator {name!r}")
    return r.theta_hat, r.iterations, r.final_score_norm, r.converged


def cmd_estimate(args) -> int:
    x = read_observations(args.data)
    raw = load_json(args.config)
    raw = dict(raw)
    model_d = dict(raw.get("model", {}))
    # The data file fixes N and M.
    model_d["N"] = x.populations[0].size
    raw["model"] = model_d
    raw.setdefault("theta_true", [1.0] * len(x.populations))
    names = list(args.estimator or raw.get("estimators", ["ml"]))
    raw["estimators"] = [n for n in names if n in ESTIMATORS]
    opts_all = raw.pop("estimator_options", {})
    cfg = config_from_dict(raw)
    model = cfg.model
    if len(x.populations) != model.M:
        raise InputError(f"data has {len(x.populations)} populations, config has M={model.M}")
    seed = _resolve_seed(args.seed, raw.get("seed"))
    t0 = time.perf_counter()
    m = select(cfg.rule, model, x, np.random.default_rng(seed))
    M = model.M
    rows = []
    for name in names:
        try:
            theta, it, norm, conv = _estimate_one(name, model, cfg.rule, x, m,
                                                  dict(opts_all.get(name, {})), seed)
            err = ""
        except InputError:
            raise
        except PselError as exc:
            theta, it, norm, conv = np.full(M, np.nan), 0, float("nan"), False
            err = f"{type(exc).__name__}: {exc}"
        rows.append([name, m + 1, *theta, it, norm, conv, err])
    header = (["estimator", "m_selected"] + [f"theta_hat_{j}" for j in range(1, M + 1)]
              + ["iterations", "score_norm", "converged", "error"])
    _write_outputs(Path(args.out), {"estimate.csv": _csv_text(header, rows)},
                   {"command": "estimate", "config": config_to_dict(cfg), "data": str(args.data),
                    "seed": seed, "workers": 1, "wall_time_s": time.perf_counter() - t0})
    return EXIT_OK


def _run_and_write(cfg, args, command: str, extra: dict) -> int:
    summary = run_experiment(cfg, workers=args.workers)
    _write_outputs(Path(args.out), {"summary.csv": summary_csv(summary)},
                   {"command": command, **extra, "config": config_to_dict(cfg),
                    "seed": cfg.seed, "workers": summary.workers,
                    "wall_time_s": summary.wall_time})
    return EXIT_OK


def _apply_run_flags(cfg, args, configured_seed, default_seed=0):
    seed = _resolve_seed(args.seed, configured_seed, default_seed)
    reps = args.reps if args.reps is not None else cfg.replications
    if args.fast:
        reps = max(reps // 10, cfg.batches)
    return replace(cfg, seed=seed, replications=int(reps))


def cmd_simulate(args) -> int:
    raw = load_json(args.config)
    cfg = config_from_dict(raw)
    cfg = _apply_run_flags(cfg, args, raw.get("seed"))
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    return _run_and_write(cfg, args, "simulate", {})


def cmd_preset(args) -> int:
    name = PRESET_ALIASES.get(args.name, args.name)
    if name == "fig4_zeta_surface":
        if args.dump_config:
            raise InputError("fig4_zeta_surface is a pure table without an experiment config")
        t0 = time.perf_counter()
        table = run_preset(name)
        _write_outputs(Path(args.out), {"zeta.csv": zeta_csv(table)},
                       {"command": "preset", "preset": name, "config": None, "seed": None,
                        "workers": 1, "wall_time_s": time.perf_counter() - t0})
        return EXIT_OK
    base = preset_config(name)
    cfg = _apply_run_flags(base, args, None, base.seed)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    return _run_and_write(cfg, args, "preset", {"preset": name})


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psel", description="Estimating parameters of data-selected populations.")
    p.add_argument("--version", action="version", version=f"psel {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, runs=True):
        sp.add_argument("--out", default=".", help="output directory (default: current)")
        sp.add_argument("--seed", type=int, default=None,
                        help=f"random seed (fallback: the config, then ${SEED_ENV})")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker threads (default: logical cores)")
        if runs:
            sp.add_argument("--reps", type=_positive_int, default=None, help="replications")
            sp.add_argument("--fast", action="store_true", help="divide replications by 10")
            sp.add_argument("--dump-config", action="store_true",
                            help="print the resolved config as JSON and exit")

    b = sub.add_parser("bound", help="post-selection Cramer-Rao-type bound")
    b.add_argument("config")
    b.add_argument("--method", choices=["closed", "definition", "score", "hessian"],
                   default="closed")
    b.add_argument("--reps", type=_positive_int, default=None,
                   help="replications for simulation methods")
    common(b, runs=False)
    b.set_defaults(func=cmd_bound)

    e = sub.add_parser("estimate", help="run estimators on an observation file")
    e.add_argument("data")
    e.add_argument("config")
    e.add_argument("--estimator", action="append",
                   help="estimator name (repeatable); default: the config's list")
    common(e, runs=False)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="Monte-Carlo experiment from a config file")
    s.add_argument("config")
    common(s)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("preset", help="named experiment")
    r.add_argument("name", choices=sorted(set(PRESET_ALIASES) | set(PRESET_ALIASES.values())))
    common(r)
    r.set_defaults(func=cmd_preset)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"psel: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"psel: numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
