"""Command-line entry point: ``thermocal <command> [options]``.

Every command writes into ``--out-dir`` (default ``./thermocal-out``) and
echoes the fully resolved configuration next to its results.  Failures exit
with 1 (configuration), 2 (data) or 3 (numerical) and print one line of the
form ``thermocal: error kind=<kind> exit=<code> reason=<text>`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive import RefinementError, run_adaptive
from .conductivity import ConductivityModel
from .config import SCHEMA_VERSION, RunConfig, derive_seed, load_config
from .data import (Dataset, GroundTruthConductivity, default_error_model, default_ground_truth,
                   default_schedule, export_csv, ingest_csv, subset_steady_state, synthesize, thin)
from .errors import CalibrationError, ConfigError, DataError, NumericalError
from .experiments import (calibrate_context, cross_dataset_study, implicit_scheme_study,
                          joint_estimation_study, multi_chain_study, perturb_boundary_study,
                          perturb_error_model_study, prior_table_from_dict)
from .forward import SensorProbe, solve
from .mcmc import credible_band, sample, save_chain
from .optimizer import map_estimate
from .probabilistic import PosteriorProblem, SensorErrorModel

log = logging.getLogger("thermocal")

STUDIES = ("boundary", "error_model", "cross_dataset", "multi_chain", "implicit", "joint", "context")
RUN_FILE = "run.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def _clean(obj):
    """Replace non-finite floats by ``None`` so the output is strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, default=_json_default), encoding="utf-8")


def _envelope(command, cfg: RunConfig, **payload) -> dict:
    return {"schema_version": SCHEMA_VERSION, "version": __version__, "command": command,
            "config": cfg.to_dict(), **payload}


# ---------------------------------------------------------------- inputs

def error_model_for(cfg: RunConfig) -> SensorErrorModel:
    if cfg.data.error_model:
        return SensorErrorModel.from_csv(cfg.data.error_model)
    return default_error_model()


def ground_truth_for(cfg: RunConfig) -> GroundTruthConductivity:
    if cfg.data.ground_truth:
        return GroundTruthConductivity.from_csv(cfg.data.ground_truth)
    return default_ground_truth()


def synthetic_dataset(cfg: RunConfig) -> Dataset:
    schedule = default_schedule(cfg.setup.t_total, cfg.data.cadence)
    return synthesize(ground_truth_for(cfg), cfg.setup, error_model_for(cfg), schedule,
                      seed=derive_seed(cfg.seed, "data"), noise=cfg.data.noise)


def load_dataset(cfg: RunConfig, path=None):
    """Dataset named on the command line or in the config, else synthetic.

    Returns the (thinned / subset) dataset and the setup it should be run
    with, which follows the recorded ambient series when requested.
    """
    path = path or cfg.data.path
    err = error_model_for(cfg)
    if path:
        ds = ingest_csv(path, cfg.setup.sensor_positions, err)
    else:
        ds = synthetic_dataset(cfg)
    if cfg.data.steady_fraction is not None:
        ds = subset_steady_state(ds, cfg.data.steady_fraction)
    if cfg.data.thin > 1:
        ds = thin(ds, cfg.data.thin)
    setup = cfg.setup
    if cfg.data.use_ambient and ds.ambient is not None and path:
        setup = ds.apply_ambient(setup)
    return ds, setup


def model_shape(cfg: RunConfig, ds: Dataset) -> ConductivityModel:
    if cfg.model.k_values is not None:
        values = np.asarray(cfg.model.k_values, dtype=float)
    else:
        values = np.full(cfg.model.n_s + 1, cfg.prior.mu_k)
    return ConductivityModel(ds.T_min, ds.T_max, values)


# -------------------------------------------------------------- commands

def cmd_simulate(args, cfg: RunConfig, out: Path) -> int:
    times = default_schedule(cfg.setup.t_total, cfg.data.cadence)
    if cfg.model.k_values is not None:
        lo, hi = min(cfg.setup.T_source, cfg.setup.initial_temperature), max(cfg.setup.T_source,
                                                                            cfg.setup.initial_temperature)
        k_model = ConductivityModel(lo, hi, np.asarray(cfg.model.k_values, dtype=float))
    else:
        k_model = ground_truth_for(cfg)
    traj = solve(cfg.setup, k_model, cfg.discretization)
    f = SensorProbe(cfg.setup, cfg.discretization, times)(traj).reshape(len(cfg.setup.sensor_positions), -1)
    ds = Dataset(times, f, cfg.setup.sensor_positions, None, cfg.setup.ambient_at(times))
    export_csv(ds, out / "simulated.csv")
    write_json(out / "simulate.json", _envelope("simulate", cfg, n_readings=ds.n_readings,
                                                final_temperatures=f[:, -1]))
    print(f"wrote {out / 'simulated.csv'}")
    return 0


def cmd_synthesize(args, cfg: RunConfig, out: Path) -> int:
    ds = synthetic_dataset(cfg)
    export_csv(ds, out / "dataset.csv")
    write_json(out / "synthesize.json", _envelope("synthesize", cfg, data_seed=derive_seed(cfg.seed, "data"),
                                                  n_readings=ds.n_readings, T_min=ds.T_min,
                                                  T_max=ds.T_max))
    print(f"wrote {out / 'dataset.csv'}")
    return 0


def _fit(cfg: RunConfig, ds, setup):
    shape = model_shape(cfg, ds)
    problem = PosteriorProblem(ds, setup, cfg.discretization, shape, cfg.prior)
    return problem, map_estimate(problem, shape.k_values, cfg.optimizer)


def cmd_fit(args, cfg: RunConfig, out: Path) -> int:
    ds, setup = load_dataset(cfg, args.data)
    problem, res = _fit(cfg, ds, setup)
    result = {"p": res.p, "s_like": res.loss.s_like, "s_prior": res.loss.s_prior,
              "iterations": res.iterations, "n_eval": res.n_eval, "converged": res.converged,
              "message": res.message, "model": problem.model(res.p).to_dict()}
    write_json(out / "fit.json", _envelope("fit", cfg, result=result))
    print(f"MAP S_like={res.loss.s_like:.6g} converged={res.converged}")
    return 0


def cmd_sample(args, cfg: RunConfig, out: Path) -> int:
    ds, setup = load_dataset(cfg, args.data)
    if args.init:
        init = json.loads(Path(args.init).read_text(encoding="utf-8"))
        try:
            p_map = np.asarray(init["result"]["p"], dtype=float)
        except (KeyError, TypeError) as exc:
            raise DataError(f"{args.init}: not a fit report") from exc
        shape = model_shape(cfg, ds)
        if p_map.size != shape.n_s + 1:
            raise ConfigError(f"{args.init}: {p_map.size} values, model has {shape.n_s + 1} knots")
        problem = PosteriorProblem(ds, setup, cfg.discretization, shape, cfg.prior)
    else:
        problem, res = _fit(cfg, ds, setup)
        p_map = res.p
    chain_cfg = cfg.chain_config()
    chain = sample(problem.log_posterior, p_map, chain_cfg)
    save_chain(chain, out / "chain.csv", chain_cfg, {"knots": problem.shape.knots})
    band = credible_band(chain, problem.shape)
    band.to_csv(out / "band.csv")
    write_json(out / "sample.json", _envelope("sample", cfg, p_map=p_map, chain=chain.summary(),
                                              band_area=band.area()))
    print(f"acceptance={chain.acceptance_rate:.3f} geweke={'pass' if chain.geweke_pass else 'fail'} "
          f"min_ess={float(np.min(chain.ess)):.1f}")
    return 0


def cmd_adaptive(args, cfg: RunConfig, out: Path) -> int:
    ds, setup = load_dataset(cfg, args.data)
    try:
        result = run_adaptive(ds, setup, cfg.refinement_config(), cfg.chain_config(), cfg.threads)
    except RefinementError as exc:
        if exc.trace is not None:
            write_json(out / "trace_partial.json", exc.trace.to_dict())
        raise
    sel = result.selected
    save_chain(sel.chain, out / f"chain_ns{sel.n_s}.csv", cfg.chain_config(),
               {"knots": sel.shape.knots})
    temps = np.linspace(ds.T_min, ds.T_max, 200)
    result.band(temps).to_csv(out / "band.csv")
    run = _envelope("adaptive", cfg, summary=result.summary(), trace=result.trace.to_dict(),
                    n_d=ds.n_d, T_range=[ds.T_min, ds.T_max])
    write_json(out / RUN_FILE, run)
    write_report(out)
    s = run["summary"]["selected"]
    print(f"selected n_s={s['n_s']} n_e={s['n_e']} n_t={s['n_t']} stop={result.stop_reason}")
    return 0


def cmd_study(args, cfg: RunConfig, out: Path) -> int:
    name = args.name
    st = cfg.study
    ref, chain_cfg = cfg.refinement_config(), cfg.chain_config()
    if name == "implicit":
        ds, setup = load_dataset(cfg, args.data)
        shape = model_shape(cfg, ds)
        res = implicit_scheme_study(setup, shape, ds.times, st.n_t_values, cfg.discretization.n_e)
    elif name == "context":
        ds, setup = load_dataset(cfg, args.data)
        res = calibrate_context(ds, setup, prior_table_from_dict(st.prior_table))
        write_json(out / "study.json", _envelope("study", cfg, study=name, result=res.to_dict()))
        print(json.dumps(_clean(res.values)))
        return 0
    elif name == "cross_dataset":
        if not st.datasets:
            raise ConfigError("study.datasets must map names to measurement CSV paths")
        err = error_model_for(cfg)
        datasets = {k: ingest_csv(p, cfg.setup.sensor_positions, err) for k, p in st.datasets.items()}
        res = cross_dataset_study(datasets, cfg.setup, ref, chain_cfg)
    else:
        ds, setup = load_dataset(cfg, args.data)
        if name == "boundary":
            res = perturb_boundary_study(ds, setup, ref, chain_cfg, st.factor)
        elif name == "error_model":
            res = perturb_error_model_study(ds, setup, ref, chain_cfg, st.mean_factor, st.std_factor)
        else:
            problem, fit = _fit(cfg, ds, setup)
            if name == "multi_chain":
                multi_cfg = replace(chain_cfg, burn_in=st.multi_chain_burn_in)
                res = multi_chain_study(problem, fit.p, st.k_chains, multi_cfg, chain_cfg)
            else:
                res = joint_estimation_study(ds, setup, cfg.discretization, problem.model(fit.p),
                                             cfg.prior, prior_table_from_dict(st.prior_table),
                                             chain_cfg)
    res.write(out)
    write_json(out / "config.json", cfg.to_dict())
    print(f"study {name} written to {out}")
    return 0


def cmd_report(args, cfg: RunConfig, out: Path) -> int:
    run_dir = Path(args.run_dir)
    report = write_report(run_dir)
    print(json.dumps({"selected": report["selected"], "stop_reason": report["stop_reason"]}))
    return 0


# ---------------------------------------------------------------- report

def _s_like_rows(run: dict):
    levels = {lv["n_s"]: lv for lv in run["summary"]["levels"]}
    thr = run["summary"]["threshold"]
    for r in run["trace"]["records"]:
        lv = levels.get(r["n_s"], {})
        yield [r["n_s"], r["iteration"], r["axis"], r["n_e"], r["n_t"], r["s_like"], r["s_prior"],
               r["units"], int(r["iteration"] == lv.get("selected_iteration")), thr]


def units_table(run: dict) -> dict:
    """Per-iteration units by complexity level, plus MCMC and totals."""
    trace = run["trace"]
    levels = sorted({r["n_s"] for r in trace["records"]})
    selected = {lv["n_s"]: lv["selected_iteration"] for lv in run["summary"]["levels"]}
    n_iter = max((r["iteration"] for r in trace["records"]), default=0)
    cells = {(r["n_s"], r["iteration"]): r["units"] for r in trace["records"]}
    mcmc = {int(k): v for k, v in trace["mcmc_units"].items()}
    totals = {n: sum(v for (m, _), v in cells.items() if m == n) + mcmc.get(n, 0.0) for n in levels}
    return {"levels": levels, "n_iter": n_iter, "cells": cells, "selected": selected,
            "mcmc": mcmc, "totals": totals, "overall": sum(totals.values())}


def _render_units(table: dict) -> str:
    levels = table["levels"]
    width = 12
    head = "iteration".ljust(10) + "".join(f"n_s={n}".rjust(width) for n in levels)
    lines = [head, "-" * len(head)]
    for it in range(1, table["n_iter"] + 1):
        row = str(it).ljust(10)
        for n in levels:
            v = table["cells"].get((n, it))
            row += ("" if v is None else f"{v:.3g}").rjust(width)
        lines.append(row)
        # dashed marker under the selected iteration of each level
        marks = "".join(("- " * (width // 2) if table["selected"].get(n) == it else " " * width)
                        for n in levels)
        if marks.strip():
            lines.append(" " * 10 + marks)
    lines.append("-" * len(head))
    lines.append("mcmc".ljust(10) + "".join(f"{table['mcmc'].get(n, 0.0):.3g}".rjust(width)
                                          for n in levels))
    lines.append("total".ljust(10) + "".join(f"{table['totals'][n]:.3g}".rjust(width) for n in levels))
    lines.append(f"overall {table['overall']:.4g}")
    return "\n".join(lines) + "\n"


def write_report(run_dir) -> dict:
    """Regenerate ``report.json`` and the CSV tables of an ``adaptive`` run directory."""
    run_dir = Path(run_dir)
    path = run_dir / RUN_FILE
    if not path.is_file():
        raise DataError(f"{run_dir}: no {RUN_FILE} found")
    try:
        run = json.loads(path.read_text(encoding="utf-8"))
        summary, trace = run["summary"], run["trace"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a run file ({exc})") from exc
    if run.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: schema_version {run.get('schema_version')} is not {SCHEMA_VERSION}")
    # resolving the echoed config proves the run is reproducible from it
    RunConfig.from_dict(run["config"])

    with (run_dir / "s_like.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n_s", "iteration", "axis", "n_e", "n_t", "s_like", "s_prior", "units",
                    "selected", "threshold"])
        w.writerows(_s_like_rows(run))

    table = units_table(run)
    with (run_dir / "units.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + [f"n_s_{n}" for n in table["levels"]])
        for it in range(1, table["n_iter"] + 1):
            w.writerow([it] + [table["cells"].get((n, it), "") for n in table["levels"]])
        w.writerow(["selected"] + [table["selected"].get(n, "") for n in table["levels"]])
        w.writerow(["mcmc"] + [table["mcmc"].get(n, 0.0) for n in table["levels"]])
        w.writerow(["total"] + [table["totals"][n] for n in table["levels"]])
    (run_dir / "units.txt").write_text(_render_units(table), encoding="utf-8")

    report = {"schema_version": SCHEMA_VERSION, "config": run["config"],
              "selected": summary["selected"], "stop_reason": summary["stop_reason"],
              "threshold": summary["threshold"], "levels": summary["levels"],
              "units": {"by_n_s": table["totals"], "mcmc": table["mcmc"], "overall": table["overall"]},
              "tables": {"s_like": "s_like.csv", "units": "units.csv", "units_text": "units.txt",
                         "band": "band.csv" if (run_dir / "band.csv").is_file() else None}}
    write_json(run_dir / "report.json", report)
    return report


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="top-level random seed")
    common.add_argument("--threads", type=int, help="maximum worker threads")
    common.add_argument("--out-dir", default="thermocal-out", help="output directory")
    common.add_argument("--bic-only", action="store_true",
                        help="select complexity by BIC and sample only the selected level")
    common.add_argument("--data", help="measurement CSV (overrides data.path)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="thermocal", description="Bayesian calibration of thermal conductivity.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="forward solve to sensor curves")
    sub.add_parser("synthesize", parents=[common], help="synthetic noisy dataset")
    sub.add_parser("fit", parents=[common], help="MAP estimate for a fixed model and mesh")
    s = sub.add_parser("sample", parents=[common], help="posterior chain from the MAP point")
    s.add_argument("--init", help="fit.json to start from instead of refitting")
    sub.add_parser("adaptive", parents=[common], help="adaptive mesh and model refinement")
    s = sub.add_parser("study", parents=[common], help="run a sensitivity study")
    s.add_argument("name", choices=STUDIES)
    s = sub.add_parser("report", parents=[common], help="rebuild tables of an adaptive run")
    s.add_argument("run_dir")
    return p


COMMANDS = {"simulate": cmd_simulate, "synthesize": cmd_synthesize, "fit": cmd_fit,
            "sample": cmd_sample, "adaptive": cmd_adaptive, "study": cmd_study, "report": cmd_report}

_KIND = {ConfigError: "config", DataError: "data", NumericalError: "numerical"}


def _fail(exc: CalibrationError) -> int:
    kind = next((v for k, v in _KIND.items() if isinstance(exc, k)), "numerical")
    reason = " ".join(str(exc).split()) or type(exc).__name__
    print(f"thermocal: error kind={kind} exit={exc.exit_code} reason={reason}", file=sys.stderr)
    return exc.exit_code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.seed, args.threads, args.bic_only)
        out = Path(args.out_dir)
        if args.command != "report":
            try:
                out.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise ConfigError(f"cannot create {out}: {exc}") from exc
        return COMMANDS[args.command](args, cfg, out)
    except CalibrationError as exc:
        return _fail(exc)
    except OSError as exc:
        return _fail(DataError(str(exc)))
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(NumericalError(str(exc)))


if __name__ == "__main__":
    sys.exit(main())
