"""Command-line interface.

Every subcommand writes its data files into ``--out`` and then a
``manifest.json`` listing them.  Configuration files are flat ``key = value``
text whose keys mirror :class:`~pseudoics.simulation.SimConfig`; flags given
on the command line override file values.

Exit codes: 0 success, 1 runtime failure, 2 bad input, 3 a fit did not
converge.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import sop_curve
from .io import (
    PanelFormatError,
    atomic_write,
    csv_text,
    fit_csv_text,
    fit_record,
    json_text,
    outcomes_csv_text,
    panel_csv_text,
    pseudo_csv_text,
    read_panel_csv,
    sop_csv_text,
    study_csv_text,
)
from .linear_oracle import LinearConfig, estfun_expectation_mc
from .panel import StateSpace, WeightScheme, validate_panel
from .pseudovalues import Method, default_grid, jackknife, pseudo_set
from .regression import ModelSpec, fit_gee
from .simulation import (
    IcgConfig,
    SimConfig,
    bias_study,
    group_null_study,
    power_study,
    resolve,
    simulate_panel,
)

EE = {
    "gee": (Method.METHOD1, WeightScheme.UNWEIGHTED),
    "cwgee": (Method.METHOD2, WeightScheme.INVERSE_CLUSTER_SIZE),
    "group": (Method.METHOD2, WeightScheme.INVERSE_GROUP_SIZE),
}

STUDY_KEYS = {"replicates": int, "deltas": "floats", "states": "ints", "threads": int}
ICG_KEYS = {"icg": bool, "icg_a": float, "icg_b0": float, "icg_b1": float,
            "icg_delta_group": float, "icg_min_size": int}


class InputError(Exception):
    """Problem with user input; reported with exit code 2."""


class NotConverged(Exception):
    """A fit did not converge; reported with exit code 3."""


# ---------------------------------------------------------------------------
# configuration

def _coerce(key: str, text: str, kind):
    text = text.strip()
    try:
        if kind == "floats":
            return tuple(float(x) for x in text.replace(",", " ").split())
        if kind == "ints":
            return tuple(int(x) for x in text.replace(",", " ").split())
        if kind is bool or kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if text.lower() in ("none", ""):
            return None
        return kind(text) if callable(kind) else text
    except ValueError:
        raise InputError(f"config key {key!r}: cannot parse {text!r}") from None


_SIM_TYPES = {
    "m": int, "delta": "floats", "sigma_eps": float, "sigma_nu": float, "z2_mean": float,
    "z2_sd": float, "reading": str, "branch_p": float, "censor_shape": float,
    "censor_scale": float, "censor_rate": float, "censor_unit": str, "ics": str,
    "size_intercept": float, "size_nu": float, "size_z1": float, "size_floor": int,
    "noninformative_mean": float, "truncation_max": float, "seed": int, "eval_time": float,
}


def read_config(path) -> dict:
    """Flat ``key = value`` file into a dict of raw strings (``#`` comments)."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise InputError(f"config file {path}: {exc}") from None
    return dict(parser["config"])


def sim_config(raw: dict) -> tuple[SimConfig, dict]:
    """Split raw config into a :class:`SimConfig` and study settings.

    Unknown keys are rejected by name.
    """
    sim, icg, study = {}, {}, {}
    for key, value in raw.items():
        if key in _SIM_TYPES:
            sim[key] = _coerce(key, value, _SIM_TYPES[key])
        elif key in ICG_KEYS:
            icg[key] = _coerce(key, value, ICG_KEYS[key])
        elif key in STUDY_KEYS:
            study[key] = _coerce(key, value, STUDY_KEYS[key])
        else:
            raise InputError(f"unknown config key {key!r}")
    if icg.pop("icg", bool(icg)):
        base = IcgConfig()
        b = (icg.pop("icg_b0", base.b[0]), icg.pop("icg_b1", base.b[1]))
        kw = {k[4:]: v for k, v in icg.items()}
        sim["icg"] = IcgConfig(b=b, **kw)
    try:
        return SimConfig(**sim), study
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from None


def linear_config(raw: dict) -> tuple[LinearConfig, dict]:
    cfg, study = {}, {}
    types = {"m": int, "mu": float, "sigma_alpha": float, "sigma_eps": float,
             "size_a": float, "size_b": float, "constant_size": int, "seed": int}
    for key, value in raw.items():
        if key in types:
            cfg[key] = _coerce(key, value, types[key])
        elif key in ("replicates",):
            study[key] = _coerce(key, value, int)
        else:
            raise InputError(f"unknown config key {key!r}")
    try:
        return LinearConfig(**cfg), study
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# helpers

class Run:
    """Collects outputs and writes the manifest last."""

    def __init__(self, args, subcommand: str):
        self.out = Path(args.out)
        self.subcommand = subcommand
        self.start = time.time()
        self.files: list[str] = []
        self.inputs: list[str] = []
        self.config: dict = {}
        self.seed = getattr(args, "seed", None)

    def write(self, name: str, text: str) -> None:
        atomic_write(self.out / name, text)
        self.files.append(name)

    def finish(self, **extra) -> None:
        manifest = {
            "subcommand": self.subcommand,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.files,
            "seed": self.seed,
            "version": __version__,
            "started": self.start,
            "wall_time": time.time() - self.start,
        }
        manifest.update(extra)
        atomic_write(self.out / "manifest.json", json_text(manifest))


def _load_panel(args):
    space = None
    if getattr(args, "num_states", None):
        absorbing = args.absorbing or [args.num_states]
        space = StateSpace(args.num_states, frozenset(absorbing))
    try:
        panel = read_panel_csv(args.input, space)
    except (OSError, PanelFormatError) as exc:
        raise InputError(str(exc)) from None
    except ValueError as exc:
        raise InputError(f"{args.input}: {exc}") from None
    problems = validate_panel(panel)
    if problems:
        raise InputError("\n".join(str(p) for p in problems))
    return panel


def _grid(args, panel):
    if args.time:
        return np.array(sorted(set(args.time)), dtype=float)
    return default_grid(panel, args.grid_points)


def _sim_from_args(args) -> tuple[SimConfig, dict]:
    raw = read_config(args.config) if args.config else {}
    cfg, study = sim_config(raw)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "m", None):
        cfg = dataclasses.replace(cfg, m=args.m)
    for key in ("replicates", "threads"):
        v = getattr(args, key, None)
        if v is not None:
            study[key] = v
    if getattr(args, "deltas", None):
        study["deltas"] = tuple(args.deltas)
    if getattr(args, "states", None):
        study["states"] = tuple(args.states)
    return cfg, study


# ---------------------------------------------------------------------------
# subcommands

def cmd_estimate(args) -> int:
    panel = _load_panel(args)
    grid = _grid(args, panel)
    run = Run(args, "estimate")
    run.inputs.append(str(args.input))
    run.config = {"weights": args.weights, "grid": grid.tolist()}
    curve = sop_curve(panel, args.weights, grid)
    run.write("sop.csv", sop_csv_text([curve]))
    if args.compare and WeightScheme.parse(args.weights) is not WeightScheme.UNWEIGHTED:
        base = sop_curve(panel, WeightScheme.UNWEIGHTED, grid)
        run.write("sop_unweighted.csv", sop_csv_text([base]))
        rows = [[float(t), q + 1, float(curve.values[k, q] - base.values[k, q])]
                for k, t in enumerate(grid) for q in range(curve.values.shape[1])]
        run.write("sop_difference.csv", csv_text(["time", "state", "difference"], rows))
    run.finish()
    return 0


def _method(args) -> Method:
    if args.method:
        return Method.parse(args.method)
    scheme = WeightScheme.parse(args.weights)
    if scheme is WeightScheme.UNWEIGHTED:
        return Method.METHOD1
    if scheme is WeightScheme.INVERSE_CLUSTER_SIZE:
        return Method.METHOD2
    raise InputError("pseudo-values pair method 1 with 'none' and method 2 with 'inverse-cluster'")


def cmd_pseudo(args) -> int:
    panel = _load_panel(args)
    grid = _grid(args, panel)
    method = _method(args)
    run = Run(args, "pseudo")
    run.inputs.append(str(args.input))
    values = jackknife(panel, grid, method)
    states = [args.state] if args.state else list(panel.state_space.states)
    sets = [pseudo_set(panel, values, method, s, grid) for s in states]
    run.config = {"method": method.value, "grid": grid.tolist(), "states": states}
    run.write("pseudo.csv", pseudo_csv_text(panel, sets))
    run.finish()
    return 0


def cmd_fit(args) -> int:
    panel = _load_panel(args)
    grid = _grid(args, panel)
    method, scheme = EE[args.ee]
    covs = tuple(args.covariates) if args.covariates else panel.covariate_names
    state = args.state or 1
    run = Run(args, "fit")
    run.inputs.append(str(args.input))
    values = jackknife(panel, grid, method)
    pv = pseudo_set(panel, values, method, state, grid)
    spec = ModelSpec(covs, grid, args.corr, scheme, time_intercepts=not args.single_intercept)
    try:
        fit = fit_gee(pv, panel, spec)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    run.config = {"ee": args.ee, "corr": spec.correlation.value, "state": state,
                  "grid": grid.tolist(), "covariates": list(covs), "method": method.value}
    run.write("fit.json", json_text(fit_record(fit, state=state, ee=args.ee)))
    run.write("fit.csv", fit_csv_text(fit, state))
    run.finish(converged=fit.converged)
    if not fit.converged:
        last = fit.history[-1] if fit.history else None
        raise NotConverged(f"fit did not converge after {fit.iterations} iterations (last rho, step: {last})")
    return 0


def cmd_simulate(args) -> int:
    cfg, study = _sim_from_args(args)
    cfg = resolve(cfg)
    run = Run(args, "simulate")
    run.seed = cfg.seed
    run.config = cfg.to_dict()
    reps = study.get("replicates", 1)
    for k in range(reps):
        panel = simulate_panel(cfg, (k,))
        run.write(f"panel_{k:04d}.csv", panel_csv_text(panel))
    run.finish()
    return 0


def _study_files(run, res) -> None:
    run.write("study.csv", study_csv_text(res))
    run.write("replicates.csv", outcomes_csv_text(res))


def cmd_power(args) -> int:
    cfg, study = _sim_from_args(args)
    run = Run(args, "power")
    run.seed = cfg.seed
    reps = study.get("replicates", 100)
    threads = study.get("threads", 1)
    states = study.get("states", (1, 2, 3))
    if cfg.icg is not None:
        res = group_null_study(cfg, reps, threads=threads, states=states)
    else:
        res = power_study(cfg, study.get("deltas", (-1.0, -0.5, 0.0, 0.5, 1.0)), reps,
                          threads=threads, states=states)
    run.config = {"sim": resolve(cfg).to_dict(), "study": {**study, "replicates": reps}}
    _study_files(run, res)
    run.finish(threads=threads)
    return 0


def cmd_bias(args) -> int:
    cfg, study = _sim_from_args(args)
    if args.config is None or "delta" not in read_config(args.config):
        cfg = dataclasses.replace(cfg, delta=(-0.85, 0.8))
    run = Run(args, "bias")
    run.seed = cfg.seed
    reps = study.get("replicates", 100)
    threads = study.get("threads", 1)
    res = bias_study(cfg, reps, threads=threads, states=study.get("states", (1, 2, 3)))
    run.config = {"sim": res.config.to_dict(), "study": {**study, "replicates": reps}}
    _study_files(run, res)
    run.finish(threads=threads)
    return 0


def cmd_oracle_linear(args) -> int:
    raw = read_config(args.config) if args.config else {}
    cfg, study = linear_config(raw)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    reps = args.replicates or study.get("replicates", 10_000)
    run = Run(args, "oracle-linear")
    run.seed = cfg.seed
    run.config = dataclasses.asdict(cfg)
    reports = [estfun_expectation_mc(cfg, w, reps) for w in ("one", "inv_n")]
    body = {r.weight: {"mean": r.mean, "se": r.se, "z": r.z, "estimator": r.estimator,
                       "replicates": r.replicates} for r in reports}
    run.write("oracle_linear.json", json_text({"config": dataclasses.asdict(cfg), "results": body}))
    run.finish()
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pseudoics", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, panel=True, grid=True):
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        if panel:
            sp.add_argument("input", help="panel CSV")
            sp.add_argument("--num-states", type=int, default=None)
            sp.add_argument("--absorbing", type=int, nargs="*", default=None)
        if grid:
            sp.add_argument("--grid-points", type=int, default=10, help="quantile grid size r")
            sp.add_argument("--time", type=float, nargs="+", default=None, help="explicit grid times")

    weights = ["none", "inverse-cluster", "inverse-group"]
    sp = sub.add_parser("estimate", help="state occupation curves")
    common(sp)
    sp.add_argument("--weights", choices=weights, default="none")
    sp.add_argument("--compare", action="store_true", help="also write unweighted curves and the difference")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("pseudo", help="jackknife pseudo-values")
    common(sp)
    sp.add_argument("--weights", choices=weights[:2], default="none")
    sp.add_argument("--method", choices=["method1", "method2"], default=None)
    sp.add_argument("--state", type=int, default=None)
    sp.set_defaults(func=cmd_pseudo)

    sp = sub.add_parser("fit", help="pseudo-value regression")
    common(sp)
    sp.add_argument("--state", type=int, default=1)
    sp.add_argument("--ee", choices=list(EE), default="cwgee")
    sp.add_argument("--corr", choices=["ind", "ar1"], default="ind")
    sp.add_argument("--covariates", nargs="+", default=None)
    sp.add_argument("--single-intercept", action="store_true")
    sp.set_defaults(func=cmd_fit)

    def study(sp):
        common(sp, panel=False, grid=False)
        sp.add_argument("--config", default=None, help="flat key = value file")
        sp.add_argument("--replicates", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--m", type=int, default=None, help="number of clusters")

    sp = sub.add_parser("simulate", help="simulate panels")
    study(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("power", help="power or size study")
    study(sp)
    sp.add_argument("--deltas", type=float, nargs="+", default=None)
    sp.add_argument("--states", type=int, nargs="+", default=None)
    sp.set_defaults(func=cmd_power)

    sp = sub.add_parser("bias", help="estimation error study")
    study(sp)
    sp.add_argument("--states", type=int, nargs="+", default=None)
    sp.set_defaults(func=cmd_bias)

    sp = sub.add_parser("oracle-linear", help="linear random-effects oracle")
    common(sp, panel=False, grid=False)
    sp.add_argument("--config", default=None)
    sp.add_argument("--replicates", type=int, default=None)
    sp.set_defaults(func=cmd_oracle_linear)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
