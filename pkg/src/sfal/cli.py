"""Command-line entry point: ``sfal <subcommand> [flags]``.

Every run writes ``manifest.json`` (resolved configuration and version) into
its output directory; ``sfal <subcommand> --config manifest.json`` reruns it.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .averaging import simulate_averaged, tabulate_averaged
from .coupling import CouplingConfig, default_delta, fit_decay_rate, simulate_coupled, theoretical_beta
from .ergodics import _jsonable, evolution_measure, invariant_measure
from .experiments import (generator_residual, increment_suite, strong_convergence, weak_convergence,
                          write_report)
from .khasminskii import BlockSchedule, auxiliary_path, default_delta as default_block, export_csv, \
    gap_functional, sup_block_gap
from .models import ConfigurationError, ModelBlowupError, get_model, validate_partial_dissipativity
from .rng import aux_rng
from .sde import simulate_slow_fast

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


# ---------------------------------------------------------------------------
# value parsers

def _floats(v) -> list[float]:
    """List of floats from a JSON list, a comma list, or ``lin:a:b:n`` / ``pow2:k0:k1``."""
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    if isinstance(v, (int, float)):
        return [float(v)]
    s = str(v).strip()
    if s.startswith("lin:"):
        a, b, n = s[4:].split(":")
        return [float(x) for x in np.linspace(float(a), float(b), int(n))]
    if s.startswith("pow2:"):
        k0, k1 = (int(k) for k in s[5:].split(":"))
        return [2.0 ** -k for k in range(k0, k1 + 1)]
    return [float(x) for x in s.split(",") if x.strip()]


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes"):
        return True
    if s in ("0", "false", "no"):
        return False
    raise ConfigurationError(f"not a boolean: {v!r}")


def _int(v) -> int:
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ConfigurationError(f"not an integer: {v!r}")
    return int(v)


def _str(v) -> str:
    if not isinstance(v, str):
        raise ConfigurationError(f"not a string: {v!r}")
    return v


@dataclass(frozen=True)
class Param:
    name: str
    kind: Callable[[Any], Any]
    default: Any = None
    help: str = ""
    positive: bool = False


COMMON = [
    Param("model", _str, None, "zoo id or path to a model-parameter JSON file"),
    Param("seed", _int, 0, "master seed"),
    Param("out", _str, "sfal-out", "output directory"),
]

SUBCOMMANDS: dict[str, list[Param]] = {
    "simulate": [
        Param("epsilon", float, None, "time-scale separation", True),
        Param("T", float, 1.0, "horizon", True),
        Param("dt", float, None, "step (default eps/50)", True),
        Param("n_paths", _int, 100, "number of paths", True),
        Param("save_every", _int, 1, "store every k-th step", True),
        Param("x0", _floats, None, "initial slow state"),
        Param("y0", _floats, None, "initial fast state"),
    ],
    "couple": [
        Param("delta", float, None, "mollifier width (default 1e-3 r0)", True),
        Param("dt", float, None, "step (default delta/10)", True),
        Param("T", float, 5.0, "horizon", True),
        Param("n_paths", _int, 500, "number of coupled pairs", True),
        Param("x1", _floats, None, "frozen slow value of the first copy (default x0)"),
        Param("x2", _floats, None, "frozen slow value of the second copy (default x1)"),
        Param("y1", _floats, None, "start of the first copy (default +1)"),
        Param("y2", _floats, None, "start of the second copy (default -1)"),
        Param("save_every", _int, 100, "store every k-th step", True),
    ],
    "ergodic": [
        Param("x", _floats, None, "frozen slow value (default x0)"),
        Param("t", float, 0.0, "time label of the measure"),
        Param("lookback", float, None, "pullback horizon", True),
        Param("dt", float, 0.01, "step", True),
        Param("samples", _int, 2000, "cloud size", True),
    ],
    "invariant": [
        Param("x", _floats, None, "frozen slow value (default x0)"),
        Param("burn_in", float, None, "burn-in length", True),
        Param("samples", _int, 2000, "cloud size", True),
        Param("thin", _int, 10, "steps between retained samples", True),
        Param("dt", float, 0.01, "step", True),
    ],
    "average": [
        Param("x_grid", _floats, None, "tabulation nodes (n = 1): list, a,b,c or lin:a:b:n"),
        Param("samples", _int, 4000, "invariant samples per node", True),
        Param("burn_in", float, None, "burn-in length", True),
        Param("dt", float, 0.01, "step for the invariant chains", True),
    ],
    "khasminskii": [
        Param("epsilon", float, None, "time-scale separation", True),
        Param("T", float, 1.0, "horizon", True),
        Param("dt", float, None, "step (default eps/50)", True),
        Param("delta", float, None, "block length (default eps^(2/3) on the dt grid)", True),
        Param("n_paths", _int, 200, "number of paths", True),
        Param("F", _str, "b", "integrand: b, y, tanh_y, x"),
        Param("Z", _str, "one", "weight: one, zero, tanh, clip_abs"),
        Param("t0", float, 0.0, "integration start"),
        Param("t", float, None, "integration end (default T)"),
        Param("export_every", _int, 1, "CSV row stride in steps", True),
    ],
    "strong-converge": [
        Param("eps_grid", _floats, "pow2:2:8", "decreasing eps values"),
        Param("T", float, 1.0, "horizon", True),
        Param("n_paths", _int, 2000, "paths per eps", True),
        Param("x_grid", _floats, "lin:-6:8:29", "tabulation nodes for b_bar"),
        Param("samples", _int, 4000, "invariant samples per node", True),
        Param("burn_in", float, 20.0, "burn-in length", True),
    ],
    "weak-converge": [
        Param("eps_grid", _floats, "pow2:2:8", "decreasing eps values"),
        Param("T", float, 1.0, "horizon", True),
        Param("n_paths", _int, 20000, "paths per ensemble", True),
        Param("x_grid", _floats, "lin:-6:6:25", "tabulation nodes for b_bar and Sigma_bar"),
        Param("samples", _int, 8000, "invariant samples per node", True),
        Param("burn_in", float, 20.0, "burn-in length", True),
        Param("phi", _str, "tanh", "comma list from: tanh, x, sin"),
    ],
    "residual": [
        Param("x_grid", _floats, "lin:-6:6:25", "tabulation nodes"),
        Param("samples", _int, 4000, "invariant samples per node", True),
        Param("burn_in", float, 20.0, "burn-in length", True),
        Param("T", float, 1.0, "horizon", True),
        Param("dt", float, 1e-3, "step of the limit equation", True),
        Param("n_paths", _int, 2000, "number of paths", True),
        Param("U", _str, "quadratic", "test function: quadratic, tanh"),
        Param("t0", float, 0.0, "window start"),
        Param("t", float, None, "window end (default T)"),
        Param("control", _bool, True, "also report the doubled-Sigma negative control"),
    ],
    "increments": [
        Param("epsilon", float, None, "time-scale separation", True),
        Param("T", float, 1.0, "horizon", True),
        Param("h_grid", _floats, "0.04,0.02,0.01", "decreasing increment lengths"),
        Param("n_paths", _int, 1000, "number of paths", True),
    ],
    "validate-model": [
        Param("pairs", _int, 20000, "random (t, x, y1, y2) tuples", True),
        Param("t_max", float, 10.0, "time range [0, t_max]", True),
        Param("x_max", float, 5.0, "slow box half-width", True),
        Param("y_max", float, 5.0, "fast box half-width", True),
    ],
}

ALIASES = {"n_paths": ["--paths"], "epsilon": ["--eps"]}

PHIS = {
    "tanh": lambda x: np.tanh(x[:, 0]),
    "x": lambda x: x[:, 0],
    "sin": lambda x: np.sin(x[:, 0]),
}


# ---------------------------------------------------------------------------
# configuration

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sfal", description="Slow-fast averaging toolkit.", allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"sfal {__version__}")
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", parser_class=_Parser)
    p.subcommand_parsers = {}
    for name, params in SUBCOMMANDS.items():
        sp = p.subcommand_parsers[name] = sub.add_parser(name, help=f"{name} workflow", allow_abbrev=False)
        sp.add_argument("--config", help="JSON config or manifest (flags take precedence)")
        sp.add_argument("--threads", type=int, help="worker threads (env SFAL_THREADS)")
        for prm in COMMON + params:
            flags = ["--" + prm.name.replace("_", "-")] + ALIASES.get(prm.name, [])
            sp.add_argument(*flags, dest=prm.name, default=argparse.SUPPRESS,
                            help=f"{prm.help} (default: {prm.default})")
    return p


def load_config(path, subcommand: str) -> dict:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigurationError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    if "subcommand" in data:
        extra = set(data) - {"subcommand", "version", "config"}
        if extra:
            raise ConfigurationError(f"{path}: unknown manifest keys {sorted(extra)}")
        if data["subcommand"] != subcommand:
            raise ConfigurationError(f"{path}: manifest is for {data['subcommand']!r}, not {subcommand!r}")
        data = data.get("config", {})
    return data


def resolve(subcommand: str, flags: dict, config: dict) -> dict:
    """Merge flags > config file > defaults, rejecting unknown keys and checking signs."""
    params = {p.name: p for p in COMMON + SUBCOMMANDS[subcommand]}
    unknown = set(config) - set(params) - {"threads"}
    if unknown:
        raise ConfigurationError(f"unknown config keys for {subcommand}: {sorted(unknown)}")
    out = {}
    for name, prm in params.items():
        raw = flags[name] if name in flags else config.get(name, prm.default)
        if raw is None:
            out[name] = None
            continue
        try:
            val = prm.kind(raw)
        except (TypeError, ValueError) as err:
            raise ConfigurationError(f"bad value for {name}: {raw!r} ({err})") from None
        if prm.positive and val <= 0:
            raise ConfigurationError(f"{name} must be positive, got {val!r}")
        out[name] = val
    if out["model"] is None:
        raise ConfigurationError("--model is required")
    return out


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _require(cfg: dict, *names):
    for n in names:
        if cfg.get(n) is None:
            raise ConfigurationError(f"--{n.replace('_', '-')} is required")


# ---------------------------------------------------------------------------
# handlers; each may fill derived defaults into cfg so the manifest is complete

def _simulate(cfg, model, out, threads):
    _require(cfg, "epsilon")
    cfg["dt"] = cfg["dt"] or cfg["epsilon"] / 50.0
    ens = simulate_slow_fast(model, cfg["epsilon"], cfg["T"], cfg["dt"], cfg["n_paths"], cfg["seed"],
                             x0=cfg["x0"], y0=cfg["y0"], save_every=cfg["save_every"], threads=threads)
    ens.to_csv(out / "paths.csv")


def _couple(cfg, model, out, threads):
    k = theoretical_beta(model.dissipativity)
    cfg["delta"] = cfg["delta"] or default_delta(model.dissipativity)
    cfg["dt"] = cfg["dt"] or cfg["delta"] / 10.0
    cfg["x1"] = cfg["x1"] or [float(v) for v in model.x0]
    cfg["x2"] = cfg["x2"] or cfg["x1"]
    cfg["y1"] = cfg["y1"] or [1.0] * model.m
    cfg["y2"] = cfg["y2"] or [-1.0] * model.m
    cc = CouplingConfig(delta=cfg["delta"], dt=cfg["dt"], T=cfg["T"], n_paths=cfg["n_paths"], x1=cfg["x1"],
                        x2=cfg["x2"], y1=cfg["y1"], y2=cfg["y2"], save_every=cfg["save_every"])
    trace = simulate_coupled(model, cc, cfg["seed"], k, threads)
    trace.to_csv(out / "coupling.csv")
    mh, se = trace.mean_h()
    rate, used = fit_decay_rate(trace.times, mh, floor=3 * float(se.max()))
    _write_json(out / "summary.json", {"c1": k.c1, "c2": k.c2, "beta": k.beta, "fitted_rate": rate,
                                       "points_used": used, "final_mean_h": float(mh[-1])})
    _info(f"theoretical beta {k.beta:.6g}, fitted rate {rate:.6g}")


def _frozen_x(cfg, model):
    cfg["x"] = cfg["x"] or [float(v) for v in model.x0]
    return cfg["x"]


def _ergodic(cfg, model, out, threads):
    x = _frozen_x(cfg, model)
    mu = evolution_measure(model, x, cfg["t"], cfg["lookback"], cfg["dt"], cfg["samples"], cfg["seed"],
                           threads=threads)
    cfg["lookback"] = mu.meta["lookback"]
    mu.to_csv(out / "measure.csv", out / "measure.meta.json")


def _invariant(cfg, model, out, threads):
    x = _frozen_x(cfg, model)
    mu = invariant_measure(model, x, cfg["burn_in"], cfg["samples"], cfg["thin"], cfg["dt"], cfg["seed"],
                           threads=threads)
    cfg["burn_in"] = mu.meta["burn_in"]
    mu.to_csv(out / "measure.csv", out / "measure.meta.json")


TABULATION_DT = 0.01


def _tabulate(cfg, model, threads, dt=TABULATION_DT):
    _require(cfg, "x_grid")
    if model.n != 1:
        raise ConfigurationError("CLI tabulation supports n = 1; use the Python API for tensor grids")
    return tabulate_averaged(model, np.array(cfg["x_grid"]), cfg["samples"], cfg["seed"], cfg["burn_in"], dt,
                             threads=threads)


def _average(cfg, model, out, threads):
    avg = _tabulate(cfg, model, threads, cfg["dt"])
    avg.to_csv(out / "table.csv", out / "table.meta.json")


def _khasminskii(cfg, model, out, threads):
    _require(cfg, "epsilon")
    cfg["dt"] = cfg["dt"] or cfg["epsilon"] / 50.0
    cfg["delta"] = cfg["delta"] or default_block(cfg["epsilon"], cfg["dt"])
    cfg["t"] = cfg["T"] if cfg["t"] is None else cfg["t"]
    ens = simulate_slow_fast(model, cfg["epsilon"], cfg["T"], cfg["dt"], cfg["n_paths"], cfg["seed"],
                             record_increments=True, threads=threads)
    sched = BlockSchedule(cfg["delta"], cfg["T"])
    aux = auxiliary_path(model, cfg["epsilon"], sched, ens)
    g = gap_functional(model, cfg["epsilon"], sched, ens, cfg["F"], cfg["t0"], cfg["t"], cfg["Z"], aux=aux)
    sup, sup_se = sup_block_gap(aux)
    export_csv(out / "khasminskii.csv", ens, aux, every=cfg["export_every"])
    _write_json(out / "gap.json", {"gap": g.value, "stderr": g.stderr, "delta": g.delta, "scale": g.scale,
                                   "calibrated_c": g.calibrated_c, "sup_gap": sup, "sup_gap_stderr": sup_se})


def _strong(cfg, model, out, threads):
    avg = _tabulate(cfg, model, threads)
    rep = strong_convergence(model, avg, cfg["eps_grid"], cfg["T"], cfg["n_paths"], cfg["seed"],
                             threads=threads, progress=_info)
    write_report(rep, out)
    _info(f"fitted slope {rep.slope:.4f}")


def _weak(cfg, model, out, threads):
    names = [s.strip() for s in cfg["phi"].split(",") if s.strip()]
    bad = [s for s in names if s not in PHIS]
    if bad or not names:
        raise ConfigurationError(f"unknown phi {bad}; choose from {sorted(PHIS)}")
    avg = _tabulate(cfg, model, threads)
    rep = weak_convergence(model, avg, {k: PHIS[k] for k in names}, cfg["eps_grid"], cfg["T"], cfg["n_paths"],
                           cfg["seed"], threads=threads, progress=_info)
    write_report(rep, out)


def _residual(cfg, model, out, threads):
    cfg["t"] = cfg["T"] if cfg["t"] is None else cfg["t"]
    avg = _tabulate(cfg, model, threads)
    lim = simulate_averaged(avg, "weak", model.x0, cfg["T"], cfg["dt"], cfg["n_paths"], cfg["seed"],
                            threads=threads)
    res, se = generator_residual(avg, cfg["U"], lim, cfg["t0"], cfg["t"])
    result = {"residual": res, "stderr": se, "z": res / se if se > 0 else 0.0}
    if cfg["control"]:
        r2, s2 = generator_residual(avg, cfg["U"], lim, cfg["t0"], cfg["t"], Sigma_scale=2.0)
        result["control"] = {"residual": r2, "stderr": s2, "z": r2 / s2 if s2 > 0 else 0.0}
    _write_json(out / "residual.json", result)


def _increments(cfg, model, out, threads):
    _require(cfg, "epsilon")
    rep = increment_suite(model, cfg["epsilon"], cfg["T"], cfg["h_grid"], cfg["n_paths"], cfg["seed"], threads=threads)
    write_report(rep, out)


def _validate(cfg, model, out, threads):
    bounds = {"t": (0.0, cfg["t_max"]), "x": (-cfg["x_max"], cfg["x_max"]), "y": (-cfg["y_max"], cfg["y_max"])}
    rep = validate_partial_dissipativity(model, bounds, cfg["pairs"], aux_rng(cfg["seed"], "validate"))
    _write_json(out / "validation.json", rep.__dict__ | {"passed": rep.passed})
    print(f"worst dissipativity margin {rep.worst_margin:.6g} "
          f"({rep.n_violations} violations in {rep.n_pairs} pairs)")
    if not rep.passed:
        raise ConfigurationError("model violates the declared dissipativity constants")


HANDLERS = {
    "simulate": _simulate, "couple": _couple, "ergodic": _ergodic, "invariant": _invariant,
    "average": _average, "khasminskii": _khasminskii, "strong-converge": _strong,
    "weak-converge": _weak, "residual": _residual, "increments": _increments,
    "validate-model": _validate,
}


def parse_and_dispatch(argv=None, env=None) -> int:
    env = os.environ if env is None else env
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as ex:
        return int(ex.code or 0)
    if ns.subcommand is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    flags = {k: v for k, v in vars(ns).items() if k not in ("subcommand", "config", "threads")}
    try:
        config = load_config(ns.config, ns.subcommand) if ns.config else {}
        cfg = resolve(ns.subcommand, flags, config)
        threads = ns.threads if ns.threads is not None else config.get("threads")
        if threads is None and env.get("SFAL_THREADS"):
            threads = int(env["SFAL_THREADS"])
        if threads is not None and int(threads) < 1:
            raise ConfigurationError("threads must be positive")
        model = get_model(cfg["model"])
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[ns.subcommand](cfg, model, out, threads)
        # thread count is excluded: it never changes results
        _write_json(out / "manifest.json", {"subcommand": ns.subcommand, "version": __version__, "config": cfg})
    except ModelBlowupError as err:
        print(f"sfal: runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigurationError, ValueError, KeyError, FileNotFoundError) as err:
        parser.subcommand_parsers[ns.subcommand].print_usage(sys.stderr)
        print(f"sfal: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, RuntimeError, OSError) as err:
        print(f"sfal: runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
