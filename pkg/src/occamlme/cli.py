"""Command-line front end.

Examples
--------
Fit the normal model::

    occamlme --mode normal-em --input data.csv --out-dir out/

Run a desk-scale simulation study::

    occamlme --mode simulate --config study.cfg --out-dir sim/

Repeat a previous run exactly::

    occamlme --config out/manifest.json --out-dir again/
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .io import (curve_design, dump_json, emit_population_curve, file_digest, load_csv,
                 parse_grid, write_fit)
from .model import DatasetError, ModelError, NumericalError
from .normal_em import FitConfig, SolverError, em_fit
from .simulate import SimConfig, desk_grid, full_grid, run_study

log = logging.getLogger("occamlme")

MODES = ("normal-em", "skewt-vb", "simulate")

# key -> parser; everything the config file may set
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _bool(v: str) -> bool:
    try:
        return _BOOL[str(v).strip().lower()]
    except KeyError:
        raise ModelError(f"not a boolean: {v!r}") from None


def _opt_float(v: str):
    return None if str(v).strip().lower() in ("", "none") else float(v)


def _opt_int(v: str):
    return None if str(v).strip().lower() in ("", "none") else int(v)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(v).split(",") if x.strip())


KEYS = {
    "mode": str, "input": str, "out_dir": str,
    # fitting
    "K": int, "L": _opt_int, "epsilon": float, "tol": float, "max_iter": int,
    "patience": int, "seed": int, "threads": int, "exponent_convention": str, "slab": str,
    "score_includes_prior": _bool, "init_a": float, "full_enumeration": _bool,
    "mc_draws": int, "init_c": _opt_float, "init_f": float, "fix_c": _bool, "fix_f": _bool,
    "smooth_window": int,
    # data roles
    "id_column": str, "y_column": str, "x_columns": str, "s_columns": str, "intercept": _bool,
    # population curve
    "curve_grid": str, "curve_basis": str,
    # simulation
    "grid": str, "M": int, "p": int, "h": float, "q_prop": float, "c": float, "f": float,
    "replicates": int, "sim_method": str, "workers": int, "metric_literal": _bool,
    "q_values": _floats, "K_values": _ints, "q": int,
}

DEFAULTS: dict[str, Any] = {
    "mode": "normal-em", "id_column": "id", "y_column": "y", "x_columns": "", "s_columns": "",
    "intercept": True, "curve_basis": "poly", "grid": "desk", "workers": 1,
    "metric_literal": False, "sim_method": "skewt-vb",
}


def read_config(path: str | Path) -> dict[str, Any]:
    """Flat ``key = value`` file (``#`` comments), or a previous ``manifest.json``."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        manifest = json.loads(text)
        if "config" not in manifest:
            raise ModelError(f"{path}: JSON config must be a manifest with a 'config' entry")
        return {k: v for k, v in manifest["config"].items() if v is not None}
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ModelError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve(raw: dict[str, Any]) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    for key, value in raw.items():
        if key not in KEYS:
            raise ModelError(f"unknown config key {key!r}")
        parse = KEYS[key]
        cfg[key] = value if not isinstance(value, str) or parse is str else parse(value)
        if parse in (_floats, _ints) and isinstance(value, list):
            cfg[key] = tuple(value)
    if cfg["mode"] not in MODES:
        raise ModelError(f"unknown mode {cfg['mode']!r}")
    return cfg


def fit_config(cfg: dict[str, Any], mode: str) -> FitConfig:
    names = {f.name for f in fields(FitConfig)}
    kwargs = {k: v for k, v in cfg.items() if k in names}
    return FitConfig(**kwargs)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="occamlme",
        description="Per-individual variable selection in sparse linear mixed models.")
    ap.add_argument("--mode", choices=MODES)
    ap.add_argument("--config", help="key = value file, or a manifest.json to repeat a run")
    ap.add_argument("--input", help="long-format CSV (id, y, x_*, s_* by default)")
    ap.add_argument("--out-dir", dest="out_dir")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--K", type=int)
    ap.add_argument("--L", type=int)
    ap.add_argument("--max-iter", dest="max_iter", type=int)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override any config key (repeatable)")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def gather(args: argparse.Namespace) -> dict[str, Any]:
    raw: dict[str, Any] = read_config(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ModelError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    for key in ("mode", "input", "out_dir", "seed", "threads", "K", "L", "max_iter"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    cfg = resolve(raw)
    if "out_dir" not in cfg:
        raise ModelError("no output directory (--out-dir)")
    return cfg


def _manifest(cfg: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    return {
        "config": cfg,
        "versions": {"occamlme": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "pandas": pd.__version__,
                     "python": sys.version.split()[0]},
        **extra,
    }


def run_fit(cfg: dict[str, Any]) -> Path:
    if "input" not in cfg:
        raise ModelError("fit modes need --input")
    data = load_csv(cfg["input"], cfg["id_column"], cfg["y_column"], cfg["x_columns"] or None,
                    cfg["s_columns"] or None, cfg["intercept"])
    fc = fit_config(cfg, cfg["mode"])
    if cfg["mode"] == "normal-em":
        state = em_fit(data, fc)
    else:
        from .skewt import vb_fit
        state = vb_fit(data, fc)
    out = write_fit(data, state, cfg["mode"], cfg["out_dir"])
    if cfg.get("curve_grid"):
        t = parse_grid(cfg["curve_grid"])
        q = state.globals.zeta_star.size
        G = curve_design(t, q, cfg["curve_basis"])
        curve = emit_population_curve(state.globals.zeta_star, G)
        curve.insert(0, "t", t)
        curve.to_csv(out / "population_curve.tsv", sep="\t", index=False, float_format="%.17g")
    dump_json(_manifest(cfg, {"input_sha256": file_digest(cfg["input"]),
                              "fit": fc.to_dict()}), out / "manifest.json")
    log.info("wrote %s (iterations %d, converged %s)", out, state.iteration, state.converged)
    return out


def sim_grid(cfg: dict[str, Any]) -> list[SimConfig]:
    method = cfg["sim_method"]
    seed = cfg.get("seed", 0)
    kind = cfg["grid"]
    if kind == "full":
        return full_grid(replicates=cfg.get("replicates", 30), M=cfg.get("M", 300), seed=seed,
                         method=method)
    common = {k: cfg[k] for k in ("M", "p", "h", "c", "f", "replicates") if k in cfg}
    if kind == "desk":
        return desk_grid(seed=seed, method=method, q_values=cfg.get("q_values", (0.15, 0.3)),
                         K_values=cfg.get("K_values", (30, 100)),
                         **{"replicates": 3, **common})
    if kind == "single":
        extra = {k: cfg[k] for k in ("q_prop", "K", "q") if k in cfg}
        return [SimConfig(seed=seed, method=method, **common, **extra)]
    raise ModelError(f"unknown grid {kind!r}; use desk, single or full")


def run_simulate(cfg: dict[str, Any]) -> Path:
    grid = sim_grid(cfg)
    fc = fit_config(cfg, "simulate")
    out = Path(cfg["out_dir"])
    run_study(grid, fc, workers=cfg["workers"], out_dir=out,
              metric_literal=cfg["metric_literal"])
    # the study writes its own manifest; replace it with one that can replay the run
    study = json.loads((out / "manifest.json").read_text())
    dump_json(_manifest(cfg, {"study": study}), out / "manifest.json")
    return out


def run(cfg: dict[str, Any]) -> Path:
    if cfg["mode"] == "simulate":
        return run_simulate(cfg)
    return run_fit(cfg)


def _fail(kind: str, exc: BaseException, out_dir: str | None, code: int) -> int:
    err = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    for attr in ("report", "diagnostics", "context"):
        val = getattr(exc, attr, None)
        if val:
            err[attr] = val
    text = json.dumps(err, default=str)
    print(text, file=sys.stderr)
    if out_dir:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            Path(out_dir, "error.json").write_text(text + "\n")
        except OSError:
            pass
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = args.out_dir
    try:
        cfg = gather(args)
        out_dir = cfg["out_dir"]
        run(cfg)
    except (DatasetError, ModelError, FileNotFoundError, pd.errors.ParserError) as exc:
        return _fail("input", exc, out_dir, 2)
    except (NumericalError, SolverError) as exc:
        return _fail("numerical", exc, out_dir, 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
