"""Reading longitudinal CSV data and writing fit artifacts."""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from .model import DatasetError, IndividualData, ModelError
from .normal_em import EMState

# timing fields are written apart from the deterministic outputs
TIMING_FIELDS = ("wall_time",)


def _columns(df: pd.DataFrame, names: str | Sequence[str] | None, prefix: str) -> list[str]:
    if names is None or names == "":
        cols = [c for c in df.columns if str(c).startswith(prefix)]
    elif isinstance(names, str):
        cols = [c.strip() for c in names.split(",") if c.strip()]
    else:
        cols = list(names)
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise ModelError(f"columns not found in input: {missing}")
    return cols


def load_csv(path: str | Path, id_column: str = "id", y_column: str = "y",
             x_columns: str | Sequence[str] | None = None,
             s_columns: str | Sequence[str] | None = None,
             intercept: bool = True) -> list[IndividualData]:
    """Long-format CSV to one :class:`IndividualData` per id.

    Column roles are explicit: ``x_columns`` are fixed-effect covariates and
    ``s_columns`` candidate random effects (default: ``x_*`` and ``s_*``
    prefixes). With ``intercept`` a column of ones is prepended to X.
    Individuals keep the order of first appearance.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    for col in (id_column, y_column):
        if col not in df.columns:
            raise ModelError(f"column {col!r} not found in input")
    xc = _columns(df, x_columns, "x_")
    sc = _columns(df, s_columns, "s_")
    if not sc:
        raise ModelError("no random-effect columns")
    data = []
    for key, grp in df.groupby(id_column, sort=False):
        y = grp[y_column].to_numpy(dtype=float)
        X = grp[xc].to_numpy(dtype=float) if xc else np.empty((len(grp), 0))
        if intercept:
            X = np.column_stack([np.ones(len(grp)), X])
        if X.shape[1] == 0:
            raise ModelError("fixed-effect design is empty; enable the intercept")
        S = grp[sc].to_numpy(dtype=float)
        data.append(IndividualData(_plain(key), y, X, S))
    if not data:
        raise DatasetError("no individuals", {})
    return data


def _plain(x):
    return x.item() if hasattr(x, "item") else x


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def jsonable(x: Any) -> Any:
    """Recursively convert numpy values and non-finite floats for JSON."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, np.generic):
        return jsonable(x.item())
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_trace(trace: Sequence[dict[str, Any]], out_dir: Path) -> None:
    """``trace.jsonl`` without timings, and ``timings.jsonl`` with them."""
    with open(out_dir / "trace.jsonl", "w") as fh:
        for row in trace:
            clean = {k: v for k, v in row.items() if k not in TIMING_FIELDS}
            fh.write(json.dumps(jsonable(clean), sort_keys=True) + "\n")
    with open(out_dir / "timings.jsonl", "w") as fh:
        for row in trace:
            fh.write(json.dumps({"iteration": row["iteration"],
                                 **{k: row[k] for k in TIMING_FIELDS if k in row}}) + "\n")


def windows_table(data: Sequence[IndividualData], state: EMState) -> pd.DataFrame:
    """K rows per individual: bitstring, log marginal, weight."""
    rows = []
    for d, win, post in zip(data, state.windows, state.posteriors):
        order = np.argsort(-post.weights, kind="stable")
        for rank, k in enumerate(order):
            rows.append({"id": d.id, "rank": rank, "model": win.models[k].bitstring(),
                         "log_marginal": float(post.log_marginal[k]),
                         "weight": float(post.weights[k])})
    return pd.DataFrame(rows)


def trajectories_table(data: Sequence[IndividualData], state: EMState) -> pd.DataFrame:
    """Per observation: fixed-effect fit and the model-averaged individual fit."""
    zeta = state.globals.zeta_star
    frames = []
    for d, post in zip(data, state.posteriors):
        fixed = d.X @ zeta
        indiv = fixed + d.S1 @ post.beta_mean()
        frames.append(pd.DataFrame({"id": d.id, "obs": np.arange(d.n), "y": d.y,
                                    "fixed_fit": fixed, "individual_fit": indiv}))
    return pd.concat(frames, ignore_index=True)


def fit_summary(data: Sequence[IndividualData], state: EMState, mode: str) -> dict[str, Any]:
    incl = state.inclusion_probabilities()
    return {
        "mode": mode,
        "globals": state.globals.to_dict(),
        "iterations": state.iteration,
        "converged": state.converged,
        "q_final": state.q_value,
        "q_trace": state.q_trace,
        "objective_trace": state.objective_trace,
        "individuals": [
            {"id": d.id, "inclusion": incl[i], "beta_mean": post.beta_mean()}
            for i, (d, post) in enumerate(zip(data, state.posteriors))
        ],
        "diagnostics": {k: v for k, v in state.diagnostics.items()
                        if isinstance(v, (dict, int, float, str, bool))},
    }


def write_fit(data: Sequence[IndividualData], state: EMState, mode: str,
              out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(fit_summary(data, state, mode), out / "fit.json")
    write_trace(state.trace, out)
    tsv = dict(sep="\t", index=False, float_format="%.17g")
    windows_table(data, state).to_csv(out / "windows.tsv", **tsv)
    trajectories_table(data, state).to_csv(out / "trajectories.tsv", **tsv)
    return out


# ---------------------------------------------------------------------------
# population curve


def parse_grid(text: str) -> np.ndarray:
    """``start:stop:num`` (inclusive, evenly spaced) or a comma list of values."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ModelError(f"bad grid {text!r}; expected start:stop:num")
        return np.linspace(float(parts[0]), float(parts[1]), int(parts[2]))
    return np.array([float(v) for v in text.split(",") if v.strip()])


def curve_design(t: np.ndarray, q: int, basis: str = "poly") -> np.ndarray:
    """Covariates (without intercept) for grid values ``t``.

    ``poly``: column k is ``t^k`` (polynomial fixed effects);
    ``first``: ``t`` in the first covariate, zeros elsewhere.
    """
    t = np.asarray(t, dtype=float)
    if basis == "poly":
        return np.column_stack([t ** k for k in range(1, q)]) if q > 1 else np.empty((t.size, 0))
    if basis == "first":
        out = np.zeros((t.size, q - 1))
        if q > 1:
            out[:, 0] = t
        return out
    raise ModelError(f"unknown curve basis {basis!r}")


def emit_population_curve(zeta_star, grid, columns: Sequence[str] | None = None) -> pd.DataFrame:
    """Population fit ``X zeta*`` over a covariate grid.

    ``grid`` holds the non-intercept covariates, shape ``(G, q - 1)``; a
    leading column of ones is added.
    """
    zeta = np.asarray(zeta_star, dtype=float)
    G = np.asarray(grid, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape[1] != zeta.size - 1:
        raise ModelError(f"grid has {G.shape[1]} covariate columns, model needs {zeta.size - 1}")
    X = np.column_stack([np.ones(G.shape[0]), G])
    names = list(columns) if columns is not None else [f"x_{k}" for k in range(1, zeta.size)]
    df = pd.DataFrame(G, columns=names)
    df["fitted"] = X @ zeta
    return df
