"""CSV/JSON ingestion and persistence.

Tables are CSV with a header row and, for sample-indexed tables, row
identifiers in the first column.  Floats are written with 17 significant
digits so that values survive a write/read round trip bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .core import CountDataset, partial_correlations
from .evaluation import EdgeRanking, _dense_rank
from .exceptions import InputError, NumericalError
from .fit import FitResult, PathResult
from .selection import StabilityProfile
from .simulation import BenchmarkInstance, GroundTruthGraph

FLOAT_FORMAT = "%.17g"
OFFSET_MODES = ("none", "total_counts", "file")
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# reading


def _read_table(path, what: str) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{what} file not found: {path}")
    try:
        df = pd.read_csv(path, index_col=0, float_precision="round_trip")
    except pd.errors.ParserError as exc:
        raise InputError(f"{what} file {path} has ragged rows: {exc}") from None
    except pd.errors.EmptyDataError:
        raise InputError(f"{what} file {path} is empty") from None
    df.index = df.index.astype(str)
    if df.index.has_duplicates:
        dup = df.index[df.index.duplicated()][0]
        raise InputError(f"duplicate row identifier {dup!r} in {what} file")
    if df.isna().any().any():
        row = df.index[df.isna().any(axis=1)][0]
        raise InputError(f"missing or ragged entry in row {row!r} of {what} file")
    return df


def _numeric(df: pd.DataFrame, what: str) -> np.ndarray:
    try:
        return df.apply(pd.to_numeric).to_numpy(dtype=float)
    except (ValueError, TypeError):
        raise InputError(f"{what} must be numeric") from None


def _align(df: pd.DataFrame, ids: Sequence[str], what: str) -> pd.DataFrame:
    have = set(df.index)
    for rid in ids:
        if rid not in have:
            raise InputError(f"row identifier {rid!r} is in the counts file but not in the {what} file")
    extra = have.difference(ids)
    if extra:
        raise InputError(f"row identifier {sorted(extra)[0]!r} is in the {what} file but not in the counts file")
    return df.loc[list(ids)]


def design_from_frame(df: pd.DataFrame, intercept: bool = True) -> tuple[np.ndarray, list[str]]:
    """Numeric design matrix from a covariate table.

    Non-numeric columns are expanded to indicator columns; the first level is
    dropped when an intercept is present.
    """
    cols, names = [], []
    if intercept:
        cols.append(np.ones(len(df)))
        names.append("intercept")
    for name in df.columns:
        col = df[name]
        numeric = pd.to_numeric(col, errors="coerce")
        if numeric.notna().all() and not isinstance(col.dtype, pd.CategoricalDtype):
            cols.append(numeric.to_numpy(dtype=float))
            names.append(str(name))
            continue
        levels = sorted(col.astype(str).unique())
        for level in levels[1:] if intercept else levels:
            cols.append((col.astype(str) == level).to_numpy(dtype=float))
            names.append(f"{name}[{level}]")
    if not cols:
        raise InputError("empty design: no intercept and no covariates")
    return np.column_stack(cols), names


def read_dataset(
    counts_path,
    covariates_path=None,
    offsets_path=None,
    offset_mode: str | None = None,
    intercept: bool = True,
) -> CountDataset:
    """Load a count table and optional covariates and offsets.

    Parameters
    ----------
    counts_path : path
        Samples in rows, variables in columns, identifiers in the first column.
    covariates_path : path, optional
        Covariates per sample.  Without it the design is the intercept alone.
    offsets_path : path, optional
        Either one column (one offset per sample) or a full table with the
        same columns as the counts.
    offset_mode : {"none", "total_counts", "file"}, optional
        Defaults to ``"file"`` when ``offsets_path`` is given, else ``"none"``.
        ``total_counts`` uses ``log(max(row sum, 1))``.
    """
    if offset_mode is None:
        offset_mode = "file" if offsets_path is not None else "none"
    if offset_mode not in OFFSET_MODES:
        raise InputError(f"unknown offset mode {offset_mode!r}; expected one of {OFFSET_MODES}")
    if (offset_mode == "file") != (offsets_path is not None):
        raise InputError("offset mode 'file' and an offsets file go together")

    counts = _read_table(counts_path, "counts")
    Y = _numeric(counts, "counts")
    if np.any(Y < 0) or np.any(Y != np.round(Y)):
        bad = np.argwhere((Y < 0) | (Y != np.round(Y)))[0]
        raise InputError(
            f"counts must be non-negative integers; row {counts.index[bad[0]]!r}, "
            f"column {counts.columns[bad[1]]!r} holds {Y[tuple(bad)]}"
        )
    ids = list(counts.index)
    n, p = Y.shape

    if covariates_path is not None:
        cov = _align(_read_table(covariates_path, "covariates"), ids, "covariates")
        X, xnames = design_from_frame(cov, intercept)
    else:
        if not intercept:
            raise InputError("empty design: no intercept and no covariates")
        X, xnames = np.ones((n, 1)), ["intercept"]

    if offset_mode == "none":
        O = np.zeros((n, p))
    elif offset_mode == "total_counts":
        O = np.repeat(np.log(np.maximum(Y.sum(axis=1), 1.0))[:, None], p, axis=1)
    else:
        off = _align(_read_table(offsets_path, "offsets"), ids, "offsets")
        if off.shape[1] == 1:
            O = np.repeat(_numeric(off, "offsets"), p, axis=1)
        else:
            missing = [c for c in counts.columns if c not in off.columns]
            if missing:
                raise InputError(f"offsets file lacks column {missing[0]!r}")
            O = _numeric(off[list(counts.columns)], "offsets")

    return CountDataset(Y, X, O, tuple(ids), tuple(map(str, counts.columns)), tuple(xnames))


def read_truth(path, nodes: Sequence[str] | None = None) -> tuple[GroundTruthGraph, list[str]]:
    """Truth edge list with columns ``source,target[,edge]``; returns the graph and node order.

    Rows with ``edge == 0`` are non-edges; with no ``edge`` column every row
    is an edge.  ``nodes`` fixes the node order; by default nodes are taken in
    order of first appearance.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"truth file not found: {path}")
    df = pd.read_csv(path, dtype={"source": str, "target": str}, float_precision="round_trip")
    for col in ("source", "target"):
        if col not in df.columns:
            raise InputError(f"truth file lacks a {col!r} column")
    if nodes is None:
        nodes = list(dict.fromkeys(list(df["source"]) + list(df["target"])))
    nodes = list(nodes)
    index = {name: i for i, name in enumerate(nodes)}
    G = np.zeros((len(nodes), len(nodes)), dtype=int)
    flags = df["edge"].to_numpy() if "edge" in df.columns else np.ones(len(df), dtype=int)
    for s, t, e in zip(df["source"], df["target"], flags):
        if s not in index or t not in index:
            raise InputError(f"unknown node in truth file: {s if s not in index else t!r}")
        if s == t:
            raise InputError(f"self loop on {s!r} in truth file")
        if int(e):
            G[index[s], index[t]] = G[index[t], index[s]] = 1
    return GroundTruthGraph(G, "file"), nodes


def read_truth_edges(path, nodes: Sequence[str] | None = None) -> GroundTruthGraph:
    return read_truth(path, nodes)[0]


def read_edges(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"edges file not found: {path}")
    df = pd.read_csv(path, dtype={"source": str, "target": str}, float_precision="round_trip")
    need = {"source", "target", "partial_correlation", "lambda"}
    if not need.issubset(df.columns):
        raise InputError(f"edges file needs columns {sorted(need)}")
    return df


def ranking_from_edges(edges: pd.DataFrame, nodes: Sequence[str]) -> EdgeRanking:
    """Ranking by first-entry penalty, ties broken by ``|rho|`` at that penalty.

    Matches :func:`plnnet.evaluation.path_to_ranking` on the path that
    produced ``edges``.
    """
    index = {name: i for i, name in enumerate(nodes)}
    best: dict[tuple[int, int], tuple[float, float]] = {}
    for s, t, rho, lam in edges[["source", "target", "partial_correlation", "lambda"]].itertuples(index=False):
        if s not in index or t not in index:
            raise InputError(f"edge endpoint {s if s not in index else t!r} is not a known node")
        key = (min(index[s], index[t]), max(index[s], index[t]))
        cand = (float(lam), abs(float(rho)))
        if key not in best or cand[0] > best[key][0]:
            best[key] = cand
    pairs = sorted(best)
    keys = np.array([best[k] for k in pairs], dtype=float).reshape(-1, 2)
    return EdgeRanking(len(nodes), tuple(pairs), _dense_rank(keys), entry_lambda=keys[:, 0])


def read_model(path) -> dict:
    """Load ``model.json``; matrices come back as float arrays."""
    with open(path) as fh:
        doc = json.load(fh)
    for m in doc["models"]:
        for key in ("B", "Omega"):
            mat = m[key]
            m[key] = np.array(mat["data"], dtype=float).reshape(mat["rows"], mat["cols"])
    return doc


def load_schema() -> dict:
    text = resources.files("plnnet").joinpath("schemas/model.schema.json").read_text()
    return json.loads(text)


# ---------------------------------------------------------------------------
# writing


def _check_finite(values, what: str):
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"refusing to write non-finite values in {what}")


def _write_csv(df: pd.DataFrame, path: Path, index: bool = False):
    num = df.select_dtypes(include=[np.number])
    if num.size:
        _check_finite(num.to_numpy(dtype=float), path.name)
    df.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")


def _matrix(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    _check_finite(a, "model matrix")
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": [float(v) for v in a.ravel()]}


def _model_entry(res: FitResult) -> dict:
    lam = res.lam
    trace = [float(v) for v in res.elbo_trace]
    _check_finite(trace + [res.elbo], "ELBO trace")
    return {
        "lambda": None if math.isinf(lam) else float(lam),
        "converged": bool(res.converged),
        "vstep_converged": bool(res.vstep_converged),
        "n_edges": int(res.n_edges),
        "elbo": float(res.elbo),
        "elbo_trace": trace,
        "B": _matrix(res.params.B),
        "Omega": _matrix(res.params.Omega),
    }


def edges_frame(fits: Sequence[FitResult], nodes: Sequence[str]) -> pd.DataFrame:
    rows = []
    for res in fits:
        graph = partial_correlations(res.params, nodes=nodes)
        for j, k, rho in graph.edges:
            rows.append((nodes[j], nodes[k], rho, float(res.lam)))
    return pd.DataFrame(rows, columns=["source", "target", "partial_correlation", "lambda"])


def criteria_frame(path: PathResult, data: CountDataset | None = None, gamma: float = 0.0,
                   profile: StabilityProfile | None = None) -> pd.DataFrame:
    from .selection import ebic

    rows = []
    for k, (lam, res) in enumerate(zip(path.grid, path.fits)):
        value = ebic(res, data, gamma) if data is not None else path.criteria[k]["ebic"]
        row = {"lambda": lam, "n_edges": res.n_edges, "elbo": res.elbo, "ebic": value}
        if profile is not None:
            row["stability"] = float(profile.stability[k])
        rows.append(row)
    return pd.DataFrame(rows)


def write_results(
    result: FitResult | PathResult,
    outdir,
    data: CountDataset,
    profile: StabilityProfile | None = None,
    selected: FitResult | None = None,
    gamma: float = 0.0,
) -> dict[str, Path]:
    """Write ``edges.csv``, ``model.json`` and ``criteria.csv`` to ``outdir``.

    For a path, ``edges.csv`` and ``model.json`` cover every penalty unless
    ``selected`` names one fit, in which case they describe that fit and
    ``criteria.csv`` still covers the path (with stability when ``profile``
    is given).
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    nodes = list(data.col_names)
    if isinstance(result, FitResult):
        path = PathResult([result.lam], [result])
    else:
        path = result
    shown = [selected] if selected is not None else path.fits

    files = {"edges": out / "edges.csv", "model": out / "model.json", "criteria": out / "criteria.csv"}
    _write_csv(edges_frame(shown, nodes), files["edges"])
    finite = [not math.isinf(f.lam) for f in path.fits]
    crit = criteria_frame(
        PathResult([g for g, ok in zip(path.grid, finite) if ok], [f for f, ok in zip(path.fits, finite) if ok]),
        data,
        gamma,
        profile,
    )
    _write_csv(crit, files["criteria"])
    doc = {
        "format": "plnnet-model",
        "version": SCHEMA_VERSION,
        "dimensions": {"n": data.n, "p": data.p, "d": data.d},
        "nodes": nodes,
        "covariates": list(data.covariate_names),
        "selected_lambda": None if selected is None else float(selected.lam),
        "models": [_model_entry(f) for f in shown],
    }
    with open(files["model"], "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return files


def write_instance(inst: BenchmarkInstance, outdir) -> dict[str, Path]:
    """Counts, covariates (group labels), offsets and the full truth pair list."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    data = inst.counts
    rows = pd.Index(data.row_names, name="sample")
    files = {
        "counts": out / "counts.csv",
        "covariates": out / "covariates.csv",
        "offsets": out / "offsets.csv",
        "truth": out / "truth_edges.csv",
    }
    counts = pd.DataFrame(data.Y.astype(np.int64), index=rows, columns=list(data.col_names))
    _write_csv(counts, files["counts"], index=True)
    X = np.asarray(data.X)
    if X.shape[1] > 1 and np.all((X == 0) | (X == 1)) and np.all(X.sum(axis=1) == 1):
        cov = pd.DataFrame({"group": [f"g{int(g) + 1}" for g in X.argmax(axis=1)]}, index=rows)
    else:
        cov = pd.DataFrame(X, index=rows, columns=list(data.covariate_names))
    _write_csv(cov, files["covariates"], index=True)
    offsets = pd.DataFrame({"offset": data.O[:, 0]}, index=rows)
    if not np.all(data.O == data.O[:, :1]):
        offsets = pd.DataFrame(data.O, index=rows, columns=list(data.col_names))
    _write_csv(offsets, files["offsets"], index=True)
    G = inst.truth.adjacency
    names = list(data.col_names)
    jj, kk = np.triu_indices(len(names), k=1)
    truth = pd.DataFrame(
        {"source": [names[j] for j in jj], "target": [names[k] for k in kk], "edge": G[jj, kk].astype(int)}
    )
    _write_csv(truth, files["truth"])
    return files


def thread_budget(default: int = 1) -> int:
    """Worker count from ``PLNNET_THREADS`` (falls back to ``default``)."""
    raw = os.environ.get("PLNNET_THREADS")
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise InputError(f"PLNNET_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise InputError("PLNNET_THREADS must be at least 1")
    return value
