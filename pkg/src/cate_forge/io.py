"""CSV and JSON formats.

Floats are written with 17 significant digits so every reader/writer pair
round-trips losslessly.
"""

import csv
import json
import math

import numpy as np

from .aggregation import CatePredictionMatrix
from .errors import InvalidInputError
from .learners import SiteDataset
from .qp import PolytopeSpec


class ParseError(InvalidInputError):
    def __init__(self, path, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        loc = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{path}{loc}: {message}")
        self.row = row
        self.column = column


def fmt(x):
    return f"{float(x):.17g}"


def _read_table(path):
    """Header plus data rows; rows are numbered from 1 after the header."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise ParseError(path, f"cannot read file: {exc.strerror}") from None
    if not rows:
        raise ParseError(path, "file is empty")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise ParseError(path, "no data rows")
    for i, r in enumerate(body, start=1):
        if len(r) != len(header):
            raise ParseError(path, f"expected {len(header)} fields, found {len(r)}", row=i)
    return header, body


def _to_float(path, cell, row, column):
    try:
        val = float(cell)
    except ValueError:
        raise ParseError(path, f"non-numeric value {cell.strip()!r}", row=row, column=column) from None
    if not math.isfinite(val):
        raise ParseError(path, f"non-finite value {cell.strip()!r}", row=row, column=column)
    return val


def _numeric(path, header, body):
    out = np.empty((len(body), len(header)))
    for i, r in enumerate(body, start=1):
        for j, cell in enumerate(r):
            out[i - 1, j] = _to_float(path, cell, i, header[j])
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def load_site_csv(path, site_id=None):
    """Read a ``y,a,x1,...,xd`` file into a :class:`SiteDataset`."""
    header, body = _read_table(path)
    if len(header) < 3 or header[0] != "y" or header[1] != "a":
        raise ParseError(path, "header must be y,a,x1,...,xd")
    expected = [f"x{j}" for j in range(1, len(header) - 1)]
    if header[2:] != expected:
        raise ParseError(path, f"covariate columns must be {','.join(expected)}")
    values = _numeric(path, header, body)
    a = values[:, 1]
    bad = np.nonzero((a != 0) & (a != 1))[0]
    if bad.size:
        raise ParseError(path, f"treatment must be 0 or 1, got {body[bad[0]][1].strip()}",
                         row=int(bad[0]) + 1, column="a")
    try:
        return SiteDataset(values[:, 0], a.astype(np.int8), values[:, 2:],
                           site_id=site_id or str(path))
    except InvalidInputError as exc:
        raise ParseError(path, str(exc)) from None


def write_site_csv(path, data):
    header = ["y", "a"] + [f"x{j}" for j in range(1, data.dim + 1)]
    rows = ([float(y), int(a)] + [float(v) for v in x]
            for y, a, x in zip(data.outcomes, data.treatments, data.covariates))
    _write_rows(path, header, rows)


def load_predictions_csv(path):
    """Read a ``site_1,...,site_S`` file (one row per target unit)."""
    header, body = _read_table(path)
    if len(set(header)) != len(header) or any(not h for h in header):
        raise ParseError(path, "column labels must be non-empty and unique")
    return CatePredictionMatrix(_numeric(path, header, body), tuple(header))


def write_predictions_csv(path, preds):
    _write_rows(path, list(preds.site_ids), (list(map(float, r)) for r in preds.values))


def load_matrix_csv(path):
    """Generic numeric table with a header; returns ``(header, values)``."""
    header, body = _read_table(path)
    return header, _numeric(path, header, body)


def load_vector_csv(path):
    header, values = load_matrix_csv(path)
    if values.shape[1] != 1:
        raise ParseError(path, f"expected a single column, found {values.shape[1]}")
    return values[:, 0]


def write_vector_csv(path, name, values):
    _write_rows(path, [name], ([float(v)] for v in values))


def load_covariates_csv(path):
    header, values = load_matrix_csv(path)
    expected = [f"x{j}" for j in range(1, len(header) + 1)]
    if header != expected:
        raise ParseError(path, f"covariate header must be {','.join(expected)}")
    return values


def write_covariates_csv(path, x):
    x = np.atleast_2d(x)
    _write_rows(path, [f"x{j}" for j in range(1, x.shape[1] + 1)], (list(map(float, r)) for r in x))


def load_polytope_csv(path):
    """Vertex list, one vertex per row, one column per site."""
    header, values = load_matrix_csv(path)
    try:
        return PolytopeSpec(values)
    except InvalidInputError as exc:
        raise ParseError(path, str(exc)) from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(fmt(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(obj, fh=None, path=None):
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n"
    if path is not None:
        with open(path, "w") as out:
            out.write(text)
    if fh is not None:
        fh.write(text)
    return text


def load_weights_json(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ParseError(path, f"cannot read file: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(path, f"invalid JSON: {exc.msg}") from None
    weights = obj.get("weights") if isinstance(obj, dict) else obj
    try:
        w = np.array(weights, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(path, "weights must be a list of numbers") from None
    if w.ndim != 1 or w.size < 1 or not np.all(np.isfinite(w)):
        raise ParseError(path, "weights must be a non-empty list of finite numbers")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ParseError(path, "weights must be non-negative and sum to 1")
    return w


STUDY_HEADER = ["scenario", "method", "site", "mean_regret", "stderr"]
PLOT_HEADER = ["figure", "scenario", "method", "label", "mean", "stderr"]


def write_study_csv(path, tables):
    rows = []
    for table in tables:
        rows.extend([r[k] for k in STUDY_HEADER] for r in table.rows())
    _write_rows(path, STUDY_HEADER, rows)


def plot_rows(tables):
    """Rows for per-site (Fig. 1 style) and worst-case-by-scenario (Fig. 2 style) charts."""
    rows = []
    for t in tables:
        for m in t.methods:
            for s, sid in enumerate(t.site_ids):
                rows.append(["per_site", t.scenario, m, sid,
                             float(t.mean_site_regret[m][s]), float(t.stderr_site_regret[m][s])])
    for t in tables:
        for m in t.methods:
            rows.append(["worst_case", t.scenario, m, t.scenario,
                         float(t.mean_worst_case[m]), float(t.stderr_worst_case[m])])
    return rows


def write_plotdata_csv(path, tables):
    _write_rows(path, PLOT_HEADER, plot_rows(tables))


def read_plotdata_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [dict(r, mean=float(r["mean"]), stderr=float(r["stderr"])) for r in reader]
