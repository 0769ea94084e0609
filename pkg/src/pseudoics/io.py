"""Flat-file formats: panel CSV in, tidy CSV and JSON out.

Panel CSV columns are ``cluster_id, subject_id, [group,] L, C, path`` followed
by covariate columns.  ``path`` lists the initial state and then every
observed transition as ``state@time``, separated by ``;``, e.g.
``1;2@0.53;3@1.20``.  An empty ``C`` or ``inf`` means no censoring.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .panel import Panel, StateSpace, Subject, Trajectory
from .regression import coefficient_table

REQUIRED = ("cluster_id", "subject_id", "L", "C", "path")


class PanelFormatError(ValueError):
    """Malformed panel CSV; the message starts with the offending line number."""


def fmt(x) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# panel CSV

def _parse_path(text: str, line: int):
    parts = [p.strip() for p in text.split(";") if p.strip()]
    if not parts:
        raise PanelFormatError(f"line {line}: empty path")
    head = parts[0].split("@")[0]
    try:
        init = int(head)
    except ValueError:
        raise PanelFormatError(f"line {line}: bad initial state {parts[0]!r}") from None
    transitions = []
    for p in parts[1:]:
        if "@" not in p:
            raise PanelFormatError(f"line {line}: transition {p!r} is not state@time")
        s, t = p.split("@", 1)
        try:
            transitions.append((float(t), int(s)))
        except ValueError:
            raise PanelFormatError(f"line {line}: bad transition {p!r}") from None
    return init, tuple(transitions)


def _float(text: str, line: int, name: str, empty: float) -> float:
    text = text.strip()
    if text == "":
        return empty
    try:
        return float(text)
    except ValueError:
        raise PanelFormatError(f"line {line}: column {name} is not a number: {text!r}") from None


def read_panel_csv(path, state_space: StateSpace | None = None) -> Panel:
    """Read a panel CSV.

    Clusters appear in order of first occurrence.  Without ``state_space``
    the highest state seen is taken as the only absorbing state.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelFormatError("line 1: empty file") from None
        missing = [c for c in REQUIRED if c not in header]
        if missing:
            raise PanelFormatError(f"line 1: missing columns {missing}")
        idx = {h: k for k, h in enumerate(header)}
        has_group = "group" in idx
        covs = [h for h in header if h not in REQUIRED and h != "group"]
        order, members, top = [], {}, 1
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelFormatError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            cid = row[idx["cluster_id"]].strip()
            sid = row[idx["subject_id"]].strip()
            L = _float(row[idx["L"]], line, "L", 0.0)
            C = _float(row[idx["C"]], line, "C", math.inf)
            init, tr = _parse_path(row[idx["path"]], line)
            group = None
            if has_group and row[idx["group"]].strip() != "":
                try:
                    group = int(row[idx["group"]])
                except ValueError:
                    raise PanelFormatError(f"line {line}: bad group {row[idx['group']]!r}") from None
            z = tuple(_float(row[idx[c]], line, c, math.nan) for c in covs)
            if any(math.isnan(v) for v in z):
                raise PanelFormatError(f"line {line}: missing covariate value")
            top = max([top, init] + [s for _, s in tr])
            if cid not in members:
                members[cid] = []
                order.append(cid)
            members[cid].append(Subject(Trajectory(init, tr, C, L), z, group, sid))
    if not order:
        raise PanelFormatError("line 2: no subjects")
    space = state_space or StateSpace(max(top, 2), frozenset({max(top, 2)}))
    return Panel(tuple(tuple(members[c]) for c in order), space, tuple(covs), tuple(order))


def panel_csv_text(panel: Panel) -> str:
    has_group = any(s.group is not None for _, _, s in panel.subjects())
    header = ["cluster_id", "subject_id"] + (["group"] if has_group else []) + ["L", "C", "path"]
    header += list(panel.covariate_names)
    rows = []
    for i, j, s in panel.subjects():
        tr = s.trajectory
        path = ";".join([str(tr.initial_state)] + [f"{to}@{t!r}" for t, to in tr.transitions])
        c = "" if math.isinf(tr.censor_time) else repr(tr.censor_time)
        row = [panel.cluster_ids[i], s.subject_id or str(j + 1)]
        if has_group:
            row.append("" if s.group is None else s.group)
        rows.append(row + [tr.truncation_time, c, path] + list(s.covariates))
    return csv_text(header, rows)


def write_panel_csv(path, panel: Panel) -> None:
    atomic_write(path, panel_csv_text(panel))


# ---------------------------------------------------------------------------
# outputs

def sop_csv_text(curves) -> str:
    rows = []
    for c in curves:
        for k, t in enumerate(c.grid):
            for q in range(c.values.shape[1]):
                rows.append([float(t), q + 1, float(c.values[k, q]), c.weight_scheme.value])
    return csv_text(["time", "state", "estimate", "weight_scheme"], rows)


def pseudo_csv_text(panel: Panel, sets) -> str:
    rows = []
    ids = [(panel.cluster_ids[i], s.subject_id or str(j + 1)) for i, j, s in panel.subjects()]
    for pv in sets:
        for r, (cid, sid) in enumerate(ids):
            for k, t in enumerate(pv.grid):
                rows.append([cid, sid, float(t), float(pv.values[r, k]), pv.method.value, pv.state])
    return csv_text(["cluster", "subject", "time", "value", "method", "state"], rows)


def fit_record(fit, **extra) -> dict:
    rec = {
        "coefficients": coefficient_table(fit),
        "rho": fit.rho,
        "rho_clamped": fit.rho_clamped,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "weight_scheme": fit.weight_scheme.value,
        "correlation": fit.correlation.value,
        "num_clusters": fit.num_clusters,
        "num_subjects": fit.num_subjects,
        "covariance": fit.sandwich_cov.tolist(),
    }
    rec.update(extra)
    return rec


def fit_csv_text(fit, state: int | None = None) -> str:
    rows = [[r["term"], r["Estimate"], r["SE"], r["p-value"]] for r in coefficient_table(fit)]
    header = ["term", "Estimate", "SE", "p-value"]
    if state is not None:
        header = ["state"] + header
        rows = [[state] + r for r in rows]
    return csv_text(header, rows)


def study_csv_text(result) -> str:
    cols = ["delta1", "state", "strategy", "metric", "value", "replicates"]
    return csv_text(cols, [[r[c] for c in cols] for r in result.rows])


def outcomes_csv_text(result) -> str:
    cols = ["delta1", "replicate", "state", "strategy", "estimate", "se", "p_value", "converged", "error"]
    rows = []
    for d1, outs in result.outcomes.items():
        for o in outs:
            rows.append([d1, o.replicate, o.state, o.strategy, o.estimate, o.se, o.p_value, o.converged, o.error])
    return csv_text(cols, rows)


def json_text(obj) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, (frozenset, set)):
            return sorted(o)
        if hasattr(o, "value"):
            return o.value
        return repr(o)

    return json.dumps(obj, indent=2, sort_keys=True, default=default, allow_nan=True) + "\n"


__all__ = [
    "PanelFormatError",
    "atomic_write",
    "csv_text",
    "fit_csv_text",
    "fit_record",
    "json_text",
    "outcomes_csv_text",
    "panel_csv_text",
    "pseudo_csv_text",
    "read_panel_csv",
    "sop_csv_text",
    "study_csv_text",
    "write_panel_csv",
]
