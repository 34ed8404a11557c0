"""Surface CSV files and the key-value run report.

All writers go through a temporary file and ``os.replace`` so a failed run
never leaves a partial file behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .impulse import ValueFunction

__all__ = [
    "SCHEMA_VERSION",
    "write_atomic",
    "surface_csv",
    "write_surface",
    "read_surface",
    "RunReport",
    "parse_report",
]

SCHEMA_VERSION = 1


def write_atomic(path, data) -> None:
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = os.fspath(path)
    folder = os.path.dirname(path) or "."
    os.makedirs(folder, exist_ok=True)
    blob = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _g(x: float) -> str:
    return "%.17g" % x


def surface_csv(vf: ValueFunction) -> str:
    """``t,x1..xn,value,stderr`` rows, by time then row-major grid index."""
    out = io.StringIO()
    n = vf.n
    out.write(",".join(["t", *[f"x{i + 1}" for i in range(n)], "value", "stderr"]) + "\n")
    nodes = vf.nodes
    flat = vf.values.reshape(len(vf.times), -1)
    se = np.zeros_like(flat) if vf.stderr is None else vf.stderr.reshape(flat.shape)
    for k, t in enumerate(vf.times):
        tk = _g(t)
        for j in range(nodes.shape[0]):
            cells = [tk, *[_g(c) for c in nodes[j]], _g(flat[k, j]), _g(se[k, j])]
            out.write(",".join(cells) + "\n")
    return out.getvalue()


def write_surface(path, vf: ValueFunction) -> None:
    write_atomic(path, surface_csv(vf))


def read_surface(path) -> ValueFunction:
    """Reload a surface written by :func:`write_surface`."""
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    n = len(header) - 3
    if header[0] != "t" or header[-2:] != ["value", "stderr"] or n < 1:
        raise ValueError(f"{path}: not a surface file")
    times = np.unique(body[:, 0])
    axes = [np.unique(body[:, 1 + i]) for i in range(n)]
    shape = (len(times),) + tuple(len(a) for a in axes)
    if body.shape[0] != int(np.prod(shape)):
        raise ValueError(f"{path}: rows do not form a full grid")
    return ValueFunction(times, axes, body[:, -2].reshape(shape), body[:, -1].reshape(shape))


def _value(v) -> str:
    if isinstance(v, (np.floating, float)):
        return json.dumps(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if isinstance(v, np.ndarray):
        return json.dumps(v.tolist())
    return json.dumps(v, sort_keys=True, default=_default)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


@dataclass
class RunReport:
    """Sectioned text document: key-value sections and CSV-style tables.

    Layout::

        schema_version = 1
        [section]
        key = <json value>
        [table name]
        col1,col2
        v11,v12
    """

    sections: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def set(self, section: str, **values) -> None:
        self.sections.setdefault(section, {}).update(values)

    def table(self, name: str, columns: list, rows: list) -> None:
        self.tables[name] = (list(columns), [list(r) for r in rows])

    def render(self) -> str:
        lines = [f"schema_version = {SCHEMA_VERSION}"]
        for name, kv in self.sections.items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {_value(v)}" for k, v in kv.items())
        for name, (cols, rows) in self.tables.items():
            lines.append(f"[table {name}]")
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(cols)
            writer.writerows([_cell(c) for c in r] for r in rows)
            lines.append(buf.getvalue().rstrip("\n"))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        write_atomic(path, self.render())


def _cell(c) -> str:
    if isinstance(c, (float, np.floating)):
        return _g(float(c))
    if isinstance(c, (bool, np.bool_)):
        return "true" if c else "false"
    return str(c)


def parse_report(text: str) -> dict:
    """Inverse of :meth:`RunReport.render` (table cells are left as strings)."""
    out: dict = {"sections": {}, "tables": {}}
    current = None
    table = None
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("[table ") and line.endswith("]"):
            table = {"columns": None, "rows": []}
            out["tables"][line[7:-1]] = table
            current = None
            continue
        if line.startswith("[") and line.endswith("]"):
            current = out["sections"].setdefault(line[1:-1], {})
            table = None
            continue
        if table is not None:
            cells = next(csv.reader([line]))
            if table["columns"] is None:
                table["columns"] = cells
            else:
                table["rows"].append(cells)
            continue
        key, _, raw = line.partition(" = ")
        value = json.loads(raw)
        if current is None:
            out[key] = value
        else:
            current[key] = value
    return out
