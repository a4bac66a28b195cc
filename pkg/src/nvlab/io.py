"""File formats: schema-tagged CSV tables and JSON run reports.

CSV layout::

    # schema=<name> version=1
    f_c[Hz],S_demod[V]
    2870000000,0.0012345678901234567

Floats are written with 17 significant digits so values round-trip
exactly; booleans as 0/1; text columns verbatim.
"""

import csv
import dataclasses
import hashlib
import json
import math
from pathlib import Path
import re

import numpy as np

from .errors import ConfigError, InvalidInputError

CSV_VERSION = 1
REPORT_SCHEMA = "nvlab-report"
_HEADER_RE = re.compile(r"^\s*#\s*schema=(\S+)\s+version=(\d+)\s*$")
_COL_RE = re.compile(r"^([^\[\]]+)\[([^\[\]]*)\]$")


class CsvFormatError(ConfigError):
    """Malformed input table; the message carries the offending row."""


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, schema, columns):
    """Write ``columns``, a list of ``(name, unit, values)``, to ``path``."""
    if not columns:
        raise InvalidInputError("need at least one column")
    n = len(columns[0][2])
    for name, unit, values in columns:
        if len(values) != n:
            raise InvalidInputError(f"column {name!r} has {len(values)} rows, expected {n}")
        if "," in name or "[" in name or "," in unit:
            raise InvalidInputError(f"invalid column name {name!r}")
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema={schema} version={CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{name}[{unit}]" for name, unit, _ in columns])
        for row in zip(*(values for _, _, values in columns)):
            w.writerow([_fmt(v) for v in row])
    return path


@dataclasses.dataclass
class Table:
    schema: str
    version: int
    units: dict
    columns: dict

    def column(self, *names):
        """First present column among ``names`` as a float array."""
        for name in names:
            if name in self.columns:
                try:
                    return np.asarray(self.columns[name], dtype=float)
                except ValueError:
                    raise CsvFormatError(f"column {name!r} is not numeric") from None
        raise CsvFormatError(f"none of the columns {list(names)} present; have {list(self.columns)}")


def read_csv(path):
    """Parse a table written by :func:`write_csv`.

    Numeric columns come back as float arrays, others as lists of strings.
    Errors name the file row (1-based) that failed.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CsvFormatError(f"cannot read {path}: {exc}") from None
    if not lines:
        raise CsvFormatError(f"{path}: empty file", line=1)
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise CsvFormatError(f"{path}: first row must be '# schema=<name> version=<n>'", line=1)
    if len(lines) < 2:
        raise CsvFormatError(f"{path}: missing column header", line=2)
    header = next(csv.reader([lines[1]]))
    names, units = [], {}
    for col in header:
        cm = _COL_RE.match(col.strip())
        if not cm:
            raise CsvFormatError(f"{path}: column header {col!r} is not name[unit]", line=2)
        names.append(cm.group(1))
        units[cm.group(1)] = cm.group(2)
    raw = {n: [] for n in names}
    for i, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != len(names):
            raise CsvFormatError(f"{path}: row has {len(row)} fields, expected {len(names)}", line=i)
        for n, v in zip(names, row):
            raw[n].append(v)
    cols = {}
    for n, vals in raw.items():
        try:
            arr = np.array([float(v) for v in vals])
        except ValueError:
            cols[n] = vals
            continue
        if not np.all(np.isfinite(arr)):
            bad = int(np.nonzero(~np.isfinite(arr))[0][0]) + 3
            raise CsvFormatError(f"{path}: non-finite value in column {n!r}", line=bad)
        cols[n] = arr
    return Table(m.group(1), int(m.group(2)), units, cols)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def jsonable(obj):
    """Plain JSON types for dataclasses, numpy values and tuples."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, Path):
        return str(obj)
    if obj is None or isinstance(obj, (int, str)):
        return obj
    return repr(obj)


def write_report(path, kind, seed, config, metrics, artifacts, summary):
    """JSON report with a content-hash manifest of ``artifacts``.

    Keys are sorted and no wall-clock data is stored, so identical runs
    produce identical bytes.
    """
    path = Path(path)
    manifest = [{"file": Path(a).name, "sha256": sha256_file(a)} for a in artifacts]
    doc = {
        "schema": REPORT_SCHEMA,
        "version": CSV_VERSION,
        "kind": kind,
        "seed": seed,
        "config": jsonable(config),
        "metrics": jsonable(metrics),
        "artifacts": manifest,
        "summary": summary,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc
