"""CSV tables and TOML manifests.

Floats are written with ``repr`` so that every value round-trips exactly
and repeated runs produce byte-identical files.
"""

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .errors import UsageError


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def read_csv(path):
    """Return ``(header, float matrix)`` from a numeric CSV file with a header row."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError(f"{path} is empty") from None
        try:
            rows = [[float(v) for v in row] for row in reader if row]
        except ValueError as exc:
            raise UsageError(f"{path}: non-numeric cell ({exc})") from None
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return [h.strip() for h in header], data


def write_panel(path, panel, names):
    panel = np.asarray(panel)
    rows = ([t + 1, *row] for t, row in enumerate(panel))
    return write_csv(path, ["t", *names], rows)


def read_panel(path, expected=None):
    """Read a panel CSV; the optional ``t`` column is dropped.

    With ``expected`` variable names, columns are checked and reordered.
    """
    header, data = read_csv(path)
    if header and header[0] == "t":
        header, data = header[1:], data[:, 1:]
    if expected is not None:
        missing = [v for v in expected if v not in header]
        if missing:
            raise UsageError(f"{path}: expected variables {list(expected)}, found {header}")
        data = data[:, [header.index(v) for v in expected]]
        header = list(expected)
    return header, data


def write_samples(path, samples, names):
    return write_csv(path, list(names), np.asarray(samples))


def _plain(v):
    """Convert to TOML-serializable values; ``None`` entries are dropped by the caller."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items() if x is not None}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in list(v)]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        # TOML has inf/nan literals, but keep manifests readable by strict parsers
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, Path):
        return str(v)
    return v


def write_manifest(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(tomli_w.dumps(_plain(data)), encoding="utf-8")
    return path


def read_manifest(path):
    with Path(path).open("rb") as fh:
        return tomli.load(fh)


def config_hash(data):
    blob = json.dumps(_plain(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
