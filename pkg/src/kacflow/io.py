"""Deterministic on-disk artifact formats (CSV + JSON sidecars).

Floats are rendered with ``repr`` (shortest round-trip form) and JSON objects
with sorted keys, so identical inputs produce byte-identical files; no wall
clock or environment state leaks into artifacts.
"""

import json
import os


def fmt(x):
    """Shortest exact decimal form of a scalar."""
    if isinstance(x, float):
        return repr(x)
    if isinstance(x, (int,)):
        return str(x)
    # numpy scalars
    if hasattr(x, "item"):
        return fmt(x.item())
    return str(x)


def write_csv(path, header, rows):
    """Write rows (iterables of scalars) under a comma-joined header."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(x) for x in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        try:
            return obj.item()
        except (AttributeError, ValueError):
            pass
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj


def write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        json.dump(_jsonable(obj), fh, sort_keys=True, indent=2, allow_nan=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
