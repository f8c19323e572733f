"""Small file helpers: atomic writes and reproducible float formatting."""

import json
import os
import tempfile

import numpy as np


def fmt_float(x) -> str:
    """Shortest round-trip decimal form of a float64 (bytewise stable)."""
    return np.format_float_repr(float(x))


def fmt_row(values) -> str:
    return " ".join(fmt_float(v) for v in np.asarray(values, dtype=float).ravel())


def atomic_write_text(path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def atomic_write_bytes(path, data: bytes) -> None:
    _atomic_write(path, data)


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    """Canonical JSON: sorted keys, no wall-clock state, '\\n' terminated."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
