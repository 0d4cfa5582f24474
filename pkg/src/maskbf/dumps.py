"""Raw little-endian array dumps with a JSON sidecar header."""

import json
from pathlib import Path

import numpy as np


def _base(path):
    """``path`` without a trailing .bin/.json; other dots are kept."""
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".bin", ".json") else path


def _with(path, ext):
    return path.parent / (path.name + ext)


def write_array(path, array, header):
    """Write ``array`` to ``path.bin`` and ``header`` plus dtype to ``path.json``."""
    path = _base(path)
    array = np.ascontiguousarray(array)
    dtype = "<c16" if np.iscomplexobj(array) else "<f8"
    array.astype(dtype).tofile(_with(path, ".bin"))
    meta = dict(header, dtype=dtype)
    _with(path, ".json").write_text(json.dumps(meta, indent=2))
    return _with(path, ".bin")


def read_array(path, shape_keys):
    path = _base(path)
    meta = json.loads(_with(path, ".json").read_text())
    data = np.fromfile(_with(path, ".bin"), dtype=meta["dtype"])
    return data.reshape([meta[k] for k in shape_keys]), meta
