"""File formats: full-precision CSV, 16-bit PGM with a JSON sidecar, and
JSON factor-model configs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .linop import (
    CirculantConv2D,
    Composition,
    Decimate2D,
    DenseOperator,
    Diagonal,
    Identity,
    ImageGrid,
    Laplacian2D,
    LinearOperator,
    ScaledIdentity,
    Stack,
    Sum,
)
from .po import FactorModel, GaussianFactor

MODEL_SCHEMA_VERSION = 1
PGM_MAXVAL = 65535


def _fmt(v) -> str:
    # repr of a Python float is the shortest string that round-trips
    return repr(float(v))


def write_csv(path, array) -> None:
    """1-D arrays are written one value per line; 2-D arrays row by row."""
    a = np.asarray(array, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in a:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: ragged CSV rows")
    return np.array(rows)


def read_vector(path) -> np.ndarray:
    return read_csv(path).reshape(-1)


def write_table(path, header, columns) -> None:
    """Columns of equal length under a header row; ints stay ints."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([str(v) if isinstance(v, (int, np.integer)) else _fmt(v) for v in row])


def write_image_csv(path, image) -> None:
    if isinstance(image, ImageGrid):
        image = image.as_array()
    write_csv(path, np.asarray(image, dtype=float))


def read_image_csv(path) -> ImageGrid:
    return ImageGrid.from_array(read_csv(path))


def write_pgm(path, image) -> None:
    """Binary 16-bit PGM, linearly scaled to [0, 65535].

    The scaling range goes to ``<path>.json`` so :func:`read_pgm` can undo it
    (to 16-bit precision).
    """
    if isinstance(image, ImageGrid):
        image = image.as_array()
    a = np.asarray(image, dtype=float)
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo
    q = np.zeros(a.shape) if span == 0 else (a - lo) / span * PGM_MAXVAL
    data = np.rint(q).astype(">u2")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n{PGM_MAXVAL}\n".encode("ascii"))
        fh.write(data.tobytes())
    sidecar = {"rows": a.shape[0], "cols": a.shape[1], "maxval": PGM_MAXVAL, "min": lo, "max": hi}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def read_pgm(path) -> ImageGrid:
    path = Path(path)
    raw = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    q = np.frombuffer(raw[pos:], dtype=dtype, count=rows * cols).astype(float).reshape(rows, cols)
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        vals = meta["min"] + q / maxval * (meta["max"] - meta["min"])
    else:
        vals = q
    return ImageGrid.from_array(vals)


def read_image(path) -> ImageGrid:
    """Dispatch on extension: ``.pgm`` or ``.csv``."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".csv":
        return read_image_csv(path)
    raise ValueError(f"unsupported image format {suffix!r} (use .pgm or .csv)")


def _load_array(value, base: Path) -> np.ndarray:
    if isinstance(value, str):
        return read_csv(base / value)
    return np.asarray(value, dtype=float)


def operator_from_config(spec: dict, base: Path = Path(".")) -> LinearOperator:
    """Build an operator from a JSON description such as
    ``{"kind": "circulant_conv2d", "kernel": "psf.csv", "shape": [8, 8]}``."""
    kind = spec.get("kind")
    if kind == "identity":
        return Identity(int(spec["n"]))
    if kind == "scaled_identity":
        return ScaledIdentity(int(spec["n"]), float(spec["alpha"]))
    if kind == "diagonal":
        return Diagonal(_load_array(spec["values"], base).reshape(-1))
    if kind == "dense":
        return DenseOperator(_load_array(spec["matrix"], base))
    if kind == "circulant_conv2d":
        return CirculantConv2D(_load_array(spec["kernel"], base), spec["shape"])
    if kind == "decimate2d":
        return Decimate2D(spec["shape"], int(spec["factor"]), spec.get("phase", (0, 0)))
    if kind == "laplacian2d":
        return Laplacian2D(spec["shape"])
    if kind == "composition":
        return Composition(operator_from_config(spec["outer"], base), operator_from_config(spec["inner"], base))
    if kind == "sum":
        return Sum([operator_from_config(t, base) for t in spec["terms"]])
    if kind == "stack":
        return Stack([operator_from_config(t, base) for t in spec["blocks"]])
    raise ValueError(f"unknown operator kind {kind!r}")


def model_from_config(cfg: dict, base: Path = Path(".")) -> FactorModel:
    version = cfg.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise ValueError(f"model config needs schema_version {MODEL_SCHEMA_VERSION}, got {version!r}")
    factors = []
    for k, f in enumerate(cfg.get("factors") or []):
        M = operator_from_config(f["operator"], base)
        r = f.get("r_diag", 1.0)
        r = float(r) if isinstance(r, (int, float)) else _load_array(r, base).reshape(-1)
        m = f.get("mean")
        m = None if m is None else _load_array(m, base).reshape(-1)
        factors.append(GaussianFactor(M, r, m))
    if not factors:
        raise ValueError("model config lists no factors")
    return FactorModel(factors)


def load_model(path) -> FactorModel:
    path = Path(path)
    return model_from_config(json.loads(path.read_text()), path.parent)
