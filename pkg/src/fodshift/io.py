"""Binary and text formats for volumes, gradient tables, models and specs.

Everything is little-endian and written atomically (temporary file in the
target directory, then ``os.replace``). See ``docs/formats.md`` for the
byte layouts.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import DirectionSet

__all__ = [
    "FormatError",
    "VolumeFormatError",
    "GradientTableError",
    "ModelFormatError",
    "SpecError",
    "VolumeHeader",
    "atomic_write",
    "write_volume",
    "read_volume",
    "write_gradient_table",
    "read_gradient_table",
    "write_model",
    "read_model",
    "write_spec",
    "read_spec",
    "save_subject",
    "load_subject",
    "save_cohort",
    "load_cohort",
]

VOLUME_MAGIC = b"FODS"
VOLUME_VERSION = 1
MODEL_MAGIC = b"FODM"
MODEL_VERSION = 1

# code -> little-endian dtype
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}
DTYPE_CODES = {v.str: k for k, v in DTYPES.items()}

_VOL_HEADER = struct.Struct("<4sHBB4Id")       # 32 bytes
_MODEL_HEADER = struct.Struct("<4sHHdq")       # magic, version, n_dims, dropout, seed


class FormatError(ValueError):
    """A file could not be parsed; ``offset`` is a byte offset or line number."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        where = f" at offset {offset}" if offset is not None else ""
        loc = f"{path}: " if path is not None else ""
        super().__init__(f"{loc}{message}{where}")
        self.path = path
        self.offset = offset


class VolumeFormatError(FormatError):
    pass


class ModelFormatError(FormatError):
    pass


class GradientTableError(FormatError):
    def __init__(self, message: str, path=None, line: int | None = None):
        super().__init__(message, path, None)
        self.line = line
        if line is not None:
            self.args = (f"{path + ': ' if path else ''}{message} on line {line}",)


class SpecError(FormatError):
    def __init__(self, message: str, path=None, line: int | None = None, column: int | None = None):
        super().__init__(message, path, None)
        self.line = line
        self.column = column
        if line is not None:
            self.args = (f"{path + ': ' if path else ''}{message} (line {line}, column {column})",)


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temporary sibling and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- volumes ------------------------------------------------------------

@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple           # (nx, ny, nz, nc)
    dtype_code: int = 1
    voxel_size: float = 1.5
    version: int = VOLUME_VERSION

    def __post_init__(self):
        if len(self.dims) != 4 or any(int(d) < 1 for d in self.dims):
            raise ValueError("dims must be four positive integers")
        if self.dtype_code not in DTYPES:
            raise ValueError(f"unknown dtype code {self.dtype_code}")

    @property
    def dtype(self) -> np.dtype:
        return DTYPES[self.dtype_code]

    @property
    def payload_bytes(self) -> int:
        return int(np.prod(self.dims)) * self.dtype.itemsize

    def pack(self) -> bytes:
        return _VOL_HEADER.pack(VOLUME_MAGIC, self.version, self.dtype_code, 0,
                                *map(int, self.dims), float(self.voxel_size))


def encode_volume(array, voxel_size: float = 1.5, dtype="<f4") -> bytes:
    """Header plus payload with x varying fastest, then y, z and channel."""
    a = np.asarray(array)
    if a.ndim == 3:
        a = a[..., None]
    if a.ndim != 4:
        raise ValueError("volume must be 3-D or 4-D")
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    header = VolumeHeader(a.shape, DTYPE_CODES[dt.str], voxel_size)
    return header.pack() + a.astype(dt).tobytes(order="F")


def decode_volume(data: bytes, path=None):
    """Parse volume bytes; returns ``(header, array)`` with shape (nx, ny, nz, nc)."""
    if len(data) < _VOL_HEADER.size:
        raise VolumeFormatError("file shorter than the volume header", path, len(data))
    magic, version, code, _, nx, ny, nz, nc, vs = _VOL_HEADER.unpack_from(data)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}", path, 0)
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"unsupported version {version}", path, 4)
    if code not in DTYPES:
        raise VolumeFormatError(f"unknown dtype code {code}", path, 6)
    if min(nx, ny, nz, nc) < 1:
        raise VolumeFormatError("nonpositive dimension", path, 8)
    header = VolumeHeader((nx, ny, nz, nc), code, vs, version)
    expected = _VOL_HEADER.size + header.payload_bytes
    if len(data) != expected:
        raise VolumeFormatError(f"payload is {len(data) - _VOL_HEADER.size} bytes, "
                                f"expected {header.payload_bytes}", path, min(len(data), expected))
    arr = np.frombuffer(data, dtype=header.dtype, offset=_VOL_HEADER.size)
    return header, arr.reshape(header.dims, order="F")


def write_volume(path, array, voxel_size: float = 1.5, dtype="<f4") -> None:
    atomic_write(path, encode_volume(array, voxel_size, dtype))


def read_volume(path):
    """Returns ``(header, array)``; a trailing singleton channel is kept."""
    return decode_volume(Path(path).read_bytes(), str(path))


# --- gradient tables ----------------------------------------------------

def format_gradient_table(dirs: DirectionSet, comment: str | None = None) -> str:
    lines = []
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines.append("# gx gy gz b")
    for v, b in zip(dirs.vectors, dirs.bvals):
        lines.append(" ".join(repr(float(x)) for x in (*v, b)))
    return "\n".join(lines) + "\n"


def parse_gradient_table(text: str, path=None) -> DirectionSet:
    vecs, bvals = [], []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise GradientTableError(f"expected 4 fields, found {len(parts)}", path, n)
        try:
            gx, gy, gz, b = (float(p) for p in parts)
        except ValueError:
            raise GradientTableError("non-numeric field", path, n) from None
        if not all(np.isfinite((gx, gy, gz, b))) or b < 0:
            raise GradientTableError("invalid value", path, n)
        norm = np.sqrt(gx * gx + gy * gy + gz * gz)
        if b > 0 and abs(norm - 1.0) > 1e-6:
            raise GradientTableError(f"direction norm {norm:.6g} is not 1", path, n)
        vecs.append((gx, gy, gz))
        bvals.append(b)
    if not vecs:
        raise GradientTableError("no directions", path, None)
    return DirectionSet(np.array(vecs), np.array(bvals))


def write_gradient_table(path, dirs: DirectionSet, comment: str | None = None) -> None:
    atomic_write(path, format_gradient_table(dirs, comment).encode())


def read_gradient_table(path) -> DirectionSet:
    return parse_gradient_table(Path(path).read_text(), str(path))


# --- models -------------------------------------------------------------

def encode_model(model) -> bytes:
    dims = model.layer_dims
    head = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(dims), float(model.dropout),
                              int(model.seed))
    return (head + struct.pack(f"<{len(dims)}I", *dims)
            + np.asarray(model.params, dtype="<f4").tobytes())


def decode_model(data: bytes, path=None, dtype=np.float32):
    from .estimator import EstimatorModel

    if len(data) < _MODEL_HEADER.size:
        raise ModelFormatError("file shorter than the model header", path, len(data))
    magic, version, nd, dropout, seed = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}", path, 0)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported version {version}", path, 4)
    off = _MODEL_HEADER.size
    if nd < 2 or len(data) < off + 4 * nd:
        raise ModelFormatError("truncated layer table", path, off)
    dims = struct.unpack_from(f"<{nd}I", data, off)
    off += 4 * nd
    n = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if len(data) != off + 4 * n:
        raise ModelFormatError(f"parameter blob is {len(data) - off} bytes, expected {4 * n}",
                               path, min(len(data), off + 4 * n))
    params = np.frombuffer(data, dtype="<f4", offset=off)
    return EstimatorModel(dims, dropout, seed, dtype=dtype, params=params)


def write_model(path, model) -> None:
    atomic_write(path, encode_model(model))


def read_model(path, dtype=np.float32):
    return decode_model(Path(path).read_bytes(), str(path), dtype)


# --- structured specs ---------------------------------------------------

def _finite(obj):
    # strict JSON has no NaN/inf; they are written as null
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def dump_json(obj) -> str:
    """Deterministic strict JSON: sorted keys, 2-space indent, non-finite as null."""
    return json.dumps(_finite(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_spec(path, spec: dict) -> None:
    atomic_write(path, dump_json(spec).encode())


def read_spec(path) -> dict:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        raise SpecError(err.msg, str(path), err.lineno, err.colno) from None
    if not isinstance(obj, dict):
        raise SpecError("top level must be an object", str(path), 1, 1)
    return obj


# --- subjects -----------------------------------------------------------

def save_subject(directory, subject) -> Path:
    """Persist a subject as raw volumes plus ``grad.txt`` and ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    vs = subject.voxel_size
    write_volume(d / "dwi.raw", subject.dwi, vs, "<f4")
    write_volume(d / "fod.raw", subject.gt_fod, vs, "<f4")
    write_volume(d / "mask.raw", subject.wm_mask.astype(np.uint8), vs, "u1")
    write_volume(d / "class.raw", subject.fiber_class.astype(np.uint8), vs, "u1")
    geom = np.concatenate([subject.fiber_dirs.reshape(subject.dims + (9,)), subject.fiber_fracs,
                           subject.iso_frac[..., None]], axis=-1)
    write_volume(d / "fibers.raw", geom, vs, "<f8")
    write_gradient_table(d / "grad.txt", subject.dirs, f"site {subject.site_label}")
    meta = {
        "id": subject.id, "dims": list(subject.dims), "voxel_size": vs, "age": subject.age,
        "site_label": subject.site_label, "preset": subject.preset, "seed": subject.seed,
        "lmax": subject.lmax, "lambda_par": subject.lambda_par,
        "lambda_perp": subject.lambda_perp, "s0": subject.s0,
    }
    atomic_write(d / "meta.json", dump_json(meta).encode())
    return d


def load_subject(directory):
    from .phantom import Subject

    d = Path(directory)
    meta = read_spec(d / "meta.json")
    dims = tuple(meta["dims"])
    _, dwi = read_volume(d / "dwi.raw")
    _, fod = read_volume(d / "fod.raw")
    _, mask = read_volume(d / "mask.raw")
    if dwi.shape[:3] != dims:
        raise VolumeFormatError("dwi grid does not match meta.json dims", str(d / "dwi.raw"), 8)
    dirs = read_gradient_table(d / "grad.txt")
    if dwi.shape[3] != len(dirs):
        raise VolumeFormatError("dwi volume count does not match grad.txt", str(d / "dwi.raw"), 20)
    if (d / "class.raw").exists():
        fclass = read_volume(d / "class.raw")[1][..., 0].astype(np.int8)
    else:
        fclass = mask[..., 0].astype(np.int8)
    if (d / "fibers.raw").exists():
        geom = read_volume(d / "fibers.raw")[1].astype(float)
        fdirs = geom[..., :9].reshape(dims + (3, 3))
        ffracs = geom[..., 9:12]
        iso = geom[..., 12]
    else:
        fdirs = np.zeros(dims + (3, 3))
        ffracs = np.zeros(dims + (3,))
        iso = np.where(fclass > 0, 0.0, 1.0)
    return Subject(
        id=meta["id"], age=float(meta["age"]), site_label=meta["site_label"],
        preset=meta.get("preset", ""), dirs=dirs, dwi=dwi.astype(float), gt_fod=fod.astype(float),
        wm_mask=mask[..., 0].astype(bool), fiber_class=fclass, fiber_dirs=fdirs,
        fiber_fracs=ffracs, iso_frac=iso, lambda_par=float(meta["lambda_par"]),
        lambda_perp=float(meta["lambda_perp"]), s0=float(meta["s0"]), seed=int(meta["seed"]),
        lmax=int(meta["lmax"]), voxel_size=float(meta["voxel_size"]),
    )


def save_cohort(directory, subjects) -> Path:
    d = Path(directory)
    ids = []
    for s in subjects:
        save_subject(d / s.id, s)
        ids.append(s.id)
    atomic_write(d / "cohort.json", dump_json({"subjects": ids}).encode())
    return d


def load_cohort(directory):
    d = Path(directory)
    ids = read_spec(d / "cohort.json")["subjects"]
    return [load_subject(d / i) for i in ids]
