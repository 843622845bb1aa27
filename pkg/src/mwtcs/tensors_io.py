"""Binary matrix container (MTX1), JSON run configuration and PGM output.

MTX1 layout (all little-endian)::

    offset  size  field
    0       4     magic b"MTX1"
    4       1     dtype code (1 = real64, 2 = complex128)
    5       8     rows (u64)
    13      8     cols (u64)
    21      ...   row-major payload; complex entries as interleaved (re, im)
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MTX1"
HEADER = struct.Struct("<4sBQQ")
DTYPE_REAL = 1
DTYPE_COMPLEX = 2

_DTYPES = {DTYPE_REAL: np.dtype("<f8"), DTYPE_COMPLEX: np.dtype("<c16")}


class MatrixFormatError(ValueError):
    """Base class for malformed MTX1 files."""


class BadMagicError(MatrixFormatError):
    pass


class UnknownDtypeError(MatrixFormatError):
    pass


class TruncatedPayloadError(MatrixFormatError):
    pass


class ConfigError(ValueError):
    """Invalid run configuration. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def write_matrix(path, matrix) -> None:
    """Write a real or complex matrix as an MTX1 file.

    1-D input is stored as a single column. Non-finite values are rejected.
    """
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if np.iscomplexobj(m):
        code = DTYPE_COMPLEX
    elif np.issubdtype(m.dtype, np.number) or m.dtype == bool:
        code = DTYPE_REAL
    else:
        raise TypeError(f"unsupported dtype {m.dtype}")
    m = np.ascontiguousarray(m, dtype=_DTYPES[code])
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, code, m.shape[0], m.shape[1]))
        fh.write(m.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    """Read an MTX1 file written by :func:`write_matrix`."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < 4 or head[:4] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {head[:4]!r}")
        if len(head) < HEADER.size:
            raise TruncatedPayloadError(f"{path}: truncated header")
        _, code, rows, cols = HEADER.unpack(head)
        if code not in _DTYPES:
            raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
        dtype = _DTYPES[code]
        nbytes = rows * cols * dtype.itemsize
        payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise TruncatedPayloadError(
            f"{path}: expected {nbytes} payload bytes, found {len(payload)}"
        )
    out = np.frombuffer(payload, dtype=dtype).reshape(rows, cols)
    return out.astype(dtype.newbyteorder("="), copy=True)


@dataclass(frozen=True)
class RunConfig:
    """Scene, solver and seed settings shared by every pipeline stage.

    ``fista_lambda = 0`` selects the scale-aware default inside the ALS
    inverter (1% of the largest correlation at the first sparse-coding step).
    """

    frequency_hz: float = 4.0e8
    grid_side_m: float = 1.5
    grid_pixels_per_side: int = 16
    n_inc: int = 16
    n_rec: int = 32
    tx_radius_m: float = 3.0
    rx_radius_m: float = 3.0
    alpha: float = 0.1
    epsilon0: float = 8.85e-12
    fista_lambda: float = 0.0
    fista_iters: int = 200
    als_iters: int = 20
    seed: int = 0

    def __post_init__(self):
        validate_config(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_INT_FIELDS = ("grid_pixels_per_side", "n_inc", "n_rec", "fista_iters", "als_iters", "seed")
_COUNT_FIELDS = ("grid_pixels_per_side", "n_inc", "n_rec", "fista_iters", "als_iters")


def validate_config(cfg: RunConfig) -> None:
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _INT_FIELDS:
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f.name, f"expected an integer, got {v!r}")
        else:
            if isinstance(v, bool) or not isinstance(v, (int, float, np.floating, np.integer)):
                raise ConfigError(f.name, f"expected a number, got {v!r}")
            if not math.isfinite(v):
                raise ConfigError(f.name, "must be finite")
    for name in _COUNT_FIELDS:
        if getattr(cfg, name) < 1:
            raise ConfigError(name, "must be a positive count")
    if not 0.0 < cfg.alpha < 1.0:
        raise ConfigError("alpha", f"must lie strictly inside (0, 1), got {cfg.alpha}")
    for name in ("frequency_hz", "grid_side_m", "epsilon0"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(name, "must be positive")
    if cfg.fista_lambda < 0:
        raise ConfigError("fista_lambda", "must be >= 0")
    half_diag = cfg.grid_side_m * math.sqrt(2.0) / 2.0
    for name in ("tx_radius_m", "rx_radius_m"):
        if getattr(cfg, name) <= half_diag:
            raise ConfigError(
                name, f"antennas must lie outside the imaging domain (> {half_diag:.4g} m)"
            )


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    return RunConfig(**data)


def load_config(path) -> RunConfig:
    """Load a JSON run config; missing keys take their defaults."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def to_gray8(image, lo: float, hi: float) -> np.ndarray:
    """Affine map ``[lo, hi] -> [0, 255]`` with clamping; ties round half to even."""
    if not hi > lo:
        raise ValueError("need hi > lo")
    img = np.asarray(image, dtype=float)
    scaled = (img - lo) * (255.0 / (hi - lo))
    return np.rint(np.clip(scaled, 0.0, 255.0)).astype(np.uint8)


def write_image_pgm(path, image, value_range: tuple[float, float]) -> None:
    """Write a 2-D real map as an 8-bit binary PGM (P5)."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {img.shape}")
    lo, hi = value_range
    pix = to_gray8(img, lo, hi)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(pix.tobytes())


def read_image_pgm(path) -> np.ndarray:
    """Minimal P5 reader for files produced by :func:`write_image_pgm`."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w).copy()


def write_sidecar(path, meta: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def read_sidecar(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
