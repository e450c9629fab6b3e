"""On-disk formats: image stacks, fit tables and map outputs.

Stack file layout::

    NVSTACK/1 header_bytes=<8 digits>\\n
    <JSON header, exactly header_bytes bytes, sorted keys>
    <little-endian float32 payload, (n_freq, n_z, n_y, n_x) C order>

Frequencies are stored as integer Hz so that read -> write is byte-stable.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import StackFormatError
from .fitting import PARAM_NAMES, FitGrid
from .simulator import ImageStack

STACK_VERSION = 1
_MAGIC = b"NVSTACK/1 header_bytes="
_MAGIC_LEN = len(_MAGIC) + 9  # 8 digits + newline


def _header(stack: ImageStack) -> dict:
    nf, nz, ny, nx = stack.data.shape
    return {
        "version": STACK_VERSION,
        "dims": {"n_freq": nf, "n_z": nz, "n_y": ny, "n_x": nx},
        "frequency_axis_hz": [int(round(v * 1e9)) for v in stack.frequency_axis],
        "pixel_size_nm": float(stack.pixel_size),
        "z_offsets_um": [float(z) for z in stack.z_offsets],
        "total_time_s": float(stack.total_time),
        "photon_rate": float(stack.photon_rate),
        "seed": stack.seed,
        "meta": stack.meta,
    }


def stack_to_bytes(stack: ImageStack) -> bytes:
    head = json.dumps(_header(stack), sort_keys=True, separators=(",", ":")).encode()
    payload = np.ascontiguousarray(stack.data, dtype="<f4").tobytes()
    return _MAGIC + b"%08d\n" % len(head) + head + payload


def write_stack(path, stack: ImageStack) -> None:
    Path(path).write_bytes(stack_to_bytes(stack))


def stack_from_bytes(raw: bytes, require_integral: Optional[bool] = None) -> ImageStack:
    if not raw.startswith(_MAGIC) or len(raw) < _MAGIC_LEN:
        raise StackFormatError("not an NV stack file (bad magic)")
    try:
        n_head = int(raw[len(_MAGIC): len(_MAGIC) + 8])
    except ValueError as e:
        raise StackFormatError("corrupt header length") from e
    if raw[_MAGIC_LEN - 1: _MAGIC_LEN] != b"\n":
        raise StackFormatError("corrupt magic line")
    try:
        head = json.loads(raw[_MAGIC_LEN: _MAGIC_LEN + n_head])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise StackFormatError(f"corrupt header: {e}") from e
    if head.get("version") != STACK_VERSION:
        raise StackFormatError(f"unsupported stack version {head.get('version')!r}")
    try:
        d = head["dims"]
        shape = (int(d["n_freq"]), int(d["n_z"]), int(d["n_y"]), int(d["n_x"]))
        freqs = np.asarray(head["frequency_axis_hz"], dtype=np.int64) / 1e9
    except (KeyError, TypeError, ValueError) as e:
        raise StackFormatError(f"missing header field: {e}") from e
    payload = raw[_MAGIC_LEN + n_head:]
    expect = 4 * math.prod(shape)
    if len(payload) != expect:
        raise StackFormatError(f"payload has {len(payload)} bytes, expected {expect}")
    if len(freqs) != shape[0]:
        raise StackFormatError("frequency axis length does not match n_freq")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.isfinite(data).all():
        raise StackFormatError("payload contains non-finite values")
    seed = head.get("seed")
    if require_integral is None:
        require_integral = seed is not None and head.get("meta", {}).get("noise", True)
    if require_integral and not np.array_equal(data, np.rint(data)):
        raise StackFormatError("Poisson stack contains non-integer counts")
    try:
        return ImageStack(data, freqs, tuple(head["z_offsets_um"]), head["pixel_size_nm"],
                          head["total_time_s"], head["photon_rate"], seed, head.get("meta", {}))
    except (KeyError, ValueError) as e:
        raise StackFormatError(f"invalid stack header: {e}") from e


def read_stack(path, require_integral: Optional[bool] = None) -> ImageStack:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise StackFormatError(f"cannot read {path}: {e.strerror}") from e
    return stack_from_bytes(raw, require_integral)


# --------------------------------------------------------------------------
# fit tables

FIT_COLUMNS = ("z", "iy", "ix", "status", "omega_minus", "omega_plus", "ci_minus", "ci_plus",
               "ci_center", "ci_half") + tuple(f"p_{n}" for n in PARAM_NAMES) + \
              tuple(f"sd_{n}" for n in PARAM_NAMES) + ("cov_center_half", "residual_norm")


def write_fit_table(path, fits: FitGrid, meta: dict) -> None:
    """Tab-separated fit table; ``meta`` goes into ``# key: value`` lines (JSON values)."""
    if len(fits.shape) != 3:
        raise ValueError("fit table expects a (n_z, n_y, n_x) grid")
    nz, ny, nx = fits.shape
    lines = [f"# {k}: {json.dumps(meta[k], sort_keys=True)}" for k in sorted(meta)]
    lines.append(f"# shape: {json.dumps([nz, ny, nx])}")
    lines.append("\t".join(FIT_COLUMNS))
    sd = np.sqrt(np.clip(np.einsum("...ii->...i", fits.covariance), 0, None))
    cov_ch = fits.covariance[..., 3, 4]
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                k = (iz, iy, ix)
                vals = [fits.omega_minus[k], fits.omega_plus[k], fits.ci_minus[k], fits.ci_plus[k],
                        fits.ci_center[k], fits.ci_half[k], *fits.params[k], *sd[k], cov_ch[k],
                        fits.residual_norm[k]]
                lines.append("\t".join([str(iz), str(iy), str(ix), str(int(fits.status[k]))] +
                                       [repr(float(v)) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_fit_table(path) -> tuple[FitGrid, dict]:
    """Inverse of :func:`write_fit_table`; covariance keeps variances and the center/half term."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise StackFormatError(f"cannot read {path}: {e.strerror}") from e
    meta, rows, header = {}, [], None
    for ln in text.splitlines():
        if ln.startswith("# "):
            key, _, val = ln[2:].partition(": ")
            try:
                meta[key] = json.loads(val)
            except json.JSONDecodeError as e:
                raise StackFormatError(f"bad metadata line {ln!r}") from e
        elif header is None:
            header = tuple(ln.split("\t"))
            if header != FIT_COLUMNS:
                raise StackFormatError("unexpected fit table columns")
        elif ln:
            rows.append(ln.split("\t"))
    if "shape" not in meta:
        raise StackFormatError("fit table lacks a shape line")
    shape = tuple(meta.pop("shape"))
    n = math.prod(shape)
    if len(rows) != n or any(len(r) != len(FIT_COLUMNS) for r in rows):
        raise StackFormatError("fit table row count or width mismatch")
    try:
        arr = np.array([[float(v) for v in r] for r in rows]).reshape(n, len(FIT_COLUMNS))
    except ValueError as e:
        raise StackFormatError(f"non-numeric fit table entry: {e}") from e
    col = {c: arr[:, i] for i, c in enumerate(FIT_COLUMNS)}
    order = np.lexsort((col["ix"], col["iy"], col["z"]))
    col = {c: v[order] for c, v in col.items()}
    r = lambda a: a.reshape(shape + a.shape[1:])
    params = np.stack([col[f"p_{p}"] for p in PARAM_NAMES], axis=1)
    sd = np.stack([col[f"sd_{p}"] for p in PARAM_NAMES], axis=1)
    cov = np.zeros((n, len(PARAM_NAMES), len(PARAM_NAMES)))
    cov[:, range(7), range(7)] = sd ** 2
    cov[:, 3, 4] = cov[:, 4, 3] = col["cov_center_half"]
    grid = FitGrid(shape, r(col["omega_plus"]), r(col["omega_minus"]), r(col["ci_plus"]),
                   r(col["ci_minus"]), r(col["ci_center"]), r(col["ci_half"]),
                   r(col["status"].astype(np.int8)), r(params), r(cov), r(col["residual_norm"]),
                   meta={})
    return grid, meta


# --------------------------------------------------------------------------
# map outputs

def write_grid_csv(path, grid: np.ndarray) -> None:
    rows = [",".join("nan" if not np.isfinite(v) else repr(float(v)) for v in row) for row in grid]
    Path(path).write_text("\n".join(rows) + "\n")


def read_grid_csv(path) -> np.ndarray:
    return np.array([[float(v) for v in ln.split(",")] for ln in Path(path).read_text().splitlines() if ln])


def write_pgm(path, grid: np.ndarray) -> dict:
    """16-bit binary PGM, linearly scaled between the finite min and max; NaN -> 0.

    Returns the scaling (min, max) for the sidecar.
    """
    finite = np.isfinite(grid)
    lo = float(grid[finite].min()) if finite.any() else 0.0
    hi = float(grid[finite].max()) if finite.any() else 0.0
    span = hi - lo
    scaled = np.zeros(grid.shape)
    if span > 0:
        scaled[finite] = (grid[finite] - lo) / span * 65534 + 1
    elif finite.any():
        scaled[finite] = 1
    img = np.rint(scaled).astype(">u2")
    ny, nx = grid.shape
    Path(path).write_bytes(b"P5\n%d %d\n65535\n" % (nx, ny) + img.tobytes())
    return {"min": lo, "max": hi, "nan_value": 0, "valid_range": [1, 65535]}


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise StackFormatError("not a binary PGM")
    nx, ny = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(ny, nx)
