"""Binary checkpoint container for fields, Wiener paths, and trajectories.

Layout (all little-endian):

    magic "BSNQ1" | K uint32 | L float64 | kind byte | payload

kind 'S': scalar field, payload = K*K complex128 coefficients, row-major,
          interleaved (re, im) float64;
kind 'V': vector field, payload = component 1 then component 2, as above;
kind 'W': Wiener path, payload = seed int64, stream uint32, J uint32,
          N_max uint32, T float64, then N_max*J float64 raw increments
          (grid fields of the header are written as zero);
kind 'T': trajectory checkpoint, payload = meta-length uint32, UTF-8 JSON
          meta (config echo, step index, path seed, cumulative stats), then
          the velocity and temperature coefficient blocks.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .noise import CovarianceSpec, WienerPath
from .scheme import SchemeState, TrajectoryStats
from .spectral import SpectralScalarField, SpectralVectorField, TorusGrid

__all__ = [
    "MAGIC",
    "save_field",
    "load_field",
    "save_wiener_path",
    "load_wiener_record",
    "rebuild_wiener_path",
    "WienerRecord",
    "save_trajectory_checkpoint",
    "load_trajectory_checkpoint",
]

MAGIC = b"BSNQ1"


def _pack_header(K: int, L: float, kind: bytes) -> bytes:
    return MAGIC + struct.pack("<I", K) + struct.pack("<d", L) + kind


def _read_header(fh):
    magic = fh.read(5)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (K,) = struct.unpack("<I", fh.read(4))
    (L,) = struct.unpack("<d", fh.read(8))
    kind = fh.read(1)
    return K, L, kind


def _coeff_bytes(coeffs: np.ndarray) -> bytes:
    return np.ascontiguousarray(coeffs, dtype="<c16").tobytes()


def _read_coeffs(fh, shape) -> np.ndarray:
    n = int(np.prod(shape))
    buf = fh.read(16 * n)
    if len(buf) != 16 * n:
        raise ValueError("truncated coefficient block")
    return np.frombuffer(buf, dtype="<c16").reshape(shape).astype(complex)


def save_field(field, path):
    kind = b"V" if isinstance(field, SpectralVectorField) else b"S"
    g = field.grid
    with open(path, "wb") as fh:
        fh.write(_pack_header(g.K, g.L, kind))
        fh.write(_coeff_bytes(field.coeffs))


def load_field(path, grid: TorusGrid | None = None):
    with open(path, "rb") as fh:
        K, L, kind = _read_header(fh)
        if kind not in (b"S", b"V"):
            raise ValueError(f"not a field checkpoint (kind {kind!r})")
        if grid is None:
            grid = TorusGrid(K, L)
        elif grid.K != K or abs(grid.L - L) > 1e-14 * max(L, 1.0):
            raise ValueError("checkpoint grid does not match the supplied grid")
        if kind == b"S":
            return SpectralScalarField(grid, _read_coeffs(fh, (K, K)))
        return SpectralVectorField(grid, _read_coeffs(fh, (2, K, K)))


class WienerRecord:
    """Raw persisted path: enough to re-drive a run bit-identically."""

    def __init__(self, seed, stream, J, N_max, T, increments):
        self.seed = seed
        self.stream = stream
        self.J = J
        self.N_max = N_max
        self.T = T
        self.increments = increments


def save_wiener_path(path_obj: WienerPath, path):
    with open(path, "wb") as fh:
        fh.write(_pack_header(0, 0.0, b"W"))
        fh.write(struct.pack("<qIII", path_obj.seed, path_obj.stream,
                             path_obj.cov.J, path_obj.N_max))
        fh.write(struct.pack("<d", path_obj.T))
        fh.write(np.ascontiguousarray(path_obj.increments, dtype="<f8").tobytes())


def load_wiener_record(path) -> WienerRecord:
    with open(path, "rb") as fh:
        _, _, kind = _read_header(fh)
        if kind != b"W":
            raise ValueError(f"not a Wiener path checkpoint (kind {kind!r})")
        seed, stream, J, N_max = struct.unpack("<qIII", fh.read(20))
        (T,) = struct.unpack("<d", fh.read(8))
        buf = fh.read(8 * N_max * J)
        if len(buf) != 8 * N_max * J:
            raise ValueError("truncated increment block")
        inc = np.frombuffer(buf, dtype="<f8").reshape(N_max, J).copy()
    return WienerRecord(seed, stream, J, N_max, T, inc)


def rebuild_wiener_path(record: WienerRecord, cov: CovarianceSpec) -> WienerPath:
    if cov.J != record.J:
        raise ValueError(f"covariance has J={cov.J}, record has J={record.J}")
    return WienerPath(cov, record.N_max, record.T, record.seed, record.stream,
                      record.increments)


def save_trajectory_checkpoint(path, grid: TorusGrid, state: SchemeState,
                               stats: TrajectoryStats, config_echo: dict,
                               path_seed: int, mesh_N: int, T: float):
    meta = {
        "step_index": state.index,
        "path_seed": path_seed,
        "N": mesh_N,
        "T": T,
        "config": config_echo,
        "stats": stats.as_dict(),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_pack_header(grid.K, grid.L, b"T"))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(_coeff_bytes(state.u.coeffs))
        fh.write(_coeff_bytes(state.theta.coeffs))


def load_trajectory_checkpoint(path, grid: TorusGrid | None = None):
    with open(path, "rb") as fh:
        K, L, kind = _read_header(fh)
        if kind != b"T":
            raise ValueError(f"not a trajectory checkpoint (kind {kind!r})")
        if grid is None:
            grid = TorusGrid(K, L)
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        u = SpectralVectorField(grid, _read_coeffs(fh, (2, K, K)))
        theta = SpectralScalarField(grid, _read_coeffs(fh, (K, K)))
    state = SchemeState(meta["step_index"], u, theta)
    stats = TrajectoryStats.from_dict(meta["stats"])
    return meta, state, stats
