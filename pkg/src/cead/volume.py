"""Data model and binary/TSV I/O for voxel time series and companion tables.

Binary layouts (all little-endian, x fastest, then y, z, t slowest)::

    CEAD-VOL:  b"CEADVOL1" | int32[4] dims | float32[3] voxel mm | float32 TR
               | uint8[nx*ny*nz] mask | float32[nx*ny*nz*nt] data
    CEAD-LAB:  b"CEADLAB1" | int32[3] dims | int32[nx*ny*nz] labels

Event and choice tables are UTF-8 TSV files with a fixed header row and LF
line endings.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    BadMagicError,
    DimensionOverflowError,
    InvariantError,
    NonFiniteDataError,
    TruncatedPayloadError,
    ValidationError,
)

VOL_MAGIC = b"CEADVOL1"
LAB_MAGIC = b"CEADLAB1"
_VOL_HEADER = struct.Struct("<4i3ff")
_LAB_HEADER = struct.Struct("<3i")
# Guard against headers that would make us allocate absurd buffers.
_MAX_ELEMENTS = 2**34

CONDITIONS = ("single", "correlated", "uncorrelated")

# 26-adjacency structuring element (face, edge and corner neighbours).
CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VolumeSeries:
    """4-D gridded time series with a boolean brain mask.

    ``data`` has shape ``(nx, ny, nz, nt)`` and ``mask`` shape ``(nx, ny, nz)``.
    Arrays are copied and made read-only on construction.
    """

    data: np.ndarray
    mask: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (3.0, 3.0, 3.0)
    tr_s: float = 2.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ValidationError(f"data must be 4-D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != data.shape[:3]:
            raise ValidationError(f"mask shape {mask.shape} does not match data {data.shape[:3]}")
        if min(data.shape) < 1:
            raise ValidationError("all dimensions must be >= 1")
        vs = tuple(float(x) for x in self.voxel_size_mm)
        if len(vs) != 3 or min(vs) <= 0:
            raise ValidationError("voxel_size_mm must be three positive numbers")
        if not self.tr_s > 0:
            raise ValidationError("tr_s must be positive")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "voxel_size_mm", vs)
        object.__setattr__(self, "tr_s", float(self.tr_s))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def nt(self) -> int:
        return self.data.shape[3]

    def masked_coords(self) -> np.ndarray:
        """Integer (x, y, z) of masked voxels in x-fastest order, shape (n, 3)."""
        idx = np.flatnonzero(self.mask.ravel(order="F"))
        return np.column_stack(np.unravel_index(idx, self.mask.shape, order="F")).astype(np.int64)

    def masked_series(self) -> np.ndarray:
        """Time series of masked voxels as a (T, n) array, same order as :meth:`masked_coords`."""
        c = self.masked_coords()
        return np.asarray(self.data[c[:, 0], c[:, 1], c[:, 2], :], dtype=np.float64).T

    def check_invariants(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise InvariantError("data contains non-finite values")
        outside = self.data[~self.mask]
        if outside.size and np.any(outside != 0):
            raise InvariantError("masked-out voxels must hold zero data")

    def replace_data(self, data: np.ndarray) -> "VolumeSeries":
        return VolumeSeries(data, self.mask, self.voxel_size_mm, self.tr_s)


def write_volume(v: VolumeSeries, path) -> None:
    """Write ``v`` in CEAD-VOL format; data is stored as float32."""
    v.check_invariants()
    nx, ny, nz, nt = v.dims
    buf = io.BytesIO()
    buf.write(VOL_MAGIC)
    buf.write(_VOL_HEADER.pack(nx, ny, nz, nt, *v.voxel_size_mm, v.tr_s))
    buf.write(v.mask.ravel(order="F").astype(np.uint8).tobytes())
    buf.write(np.asarray(v.data, dtype="<f4").ravel(order="F").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _check_dims(dims) -> None:
    if any(d < 1 for d in dims):
        raise DimensionOverflowError(f"invalid dimensions {tuple(dims)}")
    if int(np.prod([int(d) for d in dims], dtype=object)) > _MAX_ELEMENTS:
        raise DimensionOverflowError(f"dimensions {tuple(dims)} exceed supported size")


def read_volume(path) -> VolumeSeries:
    raw = Path(path).read_bytes()
    if raw[: len(VOL_MAGIC)] != VOL_MAGIC:
        raise BadMagicError(f"{path}: not a CEAD-VOL file")
    off = len(VOL_MAGIC)
    if len(raw) < off + _VOL_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    nx, ny, nz, nt, vx, vy, vz, tr = _VOL_HEADER.unpack_from(raw, off)
    _check_dims((nx, ny, nz, nt))
    off += _VOL_HEADER.size
    nvox = nx * ny * nz
    need = off + nvox + 4 * nvox * nt
    if len(raw) < need:
        raise TruncatedPayloadError(f"{path}: expected {need} bytes, found {len(raw)}")
    mask = np.frombuffer(raw, dtype=np.uint8, count=nvox, offset=off).reshape((nx, ny, nz), order="F")
    off += nvox
    data = np.frombuffer(raw, dtype="<f4", count=nvox * nt, offset=off)
    if not np.all(np.isfinite(data)):
        raise NonFiniteDataError(f"{path}: payload contains non-finite values")
    data = data.reshape((nx, ny, nz, nt), order="F").astype(np.float32)
    return VolumeSeries(data, mask.astype(bool), (vx, vy, vz), tr)


def normalize_series(v: VolumeSeries) -> tuple[VolumeSeries, np.ndarray]:
    """Standardize every masked voxel series to mean 0 and sample sd 1.

    Returns the normalized volume and a boolean ``(nx, ny, nz)`` map flagging
    degenerate (constant) voxels, whose series are set to zero.
    """
    if v.nt < 2:
        raise ValidationError("normalization needs at least two time points")
    x = np.asarray(v.data, dtype=np.float64)
    mean = x.mean(axis=3, keepdims=True)
    sd = x.std(axis=3, ddof=1, keepdims=True)
    degenerate = (sd[..., 0] <= 1e-12 * np.maximum(1.0, np.abs(mean[..., 0]))) & v.mask
    safe = np.where(sd > 0, sd, 1.0)
    out = (x - mean) / safe
    out[degenerate | ~v.mask] = 0.0
    return v.replace_data(out), degenerate


@dataclass(frozen=True)
class LabelVolume:
    """Integer label per voxel; 0 is background, clusters are 1..C."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValidationError("labels must be 3-D")
        if lab.size and lab.min() < 0:
            raise ValidationError("labels must be non-negative")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.int32)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def check_invariants(self) -> None:
        present = np.unique(self.labels)
        present = present[present > 0]
        if not np.array_equal(present, np.arange(1, len(present) + 1)):
            raise InvariantError("labels must form the contiguous range 1..C")
        bad = noncontiguous_labels(self.labels)
        if bad:
            raise InvariantError(f"labels not 26-connected: {bad[:10]}")


def noncontiguous_labels(labels: np.ndarray) -> list[int]:
    """Labels whose voxel sets are not a single 26-connected component."""
    bad = []
    objs = ndimage.find_objects(labels)
    for k, sl in enumerate(objs, start=1):
        if sl is None:
            continue
        _, ncomp = ndimage.label(labels[sl] == k, structure=CONNECTIVITY_26)
        if ncomp != 1:
            bad.append(k)
    return bad


def write_labels(lv: LabelVolume, path) -> None:
    buf = io.BytesIO()
    buf.write(LAB_MAGIC)
    buf.write(_LAB_HEADER.pack(*lv.dims))
    buf.write(np.asarray(lv.labels, dtype="<i4").ravel(order="F").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_labels(path) -> LabelVolume:
    raw = Path(path).read_bytes()
    if raw[: len(LAB_MAGIC)] != LAB_MAGIC:
        raise BadMagicError(f"{path}: not a CEAD label file")
    off = len(LAB_MAGIC)
    if len(raw) < off + _LAB_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    dims = _LAB_HEADER.unpack_from(raw, off)
    _check_dims(dims)
    off += _LAB_HEADER.size
    n = int(np.prod(dims))
    if len(raw) < off + 4 * n:
        raise TruncatedPayloadError(f"{path}: label payload truncated")
    lab = np.frombuffer(raw, dtype="<i4", count=n, offset=off).reshape(dims, order="F")
    return LabelVolume(lab)


# -- TSV tables --------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_tsv(path, header: list[str], rows) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(_fmt(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_tsv(path, expected_header: list[str] | None = None) -> list[dict[str, str]]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text), delimiter="\t")
    if expected_header is not None and reader.fieldnames != expected_header:
        raise ValidationError(f"{path}: header {reader.fieldnames} != {expected_header}")
    return list(reader)


EVENT_HEADER = ["onset_s", "duration_s", "condition_id", "amplitude"]


@dataclass(frozen=True)
class EventTable:
    onset_s: np.ndarray
    duration_s: np.ndarray
    condition_id: np.ndarray
    amplitude: np.ndarray

    def __post_init__(self):
        onset = np.asarray(self.onset_s, dtype=float)
        n = onset.shape[0]
        dur = np.broadcast_to(np.asarray(self.duration_s, dtype=float), (n,))
        cond = np.broadcast_to(np.asarray(self.condition_id, dtype=int), (n,))
        amp = np.broadcast_to(np.asarray(self.amplitude, dtype=float), (n,))
        if n and (onset.min() < 0 or dur.min() < 0):
            raise ValidationError("onsets and durations must be non-negative")
        if np.any(np.diff(onset) < 0):
            raise ValidationError("event onsets must be sorted")
        for name, arr in (("onset_s", onset), ("duration_s", dur), ("condition_id", cond), ("amplitude", amp)):
            object.__setattr__(self, name, _frozen(arr))

    @classmethod
    def from_onsets(cls, onsets, condition_id=0, duration_s=0.0, amplitude=1.0) -> "EventTable":
        onsets = np.asarray(onsets, dtype=float)
        return cls(onsets, duration_s, condition_id, amplitude)

    def __len__(self) -> int:
        return len(self.onset_s)

    def validate_for(self, nt: int, tr_s: float) -> None:
        end = nt * tr_s
        if len(self) and (np.max(self.onset_s) >= end or np.max(self.onset_s + self.duration_s) > end):
            raise ValidationError("events extend beyond the end of the series")

    def select(self, conditions) -> "EventTable":
        keep = np.isin(self.condition_id, list(conditions))
        return EventTable(self.onset_s[keep], self.duration_s[keep], self.condition_id[keep], self.amplitude[keep])

    def write(self, path) -> None:
        write_tsv(path, EVENT_HEADER, zip(self.onset_s, self.duration_s, self.condition_id, self.amplitude))

    @classmethod
    def read(cls, path) -> "EventTable":
        rows = read_tsv(path, EVENT_HEADER)
        return cls(
            [float(r["onset_s"]) for r in rows],
            [float(r["duration_s"]) for r in rows],
            [int(r["condition_id"]) for r in rows],
            [float(r["amplitude"]) for r in rows],
        )


CHOICE_HEADER = [
    "subject_id", "trial_index", "mean_return_pct", "sd_return_pct",
    "condition", "chose_risky", "onset_s",
]


@dataclass(frozen=True)
class ChoiceTable:
    subject_id: np.ndarray
    trial_index: np.ndarray
    mean_return_pct: np.ndarray
    sd_return_pct: np.ndarray
    condition: np.ndarray
    chose_risky: np.ndarray
    onset_s: np.ndarray

    def __post_init__(self):
        sid = np.asarray(self.subject_id, dtype=str)
        n = len(sid)
        cols = {
            "subject_id": sid,
            "trial_index": np.asarray(self.trial_index, dtype=int),
            "mean_return_pct": np.asarray(self.mean_return_pct, dtype=float),
            "sd_return_pct": np.asarray(self.sd_return_pct, dtype=float),
            "condition": np.asarray(self.condition, dtype=str),
            "chose_risky": np.asarray(self.chose_risky, dtype=bool),
            "onset_s": np.asarray(self.onset_s, dtype=float),
        }
        for k, a in cols.items():
            if a.shape != (n,):
                raise ValidationError(f"column {k} has length {a.shape}, expected {n}")
        if n and np.any(cols["sd_return_pct"] < 0):
            raise ValidationError("sd_return_pct must be non-negative")
        bad = set(cols["condition"]) - set(CONDITIONS)
        if bad:
            raise ValidationError(f"unknown conditions {sorted(bad)}")
        for s in np.unique(sid):
            t = cols["trial_index"][sid == s]
            if len(np.unique(t)) != len(t):
                raise ValidationError(f"duplicate trial_index for subject {s}")
        for k, a in cols.items():
            object.__setattr__(self, k, _frozen(a))

    def __len__(self) -> int:
        return len(self.subject_id)

    def subjects(self) -> list[str]:
        # first-appearance order keeps outputs aligned with the input file
        _, first = np.unique(self.subject_id, return_index=True)
        return [str(self.subject_id[i]) for i in sorted(first)]

    def for_subject(self, sid: str) -> "ChoiceTable":
        keep = self.subject_id == sid
        order = np.argsort(self.trial_index[keep], kind="stable")
        return ChoiceTable(*(getattr(self, k)[keep][order] for k in CHOICE_HEADER))

    def uses_standard_grid(self) -> bool:
        return bool(
            np.all(np.isin(self.mean_return_pct, (5, 7, 9, 11)))
            and np.all(np.isin(self.sd_return_pct, (2, 4, 6, 8)))
        )

    def write(self, path) -> None:
        write_tsv(path, CHOICE_HEADER, zip(*(getattr(self, k) for k in CHOICE_HEADER)))

    @classmethod
    def read(cls, path) -> "ChoiceTable":
        rows = read_tsv(path, CHOICE_HEADER)
        return cls(
            [r["subject_id"] for r in rows],
            [int(r["trial_index"]) for r in rows],
            [float(r["mean_return_pct"]) for r in rows],
            [float(r["sd_return_pct"]) for r in rows],
            [r["condition"] for r in rows],
            [r["chose_risky"] in ("1", "true", "True") for r in rows],
            [float(r["onset_s"]) for r in rows],
        )

    @classmethod
    def concat(cls, tables) -> "ChoiceTable":
        tables = list(tables)
        return cls(*(np.concatenate([getattr(t, k) for t in tables]) for k in CHOICE_HEADER))
