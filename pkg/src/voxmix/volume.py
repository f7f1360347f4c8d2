"""Dense 3D scalar volumes, voxel coordinates, sampling masks, and file I/O.

Conventions used throughout the package:

* A volume of logical dims ``(dx, dy, dz)`` is stored as a C-contiguous
  numpy array of shape ``(dz, dy, dx)``, indexed ``data[k, j, i]``.  With
  that layout ``data.ravel()`` enumerates voxels x-fastest, i.e. flat
  index ``i + dx * (j + dy * k)``, which is also the on-disk payload order.
* The normalized position of voxel ``(i, j, k)`` is
  ``((i + 1) / dx, (j + 1) / dy, (k + 1) / dz)``, each component in (0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Volume3D",
    "VoxelCoord",
    "LabelVolume",
    "SampleMask",
    "ParameterField",
    "load_volume",
    "store_volume",
    "load_labels",
    "store_labels",
    "load_mhd",
    "normalize_to_unit",
    "denormalize",
    "apply_mask",
    "split_train_test",
    "subsample_mask",
    "flat_to_ijk",
    "ijk_to_flat",
    "normalized_axes",
]

Dims = tuple[int, int, int]


def check_dims(dims) -> Dims:
    """Validate and canonicalize a (dx, dy, dz) triple of positive ints."""
    if len(dims) != 3:
        raise ValueError(f"dims must have 3 entries, got {dims!r}")
    dx, dy, dz = (int(d) for d in dims)
    if dx <= 0 or dy <= 0 or dz <= 0:
        raise ValueError(f"dims must be positive, got {dims!r}")
    return (dx, dy, dz)


def check_same_dims(a, b, what: str = "operand") -> None:
    if tuple(a.dims) != tuple(b.dims):
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims} for {what}")


def ijk_to_flat(dims: Dims, i, j, k):
    """Flat x-fastest index of voxel (i, j, k)."""
    dx, dy, _ = dims
    return i + dx * (j + dy * k)


def flat_to_ijk(dims: Dims, idx):
    """Inverse of ijk_to_flat."""
    dx, dy, _ = dims
    i = idx % dx
    j = (idx // dx) % dy
    k = idx // (dx * dy)
    return i, j, k


def normalized_axes(dims: Dims):
    """Broadcastable normalized coordinate arrays (x1, x2, x3).

    x1 has shape (1, 1, dx) and varies along the x axis; x2 is (1, dy, 1);
    x3 is (dz, 1, 1).  Values are (index + 1) / dim, in (0, 1].
    """
    dx, dy, dz = dims
    x1 = (np.arange(1, dx + 1, dtype=np.float64) / dx).reshape(1, 1, dx)
    x2 = (np.arange(1, dy + 1, dtype=np.float64) / dy).reshape(1, dy, 1)
    x3 = (np.arange(1, dz + 1, dtype=np.float64) / dz).reshape(dz, 1, 1)
    return x1, x2, x3


@dataclass(frozen=True, eq=False)
class VoxelCoord:
    """Zero-based grid indices of one voxel together with its grid dims."""

    dims: Dims
    i: int
    j: int
    k: int

    def __post_init__(self):
        dx, dy, dz = self.dims
        if not (0 <= self.i < dx and 0 <= self.j < dy and 0 <= self.k < dz):
            raise ValueError(f"voxel ({self.i},{self.j},{self.k}) outside dims {self.dims}")

    @property
    def flat(self) -> int:
        return int(ijk_to_flat(self.dims, self.i, self.j, self.k))

    @property
    def position(self) -> tuple[float, float, float]:
        """Normalized position, each component in (0, 1]."""
        dx, dy, dz = self.dims
        return ((self.i + 1) / dx, (self.j + 1) / dy, (self.k + 1) / dz)


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Dense 3D scalar field of 64-bit floats.

    ``data`` has shape (dz, dy, dx); ``value_range`` optionally remembers the
    (min, max) of the original data before normalization to [0, 1].
    """

    dims: Dims
    data: np.ndarray
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        dims = check_dims(self.dims)
        object.__setattr__(self, "dims", dims)
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.shape != self.shape_zyx:
            raise ValueError(f"data shape {data.shape} does not match dims {dims} (want {self.shape_zyx})")
        if not np.isfinite(data).all():
            bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
            raise ValueError(f"non-finite value at flat voxel index {bad}")
        object.__setattr__(self, "data", data)
        if self.value_range is not None:
            lo, hi = self.value_range
            object.__setattr__(self, "value_range", (float(lo), float(hi)))

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        dx, dy, dz = self.dims
        return (dz, dy, dx)

    @property
    def n_voxels(self) -> int:
        dx, dy, dz = self.dims
        return dx * dy * dz

    @property
    def flat(self) -> np.ndarray:
        """x-fastest flattened view of the data."""
        return self.data.ravel()

    @classmethod
    def from_flat(cls, dims, flat, value_range=None) -> "Volume3D":
        dims = check_dims(dims)
        dx, dy, dz = dims
        arr = np.asarray(flat, dtype=np.float64).reshape(dz, dy, dx)
        return cls(dims, arr, value_range)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Dense field of class labels in {1..M}, stored as uint8, shape (dz, dy, dx)."""

    dims: Dims
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        dims = check_dims(self.dims)
        object.__setattr__(self, "dims", dims)
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        dx, dy, dz = dims
        if labels.shape != (dz, dy, dx):
            raise ValueError(f"labels shape {labels.shape} does not match dims {dims}")
        if labels.size and (labels.min() < 1 or labels.max() > self.n_classes):
            raise ValueError(f"labels must lie in 1..{self.n_classes}")
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True, eq=False)
class SampleMask:
    """Boolean inclusion mask over the voxel grid with its sampling ratio."""

    dims: Dims
    included: np.ndarray
    ratio: float
    role: str

    def __post_init__(self):
        dims = check_dims(self.dims)
        object.__setattr__(self, "dims", dims)
        if self.role not in ("train", "test", "subsample"):
            raise ValueError(f"unknown mask role {self.role!r}")
        inc = np.ascontiguousarray(self.included, dtype=bool)
        dx, dy, dz = dims
        if inc.shape != (dz, dy, dx):
            raise ValueError(f"mask shape {inc.shape} does not match dims {dims}")
        object.__setattr__(self, "included", inc)
        total = dx * dy * dz
        if abs(self.n_included / total - self.ratio) > 1.0 / total:
            raise ValueError(
                f"mask count {self.n_included}/{total} inconsistent with ratio {self.ratio}"
            )

    @property
    def n_included(self) -> int:
        return int(self.included.sum())

    @classmethod
    def full(cls, dims) -> "SampleMask":
        dims = check_dims(dims)
        dx, dy, dz = dims
        return cls(dims, np.ones((dz, dy, dx), dtype=bool), 1.0, "subsample")


@dataclass(frozen=True, eq=False)
class ParameterField:
    """Per-voxel mixture parameters: priors, means, and standard deviations.

    Each of ``pi``, ``mu``, ``sigma`` has shape (M, dz, dy, dx).
    """

    dims: Dims
    n_components: int
    pi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        dims = check_dims(self.dims)
        object.__setattr__(self, "dims", dims)
        dx, dy, dz = dims
        want = (self.n_components, dz, dy, dx)
        for name in ("pi", "mu", "sigma"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise ValueError(f"{name} shape {arr.shape} does not match {want}")
            object.__setattr__(self, name, arr)

    def validate(self, sigma_floor: float = 0.0, tol: float = 1e-10) -> None:
        """Raise if the simplex or positivity invariants are violated."""
        if self.pi.min() < -tol:
            raise ValueError("negative prior")
        err = np.abs(self.pi.sum(axis=0) - 1.0).max()
        if err > tol:
            raise ValueError(f"priors sum to 1 within {err:.3e} > {tol:.1e}")
        if self.sigma.min() < sigma_floor:
            raise ValueError(f"sigma below floor {sigma_floor}")

    def copy(self) -> "ParameterField":
        return ParameterField(
            self.dims, self.n_components, self.pi.copy(), self.mu.copy(), self.sigma.copy()
        )


# --------------------------------------------------------------------------
# .kvol file I/O: <base>.json sidecar + <base>.raw payload
# --------------------------------------------------------------------------

def _kvol_base(path) -> Path:
    p = Path(path)
    if p.suffix == ".kvol":
        p = p.with_suffix("")
    return p


def _read_sidecar(base: Path) -> dict:
    sidecar = base.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing sidecar {sidecar}")
    with open(sidecar) as fh:
        meta = json.load(fh)
    for key in ("dims", "dtype", "order"):
        if key not in meta:
            raise ValueError(f"sidecar {sidecar} missing key {key!r}")
    if meta["order"] != "x-fastest":
        raise ValueError(f"unsupported payload order {meta['order']!r}")
    return meta


def _write_sidecar(base: Path, meta: dict) -> None:
    text = json.dumps(meta, sort_keys=True, separators=(", ", ": ")) + "\n"
    base.with_suffix(".json").write_text(text)


def load_volume(path) -> Volume3D:
    """Load a ``.kvol`` float volume (f32 little-endian payload, widened to f64)."""
    base = _kvol_base(path)
    meta = _read_sidecar(base)
    if meta["dtype"] != "f32le":
        raise ValueError(f"expected dtype f32le, sidecar says {meta['dtype']!r}")
    dims = check_dims(meta["dims"])
    dx, dy, dz = dims
    payload = base.with_suffix(".raw").read_bytes()
    expect = 4 * dx * dy * dz
    if len(payload) != expect:
        raise ValueError(f"payload is {len(payload)} bytes, dims {dims} require {expect}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.isfinite(flat).all():
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise ValueError(f"non-finite value at flat voxel index {bad}")
    rng = meta.get("value_range")
    return Volume3D.from_flat(dims, flat, None if rng is None else (rng[0], rng[1]))


def store_volume(v: Volume3D, path) -> None:
    """Write a volume as a ``.kvol`` pair with deterministic bytes."""
    base = _kvol_base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "dims": list(v.dims),
        "dtype": "f32le",
        "order": "x-fastest",
        "value_range": None if v.value_range is None else list(v.value_range),
    }
    _write_sidecar(base, meta)
    base.with_suffix(".raw").write_bytes(v.flat.astype("<f4").tobytes())


def load_labels(path) -> LabelVolume:
    """Load a ``.kvol`` label volume (u8 payload); M is the largest label present."""
    base = _kvol_base(path)
    meta = _read_sidecar(base)
    if meta["dtype"] != "u8":
        raise ValueError(f"expected dtype u8, sidecar says {meta['dtype']!r}")
    dims = check_dims(meta["dims"])
    dx, dy, dz = dims
    payload = base.with_suffix(".raw").read_bytes()
    if len(payload) != dx * dy * dz:
        raise ValueError(f"payload is {len(payload)} bytes, dims {dims} require {dx * dy * dz}")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(dz, dy, dx)
    return LabelVolume(dims, labels.copy(), int(labels.max()) if labels.size else 1)


def store_labels(lv: LabelVolume, path) -> None:
    base = _kvol_base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    meta = {"dims": list(lv.dims), "dtype": "u8", "order": "x-fastest", "value_range": None}
    _write_sidecar(base, meta)
    base.with_suffix(".raw").write_bytes(lv.labels.ravel().tobytes())


def load_mhd(path) -> Volume3D:
    """Minimal MetaImage import: NDims=3, ElementType=MET_FLOAT, uncompressed."""
    p = Path(path)
    fields: dict[str, str] = {}
    for line in p.read_text().splitlines():
        if "=" in line:
            key, _, val = line.partition("=")
            fields[key.strip()] = val.strip()
    if fields.get("NDims") != "3":
        raise ValueError("only NDims = 3 is supported")
    if fields.get("ElementType") != "MET_FLOAT":
        raise ValueError("only ElementType = MET_FLOAT is supported")
    if fields.get("ElementByteOrderMSB", "False").lower() == "true":
        raise ValueError("big-endian payloads are not supported")
    if "DimSize" not in fields or "ElementDataFile" not in fields:
        raise ValueError("header must provide DimSize and ElementDataFile")
    dims = check_dims([int(t) for t in fields["DimSize"].split()])
    raw = (p.parent / fields["ElementDataFile"]).read_bytes()
    dx, dy, dz = dims
    if len(raw) != 4 * dx * dy * dz:
        raise ValueError(f"payload is {len(raw)} bytes, dims {dims} require {4 * dx * dy * dz}")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if not np.isfinite(flat).all():
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise ValueError(f"non-finite value at flat voxel index {bad}")
    return Volume3D.from_flat(dims, flat)


# --------------------------------------------------------------------------
# Value-range transforms and masking
# --------------------------------------------------------------------------

def normalize_to_unit(v: Volume3D) -> Volume3D:
    """Affinely map values onto [0, 1], remembering the original range."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        raise ValueError("cannot normalize a constant volume")
    return Volume3D(v.dims, (v.data - lo) / (hi - lo), value_range=(lo, hi))


def denormalize(v: Volume3D, value_range: tuple[float, float]) -> Volume3D:
    """Inverse of normalize_to_unit for the given original (min, max)."""
    lo, hi = float(value_range[0]), float(value_range[1])
    if not hi > lo:
        raise ValueError(f"invalid value range ({lo}, {hi})")
    return Volume3D(v.dims, v.data * (hi - lo) + lo, value_range=(lo, hi))


def apply_mask(v: Volume3D, mask: Volume3D) -> Volume3D:
    """Elementwise product with a binary {0,1} volume."""
    check_same_dims(v, mask, "mask")
    vals = mask.data
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise ValueError("mask volume must contain only 0 and 1")
    return Volume3D(v.dims, v.data * vals, v.value_range)


# --------------------------------------------------------------------------
# Sampling masks
# --------------------------------------------------------------------------

def _mask_from_flat_indices(dims: Dims, idx: np.ndarray, ratio: float, role: str) -> SampleMask:
    dx, dy, dz = dims
    flat = np.zeros(dx * dy * dz, dtype=bool)
    flat[idx] = True
    return SampleMask(dims, flat.reshape(dz, dy, dx), ratio, role)


def split_train_test(dims, train_fraction: float, seed: int) -> tuple[SampleMask, SampleMask]:
    """Partition the voxel set into complementary train/test masks."""
    dims = check_dims(dims)
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    dx, dy, dz = dims
    total = dx * dy * dz
    n_train = int(round(train_fraction * total))
    perm = np.random.default_rng(seed).permutation(total)
    train = _mask_from_flat_indices(dims, perm[:n_train], train_fraction, "train")
    test = _mask_from_flat_indices(dims, perm[n_train:], 1.0 - train_fraction, "test")
    return train, test


def subsample_mask(dims, r: float, seed: int) -> SampleMask:
    """Uniform without-replacement subsample containing round(r * total) voxels."""
    dims = check_dims(dims)
    if not 0.0 < r <= 1.0:
        raise ValueError(f"sampling ratio must be in (0, 1], got {r}")
    dx, dy, dz = dims
    total = dx * dy * dz
    n = int(round(r * total))
    idx = np.random.default_rng(seed).permutation(total)[:n]
    return _mask_from_flat_indices(dims, idx, r, "subsample")
