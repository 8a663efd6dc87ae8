"""Volume I/O, preprocessing, manifests, fold splitting and synthetic data.

Stored volumes are ``[D, H, W]`` single-precision arrays. The W (last) axis
is left-right, so :func:`neurovol.tensor_core.flip_lr` swaps hemispheres.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import CLASS_INDEX, DemographicVec
from .tensor_core import DTYPE, flip_lr

VOL_MAGIC = b"VOL1"
VOL_HEADER = struct.Struct("<4sIII")
FLIP_SUFFIX = "~flip"
LABELS = ("NC", "AD", "MCI")
MANIFEST_FIELDS = ("id", "path", "label", "age_years", "sex")


class DataError(ValueError):
    """Malformed or unsupported input data."""


# --------------------------------------------------------------------------
# VOL1 volumes


def write_volume(path, vol) -> None:
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise DataError(f"VOL1 stores 3-D volumes, got shape {vol.shape}")
    D, H, W = vol.shape
    with open(path, "wb") as f:
        f.write(VOL_HEADER.pack(VOL_MAGIC, D, H, W))
        f.write(np.ascontiguousarray(vol, dtype="<f4").tobytes())


def read_volume(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < VOL_HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, D, H, W = VOL_HEADER.unpack_from(raw)
    if magic != VOL_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {VOL_MAGIC!r}")
    if min(D, H, W) == 0:
        raise DataError(f"{path}: zero extent in dims {(D, H, W)}")
    n = D * H * W
    if n > (1 << 31):
        raise DataError(f"{path}: dims {(D, H, W)} overflow")
    expected = VOL_HEADER.size + 4 * n
    if len(raw) != expected:
        raise DataError(f"{path}: truncated file, {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=VOL_HEADER.size)
    return data.reshape(D, H, W).astype(DTYPE)


# --------------------------------------------------------------------------
# NIfTI-1 import (uncompressed single-file .nii, int16/float32 only)

_NIFTI_DTYPES = {4: "i2", 16: "f4"}


def import_nifti(path) -> np.ndarray:
    """Read an uncompressed ``.nii`` file as a ``[z, y, x]`` float32 volume.

    Orientation (qform/sform) is ignored; voxels are returned in file
    order, x fastest, so x lands on the W axis. ``scl_slope``/``scl_inter``
    are applied when the slope is non-zero.
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise DataError(f"{path}: compressed NIfTI is unsupported")
    if len(raw) < 348:
        raise DataError(f"{path}: truncated NIfTI header")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", raw, 0)[0] == 348:
            break
    else:
        raise DataError(f"{path}: header size is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise DataError(f"{path}: unsupported NIfTI magic {magic!r} (need single-file n+1)")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    vox_offset = int(struct.unpack_from(endian + "f", raw, 108)[0])
    slope, inter = struct.unpack_from(endian + "2f", raw, 112)
    if datatype not in _NIFTI_DTYPES:
        raise DataError(f"{path}: unsupported NIfTI datatype code {datatype}")
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise DataError(f"{path}: expected a single 3-D volume, got dim {dim}")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise DataError(f"{path}: bad dims {(nx, ny, nz)}")
    dt = np.dtype(endian + _NIFTI_DTYPES[datatype])
    count = nx * ny * nz
    if len(raw) < vox_offset + count * dt.itemsize:
        raise DataError(f"{path}: truncated voxel data")
    vox = np.frombuffer(raw, dtype=dt, count=count, offset=vox_offset)
    vol = vox.reshape(nz, ny, nx).astype(np.float64)
    if slope != 0 and np.isfinite(slope):
        vol = vol * slope + inter
    return vol.astype(DTYPE)


# --------------------------------------------------------------------------
# preprocessing


def _resize_axis(vol: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = vol.shape[axis]
    if n_in == n_out:
        return vol
    # corner-aligned: output i samples input position i * (n_in - 1) / (n_out - 1)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - lo
    shape = [1] * vol.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    a = np.take(vol, lo, axis=axis)
    b = np.take(vol, lo + 1, axis=axis)
    return a * (1 - frac) + b * frac


def resize_volume(vol, target_dims) -> np.ndarray:
    """Trilinear resampling with corner-aligned sample grids."""
    vol = np.asarray(vol)
    target_dims = tuple(int(d) for d in target_dims)
    if vol.ndim != 3 or len(target_dims) != 3:
        raise DataError(f"resize needs 3-D volume and dims, got {vol.shape} -> {target_dims}")
    if min(vol.shape) < 2 or min(target_dims) < 2:
        raise DataError(f"degenerate axis in resize {vol.shape} -> {target_dims}")
    if vol.shape == target_dims:
        return vol.astype(DTYPE, copy=True)
    out = vol.astype(np.float64)
    for axis, n in enumerate(target_dims):
        out = _resize_axis(out, axis, n)
    return out.astype(DTYPE)


def normalize_intensity(vol) -> np.ndarray:
    """Per-volume z-score; constant volumes map to zeros."""
    v = np.asarray(vol, dtype=np.float64)
    std = v.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros(v.shape, dtype=DTYPE)
    return ((v - v.mean()) / std).astype(DTYPE)


# --------------------------------------------------------------------------
# manifests


@dataclass
class SubjectRecord:
    id: str
    path: str
    label: str
    age_years: float
    sex: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"subject {self.id}: label {self.label!r} not in {LABELS}")
        self.age_years = float(self.age_years)
        if not 0 < self.age_years < 120:
            raise DataError(f"subject {self.id}: age {self.age_years} outside (0, 120)")
        if self.sex not in ("M", "F"):
            raise DataError(f"subject {self.id}: sex must be M or F, got {self.sex!r}")

    @property
    def class_index(self) -> int:
        return CLASS_INDEX[self.label]

    def demographics(self) -> DemographicVec:
        return DemographicVec.from_subject(self.age_years, self.sex)


def read_manifest(path) -> list:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        records = [SubjectRecord(**row) for row in reader]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate subject ids")
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([r.id, r.path, r.label, repr(r.age_years), r.sex])


@dataclass
class Dataset:
    """Subject records plus their preprocessed volumes, keyed by id."""

    records: list
    volumes: dict

    def __post_init__(self):
        self.by_id = {r.id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list:
        return [r.id for r in self.records]

    def subset(self, ids) -> "Dataset":
        recs = [self.by_id[i] for i in ids]
        return Dataset(recs, {i: self.volumes[i] for i in ids})

    def with_labels(self, labels) -> "Dataset":
        return self.subset([r.id for r in self.records if r.label in labels])

    def batch(self, ids):
        """Stack volumes, demographic vectors and class indices for ``ids``."""
        vols = np.stack([self.volumes[i] for i in ids])[:, None]
        demos = np.stack([self.by_id[i].demographics().as_array() for i in ids])
        labels = np.array([self.by_id[i].class_index for i in ids], dtype=np.int64)
        return vols, demos, labels

    @classmethod
    def load(cls, manifest_path, target_dims=None, normalize=True) -> "Dataset":
        """Read a manifest and its VOL1 volumes (paths relative to the manifest)."""
        manifest_path = Path(manifest_path)
        records = read_manifest(manifest_path)
        volumes = {}
        for r in records:
            p = Path(r.path)
            if not p.is_absolute():
                p = manifest_path.parent / p
            vol = read_volume(p)
            if target_dims is not None and vol.shape != tuple(target_dims):
                vol = resize_volume(vol, target_dims)
            volumes[r.id] = normalize_intensity(vol) if normalize else vol
        return cls(records, volumes)


def augment_flip(train_set: Dataset) -> Dataset:
    """Append a left-right flipped copy of every subject (id suffixed ``~flip``)."""
    records = list(train_set.records)
    volumes = dict(train_set.volumes)
    for r in train_set.records:
        if r.id.endswith(FLIP_SUFFIX):
            raise DataError(f"{r.id} is already an augmented copy")
        fid = r.id + FLIP_SUFFIX
        records.append(replace(r, id=fid))
        volumes[fid] = flip_lr(train_set.volumes[r.id])
    return Dataset(records, volumes)


def base_id(subject_id: str) -> str:
    return subject_id[: -len(FLIP_SUFFIX)] if subject_id.endswith(FLIP_SUFFIX) else subject_id


# --------------------------------------------------------------------------
# fold splitting


@dataclass
class Fold:
    index: int
    train_ids: list
    val_ids: list
    test_ids: list


@dataclass
class SplitPlan:
    k: int
    seed: int
    folds: list

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "folds": [asdict(f) for f in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(d["k"], d["seed"], [Fold(**f) for f in d["folds"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_folds(manifest, k: int = 10, seed: int = 0) -> SplitPlan:
    """Shuffle once, cut into k shards; fold i tests on shard i, validates on shard i+1."""
    ids = [getattr(r, "id", r) for r in manifest]
    if len(ids) < k or k < 3:
        raise DataError(f"need k >= 3 and at least k subjects, got k={k}, n={len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shards = [[ids[j] for j in part] for part in np.array_split(order, k)]
    folds = []
    for i in range(k):
        val = (i + 1) % k
        train = [sid for s, shard in enumerate(shards) if s not in (i, val) for sid in shard]
        folds.append(Fold(i, train, list(shards[val]), list(shards[i])))
    return SplitPlan(k, seed, folds)


# --------------------------------------------------------------------------
# synthetic generator

# fraction of the full intensity deficit per class
LESION_SCALE = {"NC": 0.0, "MCI": 0.5, "AD": 1.0}


@dataclass
class SynthConfig:
    dims: tuple = (32, 32, 32)
    lesion_center: tuple | None = None  # default 0.4 * dims
    lesion_radius: float = 6.0
    lesion_delta: float = 1.0
    lesion_profile: str = "smooth"  # "smooth": (1 - r^2)^2 bump, flat at the rim; "flat": uniform
    noise_sigma: float = 0.1
    counts: dict = field(default_factory=lambda: {"NC": 100, "AD": 100, "MCI": 0})
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.lesion_center is None:
            self.lesion_center = tuple(0.4 * d for d in self.dims)
        self.lesion_center = tuple(float(c) for c in self.lesion_center)
        self.counts = {k: int(v) for k, v in self.counts.items()}

    def validate(self):
        if self.lesion_profile not in ("smooth", "flat"):
            raise DataError(f"lesion_profile must be 'smooth' or 'flat', got {self.lesion_profile!r}")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if set(self.counts) - set(LABELS):
            raise DataError(f"unknown classes in counts: {sorted(set(self.counts) - set(LABELS))}")
        for c, r, d in zip(self.lesion_center, [self.lesion_radius] * 3, self.dims):
            if c - r < 0 or c + r > d - 1:
                raise DataError(
                    f"lesion sphere (center {self.lesion_center}, radius {r}) leaves volume {self.dims}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["lesion_center"] = list(self.lesion_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)


def _lesion_r2(config: SynthConfig) -> np.ndarray:
    zz, yy, xx = np.indices(config.dims)
    cz, cy, cx = config.lesion_center
    return ((zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2) / config.lesion_radius**2


def lesion_mask(config: SynthConfig) -> np.ndarray:
    return _lesion_r2(config) <= 1.0


def lesion_weights(config: SynthConfig) -> np.ndarray:
    """Per-voxel deficit weight in [0, 1]; zero outside the sphere."""
    r2 = _lesion_r2(config)
    inside = r2 <= 1.0
    if config.lesion_profile == "flat":
        return inside.astype(np.float64)
    # zero value and slope at the rim, so the steepest edge sits inside the sphere
    return np.where(inside, (1.0 - r2) ** 2, 0.0)


def _brain_template(dims) -> np.ndarray:
    """Smooth ellipsoid: bright core fading to zero at the boundary."""
    grids = np.indices(dims).astype(np.float64)
    r2 = sum(((g - (d - 1) / 2) / (0.45 * d)) ** 2 for g, d in zip(grids, dims))
    return np.clip(1.0 - 0.5 * r2, 0.0, None) * (r2 <= 1.0)


def synth_generate(config: SynthConfig):
    """Build ``(volumes, records)``: raw intensities, ids ``sub-0000`` onward.

    Each class is generated in NC, AD, MCI order; records carry
    ``path = <id>.vol`` for on-disk storage.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    template = _brain_template(config.dims)
    deficit = lesion_weights(config) * config.lesion_delta
    volumes, records = {}, []
    n = 0
    for label in LABELS:
        for _ in range(config.counts.get(label, 0)):
            sid = f"sub-{n:04d}"
            n += 1
            vol = template.copy()
            vol -= deficit * LESION_SCALE[label]
            if config.noise_sigma > 0:
                vol += rng.normal(0.0, config.noise_sigma, size=config.dims)
            age = float(np.round(rng.uniform(55.0, 90.0), 1))
            sex = "F" if rng.random() < 0.5 else "M"
            volumes[sid] = vol.astype(DTYPE)
            records.append(SubjectRecord(sid, f"{sid}.vol", label, age, sex))
    return volumes, records


def synth_dataset(config: SynthConfig) -> Dataset:
    """In-memory, intensity-normalized synthetic dataset."""
    volumes, records = synth_generate(config)
    return Dataset(records, {k: normalize_intensity(v) for k, v in volumes.items()})
