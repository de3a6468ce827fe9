"""Volume and mask I/O in the RVOL format, plus intensity/mask preprocessing.

RVOL is a pair of files sharing a stem:

* ``<stem>.json`` -- ``{"dims": [d, h, w], "spacing": [sz, sy, sx], "dtype": "f32" | "u16"}``
* ``<stem>.raw``  -- little-endian, row-major payload with x (width) fastest.

Float volumes use ``f32``; label masks use ``u16``.

Resampling works on voxel centres: both the source and the target grid
tile the same unit cube, and sample ``i`` of an axis with ``n`` samples sits
at ``(i + 0.5) / n``.  Values between source centres are linearly
interpolated; the outermost half-voxel on each side is linearly extrapolated
from the two nearest samples, so the map is exact on (tri)linear fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DegenerateInputError, EmptyLiverError, FormatError, MissingInputError

_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}

# 6-connectivity for components, full 26-neighbourhood for morphology.
CONNECTIVITY_6 = ndimage.generate_binary_structure(3, 1)
NEIGHBORHOOD_26 = ndimage.generate_binary_structure(3, 3)
CLOSING_ITERATIONS = 2


def _check_geometry(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise FormatError(f"dims must be three positive integers, got {dims}")
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"spacing must be three positive reals, got {spacing}")
    return dims, spacing


@dataclass(frozen=True)
class Volume:
    """Dense 3D float32 grid, indexed ``data[z, y, x]``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise FormatError(f"volume data must be 3D, got shape {data.shape}")
        _, spacing = _check_geometry(data.shape, self.spacing)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class MaskVolume:
    """Label grid: 0 background, 1 liver, >= 2 tumour instances."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise FormatError(f"mask must be 3D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max):
            raise FormatError("mask labels must fit in u16")
        _, spacing = _check_geometry(labels.shape, self.spacing)
        object.__setattr__(self, "labels", np.ascontiguousarray(labels, dtype=np.uint16))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return tuple(self.labels.shape)


@dataclass(frozen=True)
class PreprocessConfig:
    hu_clip: tuple = (-160.0, 240.0)
    pet_percentiles: tuple = (1.0, 99.0)
    target_dims: tuple = (64, 224, 224)

    def __post_init__(self):
        lo, hi = self.hu_clip
        if not lo < hi:
            raise ConfigError(f"hu_clip must satisfy low < high, got {self.hu_clip}")
        plo, phi = self.pet_percentiles
        if not 0.0 <= plo < phi <= 100.0:
            raise ConfigError(f"pet_percentiles must satisfy 0 <= low < high <= 100, got {self.pet_percentiles}")
        if len(self.target_dims) != 3 or any(int(d) <= 0 for d in self.target_dims):
            raise ConfigError(f"target_dims must be three positive integers, got {self.target_dims}")


# --------------------------------------------------------------------------- I/O


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        return path.with_suffix("")
    return path


def _read_raw(path, expected_dtype: str):
    stem = _stem(path)
    header_path, raw_path = stem.with_suffix(".json"), stem.with_suffix(".raw")
    for p in (header_path, raw_path):
        if not p.is_file():
            raise MissingInputError(f"missing RVOL file: {p}")
    try:
        header = json.loads(header_path.read_text())
        dims, spacing = _check_geometry(header["dims"], header["spacing"])
        dtype_name = header["dtype"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed RVOL header {header_path}: {exc}") from exc
    if dtype_name not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype_name!r} in {header_path}")
    if dtype_name != expected_dtype:
        raise FormatError(f"{header_path} holds {dtype_name}, expected {expected_dtype}")
    dtype = _DTYPES[dtype_name]
    payload = raw_path.read_bytes()
    n = int(np.prod(dims))
    if len(payload) != n * dtype.itemsize:
        raise FormatError(
            f"{raw_path}: payload has {len(payload)} bytes, header dims {dims} need {n * dtype.itemsize}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return data, spacing


def _write_raw(path, array: np.ndarray, spacing, dtype_name: str) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {"dims": [int(d) for d in array.shape], "spacing": [float(s) for s in spacing], "dtype": dtype_name}
    stem.with_suffix(".json").write_text(json.dumps(header) + "\n")
    stem.with_suffix(".raw").write_bytes(np.ascontiguousarray(array, dtype=_DTYPES[dtype_name]).tobytes())
    return stem


def read_volume(path) -> Volume:
    data, spacing = _read_raw(path, "f32")
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{_stem(path)}: payload contains non-finite values")
    return Volume(data.astype(np.float32), spacing)


def write_volume(path, volume: Volume) -> Path:
    return _write_raw(path, volume.data, volume.spacing, "f32")


def read_mask(path) -> MaskVolume:
    data, spacing = _read_raw(path, "u16")
    return MaskVolume(data.astype(np.uint16), spacing)


def write_mask(path, mask: MaskVolume) -> Path:
    return _write_raw(path, mask.labels, mask.spacing, "u16")


# ------------------------------------------------------------------ intensities


def _zscore(x: np.ndarray, what: str) -> np.ndarray:
    std = x.std()
    if not std > 0:
        raise DegenerateInputError(f"{what}: volume is constant, cannot standardise")
    return (x - x.mean()) / std


def _require_finite(v: Volume):
    if not np.all(np.isfinite(v.data)):
        raise FormatError("volume contains non-finite values")


def preprocess_ct(v: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> Volume:
    """Clip to the HU window, then z-score with population statistics of the clipped volume."""
    _require_finite(v)
    lo, hi = cfg.hu_clip
    clipped = np.clip(v.data.astype(np.float64), lo, hi)
    return Volume(_zscore(clipped, "preprocess_ct"), v.spacing)


def pet_minmax(v: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Percentile clip followed by min-max scaling to [0, 1] (float64, both ends attained).

    Percentiles use linear interpolation between closest ranks (numpy's
    ``"linear"`` method): for sorted values ``x`` of length ``n`` the q-th
    percentile sits at fractional index ``q / 100 * (n - 1)``.
    """
    _require_finite(v)
    x = v.data.astype(np.float64)
    lo, hi = np.percentile(x, cfg.pet_percentiles, method="linear")
    clipped = np.clip(x, lo, hi)
    cmin, cmax = clipped.min(), clipped.max()
    if not cmax > cmin:
        raise DegenerateInputError("preprocess_pet: volume is constant after percentile clipping")
    return (clipped - cmin) / (cmax - cmin)


def preprocess_pet(v: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> Volume:
    """Percentile clip, min-max to [0, 1], then per-volume z-score."""
    return Volume(_zscore(pet_minmax(v, cfg), "preprocess_pet"), v.spacing)


# ------------------------------------------------------------------- resampling


def _axis_weights(n_in: int, n_out: int):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    if n_in == 1:
        zeros = np.zeros(n_out, dtype=np.intp)
        return zeros, zeros, np.zeros(n_out)
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, n_in - 2)
    return i0, i0 + 1, pos - i0


def resample(v: Volume, target) -> Volume:
    """Separable trilinear resampling onto ``target`` dims (voxel-centre aligned)."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t <= 0 for t in target):
        raise ConfigError(f"target dims must be three positive integers, got {target}")
    out = v.data.astype(np.float64)
    if target == v.dims:
        return Volume(v.data.copy(), v.spacing)
    for axis, n_out in enumerate(target):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        i0, i1, w = _axis_weights(n_in, n_out)
        shape = [1, 1, 1]
        shape[axis] = n_out
        w = w.reshape(shape)
        out = np.take(out, i0, axis=axis) * (1.0 - w) + np.take(out, i1, axis=axis) * w
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(v.spacing, v.dims, target))
    return Volume(out, spacing)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index whose voxel contains each target voxel centre."""
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
    return np.clip(idx, 0, n_in - 1)


def resample_labels(labels: np.ndarray, target) -> np.ndarray:
    """Nearest-neighbour resampling of an integer grid, same centre convention as :func:`resample`."""
    target = tuple(int(t) for t in target)
    iz, iy, ix = (nearest_indices(n, t) for n, t in zip(labels.shape, target))
    return labels[np.ix_(iz, iy, ix)]


def resample_mask(m: MaskVolume, target) -> MaskVolume:
    target = tuple(int(t) for t in target)
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(m.spacing, m.dims, target))
    return MaskVolume(resample_labels(m.labels, target), spacing)


# ----------------------------------------------------------------- mask cleanup


def largest_component(binary: np.ndarray) -> np.ndarray:
    """Largest 6-connected component; ties go to the component met first in raster order."""
    labelled, n = ndimage.label(binary, structure=CONNECTIVITY_6)
    if n <= 1:
        return labelled > 0
    sizes = np.bincount(labelled.ravel())[1:]
    return labelled == (int(np.argmax(sizes)) + 1)


def binary_closing(binary: np.ndarray, iterations: int = CLOSING_ITERATIONS) -> np.ndarray:
    """Dilate ``iterations`` times then erode as many times with the 26-neighbourhood.

    The grid is zero-padded first so that erosion does not eat objects that
    touch the volume border.
    """
    pad = iterations
    padded = np.pad(binary.astype(bool), pad)
    closed = ndimage.binary_dilation(padded, NEIGHBORHOOD_26, iterations=iterations)
    closed = ndimage.binary_erosion(closed, NEIGHBORHOOD_26, iterations=iterations)
    return closed[pad:-pad, pad:-pad, pad:-pad]


def refine_mask(m: MaskVolume) -> MaskVolume:
    """Largest component plus closing per class, then canonical tumour relabelling.

    Liver (label 1) and every tumour label are cleaned independently.  The
    cleaned liver is painted first and tumours on top of it in decreasing size,
    so tumour voxels never count as liver.  Painting can split a class, so the
    largest component is taken once more before tumours are relabelled 2, 3, ...
    by decreasing voxel count (ties: original label).
    """
    labels = m.labels
    liver = labels == 1
    if not liver.any():
        raise EmptyLiverError("refine_mask: mask has no liver voxels")

    liver = binary_closing(largest_component(liver))
    tumors = []
    for lab in np.unique(labels[labels >= 2]):
        region = binary_closing(largest_component(labels == lab))
        tumors.append((int(lab), region))
    tumors.sort(key=lambda t: (-int(t[1].sum()), t[0]))

    painted = np.zeros(labels.shape, dtype=np.int64)
    painted[liver] = 1
    for lab, region in tumors:
        painted[region] = lab

    out = np.zeros(labels.shape, dtype=np.uint16)
    liver = largest_component(painted == 1)
    if not liver.any():
        raise EmptyLiverError("refine_mask: liver vanished under tumour labels")
    out[liver] = 1
    kept = []
    for lab, _ in tumors:
        region = largest_component(painted == lab)
        if region.any():
            kept.append((-int(region.sum()), lab, region))
    kept.sort(key=lambda t: (t[0], t[1]))
    for new_label, (_, _, region) in enumerate(kept, start=2):
        out[region] = new_label
    return MaskVolume(out, m.spacing)
