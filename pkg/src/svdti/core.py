"""Shared data model and interchange formats.

Defines gradient schemes, diffusion-weighted volumes, derived metric maps,
and training patches, plus the on-disk representations used by the command
line tools: a ``.vol.json`` sidecar header with a raw little-endian payload
for volumes, and FSL-style ``.bval`` / ``.bvec`` text files for schemes.

All types are immutable after construction: arrays are stored as read-only
views, so they are safe to share across threads for reading.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

# Channel order for every (FA, MD, AD) target or prediction array.
TARGET_CHANNELS = ("fa", "md", "ad")

UNIT_NORM_TOL = 1e-6
FA_CEILING = 1.0 + 1e-9


class DimensionMismatchError(ValueError):
    """Two objects that must agree on shape do not."""


class PayloadSizeError(ValueError):
    """A raw payload does not match the byte count implied by its header."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class GradientScheme:
    """Acquisition protocol: b-values and gradient directions.

    Parameters
    ----------
    bvals : array_like, shape (D,)
        b-values in s/mm^2, all >= 0.
    bvecs : array_like, shape (D, 3)
        Encoding directions; rows with bval > 0 must have unit norm
        (within ``UNIT_NORM_TOL``).
    """

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64)
        bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if bvals.ndim != 1:
            raise ValueError(f"bvals must be one-dimensional, got shape {bvals.shape}")
        if bvecs.shape != (bvals.shape[0], 3):
            raise DimensionMismatchError(
                f"bvals has {bvals.shape[0]} entries but bvecs has shape {bvecs.shape}"
            )
        if not np.all(np.isfinite(bvals)) or np.any(bvals < 0):
            raise ValueError("b-values must be finite and >= 0")
        if not np.all(np.isfinite(bvecs)):
            raise ValueError("gradient directions must be finite")
        norms = np.linalg.norm(bvecs[bvals > 0], axis=1)
        if norms.size and np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            worst = float(np.abs(norms - 1.0).max())
            raise ValueError(
                f"diffusion-weighted directions must be unit vectors "
                f"(worst norm deviation {worst:.3e})"
            )
        object.__setattr__(self, "bvals", _readonly(bvals))
        object.__setattr__(self, "bvecs", _readonly(bvecs))

    @property
    def n_measurements(self) -> int:
        return int(self.bvals.shape[0])

    @property
    def b0_indices(self) -> np.ndarray:
        """Indices of non-diffusion-weighted measurements (bval == 0)."""
        return np.flatnonzero(self.bvals == 0)

    @property
    def dwi_indices(self) -> np.ndarray:
        """Indices of diffusion-weighted measurements (bval > 0)."""
        return np.flatnonzero(self.bvals > 0)


@dataclass(frozen=True, eq=False)
class DwiVolume:
    """A 4D diffusion-weighted image with its mask and scheme.

    ``data`` has shape (W, H, S, D) and keeps its float32 or float64 dtype;
    the on-disk payload records the dtype so write-then-read round-trips
    bit-exactly. Masked-in values must be finite and >= 0; masked-out voxels
    may hold anything, including NaN, and every consumer reads through the
    mask.
    """

    data: np.ndarray
    mask: np.ndarray
    scheme: GradientScheme

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if data.ndim != 4:
            raise ValueError(f"data must be 4D (W, H, S, D), got shape {data.shape}")
        if mask.shape != data.shape[:3]:
            raise DimensionMismatchError(
                f"mask shape {mask.shape} does not match volume dims {data.shape[:3]}"
            )
        if data.shape[3] != self.scheme.n_measurements:
            raise DimensionMismatchError(
                f"volume has {data.shape[3]} channels but scheme has "
                f"{self.scheme.n_measurements} measurements"
            )
        inside = data[mask]
        if inside.size and (not np.all(np.isfinite(inside)) or np.any(inside < 0)):
            raise ValueError("masked-in signal values must be finite and >= 0")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape[:3])


@dataclass(frozen=True, eq=False)
class MetricMaps:
    """Per-voxel FA, MD, and AD maps sharing one mask.

    FA is dimensionless in [0, 1]; MD and AD are in mm^2/s. Values outside
    the mask are unconstrained.
    """

    fa: np.ndarray
    md: np.ndarray
    ad: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        fa = np.asarray(self.fa, dtype=np.float64)
        md = np.asarray(self.md, dtype=np.float64)
        ad = np.asarray(self.ad, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if fa.ndim != 3:
            raise ValueError(f"metric maps must be 3D, got shape {fa.shape}")
        for name, arr in (("md", md), ("ad", ad), ("mask", mask)):
            if arr.shape != fa.shape:
                raise DimensionMismatchError(
                    f"{name} shape {arr.shape} does not match fa shape {fa.shape}"
                )
        fa_in = fa[mask]
        if fa_in.size:
            if not np.all(np.isfinite(fa_in)):
                raise ValueError("masked-in FA must be finite")
            if np.any(fa_in < 0) or np.any(fa_in > FA_CEILING):
                raise ValueError(
                    f"masked-in FA must lie in [0, 1], found range "
                    f"[{fa_in.min():.6g}, {fa_in.max():.6g}]"
                )
            if not (np.all(np.isfinite(md[mask])) and np.all(np.isfinite(ad[mask]))):
                raise ValueError("masked-in MD and AD must be finite")
        object.__setattr__(self, "fa", _readonly(fa))
        object.__setattr__(self, "md", _readonly(md))
        object.__setattr__(self, "ad", _readonly(ad))
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.fa.shape)

    def stacked(self) -> np.ndarray:
        """Return the (W, H, S, 3) array in TARGET_CHANNELS order."""
        return np.stack([self.fa, self.md, self.ad], axis=-1)


@dataclass(frozen=True, eq=False)
class Patch:
    """One cubic training example.

    ``signal`` has shape (n, n, n, K+1): channel 0 is the averaged b0
    signal, channels 1..K are the diffusion-weighted measurements in scheme
    order. ``target`` has shape (n, n, n, 3) in TARGET_CHANNELS order.
    """

    origin: tuple
    size: int
    signal: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        n = int(self.size)
        signal = np.asarray(self.signal, dtype=np.float64)
        target = np.asarray(self.target, dtype=np.float64)
        if signal.ndim != 4 or signal.shape[:3] != (n, n, n):
            raise ValueError(f"signal shape {signal.shape} does not match size {n}")
        if target.shape != (n, n, n, 3):
            raise ValueError(f"target shape {target.shape} must be ({n}, {n}, {n}, 3)")
        object.__setattr__(self, "origin", tuple(int(c) for c in self.origin))
        object.__setattr__(self, "size", n)
        object.__setattr__(self, "signal", _readonly(signal))
        object.__setattr__(self, "target", _readonly(target))


def volume_channels(volume: DwiVolume) -> np.ndarray:
    """Stack the model-facing signal channels of a volume.

    Returns a (W, H, S, K+1) float64 array: channel 0 is the mean of all b0
    measurements, channels 1..K are the diffusion-weighted measurements in
    scheme order.
    """
    b0 = volume.scheme.b0_indices
    if b0.size == 0:
        raise ValueError("scheme has no b0 measurement")
    data = volume.data.astype(np.float64)
    b0_mean = data[..., b0].mean(axis=-1, keepdims=True)
    return np.concatenate([b0_mean, data[..., volume.scheme.dwi_indices]], axis=-1)


def extract_patches(volume: DwiVolume, targets: MetricMaps, n: int, stride: int) -> list:
    """Extract every axis-aligned patch whose center voxel is masked in.

    Patches are enumerated on the regular grid of origins spaced ``stride``
    apart, in x-then-y-then-z order. The center voxel of a patch at origin
    ``o`` is ``o + n // 2`` per axis.

    Raises
    ------
    DimensionMismatchError
        If volume and targets disagree on dims.
    ValueError
        If their masks differ, or n or stride is < 1.
    """
    if n < 1:
        raise ValueError(f"patch size must be >= 1, got {n}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if volume.dims != targets.dims:
        raise DimensionMismatchError(
            f"volume dims {volume.dims} do not match target dims {targets.dims}"
        )
    if not np.array_equal(volume.mask, targets.mask):
        raise ValueError("volume and target masks differ")
    dims = volume.dims
    if any(d < n for d in dims):
        return []
    channels = volume_channels(volume)
    stacked = targets.stacked()
    half = n // 2
    patches = []
    for x in range(0, dims[0] - n + 1, stride):
        for y in range(0, dims[1] - n + 1, stride):
            for z in range(0, dims[2] - n + 1, stride):
                if not volume.mask[x + half, y + half, z + half]:
                    continue
                patches.append(
                    Patch(
                        origin=(x, y, z),
                        size=n,
                        signal=channels[x : x + n, y : y + n, z : z + n, :],
                        target=stacked[x : x + n, y : y + n, z : z + n, :],
                    )
                )
    return patches


# ---------------------------------------------------------------------------
# Volume container: <base>.vol.json header + <base>.vol.raw payload.
# Payload layout: data raveled x-fastest (Fortran order), little-endian,
# followed by the mask as uint8 in the same order.

_VOL_SUFFIXES = (".vol.json", ".vol.raw", ".vol")


def _vol_paths(path) -> tuple:
    base = os.fspath(path)
    for suffix in _VOL_SUFFIXES:
        if base.endswith(suffix):
            base = base[: -len(suffix)]
            break
    return base + ".vol.json", base + ".vol.raw"


def atomic_write_bytes(path: str, blob: bytes) -> None:
    """Write a file via a same-directory temp file and atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _write_container(path, kind: str, arr4d: np.ndarray, mask: np.ndarray,
                     dtype: str, extra: dict) -> None:
    w, h, s, c = arr4d.shape
    header = {
        "kind": kind,
        "dims": [w, h, s],
        "channels": c,
        "dtype": dtype,
        "axis_order": "x-fastest",
        "byte_order": "little",
        "mask": "uint8, appended after payload",
    }
    header.update(extra)
    header_path, raw_path = _vol_paths(path)
    payload = arr4d.astype(np.dtype(dtype).newbyteorder("<"), copy=False)
    blob = payload.ravel(order="F").tobytes()
    blob += mask.astype(np.uint8).ravel(order="F").tobytes()
    atomic_write_bytes(raw_path, blob)
    atomic_write_text(header_path, json.dumps(header, indent=2, sort_keys=True) + "\n")


def _read_container(path, kind: str) -> tuple:
    header_path, raw_path = _vol_paths(path)
    for required in (header_path, raw_path):
        if not os.path.exists(required):
            raise FileNotFoundError(f"missing volume file: {required}")
    with open(header_path, encoding="utf-8") as fh:
        header = json.load(fh)
    found = header.get("kind", "dwi")
    if found != kind:
        raise ValueError(f"{header_path}: expected kind '{kind}', found '{found}'")
    dims = tuple(int(d) for d in header["dims"])
    channels = int(header["channels"])
    dtype = np.dtype(header.get("dtype", "float32")).newbyteorder("<")
    with open(raw_path, "rb") as fh:
        blob = fh.read()
    n_vox = math.prod(dims)
    data_bytes = n_vox * channels * dtype.itemsize
    expected = data_bytes + n_vox
    if len(blob) != expected:
        raise PayloadSizeError(
            f"{raw_path}: header implies {expected} bytes "
            f"({data_bytes} payload + {n_vox} mask), found {len(blob)}"
        )
    arr4d = np.frombuffer(blob[:data_bytes], dtype=dtype)
    arr4d = arr4d.reshape(dims + (channels,), order="F")
    mask = np.frombuffer(blob[data_bytes:], dtype=np.uint8)
    mask = mask.reshape(dims, order="F").astype(bool)
    return header, arr4d, mask


def write_volume(volume: DwiVolume, path) -> None:
    """Write a volume pair; the scheme is embedded in the JSON header."""
    extra = {
        "bvals": [float(v) for v in volume.scheme.bvals],
        "bvecs": [[float(c) for c in row] for row in volume.scheme.bvecs],
    }
    _write_container(path, "dwi", volume.data, volume.mask,
                     str(volume.data.dtype), extra)


def read_volume(path) -> DwiVolume:
    """Read a volume pair written by :func:`write_volume`."""
    header, data, mask = _read_container(path, "dwi")
    scheme = GradientScheme(np.asarray(header["bvals"]), np.asarray(header["bvecs"]))
    return DwiVolume(data=data, mask=mask, scheme=scheme)


def write_metric_maps(maps: MetricMaps, path) -> None:
    """Write FA/MD/AD maps as one 3-channel volume pair.

    The payload is float64: fitted maps must survive a round trip without
    losing precision against the fit itself.
    """
    _write_container(path, "metrics", maps.stacked(), maps.mask, "float64",
                     {"channel_names": list(TARGET_CHANNELS)})


def read_metric_maps(path) -> MetricMaps:
    header, arr, mask = _read_container(path, "metrics")
    if header.get("channel_names") != list(TARGET_CHANNELS):
        raise ValueError(f"unexpected channel names {header.get('channel_names')}")
    return MetricMaps(fa=arr[..., 0], md=arr[..., 1], ad=arr[..., 2], mask=mask)


# ---------------------------------------------------------------------------
# FSL-style scheme files: one row of bvals, three rows of bvecs (x, y, z).

_SCHEME_SUFFIXES = (".bval", ".bvec")


def _scheme_paths(path) -> tuple:
    base = os.fspath(path)
    for suffix in _SCHEME_SUFFIXES:
        if base.endswith(suffix):
            base = base[: -len(suffix)]
            break
    return base + ".bval", base + ".bvec"


def write_scheme(scheme: GradientScheme, path) -> None:
    """Write ``.bval`` / ``.bvec`` text files (shortest exact decimals)."""
    bval_path, bvec_path = _scheme_paths(path)
    atomic_write_text(bval_path, " ".join(repr(float(v)) for v in scheme.bvals) + "\n")
    rows = []
    for axis in range(3):
        rows.append(" ".join(repr(float(v)) for v in scheme.bvecs[:, axis]))
    atomic_write_text(bvec_path, "\n".join(rows) + "\n")


def read_scheme(path) -> GradientScheme:
    bval_path, bvec_path = _scheme_paths(path)
    bvals = np.atleast_1d(np.loadtxt(bval_path, dtype=np.float64))
    bvecs = np.loadtxt(bvec_path, dtype=np.float64, ndmin=2)
    if bvecs.shape[0] != 3:
        raise ValueError(f"{bvec_path}: expected 3 rows, found {bvecs.shape[0]}")
    return GradientScheme(bvals=bvals, bvecs=bvecs.T)
