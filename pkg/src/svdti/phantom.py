"""Synthetic tensor phantoms and the diffusion signals they generate.

Phantoms combine isotropic regions, coherent fiber regions with smoothly
varying orientation, and masked-out background. Signals follow the
single-tensor model S = S0 * exp(-b * g^T D g). Rician corruption draws its
Gaussian components from a counter-based generator (Philox) in a fixed
order, so realizations are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import eig3_batch
from .core import (DwiVolume, GradientScheme, _read_container,
                   _readonly, _write_container)

# Literature-typical eigenvalues in mm^2/s: coherent white matter and the
# span used for isotropic tissue. Configuration defaults, not ground truth.
FIBER_EIGENVALUES = (1.7e-3, 0.3e-3, 0.3e-3)
ISO_DIFFUSIVITY_RANGE = (0.7e-3, 3.0e-3)
S0_RANGE = (0.8, 1.2)

PSD_FLOOR = -1e-12


@dataclass(frozen=True, eq=False)
class TensorField:
    """Per-voxel symmetric diffusion tensors with S0 and a mask.

    ``tensors`` has shape (W, H, S, 6) holding the unique components in the
    order (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz), in mm^2/s.

    ``check_psd`` controls the positive-semi-definiteness check on masked-in
    tensors. Constructed phantoms enforce it; fields produced by fitting
    noisy data may carry slightly negative eigenvalues and skip it.
    """

    tensors: np.ndarray
    s0: np.ndarray
    mask: np.ndarray
    check_psd: bool = True

    def __post_init__(self):
        tensors = np.asarray(self.tensors, dtype=np.float64)
        s0 = np.asarray(self.s0, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if tensors.ndim != 4 or tensors.shape[3] != 6:
            raise ValueError(f"tensors must have shape (W, H, S, 6), got {tensors.shape}")
        dims = tensors.shape[:3]
        if s0.shape != dims or mask.shape != dims:
            raise ValueError(
                f"s0 shape {s0.shape} and mask shape {mask.shape} "
                f"must both equal tensor dims {dims}"
            )
        if mask.any():
            s0_in = s0[mask]
            if not np.all(np.isfinite(s0_in)) or np.any(s0_in <= 0):
                raise ValueError("masked-in s0 must be finite and > 0")
            if not np.all(np.isfinite(tensors[mask])):
                raise ValueError("masked-in tensors must be finite")
            if self.check_psd:
                evals, _ = eig3_batch(tensors[mask])
                low = float(evals.min())
                if low < PSD_FLOOR:
                    raise ValueError(
                        f"masked-in tensors must be positive semi-definite "
                        f"(min eigenvalue {low:.3e})"
                    )
        object.__setattr__(self, "tensors", _readonly(tensors))
        object.__setattr__(self, "s0", _readonly(s0))
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.tensors.shape[:3])


@dataclass(frozen=True)
class NoiseSpec:
    """Rician noise level and seed.

    ``sigma`` is the noise standard deviation as a fraction of the mean
    masked-in b0 signal.
    """

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")


def _unit_coords(dims) -> tuple:
    axes = [np.linspace(-1.0, 1.0, d) for d in dims]
    return tuple(np.meshgrid(*axes, indexing="ij"))


def _smooth_field(rng, dims, lo: float, hi: float) -> np.ndarray:
    """Low-frequency random scalar field rescaled into [lo, hi]."""
    xs, ys, zs = _unit_coords(dims)
    acc = np.zeros(dims)
    for _ in range(4):
        freq = rng.uniform(0.3, 1.2, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        acc += amp * np.cos(np.pi * (freq[0] * xs + freq[1] * ys + freq[2] * zs) + phase)
    span = acc.max() - acc.min()
    if span < 1e-12:
        return np.full(dims, 0.5 * (lo + hi))
    return lo + (hi - lo) * (acc - acc.min()) / span


def _iso_components(d: np.ndarray) -> np.ndarray:
    comps = np.zeros(d.shape + (6,))
    for k in range(3):
        comps[..., k] = d
    return comps


def _fiber_components(theta: np.ndarray) -> np.ndarray:
    """In-plane fiber tensors: dominant axis (cos t, sin t, 0)."""
    lam1, lam2, lam3 = FIBER_EIGENVALUES
    c, s = np.cos(theta), np.sin(theta)
    comps = np.zeros(theta.shape + (6,))
    comps[..., 0] = lam1 * c * c + lam2 * s * s
    comps[..., 1] = lam1 * s * s + lam2 * c * c
    comps[..., 2] = lam3
    comps[..., 3] = (lam1 - lam2) * c * s
    return comps


def _ellipsoid_mask(dims) -> np.ndarray:
    xs, ys, zs = _unit_coords(dims)
    return xs * xs + ys * ys + zs * zs <= 1.0


def _build_iso_only(dims, rng) -> TensorField:
    mask = _ellipsoid_mask(dims)
    d = _smooth_field(rng, dims, *ISO_DIFFUSIVITY_RANGE)
    tensors = _iso_components(np.where(mask, d, 0.0))
    s0 = np.where(mask, _smooth_field(rng, dims, *S0_RANGE), 0.0)
    return TensorField(tensors=tensors, s0=s0, mask=mask)


def _build_fiber_x(dims, rng) -> TensorField:
    # Cylindrical core along x with an exactly x-aligned dominant axis,
    # isotropic tissue elsewhere inside the ellipsoid.
    mask = _ellipsoid_mask(dims)
    _, ys, zs = _unit_coords(dims)
    core = mask & (ys * ys + zs * zs <= 0.45**2)
    tensors = np.zeros(dims + (6,))
    iso = mask & ~core
    for k in range(3):
        tensors[..., k][iso] = ISO_DIFFUSIVITY_RANGE[0]
    for k in range(3):
        tensors[..., k][core] = FIBER_EIGENVALUES[k]
    s0 = np.where(mask, _smooth_field(rng, dims, *S0_RANGE), 0.0)
    return TensorField(tensors=tensors, s0=s0, mask=mask)


def _build_mixed(dims, rng) -> TensorField:
    # Inner column of fibers whose in-plane orientation drifts smoothly,
    # isotropic tissue with varying diffusivity around it.
    mask = _ellipsoid_mask(dims)
    xs, ys, zs = _unit_coords(dims)
    fiber = mask & (xs * xs + ys * ys <= 0.55**2)
    iso = mask & ~fiber
    theta = (np.pi / 3.0) * zs + (np.pi / 5.0) * xs
    theta = theta + _smooth_field(rng, dims, -np.pi / 8.0, np.pi / 8.0)
    tensors = np.zeros(dims + (6,))
    fib = _fiber_components(theta)
    tensors[fiber] = fib[fiber]
    d = _smooth_field(rng, dims, *ISO_DIFFUSIVITY_RANGE)
    iso_comps = _iso_components(d)
    tensors[iso] = iso_comps[iso]
    s0 = np.where(mask, _smooth_field(rng, dims, *S0_RANGE), 0.0)
    return TensorField(tensors=tensors, s0=s0, mask=mask)


_PRESET_BUILDERS = {
    "iso-only": _build_iso_only,
    "fiber-x": _build_fiber_x,
    "mixed": _build_mixed,
}

PRESETS = tuple(sorted(_PRESET_BUILDERS))


def make_phantom(dims, preset: str, seed: int) -> TensorField:
    """Build a deterministic synthetic tensor field.

    Parameters
    ----------
    dims : (W, H, S)
        Voxel counts, each >= 4.
    preset : str
        One of ``PRESETS``: "iso-only" (isotropic tissue only), "fiber-x"
        (fiber core exactly along x plus isotropic surround), or "mixed"
        (fiber column with smoothly drifting orientation plus isotropic
        tissue of varying diffusivity).
    seed : int
        Seed for the layout's random smooth fields.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 4 for d in dims):
        raise ValueError(f"phantom dims must be three values each >= 4, got {dims}")
    try:
        builder = _PRESET_BUILDERS[preset]
    except KeyError:
        known = ", ".join(PRESETS)
        raise ValueError(f"unknown phantom preset '{preset}' (available: {known})") from None
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    return builder(dims, rng)


def simulate_dwi(field: TensorField, scheme: GradientScheme) -> DwiVolume:
    """Noiseless signal S = S0 * exp(-b * g^T D g) per voxel and direction.

    b0 entries carry S0 exactly. Masked-out voxels follow the same formula
    on whatever the field stores there.
    """
    g = scheme.bvecs
    t = field.tensors
    quad = (
        t[..., 0, None] * g[:, 0] ** 2
        + t[..., 1, None] * g[:, 1] ** 2
        + t[..., 2, None] * g[:, 2] ** 2
        + 2.0 * t[..., 3, None] * g[:, 0] * g[:, 1]
        + 2.0 * t[..., 4, None] * g[:, 0] * g[:, 2]
        + 2.0 * t[..., 5, None] * g[:, 1] * g[:, 2]
    )
    data = field.s0[..., None] * np.exp(-scheme.bvals * quad)
    return DwiVolume(data=data, mask=field.mask, scheme=scheme)


def add_rician_noise(volume: DwiVolume, spec: NoiseSpec) -> DwiVolume:
    """Apply magnitude noise: sqrt((S + n1)^2 + n2^2).

    n1 and n2 are independent zero-mean Gaussians with standard deviation
    ``spec.sigma`` times the mean masked-in b0 signal. ``sigma = 0`` returns
    the input volume unchanged. The two components are drawn as one
    (W, H, S, D, 2) block from Philox seeded with ``spec.seed``, so the
    realization depends only on ``spec`` and the volume shape.
    """
    if spec.sigma == 0:
        return volume
    b0 = volume.scheme.b0_indices
    if b0.size == 0:
        raise ValueError("volume scheme has no b0 measurement to scale sigma against")
    if not volume.mask.any():
        raise ValueError("volume mask is empty; cannot scale sigma")
    ref = float(volume.data[volume.mask][:, b0].mean())
    if ref <= 0:
        raise ValueError(f"mean masked-in b0 signal must be > 0, got {ref:.3e}")
    sigma_abs = spec.sigma * ref
    rng = np.random.Generator(np.random.Philox(int(spec.seed)))
    noise = rng.normal(0.0, sigma_abs, size=volume.data.shape + (2,))
    data = np.sqrt((volume.data + noise[..., 0]) ** 2 + noise[..., 1] ** 2)
    return DwiVolume(data=data, mask=volume.mask, scheme=volume.scheme)


_FIELD_CHANNELS = ["dxx", "dyy", "dzz", "dxy", "dxz", "dyz", "s0"]


def write_tensor_field(field: TensorField, path) -> None:
    """Store a tensor field as a 7-channel volume pair (6 components + S0)."""
    stacked = np.concatenate([field.tensors, field.s0[..., None]], axis=3)
    _write_container(path, "tensor-field", stacked, field.mask, "float64",
                          {"channel_names": _FIELD_CHANNELS})


def read_tensor_field(path) -> TensorField:
    """Read a tensor field written by write_tensor_field.

    The PSD check is skipped on read: fitted fields are stored through the
    same container and may carry slightly negative eigenvalues.
    """
    header, data, mask = _read_container(path, "tensor-field")
    names = header.get("channel_names")
    if names != _FIELD_CHANNELS:
        raise ValueError(f"unexpected tensor-field channels: {names}")
    return TensorField(tensors=data[..., :6], s0=data[..., 6], mask=mask,
                       check_psd=False)
