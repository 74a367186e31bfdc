"""End-to-end training pipeline: dataset assembly, the shared epoch loop
behind the three ablation modes, and patch-tiled inference.

Modes: "plain" trains on the data term alone (lambda fixed at 0),
"svd_reg_fixed" adds the singular-value penalty at a fixed weight, and
"svd_reg_nala" adapts the weight from validation feedback. All three share
one loop, so a mode with a frozen weight is trajectory-identical to its
fixed-weight counterpart under equal seeds.

Ground-truth metric maps come from the ordinary least squares fit of the
full noiseless scheme; network inputs come from the sparse (optionally
noisy) measurements, normalized by the mean masked-in b0 signal. Targets
are normalized per metric so FA, MD, and AD are commensurate inside the
loss; predictions are scaled back at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DwiVolume, MetricMaps, _readonly, extract_patches, volume_channels
from .fit import derive_metrics, fit_tensor_ols
from .loss import LossBreakdown, batch_loss
from .nala import NalaState, alternate
from .net import MlpParams, adam_step, backward, forward, init_adam, init_params
from .phantom import TensorField, add_rician_noise, simulate_dwi
from .qspace import SubsamplingResult, apply_subsampling

MODES = ("plain", "svd_reg_fixed", "svd_reg_nala")


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-metric scale; targets are divided by it before the loss and
    predictions multiplied back at inference. MD/AD default to a typical
    maximum diffusivity so all channels are O(1)."""

    fa_scale: float = 1.0
    md_scale: float = 3.0e-3
    ad_scale: float = 3.0e-3

    def __post_init__(self):
        if min(self.fa_scale, self.md_scale, self.ad_scale) <= 0:
            raise ValueError("normalization scales must be > 0")

    @property
    def scales(self) -> np.ndarray:
        return np.array([self.fa_scale, self.md_scale, self.ad_scale])

    def to_dict(self) -> dict:
        return {"fa_scale": self.fa_scale, "md_scale": self.md_scale,
                "ad_scale": self.ad_scale}


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on."""

    mode: str = "plain"
    patch_size: int = 3
    stride: int = 1
    batch_size: int = 64
    hidden_sizes: tuple = (64, 64)
    learning_rate: float = 1e-3
    inner_epochs: int = 1
    outer_steps: int = 40
    fixed_lambda: float = 0.5
    lambda0: float = 0.1
    beta: float = 0.9
    kappa: float = 1e-3
    lambda_bounds: tuple = (0.0, 10.0)
    init_seed: int = 0
    shuffle_seed: int = 0
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.mode == "svd_reg_fixed" and not (self.fixed_lambda >= 0):
            raise ValueError(f"fixed lambda must be >= 0, got {self.fixed_lambda}")
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be >= 1")
        if self.batch_size < 1 or self.inner_epochs < 1 or self.outer_steps < 0:
            raise ValueError("batch_size and inner_epochs must be >= 1, outer_steps >= 0")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "lambda_bounds", tuple(float(b) for b in self.lambda_bounds))
        # constructing the state validates lambda0/beta/kappa/bounds
        if self.mode == "svd_reg_nala":
            self.nala_state()

    def nala_state(self) -> NalaState:
        return NalaState(lam=self.lambda0, beta=self.beta, kappa=self.kappa,
                         bounds=self.lambda_bounds)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "patch_size": self.patch_size,
            "stride": self.stride,
            "batch_size": self.batch_size,
            "hidden_sizes": list(self.hidden_sizes),
            "learning_rate": self.learning_rate,
            "inner_epochs": self.inner_epochs,
            "outer_steps": self.outer_steps,
            "fixed_lambda": self.fixed_lambda,
            "lambda0": self.lambda0,
            "beta": self.beta,
            "kappa": self.kappa,
            "lambda_bounds": list(self.lambda_bounds),
            "init_seed": self.init_seed,
            "shuffle_seed": self.shuffle_seed,
            "normalization": self.normalization.to_dict(),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        norm = d.pop("normalization", None)
        kwargs = {}
        for key in ("mode", "patch_size", "stride", "batch_size", "learning_rate",
                    "inner_epochs", "outer_steps", "fixed_lambda", "lambda0",
                    "beta", "kappa", "init_seed", "shuffle_seed"):
            if key in d:
                kwargs[key] = d.pop(key)
        if "hidden_sizes" in d:
            kwargs["hidden_sizes"] = tuple(d.pop("hidden_sizes"))
        if "lambda_bounds" in d:
            kwargs["lambda_bounds"] = tuple(d.pop("lambda_bounds"))
        if d:
            raise ValueError(f"unknown config keys: {sorted(d)}")
        if norm is not None:
            kwargs["normalization"] = NormalizationSpec(**norm)
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class PatchSet:
    """Stacked training examples from one split.

    ``inputs`` is (P, n^3 * C) flattened signal channels divided by
    ``input_scale`` (the source volume's mean masked-in b0); ``targets`` is
    (P, n^3, 3) raw metric values in FA/MD/AD column order.
    """

    inputs: np.ndarray
    targets: np.ndarray
    origins: np.ndarray
    patch_size: int
    n_channels: int
    input_scale: float

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        origins = np.asarray(self.origins, dtype=np.int64)
        n3 = self.patch_size**3
        if inputs.ndim != 2 or inputs.shape[1] != n3 * self.n_channels:
            raise ValueError(f"inputs shape {inputs.shape} does not match "
                             f"patch size {self.patch_size} x {self.n_channels} channels")
        if targets.shape != (inputs.shape[0], n3, 3):
            raise ValueError(f"targets shape {targets.shape} is not (P, {n3}, 3)")
        if origins.shape != (inputs.shape[0], 3):
            raise ValueError(f"origins shape {origins.shape} is not (P, 3)")
        object.__setattr__(self, "inputs", _readonly(inputs))
        object.__setattr__(self, "targets", _readonly(targets))
        object.__setattr__(self, "origins", _readonly(origins))

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


def _patchset(patches, n: int, channels: int, input_scale: float) -> PatchSet:
    kept = [p for p in patches if np.any(p.target != 0.0)]
    n3 = n**3
    if not kept:
        return PatchSet(
            inputs=np.zeros((0, n3 * channels)), targets=np.zeros((0, n3, 3)),
            origins=np.zeros((0, 3), dtype=np.int64), patch_size=n,
            n_channels=channels, input_scale=input_scale,
        )
    inputs = np.stack([p.signal.reshape(-1) for p in kept]) / input_scale
    targets = np.stack([p.target.reshape(n3, 3) for p in kept])
    origins = np.stack([np.asarray(p.origin) for p in kept])
    return PatchSet(inputs=inputs, targets=targets, origins=origins,
                    patch_size=n, n_channels=channels, input_scale=input_scale)


def input_scale_of(volume: DwiVolume) -> float:
    """Mean masked-in b0 signal, the input normalizer."""
    b0_channel = volume_channels(volume)[..., 0]
    scale = float(b0_channel[volume.mask].mean())
    if not np.isfinite(scale) or scale <= 0:
        raise ValueError(f"mean masked-in b0 must be positive, got {scale}")
    return scale


def split_blocks(depth: int, split=(0.6, 0.2, 0.2), split_seed: int = 0) -> dict:
    """Map role (0 train, 1 val, 2 test) to a half-open z range [z0, z1).

    The volume is cut into three contiguous z blocks sized by ``split``
    (fractions must sum to 1); a seeded permutation decides which block
    serves which role, so the assignment is deterministic per seed and
    shared by every consumer of the same split.
    """
    split = tuple(float(s) for s in split)
    if len(split) != 3 or any(s < 0 for s in split):
        raise ValueError(f"split must be three fractions >= 0, got {split}")
    if abs(sum(split) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {split} (sum {sum(split)})")
    depth = int(depth)
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    rng = np.random.Generator(np.random.PCG64(int(split_seed)))
    order = rng.permutation(3)
    sizes = [split[int(r)] for r in order]
    e1 = round(sizes[0] * depth)
    e2 = round((sizes[0] + sizes[1]) * depth)
    edges = [0, e1, e2, depth]
    return {int(order[b]): (edges[b], edges[b + 1]) for b in range(3)}


def normalize_maps(maps: MetricMaps, normalization: NormalizationSpec) -> MetricMaps:
    """Divide each metric map by its training scale (mask unchanged)."""
    return MetricMaps(
        fa=maps.fa / normalization.fa_scale,
        md=maps.md / normalization.md_scale,
        ad=maps.ad / normalization.ad_scale,
        mask=maps.mask,
    )


def prepare_dataset(field: TensorField, full_scheme, subsampling=None,
                    noise=None, *, patch_size: int = 3, stride: int = 1,
                    split=(0.6, 0.2, 0.2), split_seed: int = 0,
                    n_b0: int = 1) -> tuple:
    """Build (train, val, test) patch sets from one phantom.

    Ground truth is fitted from the full noiseless scheme; inputs come from
    the subsampled and optionally noise-corrupted measurements. Splits are
    z-axis voxel blocks sized by ``split`` (which must sum to 1); the block
    order is a seeded permutation, and any patch that does not fit entirely
    inside one block is dropped, so no patch spans two splits.
    """
    full_volume = simulate_dwi(field, full_scheme)
    gt_maps = derive_metrics(fit_tensor_ols(full_volume))

    volume = full_volume
    if subsampling is not None:
        if not isinstance(subsampling, SubsamplingResult):
            raise TypeError("subsampling must be a SubsamplingResult or None")
        volume = apply_subsampling(volume, subsampling, n_b0=n_b0)
    if noise is not None and noise.sigma > 0:
        volume = add_rician_noise(volume, noise)
    # fitting may have flagged voxels out; align the masks before extraction
    volume = DwiVolume(data=volume.data, mask=gt_maps.mask, scheme=volume.scheme)

    patches = extract_patches(volume, gt_maps, patch_size, stride)
    scale = input_scale_of(volume)
    channels = 1 + volume.scheme.dwi_indices.size

    blocks = split_blocks(volume.dims[2], split, split_seed)
    role_patches = {0: [], 1: [], 2: []}
    for p in patches:
        z = p.origin[2]
        for role, (z0, z1) in blocks.items():
            if z >= z0 and z + patch_size <= z1:
                role_patches[role].append(p)
                break
    return tuple(
        _patchset(role_patches[role], patch_size, channels, scale)
        for role in range(3)
    )


class _Divergence(Exception):
    pass


class _EpochLoop:
    """Shared inner machinery: shuffled Adam epochs plus validation, with
    history bookkeeping and best-checkpoint tracking."""

    def __init__(self, config: TrainConfig, train_set: PatchSet, val_set: PatchSet):
        self.config = config
        n3 = train_set.patch_size**3
        arch = (train_set.inputs.shape[1],) + config.hidden_sizes + (3 * n3,)
        self.params = init_params(arch, config.init_seed)
        self.adam = init_adam(self.params, config.learning_rate)
        self.shuffle_rng = np.random.Generator(np.random.PCG64(int(config.shuffle_seed)))
        scales = config.normalization.scales
        self.train_inputs = train_set.inputs
        self.train_targets = train_set.targets / scales
        self.val_inputs = val_set.inputs if len(val_set) else None
        self.val_targets = val_set.targets / scales if len(val_set) else None
        self.history = []
        self.epoch = 0
        self.best_params = None
        self.best_total = np.inf
        self.best_epoch = None

    def run_epoch(self, lam: float) -> None:
        n = self.train_inputs.shape[0]
        perm = self.shuffle_rng.permutation(n)
        bsz = self.config.batch_size
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, n, bsz):
            idx = perm[start : start + bsz]
            out, tape = forward(self.params, self.train_inputs[idx])
            breakdown, out_grad = batch_loss(out, self.train_targets[idx], lam)
            if not np.isfinite(breakdown.total):
                raise _Divergence(f"non-finite loss at epoch {self.epoch}")
            grads = backward(self.params, tape, out_grad)
            try:
                self.params, self.adam = adam_step(self.params, grads, self.adam)
            except ValueError as exc:
                raise _Divergence(str(exc)) from exc
            sums += (breakdown.data_term, breakdown.reg_term, breakdown.total)
            n_batches += 1
        self.epoch += 1
        self.history.append({
            "epoch": self.epoch,
            "lambda": lam,
            "train_data_term": sums[0] / n_batches,
            "train_reg_term": sums[1] / n_batches,
            "train_total": sums[2] / n_batches,
        })

    def run_inner(self, lam: float) -> None:
        for _ in range(self.config.inner_epochs):
            self.run_epoch(lam)

    def evaluate(self, lam: float) -> LossBreakdown:
        out, _ = forward(self.params, self.val_inputs)
        breakdown, _ = batch_loss(out, self.val_targets, lam)
        self.history[-1].update({
            "val_data_term": breakdown.data_term,
            "val_reg_term": breakdown.reg_term,
            "val_total": breakdown.total,
        })
        if breakdown.total < self.best_total:
            self.best_total = breakdown.total
            self.best_params = self.params
            self.best_epoch = self.epoch
        return breakdown

    def on_record(self, record) -> None:
        self.history[-1].update({
            "nala_t": record.t,
            "reg_value": record.reg_value,
            "momentum": record.momentum,
            "lambda_after": record.lambda_after,
            "clamped": record.clamped,
        })


@dataclass(frozen=True, eq=False)
class TrainResult:
    """Selected parameters plus the full run story."""

    params: MlpParams
    final_params: MlpParams
    history: tuple
    best_epoch: int | None
    best_val_total: float | None
    aborted: bool
    nala_final: NalaState | None


def train(config: TrainConfig, datasets) -> TrainResult:
    """Run one training; ``datasets`` is (train, val[, test]) patch sets.

    The checkpoint with minimal validation total loss is selected; when no
    validation evaluation happened (empty val set in fixed-weight modes),
    the final parameters are selected. On divergence (non-finite loss) the
    run aborts and the last finite parameters are retained.
    """
    train_set, val_set = datasets[0], datasets[1]
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if config.mode == "svd_reg_nala" and len(val_set) == 0:
        raise ValueError("the adaptive mode requires a non-empty validation set")
    loop = _EpochLoop(config, train_set, val_set)
    aborted = False
    nala_final = None
    try:
        if config.mode == "svd_reg_nala":
            _, nala_final = alternate(
                train_set, val_set, loop, config.nala_state(), config.outer_steps
            )
        else:
            lam = 0.0 if config.mode == "plain" else float(config.fixed_lambda)
            for _ in range(config.outer_steps):
                loop.run_inner(lam)
                if loop.val_inputs is not None:
                    loop.evaluate(lam)
    except _Divergence as exc:
        aborted = True
        loop.history.append({"epoch": loop.epoch + 1, "aborted": True,
                             "reason": str(exc)})
    selected = loop.best_params if loop.best_params is not None else loop.params
    return TrainResult(
        params=selected,
        final_params=loop.params,
        history=tuple(loop.history),
        best_epoch=loop.best_epoch,
        best_val_total=None if loop.best_params is None else loop.best_total,
        aborted=aborted,
        nala_final=nala_final,
    )


def infer(params: MlpParams, volume: DwiVolume, *,
          normalization: NormalizationSpec | None = None,
          stride: int | None = None) -> MetricMaps:
    """Predict metric maps by tiling the volume with patches.

    Tiles start on a stride grid (default: the patch size, so tiles abut)
    with extra tiles flushed to the far edges so every voxel is covered;
    overlapping predictions are averaged. Predictions are un-normalized,
    FA is clipped into [0, 1], and everything outside the mask is 0.
    """
    normalization = normalization or NormalizationSpec()
    channels = volume_channels(volume)
    n_channels = channels.shape[3]
    in_dim = params.weights[0].shape[0]
    out_dim = params.weights[-1].shape[1]
    n3 = out_dim // 3
    want_channels = in_dim / n3
    if in_dim != n3 * n_channels:
        raise ValueError(
            f"checkpoint expects {want_channels:g} signal channels per voxel "
            f"but the volume provides {n_channels}"
        )
    n = round(n3 ** (1.0 / 3.0))
    if n**3 != n3:
        raise ValueError(f"output width {out_dim} does not describe cubic patches")
    dims = volume.dims
    if any(d < n for d in dims):
        raise ValueError(f"volume dims {dims} are smaller than the patch size {n}")
    stride = n if stride is None else int(stride)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    def _starts(dim: int) -> list:
        s = list(range(0, dim - n + 1, stride))
        if s[-1] != dim - n:
            s.append(dim - n)
        return s

    scale = input_scale_of(volume)
    origins = [(x, y, z) for x in _starts(dims[0])
               for y in _starts(dims[1]) for z in _starts(dims[2])]
    batch = np.stack([
        channels[x : x + n, y : y + n, z : z + n, :].reshape(-1) for x, y, z in origins
    ]) / scale
    out, _ = forward(params, batch)
    out = out * normalization.scales

    sums = np.zeros(dims + (3,))
    counts = np.zeros(dims)
    for tile, (x, y, z) in enumerate(origins):
        sums[x : x + n, y : y + n, z : z + n, :] += out[tile].reshape(n, n, n, 3)
        counts[x : x + n, y : y + n, z : z + n] += 1.0
    stacked = sums / counts[..., None]
    fa = np.where(volume.mask, np.clip(stacked[..., 0], 0.0, 1.0), 0.0)
    md = np.where(volume.mask, stacked[..., 1], 0.0)
    ad = np.where(volume.mask, stacked[..., 2], 0.0)
    return MetricMaps(fa=fa, md=md, ad=ad, mask=volume.mask)
