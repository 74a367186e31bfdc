"""Uniform selection of sparse gradient subsets from a dense scheme.

Uniformity is scored by antipodally symmetric electrostatic energy,

    E = sum_{i<j} 1 / |g_i - g_j| + 1 / |g_i + g_j|,

so a direction and its negation are interchangeable. Selection runs greedy
farthest-point seeding followed by steepest-improvement pairwise exchange,
best over independent restarts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DwiVolume, GradientScheme


@dataclass(frozen=True)
class SubsamplingResult:
    """Selected parent-scheme indices and their electrostatic energy."""

    selected_indices: tuple
    energy: float

    def __post_init__(self):
        idx = tuple(int(i) for i in self.selected_indices)
        if len(set(idx)) != len(idx):
            raise ValueError(f"selected indices must be unique, got {idx}")
        if any(a >= b for a, b in zip(idx, idx[1:])):
            raise ValueError(f"selected indices must be sorted, got {idx}")
        object.__setattr__(self, "selected_indices", idx)
        object.__setattr__(self, "energy", float(self.energy))


def pair_energy(dirs: np.ndarray) -> float:
    """Antipodal Coulomb energy of a set of unit directions."""
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.shape[0] < 2:
        return 0.0
    i, j = np.triu_indices(dirs.shape[0], k=1)
    diff = np.linalg.norm(dirs[i] - dirs[j], axis=1)
    summ = np.linalg.norm(dirs[i] + dirs[j], axis=1)
    with np.errstate(divide="ignore"):
        return float(np.sum(1.0 / diff) + np.sum(1.0 / summ))


def _antipodal_dist2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance min(|a-b|, |a+b|)^2 for rows a against rows b."""
    d_minus = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    d_plus = ((a[:, None, :] + b[None, :, :]) ** 2).sum(axis=2)
    return np.minimum(d_minus, d_plus)


def _pair_energy_matrix(dirs: np.ndarray) -> np.ndarray:
    """Per-pair energy terms 1/|di-dj| + 1/|di+dj| with a zero diagonal."""
    diff = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=2)
    summ = np.linalg.norm(dirs[:, None, :] + dirs[None, :, :], axis=2)
    with np.errstate(divide="ignore"):
        e = 1.0 / diff + 1.0 / summ
    np.fill_diagonal(e, 0.0)
    return e


def _greedy_seed(dirs: np.ndarray, k: int, first: int) -> list:
    """Farthest-point seeding under the antipodal metric."""
    chosen = [first]
    if k == 1:
        return chosen
    min_d2 = _antipodal_dist2(dirs, dirs[[first]])[:, 0]
    min_d2[first] = -np.inf
    while len(chosen) < k:
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        d2 = _antipodal_dist2(dirs, dirs[[nxt]])[:, 0]
        min_d2 = np.minimum(min_d2, d2)
        min_d2[nxt] = -np.inf
    return chosen


def _exchange_descent(dirs: np.ndarray, initial: list, pair=None) -> tuple:
    """Steepest-improvement pairwise exchange from an initial selection.

    Returns (selection, energy, history). Each accepted swap strictly
    lowers the energy, so the history is monotone non-increasing. Swap
    candidates are scored by delta against a precomputed per-pair energy
    matrix; the returned energy is recomputed from scratch at the end so
    accumulated roundoff cannot leak out.
    """
    n = dirs.shape[0]
    if pair is None:
        pair = _pair_energy_matrix(dirs)
    selection = list(initial)
    in_set = np.zeros(n, dtype=bool)
    in_set[selection] = True
    energy = pair_energy(dirs[selection])
    history = [energy]
    while True:
        best = None
        outside = np.flatnonzero(~in_set)
        if outside.size == 0:
            break
        sel = np.asarray(selection)
        cross = pair[np.ix_(outside, sel)]
        add_full = cross.sum(axis=1)
        for pos, s in enumerate(selection):
            removed = float(pair[s, sel].sum())
            trial = energy - removed + (add_full - cross[:, pos])
            at = int(np.argmin(trial))
            e = float(trial[at])
            if e < energy and (best is None or e < best[0]):
                best = (e, pos, int(outside[at]))
        if best is None:
            break
        energy, pos, u = best
        in_set[selection[pos]] = False
        in_set[u] = True
        selection[pos] = u
        history.append(energy)
    return selection, pair_energy(dirs[selection]), history


def select_uniform(scheme: GradientScheme, k: int, restarts: int = 20,
                   seed: int = 0) -> SubsamplingResult:
    """Pick k diffusion-weighted directions as uniformly as possible.

    Runs ``restarts`` independent searches (greedy seeding from a random
    start, then exchange descent) and keeps the lowest-energy selection;
    ties go to the earliest restart.

    Raises
    ------
    ValueError
        If k exceeds the number of b > 0 entries, or k < 1, or restarts < 1.
    """
    candidates = scheme.dwi_indices
    n = candidates.size
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(
            f"requested {k} directions but the scheme has only {n} "
            f"diffusion-weighted entries"
        )
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    dirs = scheme.bvecs[candidates]
    pair = _pair_energy_matrix(dirs)
    children = np.random.SeedSequence(int(seed)).spawn(restarts)
    best_sel, best_energy = None, np.inf
    for child in children:
        rng = np.random.Generator(np.random.PCG64(child))
        first = int(rng.integers(n))
        seeded = _greedy_seed(dirs, k, first)
        selection, energy, _ = _exchange_descent(dirs, seeded, pair)
        if energy < best_energy:
            best_sel, best_energy = selection, energy
    parent_idx = sorted(int(candidates[i]) for i in best_sel)
    return SubsamplingResult(selected_indices=tuple(parent_idx), energy=best_energy)


def apply_subsampling(volume: DwiVolume, result: SubsamplingResult,
                      n_b0: int = 1) -> DwiVolume:
    """Restrict a volume to the selected directions plus kept b0 entries.

    Keeps the first ``n_b0`` b0 measurements (default one). Signal values
    are copied bit-exactly; the scheme is restricted to the kept entries in
    parent order.
    """
    scheme = volume.scheme
    d = scheme.n_measurements
    for i in result.selected_indices:
        if i < 0 or i >= d:
            raise IndexError(
                f"selected index {i} is out of range for a scheme with {d} measurements"
            )
        if scheme.bvals[i] == 0:
            raise ValueError(f"selected index {i} is a b0 entry, not a direction")
    b0 = scheme.b0_indices
    if n_b0 < 0 or n_b0 > b0.size:
        raise ValueError(f"cannot keep {n_b0} b0 entries, scheme has {b0.size}")
    kept = sorted(list(b0[:n_b0]) + list(result.selected_indices))
    sub_scheme = GradientScheme(bvals=scheme.bvals[kept], bvecs=scheme.bvecs[kept])
    return DwiVolume(data=volume.data[..., kept], mask=volume.mask, scheme=sub_scheme)


def fibonacci_scheme(n_dirs: int, bval: float = 1000.0, n_b0: int = 1) -> GradientScheme:
    """Dense scheme: n_b0 b0 entries then a spherical Fibonacci spiral.

    A standard stand-in for a uniformly acquired dense protocol.
    """
    if n_dirs < 1:
        raise ValueError(f"n_dirs must be >= 1, got {n_dirs}")
    if n_b0 < 0:
        raise ValueError(f"n_b0 must be >= 0, got {n_b0}")
    i = np.arange(n_dirs, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n_dirs
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    theta = golden * i
    dirs = np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_dirs, float(bval))])
    bvecs = np.vstack([np.zeros((n_b0, 3)), dirs])
    return GradientScheme(bvals=bvals, bvecs=bvecs)
