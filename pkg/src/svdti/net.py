"""A small fully connected network with hand-rolled forward/backward/Adam.

Maps flattened sparse patch signals to patch metric triples. Hidden layers
use ReLU (derivative at exactly 0 is 0), the output layer is linear, and
the output is reshaped to (batch, voxels, 3) in the canonical FA/MD/AD
channel order, voxel-major. Checkpoints are a JSON header plus a raw
little-endian float32 payload.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core import atomic_write_bytes, atomic_write_text

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Layer weights (fan_in, fan_out) and biases (fan_out,)."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        weights = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        biases = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        if not weights or len(weights) != len(biases):
            raise ValueError("weights and biases must be equal-length, non-empty lists")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(
                    f"layer {i}: weight shape {w.shape} and bias shape {b.shape} disagree"
                )
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(
                    f"layer {i}: input size {w.shape[0]} does not chain from "
                    f"previous output size {weights[i - 1].shape[1]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: parameters must be finite")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def sizes(self) -> tuple:
        """Layer sizes (input, hidden..., output)."""
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class MlpGrads:
    """Gradients shaped like MlpParams."""

    weights: tuple
    biases: tuple


@dataclass(frozen=True, eq=False)
class ForwardTape:
    """Per-layer inputs and pre-activations retained for backward.

    ``inputs[l]`` is the input to layer l (so ``inputs[0]`` is the batch),
    ``preacts[l]`` its pre-activation output; both have length n_layers.
    """

    inputs: tuple
    preacts: tuple

    def __post_init__(self):
        if len(self.inputs) != len(self.preacts) or not self.inputs:
            raise ValueError("tape inputs and preacts must be equal-length, non-empty")


@dataclass(frozen=True, eq=False)
class AdamState:
    """Adam moments plus hyperparameters; shapes mirror the params."""

    m_weights: tuple
    m_biases: tuple
    v_weights: tuple
    v_biases: tuple
    t: int
    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"step counter must be >= 0, got {self.t}")


def init_adam(params: MlpParams, lr: float, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> AdamState:
    return AdamState(
        m_weights=tuple(np.zeros_like(w) for w in params.weights),
        m_biases=tuple(np.zeros_like(b) for b in params.biases),
        v_weights=tuple(np.zeros_like(w) for w in params.weights),
        v_biases=tuple(np.zeros_like(b) for b in params.biases),
        t=0, lr=float(lr), beta1=float(beta1), beta2=float(beta2), eps=float(eps),
    )


def init_params(arch, seed: int) -> MlpParams:
    """Scaled-uniform weights, zero biases.

    ``arch`` lists layer sizes (input, hidden..., output). Weights are drawn
    from uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    """
    sizes = tuple(int(s) for s in arch)
    if len(sizes) < 2:
        raise ValueError(f"architecture needs at least input and output sizes, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be >= 1, got {sizes}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=tuple(weights), biases=tuple(biases))


def forward(params: MlpParams, batch: np.ndarray) -> tuple:
    """Run the network; returns (output, tape).

    ``batch`` is (B, input_dim); the output is (B, n_vox, 3) where the
    final layer width is 3 * n_vox, reshaped voxel-major.
    """
    batch = np.asarray(batch, dtype=np.float64)
    in_dim = params.weights[0].shape[0]
    if batch.ndim != 2 or batch.shape[1] != in_dim:
        raise ValueError(
            f"batch shape {batch.shape} does not match expected input dim {in_dim}"
        )
    out_dim = params.weights[-1].shape[1]
    if out_dim % 3:
        raise ValueError(f"output layer width {out_dim} is not a multiple of 3")
    inputs, preacts = [], []
    x = batch
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(x)
        z = x @ w + b
        preacts.append(z)
        x = z if l == last else np.maximum(z, 0.0)
    tape = ForwardTape(inputs=tuple(inputs), preacts=tuple(preacts))
    return x.reshape(batch.shape[0], out_dim // 3, 3), tape


def backward(params: MlpParams, tape: ForwardTape, output_grad: np.ndarray) -> MlpGrads:
    """Reverse-mode gradients of a scalar loss wrt every weight and bias.

    ``output_grad`` is the loss gradient at the network output, shaped
    (B, n_vox, 3) like the forward output. The ReLU subgradient at 0 is 0.
    """
    if len(tape.inputs) != params.n_layers:
        raise ValueError(
            f"tape depth {len(tape.inputs)} does not match layer count {params.n_layers}"
        )
    out_dim = params.weights[-1].shape[1]
    batch_size = tape.inputs[0].shape[0]
    delta = np.asarray(output_grad, dtype=np.float64).reshape(batch_size, out_dim)
    grad_w = [None] * params.n_layers
    grad_b = [None] * params.n_layers
    for l in range(params.n_layers - 1, -1, -1):
        x = tape.inputs[l]
        if x.shape[1] != params.weights[l].shape[0]:
            raise ValueError(f"tape does not match params at layer {l}")
        grad_w[l] = x.T @ delta
        grad_b[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ params.weights[l].T) * (tape.preacts[l - 1] > 0)
    return MlpGrads(weights=tuple(grad_w), biases=tuple(grad_b))


def _adam_update(p, g, m, v, state, t):
    m_new = state.beta1 * m + (1.0 - state.beta1) * g
    v_new = state.beta2 * v + (1.0 - state.beta2) * g * g
    m_hat = m_new / (1.0 - state.beta1**t)
    v_hat = v_new / (1.0 - state.beta2**t)
    return p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), m_new, v_new


def adam_step(params: MlpParams, grads: MlpGrads, state: AdamState) -> tuple:
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise ValueError(f"non-finite gradient for layer {i}")
    t = state.t + 1
    new_w, new_b = [], []
    new_mw, new_mb, new_vw, new_vb = [], [], [], []
    for w, gw, m, v in zip(params.weights, grads.weights, state.m_weights, state.v_weights):
        wn, mn, vn = _adam_update(w, gw, m, v, state, t)
        new_w.append(wn)
        new_mw.append(mn)
        new_vw.append(vn)
    for b, gb, m, v in zip(params.biases, grads.biases, state.m_biases, state.v_biases):
        bn, mn, vn = _adam_update(b, gb, m, v, state, t)
        new_b.append(bn)
        new_mb.append(mn)
        new_vb.append(vn)
    new_params = MlpParams(weights=tuple(new_w), biases=tuple(new_b))
    new_state = AdamState(
        m_weights=tuple(new_mw), m_biases=tuple(new_mb),
        v_weights=tuple(new_vw), v_biases=tuple(new_vb),
        t=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return new_params, new_state


# ---------------------------------------------------------------------------
# Checkpoints: <base>.net.json + <base>.net.raw (little-endian float32,
# weights then bias per layer, C order).

_NET_SUFFIXES = (".net.json", ".net.raw", ".net")


def _net_paths(path) -> tuple:
    base = os.fspath(path)
    for suffix in _NET_SUFFIXES:
        if base.endswith(suffix):
            base = base[: -len(suffix)]
            break
    return base + ".net.json", base + ".net.raw"


def save_checkpoint(params: MlpParams, path, *, step: int = 0, seed=None,
                    extra: dict | None = None) -> None:
    header = {
        "kind": "mlp-checkpoint",
        "arch": list(params.sizes),
        "step": int(step),
        "seed": seed,
        "dtype": "float32",
        "layout": "per layer: weights (fan_in, fan_out) C order, then bias",
    }
    if extra:
        header.update(extra)
    header_path, raw_path = _net_paths(path)
    blob = b""
    for w, b in zip(params.weights, params.biases):
        blob += w.astype("<f4").tobytes()
        blob += b.astype("<f4").tobytes()
    atomic_write_bytes(raw_path, blob)
    atomic_write_text(header_path, json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns (MlpParams, header dict)."""
    header_path, raw_path = _net_paths(path)
    with open(header_path, encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("kind") != "mlp-checkpoint":
        raise ValueError(f"{header_path}: not a checkpoint header")
    sizes = [int(s) for s in header["arch"]]
    with open(raw_path, "rb") as fh:
        blob = fh.read()
    expected = sum(
        (fi * fo + fo) * 4 for fi, fo in zip(sizes[:-1], sizes[1:])
    )
    if len(blob) != expected:
        raise ValueError(f"{raw_path}: expected {expected} bytes, found {len(blob)}")
    weights, biases, off = [], [], 0
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        n = fi * fo * 4
        weights.append(
            np.frombuffer(blob[off : off + n], dtype="<f4").reshape(fi, fo).astype(np.float64)
        )
        off += n
        biases.append(np.frombuffer(blob[off : off + fo * 4], dtype="<f4").astype(np.float64))
        off += fo * 4
    return MlpParams(weights=tuple(weights), biases=tuple(biases)), header
