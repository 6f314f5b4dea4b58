"""Small fully connected ReLU network representing the learned flow-area
function of the hybrid model: scalar opening in, non-negative area [m2] out.

The output head is linear followed by softplus, scaled by a constant so the
network itself works with O(1) numbers. Gradients are reverse-mode,
hand-written for this fixed feed-forward structure; no autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ModelEvaluationError

#: Hidden architecture of the hybrid model: 3 layers of 100 units.
DEFAULT_SIZES = (1, 100, 100, 100, 1)

#: Output scale [m2] applied after softplus so network outputs are O(1).
DEFAULT_AREA_SCALE = 1.0e-2

#: Serialization format version for saved parameter files.
PARAMS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of the area network.

    ``weights[i]`` has shape (out, in); ``biases[i]`` has shape (out,).
    ``area_scale`` is the fixed output scale in m2, not a learned parameter.
    """

    weights: tuple
    biases: tuple
    area_scale: float = DEFAULT_AREA_SCALE

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up layer by layer")
        if not self.weights:
            raise ValueError("network needs at least one layer")
        prev_out = None
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} != previous out {prev_out}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameter entries")
            prev_out = w.shape[0]
        if self.weights[0].shape[1] != 1 or self.weights[-1].shape[0] != 1:
            raise ValueError("network must map a scalar input to a scalar output")
        if self.area_scale <= 0.0:
            raise ValueError(f"area_scale must be positive, got {self.area_scale}")

    @property
    def sizes(self) -> tuple:
        return (1,) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class MlpGradients:
    """Gradient of the scalar output, shape-congruent with the parameters it
    was computed from, plus the derivative with respect to the input."""

    weights: tuple
    biases: tuple
    d_input: float


def he_init(seed, sizes=DEFAULT_SIZES, area_scale: float = DEFAULT_AREA_SCALE) -> MlpParams:
    """Draw weights i.i.d. Normal(0, 2/fan_in) and zero biases, deterministically.

    ``seed`` may be an int or any numpy SeedSequence-compatible entropy.
    """
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases), area_scale)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    # Stable logistic; equals softplus'(x).
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def batch_forward(u, params: MlpParams, keep_cache: bool = False):
    """Areas [m2] for a vector of openings. With ``keep_cache`` the returned
    cache holds every pre-activation for a later backward pass."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    z = u[:, None]
    pre_acts = []
    activations = [z]
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = z @ w.T + b
        z = np.maximum(a, 0.0)
        if keep_cache:
            pre_acts.append(a)
            activations.append(z)
    head = z @ params.weights[-1].T + params.biases[-1]
    areas = params.area_scale * _softplus(head[:, 0])
    if not np.all(np.isfinite(areas)):
        raise ModelEvaluationError("non-finite network output", inputs={"u": u})
    if not keep_cache:
        return areas
    return areas, (pre_acts, activations, head)


def batch_backward(params: MlpParams, cache, seed):
    """Backward pass for a weighted sum of outputs.

    ``seed[i]`` is dLoss/dArea_i; returns the flat parameter gradient (layout
    of :func:`flatten`) of sum_i seed_i * Area_i plus dLoss/du per row.
    """
    pre_acts, activations, head = cache
    seed = np.asarray(seed, dtype=float)
    d_head = (seed * params.area_scale * _sigmoid(head[:, 0]))[:, None]

    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    grads_w[-1] = d_head.T @ activations[-1]
    grads_b[-1] = d_head.sum(axis=0)
    d_z = d_head @ params.weights[-1]
    for i in range(len(params.weights) - 2, -1, -1):
        d_a = d_z * (pre_acts[i] > 0.0)  # subgradient 0 at exactly 0
        grads_w[i] = d_a.T @ activations[i]
        grads_b[i] = d_a.sum(axis=0)
        d_z = d_a @ params.weights[i]
    d_input = d_z[:, 0]
    return flatten_arrays(grads_w, grads_b), d_input


def forward(u: float, params: MlpParams) -> float:
    """Area [m2] at a single opening."""
    return float(batch_forward(np.asarray([u]), params)[0])


def forward_with_gradients(u: float, params: MlpParams):
    """Scalar forward pass plus exact gradients of the output with respect to
    every weight, bias, and the input."""
    areas, cache = batch_forward(np.asarray([u]), params, keep_cache=True)
    flat, d_input = batch_backward(params, cache, np.ones(1))
    grads_w, grads_b = unflatten_arrays(flat, params.sizes)
    return float(areas[0]), MlpGradients(tuple(grads_w), tuple(grads_b),
                                         float(d_input[0]))


def batch_param_jacobian(u, params: MlpParams) -> np.ndarray:
    """Per-row parameter gradients: (n, n_params) matrix with rows
    dArea_i/dparams in the flat layout. Used by the sensitivity diagnostic;
    memory scales as n * n_params."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    _, cache = batch_forward(u, params, keep_cache=True)
    pre_acts, activations, head = cache
    n = u.shape[0]

    d_head = (params.area_scale * _sigmoid(head[:, 0]))[:, None]
    per_w = [None] * len(params.weights)
    per_b = [None] * len(params.biases)
    per_w[-1] = np.einsum("ni,nj->nij", d_head, activations[-1])
    per_b[-1] = d_head
    d_z = d_head @ params.weights[-1]
    for i in range(len(params.weights) - 2, -1, -1):
        d_a = d_z * (pre_acts[i] > 0.0)
        per_w[i] = np.einsum("ni,nj->nij", d_a, activations[i])
        per_b[i] = d_a
        d_z = d_a @ params.weights[i]

    blocks = []
    for w_block, b_block in zip(per_w, per_b):
        blocks.append(w_block.reshape(n, -1))
        blocks.append(b_block.reshape(n, -1))
    return np.concatenate(blocks, axis=1)


def l2_norm_sq(params: MlpParams) -> float:
    """Sum of squares of all weights and biases."""
    return float(sum(np.sum(w * w) + np.sum(b * b)
                     for w, b in zip(params.weights, params.biases)))


# ---------------------------------------------------------------------------
# Flat-vector view (used by the optimizer) and serialization
# ---------------------------------------------------------------------------

def flatten_arrays(weights, biases) -> np.ndarray:
    """Concatenate per-layer (weight, bias) arrays into one flat vector."""
    parts = []
    for w, b in zip(weights, biases):
        parts.append(np.asarray(w, dtype=float).ravel())
        parts.append(np.asarray(b, dtype=float).ravel())
    return np.concatenate(parts)


def unflatten_arrays(flat, sizes):
    """Invert :func:`flatten_arrays` for the given layer sizes."""
    flat = np.asarray(flat, dtype=float)
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in))
        pos += fan_out * fan_in
        biases.append(flat[pos:pos + fan_out])
        pos += fan_out
    if pos != flat.size:
        raise ValueError(f"flat vector length {flat.size} does not match sizes {sizes}")
    return weights, biases


def flatten(params: MlpParams) -> np.ndarray:
    return flatten_arrays(params.weights, params.biases)


def unflatten(flat, sizes, area_scale: float = DEFAULT_AREA_SCALE) -> MlpParams:
    weights, biases = unflatten_arrays(flat, sizes)
    return MlpParams(tuple(weights), tuple(biases), area_scale)


def save_params(path, params: MlpParams) -> None:
    """Write parameters to an .npz container; float64 round-trips bit-exactly."""
    payload = {
        "format_version": np.array([PARAMS_FORMAT_VERSION]),
        "sizes": np.asarray(params.sizes, dtype=np.int64),
        "area_scale": np.array([params.area_scale]),
    }
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        payload[f"w{i}"] = w
        payload[f"b{i}"] = b
    np.savez(path, **payload)


def load_params(path) -> MlpParams:
    """Read parameters written by :func:`save_params`."""
    with np.load(Path(path)) as data:
        version = int(data["format_version"][0])
        if version != PARAMS_FORMAT_VERSION:
            raise ValueError(
                f"unsupported parameter file version {version}, "
                f"expected {PARAMS_FORMAT_VERSION}"
            )
        sizes = tuple(int(s) for s in data["sizes"])
        area_scale = float(data["area_scale"][0])
        weights = tuple(data[f"w{i}"] for i in range(len(sizes) - 1))
        biases = tuple(data[f"b{i}"] for i in range(len(sizes) - 1))
    return MlpParams(weights, biases, area_scale)
