"""Feed-forward hashing encoder with a sigmoid head and hand-written backprop.

The network maps a feature vector to a relaxed code ``s`` in ``(0, 1)^K``:
rectified hidden layers followed by a ``K``-wide affine layer and a sigmoid.
Weights are stored as ``(fan_in, fan_out)`` matrices so that a batch of
row vectors ``A`` propagates as ``A @ W + b``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

#: Floor applied to relaxed codes before any logarithm is taken downstream.
EPS = 1e-7

CHECKPOINT_MAGIC = b"PHCKPT01"


class DimensionError(ValueError):
    """Input or parameter shapes do not agree with the layer spec."""


class StructureError(ValueError):
    """A forward trace does not belong to the parameters it is used with."""


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    code_bits: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.code_bits)
        if any(int(d) < 1 for d in dims):
            raise DimensionError(f"all layer widths must be >= 1, got {dims}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.code_bits)

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "code_bits": self.code_bits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["code_bits"]))


@dataclass
class EncoderParams:
    """Weights and biases of one network plus a momentum buffer per tensor."""

    spec: LayerSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    weight_velocity: list[np.ndarray] = field(default_factory=list)
    bias_velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        widths = self.spec.widths
        if len(self.weights) != self.spec.num_layers or len(self.biases) != self.spec.num_layers:
            raise DimensionError("number of weight/bias tensors does not match the layer spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise DimensionError(
                    f"layer {i}: expected W{(widths[i], widths[i + 1])} b{(widths[i + 1],)}, "
                    f"got W{w.shape} b{b.shape}"
                )
        if not self.weight_velocity:
            self.weight_velocity = [np.zeros_like(w) for w in self.weights]
        if not self.bias_velocity:
            self.bias_velocity = [np.zeros_like(b) for b in self.biases]

    @classmethod
    def init(cls, spec: LayerSpec, rng: np.random.Generator) -> "EncoderParams":
        """Uniform(-1, 1) / sqrt(fan_in) weights, zero biases."""
        widths = spec.widths
        weights = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(rng.uniform(-1.0, 1.0, size=(fan_in, fan_out)) / np.sqrt(fan_in))
        biases = [np.zeros(w) for w in widths[1:]]
        return cls(spec, weights, biases)

    @classmethod
    def zeros(cls, spec: LayerSpec) -> "EncoderParams":
        widths = spec.widths
        return cls(
            spec,
            [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
            [np.zeros(b) for b in widths[1:]],
        )

    def tensors(self) -> list[np.ndarray]:
        """Parameters in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def velocities(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weight_velocity, self.bias_velocity):
            out.extend((w, b))
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [v.copy() for v in self.weight_velocity],
            [v.copy() for v in self.bias_velocity],
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors() + self.velocities())

    def max_abs_diff(self, other: "EncoderParams") -> float:
        if self.spec != other.spec:
            raise StructureError("parameter sets have different layer specs")
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.tensors(), other.tensors()))


@dataclass
class ForwardTrace:
    """Per-layer inputs and pre-activations kept for backprop."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    output: np.ndarray
    spec: LayerSpec


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Encode one feature vector or a batch of row vectors.

    Args:
        params: Network weights.
        x: Array of shape ``(d,)`` or ``(n, d)``.

    Returns:
        The relaxed code(s) ``s`` with the same leading shape as ``x`` and a
        trace for :func:`backward`.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim not in (1, 2) or a.shape[-1] != params.spec.input_dim:
        raise DimensionError(
            f"expected input with trailing dimension {params.spec.input_dim}, got shape {a.shape}"
        )
    inputs, preacts = [], []
    last = params.spec.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w + b
        preacts.append(z)
        a = sigmoid(z) if i == last else np.maximum(z, 0.0)
    return a, ForwardTrace(inputs, preacts, a, params.spec)


def backward(
    params: EncoderParams, trace: ForwardTrace, grad_wrt_s: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of ``sum(grad_wrt_s * s)`` with respect to every parameter.

    For a batched trace the contributions of all rows are summed.

    Returns:
        ``(weight_grads, bias_grads)`` shaped like ``params.weights`` and
        ``params.biases``.
    """
    if trace.spec != params.spec or len(trace.preacts) != params.spec.num_layers:
        raise StructureError("trace was not produced by a network with this layer spec")
    g = np.asarray(grad_wrt_s, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise DimensionError(f"upstream gradient shape {g.shape} != code shape {trace.output.shape}")
    s = trace.output
    delta = g * s * (1.0 - s)
    wgrads: list[np.ndarray] = [None] * params.spec.num_layers  # type: ignore[list-item]
    bgrads: list[np.ndarray] = [None] * params.spec.num_layers  # type: ignore[list-item]
    for i in range(params.spec.num_layers - 1, -1, -1):
        a_in = trace.inputs[i]
        if a_in.ndim == 1:
            wgrads[i] = np.outer(a_in, delta)
            bgrads[i] = delta.copy()
        else:
            wgrads[i] = a_in.T @ delta
            bgrads[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (trace.preacts[i - 1] > 0)
    return wgrads, bgrads


BackwardFn = Callable[[EncoderParams, ForwardTrace, np.ndarray], tuple[list, list]]


def check_gradients(
    params: EncoderParams,
    x: np.ndarray,
    grad_wrt_s: np.ndarray,
    step: float = 1e-5,
    backward_fn: BackwardFn = backward,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for one scalar parameter is ``|analytic - numeric| / max(1, |numeric|)``.
    ``backward_fn`` can be swapped to test a deliberately broken backward pass.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    g = np.asarray(grad_wrt_s, dtype=np.float64)
    _, trace = forward(params, x)
    wgrads, bgrads = backward_fn(params, trace, g)
    analytic = []
    for wg, bg in zip(wgrads, bgrads):
        analytic.extend((wg, bg))

    def objective() -> float:
        s, _ = forward(params, x)
        return float(np.sum(g * s))

    worst = 0.0
    for tensor, grad in zip(params.tensors(), analytic):
        flat = tensor.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = objective()
            flat[j] = orig - step
            fm = objective()
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * step)
            err = abs(gflat[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def save_checkpoint(path: str | Path, params: EncoderParams, epoch: int = 0) -> None:
    """Write a checkpoint; see ``docs/formats.md`` for the byte layout."""
    header = {
        "layer_spec": params.spec.to_dict(),
        "epoch": int(epoch),
        "tensors": [list(t.shape) for t in params.tensors()],
        "dtype": "<f8",
        "order": "W0,b0,W1,b1,...; then velocities in the same order",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in params.tensors() + params.velocities():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, int]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns:
        The parameters (with momentum buffers) and the stored epoch.
    """
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    spec = LayerSpec.from_dict(header["layer_spec"])
    shapes = [tuple(s) for s in header["tensors"]]
    offset = 12 + hlen
    arrays = []
    for shape in shapes + shapes:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated at byte offset {offset}")
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy())
        offset = end
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    n = len(shapes)
    params_t, vel_t = arrays[:n], arrays[n:]
    params = EncoderParams(
        spec,
        list(params_t[0::2]),
        list(params_t[1::2]),
        list(vel_t[0::2]),
        list(vel_t[1::2]),
    )
    return params, int(header["epoch"])
