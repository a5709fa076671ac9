"""Dense MLP kernel: forward pass, reverse-mode VJP and forward-mode JVP.

Parameters live in one flat float64 vector so trust-region algebra is plain
vector arithmetic. Per layer the layout is ``W`` (fan_in x fan_out, row-major)
followed by ``b`` (fan_out). Hidden layers use SeLU, the output is linear.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Klambauer et al. self-normalizing constants.
SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946


class ShapeError(ValueError):
    """Raised when an array does not match the network's declared sizes."""


def n_params(layer_sizes: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def selu(z: np.ndarray) -> np.ndarray:
    return SELU_SCALE * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def selu_grad(z: np.ndarray) -> np.ndarray:
    return SELU_SCALE * np.where(z > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


@dataclass(frozen=True)
class MlpParams:
    layer_sizes: tuple[int, ...]
    theta: np.ndarray

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ShapeError(f"layer_sizes must be >= 2 positive ints, got {sizes}")
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != n_params(sizes):
            raise ShapeError(
                f"parameter vector has {theta.size} entries, layer_sizes {sizes} need {n_params(sizes)}"
            )
        theta.flags.writeable = False
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "theta", theta)

    @property
    def size(self) -> int:
        return self.theta.size

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.layer_sizes, self.theta)

    def with_theta(self, theta: np.ndarray) -> "MlpParams":
        return MlpParams(self.layer_sizes, theta)


def unflatten(layer_sizes: Sequence[int], vec: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into (W, b) views, one pair per layer."""
    out = []
    k = 0
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        W = vec[k:k + a * b].reshape(a, b)
        k += a * b
        out.append((W, vec[k:k + b]))
        k += b
    return out


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([W.reshape(-1), b.reshape(-1)]) for W, b in layers])


def init_params(layer_sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """Glorot-uniform weights, zero biases; the last layer is scaled by ``out_scale``."""
    layers = []
    pairs = list(zip(layer_sizes[:-1], layer_sizes[1:]))
    for idx, (a, b) in enumerate(pairs):
        s = np.sqrt(6.0 / (a + b))
        W = rng.uniform(-s, s, size=(a, b))
        if idx == len(pairs) - 1:
            W = W * out_scale
        layers.append((W, np.zeros(b)))
    return MlpParams(tuple(layer_sizes), flatten(layers))


class MlpTape:
    """Activations of one batched forward pass, reused by ``vjp`` and ``jvp``.

    Holding the tape fixed is what makes repeated Jacobian products at a frozen
    parameter point cheap: only matrix products remain.
    """

    def __init__(self, params: MlpParams, x: np.ndarray):
        x = _as_batch(params, x)
        self.params = params
        self._layers = params.layers()
        self.inputs: list[np.ndarray] = []  # input to each layer
        self.slopes: list[np.ndarray] = []  # selu'(z) for hidden layers
        a = x
        last = len(self._layers) - 1
        for idx, (W, b) in enumerate(self._layers):
            self.inputs.append(a)
            z = a @ W + b
            if idx < last:
                self.slopes.append(selu_grad(z))
                a = selu(z)
            else:
                a = z
        self.output = a

    def vjp(self, adjoint: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(adjoint * output)`` with respect to the flat parameters."""
        g = np.asarray(adjoint, dtype=np.float64)
        if g.shape != self.output.shape:
            raise ShapeError(f"adjoint shape {g.shape} != output shape {self.output.shape}")
        parts = [None] * len(self._layers)
        for idx in range(len(self._layers) - 1, -1, -1):
            W, _ = self._layers[idx]
            parts[idx] = (self.inputs[idx].T @ g, g.sum(axis=0))
            if idx > 0:
                g = (g @ W.T) * self.slopes[idx - 1]
        return flatten(parts)

    def jvp(self, direction: np.ndarray) -> np.ndarray:
        """Directional derivative of the output along a parameter-space direction."""
        direction = np.asarray(direction, dtype=np.float64)
        if direction.shape != (self.params.size,):
            raise ShapeError(f"direction has shape {direction.shape}, expected ({self.params.size},)")
        dlayers = unflatten(self.params.layer_sizes, direction)
        da = None
        last = len(self._layers) - 1
        for idx, ((W, _), (dW, db)) in enumerate(zip(self._layers, dlayers)):
            dz = self.inputs[idx] @ dW + db
            if da is not None:
                dz += da @ W
            if idx < last:
                da = self.slopes[idx] * dz
        return dz


def _as_batch(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input size {params.in_dim}")
    return x


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Logits for one input vector (returns a vector) or a batch (returns a matrix)."""
    single = np.ndim(x) == 1
    out = MlpTape(params, x).output
    return out[0] if single else out


def grad_scalar(params: MlpParams, x: np.ndarray, output_adjoint: np.ndarray) -> np.ndarray:
    """Gradient of ``output_adjoint . logits`` w.r.t. the parameters.

    With a batch of inputs the adjoint has one row per input and the result is
    summed over the batch.
    """
    tape = MlpTape(params, x)
    adj = np.asarray(output_adjoint, dtype=np.float64)
    if adj.ndim == 1:
        adj = adj[None, :]
    return tape.vjp(adj)


def params_to_bytes(params: MlpParams) -> bytes:
    sizes = params.layer_sizes
    header = struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
    return header + params.theta.astype("<f8").tobytes()


def params_from_bytes(buf: bytes) -> tuple[MlpParams, int]:
    """Decode one parameter record; returns the params and the bytes consumed."""
    (count,) = struct.unpack_from("<I", buf, 0)
    sizes = struct.unpack_from(f"<{count}I", buf, 4)
    off = 4 + 4 * count
    d = n_params(sizes)
    end = off + 8 * d
    if len(buf) < end:
        raise ShapeError(f"truncated parameter record: need {end} bytes, have {len(buf)}")
    theta = np.frombuffer(buf[off:end], dtype="<f8").astype(np.float64)
    return MlpParams(tuple(sizes), theta), end
