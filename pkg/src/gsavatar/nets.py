"""Small multilayer perceptrons with explicit forward/backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class PosEncoding:
    num_frequencies: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")

    def out_dim(self, in_dim: int = 3) -> int:
        return in_dim * (int(self.include_input) + 2 * self.num_frequencies)


def pos_encode(x: np.ndarray, enc: PosEncoding) -> np.ndarray:
    """[x, sin(2^j pi x), cos(2^j pi x) for j < L], batched over leading axes."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x] if enc.include_input else []
    for j in range(enc.num_frequencies):
        arg = (2.0**j) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if not parts:
        return np.zeros(x.shape[:-1] + (0,))
    return np.concatenate(parts, axis=-1)


def pos_encode_backward(x: np.ndarray, enc: PosEncoding, grad: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    out = np.zeros_like(x)
    col = 0
    if enc.include_input:
        out += grad[..., :d]
        col = d
    for j in range(enc.num_frequencies):
        freq = (2.0**j) * np.pi
        arg = freq * x
        out += grad[..., col:col + d] * freq * np.cos(arg)
        out -= grad[..., col + d:col + 2 * d] * freq * np.sin(arg)
        col += 2 * d
    return out


@dataclass
class Mlp:
    """Affine layers with a per-layer activation tag.

    ``weights[i]`` has shape (in, out) so a batch ``x`` maps to ``x @ W + b``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    name: str = "mlp"
    _param_names: list[str] = field(init=False, repr=False)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")
        self._param_names = [f"{kind}{i}" for i in range(len(self.weights)) for kind in ("w", "b")]

    @classmethod
    def create(cls, widths: list[int], activations: list[str], rng: np.random.Generator,
               zero_last: bool = False, name: str = "mlp") -> "Mlp":
        """Glorot-uniform initialisation; optionally zero the final layer."""
        weights, biases = [], []
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            if zero_last and i == len(widths) - 2:
                w = np.zeros_like(w)
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, list(activations), name=name)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_names(self) -> list[str]:
        return list(self._param_names)

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(self._param_names, self.params()))

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i][...] = state[f"w{i}"]
            self.biases[i][...] = state[f"b{i}"]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   list(self.activations), name=self.name)


def _act(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    return x


def mlp_forward(mlp: Mlp, x: np.ndarray):
    """Returns (output, cache); ``x`` is (..., in_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mlp.in_dim:
        raise ValueError(f"{mlp.name}: input dim {x.shape[-1]} != {mlp.in_dim}")
    lead = x.shape[:-1]
    h = x.reshape(-1, mlp.in_dim)
    cache = [h]
    for w, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        h = _act(h @ w + b, act)
        cache.append(h)
    return h.reshape(lead + (mlp.out_dim,)), (lead, cache)


def mlp_backward(mlp: Mlp, cache, output_grad: np.ndarray):
    """Reverse pass; returns (param_grads in ``params()`` order, input_grad)."""
    lead, acts = cache
    g = np.asarray(output_grad, dtype=np.float64).reshape(-1, mlp.out_dim)
    grads = [None] * (2 * len(mlp.weights))
    for i in reversed(range(len(mlp.weights))):
        out = acts[i + 1]
        kind = mlp.activations[i]
        if kind == "relu":
            g = g * (out > 0)
        elif kind == "tanh":
            g = g * (1.0 - out * out)
        grads[2 * i] = acts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ mlp.weights[i].T
    return grads, g.reshape(lead + (mlp.in_dim,))


# default architectures -------------------------------------------------------

def make_lbs_net(num_joints: int, enc: PosEncoding, rng: np.random.Generator) -> Mlp:
    widths = [enc.out_dim(3), 128, 128, 128, num_joints]
    return Mlp.create(widths, ["relu"] * 3 + ["identity"], rng, zero_last=True, name="lbs_net")


def make_pose_net(pose_dim: int, rng: np.random.Generator) -> Mlp:
    return Mlp.create([pose_dim, 64, pose_dim], ["tanh", "identity"], rng, zero_last=True, name="pose_net")


def make_confidence_net(rng: np.random.Generator, in_channels: int = 4) -> Mlp:
    return Mlp.create([in_channels, 32, 32, 1], ["relu", "relu", "identity"], rng, zero_last=True,
                      name="confidence_net")
