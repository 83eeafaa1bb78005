"""Small fully-connected networks: parameters, initialization, forward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lastshot.errors import NumericError, ShapeError
from lastshot.numkit import tensor as T
from lastshot.numkit.functional import ACTIVATIONS

_TAPED_ACTIVATIONS = {
    "relu": T.relu,
    "tanh": T.tanh,
    "identity": lambda x: x,
}


@dataclass
class MlpParams:
    """Layered weights (in x out) and biases (out,).

    ``activations`` has one entry per hidden layer; the final layer is always linear.
    """

    weights: list
    biases: list
    activations: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError(f"{len(self.weights)} weight matrices but {len(self.biases)} biases")
        if len(self.activations) != len(self.weights) - 1:
            raise ShapeError(
                f"need {len(self.weights) - 1} hidden activations, got {len(self.activations)}"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i} in-dim {w.shape[0]} != layer {i - 1} out-dim "
                    f"{self.weights[i - 1].shape[1]}"
                )
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    @property
    def num_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat) -> "MlpParams":
        """New params with this layout and values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ShapeError(f"flat vector has {flat.size} entries, layout needs {self.num_params}")
        arrays = []
        pos = 0
        for a in self.arrays():
            arrays.append(flat[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return MlpParams(arrays[0::2], arrays[1::2], list(self.activations))

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.activations))

    def tensors(self):
        """Fresh leaf tensors [W0, b0, W1, b1, ...] that record gradients."""
        return [T.Tensor(a.copy(), requires_grad=True) for a in self.arrays()]

    def net(self, tensors=None) -> "Net":
        return Net(tensors if tensors is not None else self.tensors(), list(self.activations))


def init_mlp(sizes, activation="relu", rng=None, activations=None) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if activations is None:
        activations = [activation] * (len(sizes) - 2)
    return MlpParams(weights, biases, list(activations))


class Net:
    """An MLP over tape tensors; weights may carry leading batch dimensions."""

    def __init__(self, tensors, activations):
        self.tensors = list(tensors)
        self.activations = list(activations)

    def __call__(self, x):
        x = T.as_tensor(x)
        n = len(self.tensors) // 2
        for i in range(n):
            w, b = self.tensors[2 * i], self.tensors[2 * i + 1]
            x = x @ w + b
            if i < n - 1:
                x = _TAPED_ACTIVATIONS[self.activations[i]](x)
        return x


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Final-layer activations of ``params`` on a batch ``x`` (batch x in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input has {x.shape[-1]} columns, first layer expects {params.in_dim}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = ACTIVATIONS[params.activations[i]](h)
    return h


def value_and_grad(params: MlpParams, loss_fn):
    """Loss value and flat gradient of ``loss_fn(tensors)`` at ``params``.

    ``loss_fn`` receives the leaf tensors in flatten order and must return a
    scalar tensor built from tape primitives.
    """
    leaves = params.tensors()
    loss = loss_fn(leaves)
    value = float(np.asarray(loss.data).reshape(()))
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}", value=value)
    grads = T.grad(loss, leaves)
    return value, np.concatenate([g.data.ravel() for g in grads])
