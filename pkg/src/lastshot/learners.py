"""Few-shot learners: map a support set to a generated classifier or regressor.

All generators accept a single episode (support ``S x d``) or a stack of
episodes (``T x S x d``); weights are broadcast or expanded per episode as
needed. Everything is built from tape primitives, so query losses of the
generated model are differentiable w.r.t. the learner's meta-parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from lastshot.errors import ConfigError, EpisodeError
from lastshot.numkit import MlpParams, Net, init_mlp
from lastshot.numkit import tensor as T

KINDS = ("protonet", "maml", "protomaml", "ridge", "kernel")
TASKS = ("classification", "regression")


@dataclass
class LearnerConfig:
    kind: str = "protonet"
    inner_lr: float = 0.01
    inner_steps: int = 1
    ridge_rho: float = 1.0
    meta_grad_mode: str = "auto"  # "first_order", "exact", or "auto"
    temperature: float = 1.0  # ProtoNet classification logits are -d^2 / temperature

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}; choose from {KINDS}")
        if self.kind in ("maml", "protomaml"):
            if self.inner_lr < 0:
                raise ConfigError("inner_lr must be >= 0")
            if self.inner_steps < 0:
                raise ConfigError("inner_steps must be >= 0")
            if self.resolved_meta_grad() == "exact" and self.inner_steps > 1:
                raise ConfigError("exact meta-gradients are only supported for one inner step")
        if self.kind == "ridge" and self.ridge_rho <= 0:
            raise ConfigError("ridge_rho must be > 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.meta_grad_mode not in ("auto", "first_order", "exact"):
            raise ConfigError(f"unknown meta_grad_mode {self.meta_grad_mode!r}")
        return self

    def resolved_meta_grad(self) -> str:
        if self.meta_grad_mode == "auto":
            return "exact" if self.inner_steps <= 1 else "first_order"
        return self.meta_grad_mode


@dataclass
class GeneratedModel:
    """h = A(support). ``logits(x)`` returns (..., N, C) scores or (..., N) predictions."""

    kind: str  # proto_head | adapted_net | ridge_head | kernel_regressor
    encoder: Net
    payload: dict
    task: str = "classification"

    def logits(self, x):
        x = T.as_tensor(x)
        if self.kind == "proto_head":
            d = sq_dists(self.encoder(x), self.payload["prototypes"])
            t = self.payload.get("temperature", 1.0)
            return -d if t == 1.0 else d * (-1.0 / t)
        if self.kind == "adapted_net":
            out = Net(self.payload["tensors"], self.payload["activations"])(x)
        elif self.kind == "ridge_head":
            out = _with_bias(self.encoder(x)) @ self.payload["weights"]
        elif self.kind == "kernel_regressor":
            w = T.softmax(-sq_dists(self.encoder(x), self.payload["support_features"]), -1)
            out = w @ T.reshape(self.payload["support_y"], self.payload["support_y"].shape + (1,))
        else:
            raise ValueError(f"unknown generated model kind {self.kind!r}")
        if self.task == "regression":
            out = T.reshape(out, out.shape[:-1])
        return out


# helpers ----------------------------------------------------------------------

def sq_dists(f, p):
    """Squared Euclidean distances between rows of f (..., N, D) and p (..., M, D)."""
    f, p = T.as_tensor(f), T.as_tensor(p)
    ff = T.square(f).sum(-1, keepdims=True)
    pp = T.swapaxes(T.square(p).sum(-1, keepdims=True))
    return ff - 2.0 * (f @ T.swapaxes(p)) + pp


def _with_bias(f):
    ones = T.Tensor(np.ones(f.shape[:-1] + (1,)))
    return T.concat([f, ones], -1)


def one_hot(labels, n_way: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.eye(n_way)[labels]


def as_inputs(x, task: str):
    """Regression inputs arrive as (..., N) scalars; lift them to (..., N, 1)."""
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if task == "regression" else x


def prototypes(features, labels, n_way: int):
    y = one_hot(labels, n_way)
    counts = y.sum(-2)
    if np.any(counts == 0):
        raise EpisodeError("every class needs at least one support instance")
    return (T.Tensor(np.swapaxes(y, -1, -2)) @ features) / T.Tensor(counts[..., None])


def _support_loss(out, y, task, n_way):
    """Mean support loss per episode, summed over episodes."""
    if task == "classification":
        yh = T.Tensor(one_hot(y, n_way))
        per = T.logsumexp(out, -1) - (out * yh).sum(-1)
    else:
        per = T.square(T.reshape(out, out.shape[:-1]) - T.Tensor(y))
    return per.mean(-1).sum()


def _expand(tensors, batch_shape):
    """Give each episode its own copy of the weights so inner gradients stay per-episode.

    A copy is made even for a single episode: the inner loop differentiates
    w.r.t. the copies, so paths that reach the originals some other way (the
    ProtoMAML head is built from the same encoder) stay out of the inner step.
    """
    if not batch_shape:
        return [T.broadcast_to(t, t.shape) for t in tensors]
    out = []
    for t in tensors:
        if t.ndim == 1:  # bias -> (T, 1, out)
            out.append(T.broadcast_to(T.reshape(t, (1,) * len(batch_shape) + (1,) + t.shape),
                                      batch_shape + (1,) + t.shape))
        else:
            out.append(T.broadcast_to(t, batch_shape + t.shape))
    return out


def _inner_loop(tensors, activations, support_x, support_y, cfg: LearnerConfig, task, n_way):
    exact = cfg.resolved_meta_grad() == "exact"
    if exact and cfg.inner_steps > 1:
        raise ConfigError("exact meta-gradients are only supported for one inner step")
    params = list(tensors)
    for _ in range(cfg.inner_steps):
        loss = _support_loss(Net(params, activations)(support_x), support_y, task, n_way)
        grads = T.grad(loss, params, create_graph=exact)
        if not exact:
            grads = [T.stop_gradient(g) for g in grads]
        params = [p - cfg.inner_lr * g for p, g in zip(params, grads)]
    return params


# generators -----------------------------------------------------------------------

def protonet_generate(encoder: Net, support_x, support_y, n_way: int,
                      temperature: float = 1.0) -> GeneratedModel:
    protos = prototypes(encoder(support_x), support_y, n_way)
    return GeneratedModel("proto_head", encoder, {"prototypes": protos, "temperature": temperature})


def maml_generate(net: Net, support_x, support_y, cfg: LearnerConfig,
                  task: str = "classification", n_way: int = 1) -> GeneratedModel:
    """``net`` is the full network f_theta including its linear output head."""
    batch_shape = tuple(np.shape(support_x)[:-2])
    params = _expand(net.tensors, batch_shape)
    adapted = _inner_loop(params, net.activations, support_x, support_y, cfg, task, n_way)
    return GeneratedModel("adapted_net", net,
                          {"tensors": adapted, "activations": net.activations}, task)


def protomaml_generate(encoder: Net, support_x, support_y, cfg: LearnerConfig,
                       n_way: int) -> GeneratedModel:
    """Linear head initialised from prototypes (w_c = 2 p_c, b_c = -|p_c|^2), then MAML steps."""
    protos = prototypes(encoder(support_x), support_y, n_way)
    w = 2.0 * T.swapaxes(protos)
    b = T.swapaxes(-T.square(protos).sum(-1, keepdims=True))
    batch_shape = tuple(np.shape(support_x)[:-2])
    enc = _expand(encoder.tensors, batch_shape)
    activations = encoder.activations + ["identity"]
    adapted = _inner_loop(enc + [w, b], activations, support_x, support_y, cfg,
                          "classification", n_way)
    return GeneratedModel("adapted_net", encoder, {"tensors": adapted, "activations": activations})


def ridge_solve(phi, targets, rho: float):
    """W = (Phi^T Phi + rho I)^{-1} Phi^T Y, differentiable through the solve."""
    d = phi.shape[-1]
    gram = T.swapaxes(phi) @ phi + T.Tensor(rho * np.eye(d))
    return T.solve(gram, T.swapaxes(phi) @ T.as_tensor(targets))


def ridge_generate(encoder: Net, support_x, support_y, cfg: LearnerConfig,
                   task: str = "classification", n_way: int = 1) -> GeneratedModel:
    phi = _with_bias(encoder(support_x))
    if task == "classification":
        targets = one_hot(support_y, n_way)
    else:
        targets = np.asarray(support_y, dtype=np.float64)[..., None]
    try:
        weights = ridge_solve(phi, targets, cfg.ridge_rho)
    except np.linalg.LinAlgError as exc:
        from lastshot.errors import NumericError

        raise NumericError(f"ridge solve failed: {exc}") from exc
    return GeneratedModel("ridge_head", encoder, {"weights": weights, "phi": phi,
                                                  "targets": targets}, task)


def kernel_generate(encoder: Net, support_x, support_y) -> GeneratedModel:
    return GeneratedModel("kernel_regressor", encoder,
                          {"support_features": encoder(support_x),
                           "support_y": T.Tensor(np.asarray(support_y, dtype=np.float64))},
                          "regression")


def kernel_regress(encoder: Net, support_x, support_y, x):
    """Softmax(-|f(x) - f(x')|^2) weighted average of support targets."""
    return kernel_generate(encoder, support_x, support_y).logits(x)


# learner object ------------------------------------------------------------------

class Learner:
    """Meta-parameters plus the rule that turns a support set into a model."""

    def __init__(self, cfg: LearnerConfig, params: MlpParams, task: str = "classification",
                 n_way: int = 5):
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        self.cfg = cfg.validate()
        self.params = params
        self.task = task
        self.n_way = n_way

    def generate(self, net: Net, support_x, support_y) -> GeneratedModel:
        support_x = as_inputs(support_x, self.task)
        kind = self.cfg.kind
        if kind == "protonet":
            if self.task != "classification":
                return kernel_generate(net, support_x, support_y)
            return protonet_generate(net, support_x, support_y, self.n_way, self.cfg.temperature)
        if kind == "kernel":
            return kernel_generate(net, support_x, support_y)
        if kind == "maml":
            return maml_generate(net, support_x, support_y, self.cfg, self.task, self.n_way)
        if kind == "protomaml":
            return protomaml_generate(net, support_x, support_y, self.cfg, self.n_way)
        if kind == "ridge":
            return ridge_generate(net, support_x, support_y, self.cfg, self.task, self.n_way)
        raise ConfigError(f"unknown learner kind {kind!r}")

    def predict(self, support_x, support_y, query_x, params: MlpParams | None = None) -> np.ndarray:
        """Numeric query scores; MAML-style learners still differentiate internally.

        Inner-loop gradients are taken first-order here: prediction never needs
        the second-order graph.
        """
        net = (params or self.params).net()
        saved = self.cfg
        if self.cfg.kind in ("maml", "protomaml"):
            self.cfg = replace(saved, meta_grad_mode="first_order")
        try:
            model = self.generate(net, support_x, support_y)
        finally:
            self.cfg = saved
        with T.no_grad():
            return model.logits(as_inputs(query_x, self.task)).data


def regression_backbone(rng, width: int = 100, with_head: bool = False) -> MlpParams:
    """Three fully-connected layers 1 -> width -> width -> width, optional linear head."""
    sizes = [1, width, width, width]
    acts = ["relu", "relu"]
    if with_head:
        sizes.append(1)
        acts.append("identity")
    return init_mlp(sizes, rng=rng, activations=acts)


def with_linear_head(encoder: MlpParams, out_dim: int, rng) -> MlpParams:
    head = init_mlp([encoder.out_dim, out_dim], rng=rng)
    return MlpParams(encoder.weights + head.weights, encoder.biases + head.biases,
                     encoder.activations + ["identity"])
