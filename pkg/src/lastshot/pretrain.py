"""B-way base-class pre-training, feature extraction, and the PT-EMB / SimpleShot baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from lastshot.container import mlp_fields, mlp_from_fields, read_container, write_container
from lastshot.errors import ConfigError, TrainingError
from lastshot.numkit import MlpParams, SgdMomentumState, init_mlp, mlp_forward, sgd_momentum_step
from lastshot.numkit import tensor as T
from lastshot.rng import stream
from lastshot.taskgen import BasePool, ClassWorld, sample_classification_episode

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    hidden: tuple = (128,)
    feat_dim: int = 64
    epochs: int = 100
    batch: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_at: float = 2 / 3
    val_tasks: int = 200
    val_queries: int = 15

    def manifest(self) -> dict:
        return {
            "pretrain.hidden": ",".join(map(str, self.hidden)),
            "pretrain.feat_dim": self.feat_dim,
            "pretrain.epochs": self.epochs,
            "pretrain.batch": self.batch,
            "pretrain.lr": self.lr,
            "pretrain.momentum": self.momentum,
            "pretrain.weight_decay": self.weight_decay,
            "pretrain.decay_at": self.decay_at,
            "pretrain.val_tasks": self.val_tasks,
        }


@dataclass
class PretrainedModel:
    encoder: MlpParams
    head: np.ndarray  # feat_dim x B
    base_classes: np.ndarray  # global id of each head column
    feature_cache: np.ndarray | None = None
    cache_labels: np.ndarray | None = None  # global class id of each cached row
    history: dict = field(default_factory=dict)
    extract_calls: int = field(default=0, compare=False)

    @property
    def num_base(self):
        return self.head.shape[1]

    def features(self, x) -> np.ndarray:
        return mlp_forward(self.encoder, x)

    def head_column(self, class_ids) -> np.ndarray:
        lookup = {int(c): i for i, c in enumerate(self.base_classes)}
        return np.array([lookup[int(c)] for c in class_ids])

    @property
    def base_mean(self) -> np.ndarray:
        if self.feature_cache is None:
            raise ConfigError("feature cache is empty; call extract_features first")
        return self.feature_cache.mean(0)

    def save(self, path):
        fields = mlp_fields("encoder", self.encoder)
        fields["head"] = self.head
        fields["base_classes"] = self.base_classes
        if self.feature_cache is not None:
            fields["feature_cache"] = self.feature_cache
            fields["cache_labels"] = np.asarray(self.cache_labels, dtype=np.int64)
        write_container(path, "PretrainedModel", fields)

    @classmethod
    def load(cls, path) -> "PretrainedModel":
        _, f = read_container(path, "PretrainedModel")
        cache = np.array(f["feature_cache"]) if "feature_cache" in f else None
        labels = np.array(f["cache_labels"]) if "cache_labels" in f else None
        return cls(mlp_from_fields("encoder", f), np.array(f["head"]),
                   np.array(f["base_classes"]), cache, labels)


def _ce_head_loss(tensors, activations, x, onehot):
    from lastshot.numkit import Net

    enc, w = tensors[:-1], tensors[-1]
    logits = Net(enc, activations)(x) @ w
    return (T.logsumexp(logits, -1) - (logits * onehot).sum(-1)).mean()


def pool_cross_entropy(model: PretrainedModel, pool: BasePool) -> float:
    logits = model.features(pool.x) @ model.head
    col = model.head_column(pool.labels)
    z = logits - logits.max(1, keepdims=True)
    lse = np.log(np.exp(z).sum(1))
    return float(np.mean(lse - z[np.arange(len(col)), col]))


def protonet_rule_accuracy(encoder: MlpParams, episodes) -> float:
    """Mean nearest-centroid accuracy of ``encoder`` features over a list of episodes."""
    accs = []
    for ep in episodes:
        fs = mlp_forward(encoder, ep.support_x)
        fq = mlp_forward(encoder, ep.query_x)
        protos = np.stack([fs[ep.support_y == c].mean(0) for c in range(ep.way)])
        d = ((fq[:, None, :] - protos[None]) ** 2).sum(-1)
        accs.append(np.mean(np.argmin(d, 1) == ep.query_y))
    return float(np.mean(accs))


def pretrain_base_classifier(world: ClassWorld, pool: BasePool, config: PretrainConfig,
                             rng: np.random.Generator, seed: int = 0) -> PretrainedModel:
    """Cross-entropy training of encoder + bias-free B-way head on the base pool.

    SGD with heavy-ball momentum; weight decay enters as an L2 penalty; one x0.1
    learning-rate drop at ``decay_at`` of the epochs. After every epoch the
    encoder is scored on 1-shot tasks spanning the whole validation split with
    the nearest-centroid rule, and the best-scoring encoder is kept.
    """
    if len(pool) == 0:
        raise TrainingError("base pool is empty")
    classes = np.unique(pool.labels)
    if len(classes) < 2:
        raise TrainingError("pre-training needs at least two base classes", index=0)
    sizes = [world.obs_dim, *config.hidden, config.feat_dim]
    encoder = init_mlp(sizes, rng=rng)
    head = init_mlp([config.feat_dim, len(classes)], rng=rng).weights[0]
    acts = list(encoder.activations)
    n_enc = encoder.num_params
    flat = np.concatenate([encoder.flatten(), head.ravel()])
    col_of = {int(c): i for i, c in enumerate(classes)}
    y_all = np.array([col_of[int(c)] for c in pool.labels])
    eye = np.eye(len(classes))

    n_val_way = len(world.split["val"])
    val_eps = [sample_classification_episode(world, "val", n_val_way, 1, config.val_queries,
                                              stream(seed, "pretrain-val", i))
               for i in range(config.val_tasks)] if n_val_way >= 2 and config.val_tasks else []

    def unpack(v):
        return encoder.unflatten(v[:n_enc]), v[n_enc:].reshape(config.feat_dim, len(classes))

    model = PretrainedModel(encoder, head, classes)
    model.history["pool_ce_start"] = pool_cross_entropy(model, pool)
    opt = SgdMomentumState.zeros(flat.size, config.lr, config.momentum)
    decay_epoch = int(round(config.decay_at * config.epochs))
    best_acc, best_flat = -1.0, flat.copy()
    history = []
    for epoch in range(config.epochs):
        if epoch == decay_epoch and epoch > 0:
            opt.learning_rate = config.lr * 0.1
        order = rng.permutation(len(pool))
        for start in range(0, len(order), config.batch):
            rows = order[start:start + config.batch]
            x, onehot = pool.x[rows], eye[y_all[rows]]
            enc_p, head_p = unpack(flat)
            leaves = enc_p.tensors() + [T.Tensor(head_p, requires_grad=True)]
            loss = _ce_head_loss(leaves, acts, x, onehot)
            if not np.isfinite(loss.data):
                raise TrainingError(f"pre-training diverged in epoch {epoch}", index=epoch)
            grads = T.grad(loss, leaves)
            g = np.concatenate([gr.data.ravel() for gr in grads]) + config.weight_decay * flat
            flat = sgd_momentum_step(opt, flat, g)
        if not np.all(np.isfinite(flat)):
            raise TrainingError(f"pre-training diverged in epoch {epoch}", index=epoch)
        enc_p, head_p = unpack(flat)
        acc = protonet_rule_accuracy(enc_p, val_eps) if val_eps else 0.0
        history.append(acc)
        if epoch == 0:
            model.history["pool_ce_epoch1"] = pool_cross_entropy(
                PretrainedModel(enc_p, head_p, classes), pool)
        log.debug("pretrain epoch %d val acc %.4f", epoch, acc)
        if acc > best_acc:
            best_acc, best_flat = acc, flat.copy()
    enc_p, head_p = unpack(best_flat)
    model.encoder, model.head = enc_p, head_p
    model.history.update(val_acc=history, best_val_acc=best_acc)
    return model


def extract_features(model: PretrainedModel, pool: BasePool) -> np.ndarray:
    """Populate (once) and return the base-pool feature cache, indexed by instance id."""
    if model.feature_cache is None or len(model.feature_cache) != len(pool):
        model.extract_calls += 1
        model.feature_cache = model.features(pool.x)
        model.cache_labels = np.asarray(pool.labels)
        model._class_means = None
    return model.feature_cache


# PT-EMB / SimpleShot ------------------------------------------------------------------

PREPROCESS = ("none", "center", "center_l2")


@dataclass
class PreprocessMode:
    variant: str = "none"
    base_mean: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in PREPROCESS:
            raise ConfigError(f"unknown preprocessing {self.variant!r}")
        if self.variant != "none" and self.base_mean is None:
            raise ConfigError(f"{self.variant} preprocessing needs the base-feature mean")

    def apply(self, feats: np.ndarray) -> np.ndarray:
        if self.variant == "none":
            return feats
        out = feats - self.base_mean
        if self.variant == "center_l2":
            out = out / np.linalg.norm(out, axis=-1, keepdims=True)
        return out


def nearest_centroid_logits(fs, ys, fq, n_way: int):
    """Negative squared distances from queries to per-class support means (batched)."""
    onehot = np.eye(n_way)[ys]
    protos = np.swapaxes(onehot, -1, -2) @ fs / onehot.sum(-2)[..., None]
    return -(np.square(fq).sum(-1)[..., None] - 2 * fq @ np.swapaxes(protos, -1, -2)
             + np.square(protos).sum(-1)[..., None, :])


def pt_emb_classify(model: PretrainedModel, episode, mode: PreprocessMode | None = None):
    """Nearest-centroid labels and logits on pre-trained features; ties go to the lower index."""
    mode = mode or PreprocessMode()
    fs = mode.apply(model.features(episode.support_x))
    fq = mode.apply(model.features(episode.query_x))
    logits = nearest_centroid_logits(fs, episode.support_y, fq, episode.way)
    return np.argmax(logits, -1), logits
