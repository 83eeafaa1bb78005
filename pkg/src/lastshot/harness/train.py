"""Meta-training loops for the classification world and for sine regression."""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from lastshot.errors import ConfigError, TrainingError
from lastshot.learners import Learner, as_inputs, regression_backbone, with_linear_head
from lastshot.numkit import MlpParams, SgdMomentumState, sgd_momentum_step
from lastshot.numkit import tensor as T
from lastshot.objectives import cross_entropy_rows, lastshot_episode_loss, regression_lastshot_loss
from lastshot.pretrain import (
    PretrainedModel,
    PreprocessMode,
    extract_features,
    nearest_centroid_logits,
    pretrain_base_classifier,
)
from lastshot.rng import stream
from lastshot.taskgen import (
    BasePool,
    ClassWorld,
    build_class_world,
    enumerate_base_data,
    sample_pool_episode,
    sample_sine_batch,
)
from lastshot.teachers import (
    AnchorGrid,
    build_anchor_grid,
    build_lr_teachers,
    build_masked_base_teacher,
    build_nc_teacher,
)
from lastshot.harness.config import RunConfig
from lastshot.harness.evaluate import classification_episodes, stack_episodes

log = logging.getLogger(__name__)


@dataclass
class Lab:
    """World, base pool and pre-trained model shared by the runs of one seed."""

    world: ClassWorld
    pool: BasePool
    pretrained: PretrainedModel
    _clean: PretrainedModel | None = field(default=None, repr=False)

    def clean_pretrained(self) -> PretrainedModel:
        """The same frozen model with its cache rebuilt from the clean pool renditions.

        Strengthened teachers are both built and queried on clean inputs.
        """
        if self._clean is None:
            pre = self.pretrained
            self._clean = replace(pre, feature_cache=pre.features(self.pool.clean),
                                  cache_labels=np.asarray(self.pool.labels), history={})
        return self._clean


_LABS: dict = {}


def _lab_key(cfg: RunConfig) -> str:
    keep = {k: v for k, v in cfg.values.items()
            if k.startswith(("world.", "pretrain.")) or k == "run.seed"}
    return RunConfig(keep).hash(exclude=())


def prepare_lab(cfg: RunConfig, cache_dir=None) -> Lab:
    """Build (or reload) the world, base pool and pre-trained encoder for ``cfg``'s seed."""
    key = _lab_key(cfg)
    if key in _LABS:
        return _LABS[key]
    seed = cfg["run.seed"]
    world = build_class_world(cfg.world(), stream(seed, "world"))
    pool = enumerate_base_data(world, cfg["world.per_class"], stream(seed, "pool"))
    path = Path(cache_dir) / f"pretrained-{key[:16]}.bin" if cache_dir else None
    if path is not None and path.exists():
        model = PretrainedModel.load(path)
    else:
        model = pretrain_base_classifier(world, pool, cfg.pretrain(), stream(seed, "pretrain"),
                                         seed=seed)
        extract_features(model, pool)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            model.save(path)
    if model.feature_cache is None:
        extract_features(model, pool)
    lab = Lab(world, pool, model)
    _LABS[key] = lab
    return lab


@dataclass
class TrainedLearner:
    learner: Learner
    config: RunConfig
    history: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def predict(self, support_x, support_y, query_x):
        return self.learner.predict(support_x, support_y, query_x)


def pt_emb_predictor(pretrained: PretrainedModel, variant: str = "none"):
    """Nearest-centroid on frozen pre-trained features (no meta-training)."""
    mode = PreprocessMode(variant, pretrained.base_mean if variant != "none" else None)

    def predict(sx, sy, qx):
        fs = mode.apply(pretrained.features(sx))
        fq = mode.apply(pretrained.features(qx))
        return nearest_centroid_logits(fs, sy, fq, int(np.max(sy)) + 1)

    return predict


def _lr_at(cfg: RunConfig, it: int, total: int) -> float:
    lr0, factor = cfg["train.lr"], cfg["train.decay_factor"]
    every = cfg["train.decay_every_tasks"]
    if every:
        return lr0 * factor ** ((it * cfg["train.episodes_per_batch"]) // every)
    drops = sum(1 for f in cfg["train.decay_at"] if it >= int(round(f * total)))
    return lr0 * factor ** drops


def _step(flat, params: MlpParams, loss_fn, opt, it, cfg):
    p = params.unflatten(flat)
    leaves = p.tensors()
    net = p.net(leaves)
    loss = loss_fn(net)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite meta-loss at iteration {it} (config {cfg.hash()[:12]})",
                            index=it)
    grads = T.grad(loss, leaves)
    g = np.concatenate([gr.data.ravel() for gr in grads])
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite meta-gradient at iteration {it} "
                            f"(config {cfg.hash()[:12]})", index=it)
    return sgd_momentum_step(opt, flat, g), value


def build_teachers(kind: str, lab: Lab, episodes, rng, cfg: RunConfig):
    pre = lab.clean_pretrained() if cfg["distill.mode"] == "strengthen" else lab.pretrained
    if kind == "nc":
        return [build_nc_teacher(pre, e.class_ids) for e in episodes]
    if kind == "masked":
        return [build_masked_base_teacher(pre, e.class_ids) for e in episodes]
    if kind == "lr":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            out = build_lr_teachers(pre, [e.class_ids for e in episodes], rng,
                                    cfg["teacher.lr_per_class"], cfg["teacher.lr_reg"],
                                    cfg["teacher.lr_max_iter"])
        return out, len(caught)
    raise ConfigError(f"no classification teacher {kind!r}")


def initial_classification_params(cfg: RunConfig, lab: Lab) -> MlpParams:
    enc = lab.pretrained.encoder.copy()
    if cfg["learner.kind"] == "maml":
        return with_linear_head(enc, cfg["train.ways"], stream(cfg["run.seed"], "maml-head"))
    return enc


def meta_train_classification(cfg: RunConfig, lab: Lab) -> TrainedLearner:
    if lab is None or lab.pretrained is None:
        raise ConfigError("classification meta-training needs a pre-trained model")
    seed = cfg["run.seed"]
    C, K, Q = cfg["train.ways"], cfg["train.shots"], cfg["train.queries"]
    E, iters = cfg["train.episodes_per_batch"], cfg["train.iterations"]
    kind = cfg["teacher.kind"]
    dcfg = cfg.distill()
    params = initial_classification_params(cfg, lab)
    learner = Learner(cfg.learner(), params, "classification", C)
    flat = params.flatten()
    opt = SgdMomentumState.zeros(flat.size, cfg["train.lr"], cfg["train.momentum"])
    val_eps = None
    if cfg["train.early_stop"] and cfg["train.val_tasks"] and iters:
        val_eps = stack_episodes(classification_episodes(
            lab.world, "val", C, K, 15, seed, range(cfg["train.val_tasks"]), "meta-val"))

    def val_score(vec):
        learner.params = params.unflatten(vec)
        scores = learner.predict(val_eps[0], val_eps[1], val_eps[2])
        return float(np.mean(np.argmax(scores, -1) == val_eps[3]))

    history = {"loss": [], "val": [], "lr_warnings": 0}
    best = (val_score(flat), 0, flat.copy()) if val_eps is not None else None
    if best is not None:
        history["val"].append((0, best[0]))
    start = time.perf_counter()
    for it in range(iters):
        opt.learning_rate = _lr_at(cfg, it, iters)
        eps = [sample_pool_episode(lab.pool, C, K, Q, stream(seed, "train", it, e))
               for e in range(E)]
        sx, sy, qx, qy = stack_episodes(eps)
        teachers = None
        if kind != "none":
            teachers = build_teachers(kind, lab, eps, stream(seed, "teacher", it), cfg)
            if kind == "lr":
                teachers, n_warn = teachers
                history["lr_warnings"] += n_warn
            clean = np.stack([e.query_clean for e in eps])

        def loss_fn(net):
            gen = learner.generate(net, sx, sy)
            if teachers is None:
                return cross_entropy_rows(gen.logits(qx), qy).mean()
            return lastshot_episode_loss(gen, teachers, qx, qy, dcfg,
                                         rng=stream(seed, "query-mode", it), query_clean=clean)

        flat, value = _step(flat, params, loss_fn, opt, it, cfg)
        history["loss"].append(value)
        if val_eps is not None and ((it + 1) % cfg["train.val_every"] == 0 or it + 1 == iters):
            score = val_score(flat)
            history["val"].append((it + 1, score))
            if score > best[0]:
                best = (score, it + 1, flat.copy())
    final = best[2] if best is not None else flat
    learner.params = params.unflatten(final)
    history["best_iteration"] = best[1] if best is not None else iters
    history["train_seconds"] = time.perf_counter() - start
    notes = []
    if history["lr_warnings"]:
        notes.append(f"{history['lr_warnings']} LR teachers hit the iteration cap")
    return TrainedLearner(learner, cfg, history, notes)


# regression ---------------------------------------------------------------------

_GRIDS: dict = {}


def anchor_grid_for(cfg: RunConfig, cache_path=None) -> AnchorGrid:
    acfg = cfg.anchor()
    key = repr(acfg)
    grid = _GRIDS.get(key)
    if grid is None:
        if cache_path is not None and Path(cache_path).exists():
            grid = AnchorGrid.load(cache_path)
            if repr(grid.cfg) != key:
                raise ConfigError(f"anchor cache {cache_path} was built with a different config")
        else:
            grid = build_anchor_grid(acfg)
        _GRIDS[key] = grid
    return grid


def initial_regression_params(cfg: RunConfig) -> MlpParams:
    rng = stream(cfg["run.seed"], "reg-init")
    return regression_backbone(rng, with_head=cfg["learner.kind"] == "maml")


def regression_mse(pred, y):
    return T.square(pred - T.Tensor(np.asarray(y))).mean()


def meta_train_regression(cfg: RunConfig, grid: AnchorGrid | None = None) -> TrainedLearner:
    seed = cfg["run.seed"]
    K, Q = cfg["train.shots"], cfg["train.queries"]
    E, iters = cfg["train.episodes_per_batch"], cfg["train.iterations"]
    use_teacher = cfg["teacher.kind"] == "anchor"
    if use_teacher and grid is None:
        grid = anchor_grid_for(cfg)
    lam = cfg["distill.lambda"]
    params = initial_regression_params(cfg)
    learner = Learner(cfg.learner(), params, "regression")
    flat = params.flatten()
    opt = SgdMomentumState.zeros(flat.size, cfg["train.lr"], cfg["train.momentum"])
    val = None
    if cfg["train.early_stop"] and cfg["train.val_tasks"] and iters:
        val = sample_sine_batch(cfg["train.val_tasks"], K, 100, stream(seed, "reg-val", K))

    def val_score(vec):
        learner.params = params.unflatten(vec)
        out = []
        for s in range(0, len(val), 100):
            sl = slice(s, s + 100)
            pred = learner.predict(val.support_x[sl], val.support_y[sl], val.query_x[sl])
            out.append(np.mean((pred - val.query_y[sl]) ** 2, -1))
        return float(np.mean(np.concatenate(out)))

    history = {"loss": [], "val": []}
    best = (val_score(flat), 0, flat.copy()) if val is not None else None
    if best is not None:
        history["val"].append((0, best[0]))
    start = time.perf_counter()
    for it in range(iters):
        opt.learning_rate = _lr_at(cfg, it, iters)
        b = sample_sine_batch(E, K, Q, stream(seed, "reg-train", it))
        target = grid.predict_batch(b.a, b.v, b.b, b.query_x) if use_teacher else None

        def loss_fn(net):
            gen = learner.generate(net, b.support_x, b.support_y)
            pred = gen.logits(as_inputs(b.query_x, "regression"))
            if target is None:
                return regression_mse(pred, b.query_y)
            return regression_lastshot_loss(pred, target, b.query_y, lam)

        flat, value = _step(flat, params, loss_fn, opt, it, cfg)
        history["loss"].append(value)
        if val is not None and ((it + 1) % cfg["train.val_every"] == 0 or it + 1 == iters):
            score = val_score(flat)
            history["val"].append((it + 1, score))
            log.info("regression it %d val mse %.4f", it + 1, score)
            if score < best[0]:
                best = (score, it + 1, flat.copy())
    final = best[2] if best is not None else flat
    learner.params = params.unflatten(final)
    history["best_iteration"] = best[1] if best is not None else iters
    history["train_seconds"] = time.perf_counter() - start
    if use_teacher:
        history["anchors_trained"] = grid.trained
    return TrainedLearner(learner, cfg, history)


def meta_train(cfg: RunConfig, lab: Lab | None = None, grid: AnchorGrid | None = None):
    if cfg.task == "regression":
        return meta_train_regression(cfg, grid)
    return meta_train_classification(cfg, lab if lab is not None else prepare_lab(cfg))
