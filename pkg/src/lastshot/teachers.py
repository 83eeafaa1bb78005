"""Teacher models h*: nearest-centroid, logistic-regression, masked B-way and sine anchors.

Teachers are frozen: their arrays are marked read-only and no tape tensor is
ever built from them.
"""
from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np

from lastshot.container import read_container, write_container
from lastshot.errors import ConfigError, EpisodeError, ProtocolError
from lastshot.numkit import functional as F
from lastshot.objectives import QUERY_MODES
from lastshot.pretrain import PretrainedModel
from lastshot.taskgen import AMPLITUDE_RANGE, FREQUENCY_RANGE, PHASE_RANGE, X_RANGE, SineTaskParams


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass
class Teacher:
    kind: str  # nc | lr | masked | anchor
    n_way: int
    payload: dict
    encoder: object = None  # frozen f-double-dagger, MlpParams; None for anchors
    notes: list = field(default_factory=list)

    def features(self, x):
        from lastshot.numkit import mlp_forward

        return mlp_forward(self.encoder, x)

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "nc":
            f = self.features(x)
            mu = self.payload["means"]
            return -(np.square(f).sum(-1)[..., None] - 2 * f @ mu.T + np.square(mu).sum(-1))
        if self.kind == "lr":
            return self.features(x) @ self.payload["weights"] + self.payload["bias"]
        if self.kind == "masked":
            return self.features(x) @ self.payload["head"]
        if self.kind == "anchor":
            return self.payload["regressor"].predict(x)
        raise ValueError(f"unknown teacher kind {self.kind!r}")

    def arrays(self):
        out = []
        for v in self.payload.values():
            if isinstance(v, np.ndarray):
                out.append(v)
            elif isinstance(v, AnchorRegressor):
                out.append(v.weights)
        return out


# classification teachers ---------------------------------------------------------------

def _require_cache(pretrained: PretrainedModel):
    if pretrained.feature_cache is None or getattr(pretrained, "cache_labels", None) is None:
        raise ConfigError("feature cache is empty; run extract_features on the base pool first")


def base_class_means(pretrained: PretrainedModel) -> dict:
    """Mean cached feature of every base class (computed once per model)."""
    _require_cache(pretrained)
    table = getattr(pretrained, "_class_means", None)
    if table is None:
        labels = pretrained.cache_labels
        table = {int(c): _frozen(pretrained.feature_cache[labels == c].mean(0))
                 for c in np.unique(labels)}
        pretrained._class_means = table
    return table


def _check_base(pretrained, class_ids):
    known = set(int(c) for c in pretrained.base_classes)
    for c in class_ids:
        if int(c) not in known:
            raise EpisodeError(f"class {int(c)} is not a base class")


def build_nc_teacher(pretrained: PretrainedModel, class_ids) -> Teacher:
    _check_base(pretrained, class_ids)
    table = base_class_means(pretrained)
    means = _frozen(np.stack([table[int(c)] for c in class_ids]))
    return Teacher("nc", len(class_ids), {"means": means}, pretrained.encoder)


def build_masked_base_teacher(pretrained: PretrainedModel, class_ids) -> Teacher:
    """Columns of the B-way head for the episode's classes, in episode order, uncalibrated."""
    _check_base(pretrained, class_ids)
    cols = pretrained.head_column(class_ids)
    return Teacher("masked", len(class_ids), {"head": _frozen(pretrained.head[:, cols]),
                                              "columns": _frozen(cols)}, pretrained.encoder)


@dataclass
class LogRegResult:
    weights: np.ndarray  # (..., D, C)
    bias: np.ndarray  # (..., C)
    iterations: int
    grad_norm: np.ndarray
    converged: np.ndarray


def _lr_objective_grad(X, Y, W, b, reg):
    z = X @ W + b[..., None, :]
    p = F.softmax(z, -1)
    n = X.shape[-2]
    diff = (p - Y) / n
    gW = np.swapaxes(X, -1, -2) @ diff + reg * W
    gb = diff.sum(-2) + reg * b
    return gW, gb


def lr_objective(X, y, W, b, reg, n_classes):
    """Mean cross-entropy plus (reg/2)(|W|^2 + |b|^2)."""
    Y = np.eye(n_classes)[y]
    z = X @ W + b
    ce = -np.mean(np.sum(Y * F.log_softmax(z, -1), -1))
    return ce + 0.5 * reg * (np.sum(W ** 2) + np.sum(b ** 2))


CHECK_EVERY = 10  # iterations between convergence checks


def fit_logistic_regression(X, y, n_classes: int, reg: float = 1e-4, max_iter: int = 500,
                            tol: float = 1e-6) -> LogRegResult:
    """Full-batch multinomial logistic regression by accelerated gradient descent.

    Works on stacks of problems (X: ..., N, D). Step size is 1/L from the
    curvature bound of the softmax cross-entropy; Nesterov momentum is reset
    whenever the gradient stops pointing downhill.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.eye(n_classes)[np.asarray(y)]
    batch = X.shape[:-2]
    d = X.shape[-1]
    n = X.shape[-2]
    Xb = np.concatenate([X, np.ones(X.shape[:-1] + (1,))], -1)
    lmax = np.linalg.norm(Xb, ord=2, axis=(-2, -1)) ** 2 if Xb.ndim > 2 else np.linalg.norm(Xb, 2) ** 2
    step = 1.0 / (0.5 * np.asarray(lmax) / n + reg)
    step_w = np.reshape(step, batch + (1, 1))
    step_b = np.reshape(step, batch + (1,))
    W = np.zeros(batch + (d, n_classes))
    b = np.zeros(batch + (n_classes,))
    W_prev, b_prev = W, b
    t = np.ones(batch)  # momentum sequence, one per problem
    gnorm = np.full(batch, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        beta = (t - 1) / t_next
        VW = W + np.reshape(beta, batch + (1, 1)) * (W - W_prev)
        vb = b + np.reshape(beta, batch + (1,)) * (b - b_prev)
        gW, gb = _lr_objective_grad(X, Y, VW, vb, reg)
        W_prev, b_prev = W, b
        W = VW - step_w * gW
        b = vb - step_b * gb
        # gradient-based adaptive restart, per problem: drop momentum once it stops helping
        uphill = np.sum(gW * (W - W_prev), axis=(-2, -1)) + np.sum(gb * (b - b_prev), axis=-1) > 0
        t = np.where(uphill, 1.0, t_next)
        if it % CHECK_EVERY == 0 or it == max_iter:
            cW, cb = _lr_objective_grad(X, Y, W, b, reg)
            gnorm = np.sqrt(np.sum(cW ** 2, axis=(-2, -1)) + np.sum(cb ** 2, axis=-1))
            if np.all(gnorm <= tol):
                break
    return LogRegResult(W, b, it, gnorm, gnorm <= tol)


def _lr_training_rows(pretrained, class_ids, rng, per_class):
    labels = pretrained.cache_labels
    xs, ys = [], []
    for local, c in enumerate(class_ids):
        rows = np.flatnonzero(labels == c)
        take = rng.choice(rows, size=min(per_class, len(rows)), replace=False)
        xs.append(pretrained.feature_cache[take])
        ys.append(np.full(len(take), local))
    return np.concatenate(xs), np.concatenate(ys)


def build_lr_teacher(pretrained: PretrainedModel, class_ids, rng: np.random.Generator,
                     per_class: int = 50, reg: float = 1e-4, max_iter: int = 500,
                     tol: float = 1e-6) -> Teacher:
    return build_lr_teachers(pretrained, [class_ids], rng, per_class, reg, max_iter, tol)[0]


def build_lr_teachers(pretrained: PretrainedModel, class_id_sets, rng: np.random.Generator,
                      per_class: int = 50, reg: float = 1e-4, max_iter: int = 500,
                      tol: float = 1e-6) -> list:
    """One LR teacher per class set, fitted jointly when the sets have equal shape."""
    _require_cache(pretrained)
    for ids in class_id_sets:
        _check_base(pretrained, ids)
    data = [_lr_training_rows(pretrained, ids, rng, per_class) for ids in class_id_sets]
    shapes = {x.shape for x, _ in data}
    teachers = []
    if len(shapes) == 1:
        X = np.stack([x for x, _ in data])
        y = np.stack([yy for _, yy in data])
        fits = [fit_logistic_regression(X, y, len(class_id_sets[0]), reg, max_iter, tol)]
        per = [(fits[0].weights[i], fits[0].bias[i], fits[0].converged[i], fits[0].grad_norm[i])
               for i in range(len(data))]
    else:
        per = []
        for (x, yy), ids in zip(data, class_id_sets):
            r = fit_logistic_regression(x, yy, len(ids), reg, max_iter, tol)
            per.append((r.weights, r.bias, bool(r.converged), float(r.grad_norm)))
    for ids, (w, b, conv, gn) in zip(class_id_sets, per):
        t = Teacher("lr", len(ids), {"weights": _frozen(w), "bias": _frozen(b)}, pretrained.encoder)
        if not conv:
            msg = f"LR teacher stopped at {max_iter} iterations with gradient norm {float(gn):.2e}"
            t.notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        teachers.append(t)
    return teachers


# sine anchors ----------------------------------------------------------------------

@dataclass
class AnchorConfig:
    step: float = 0.1
    samples: int = 1000
    width: int = 100
    folds: int = 5
    ridge_grid: tuple = (1e-4, 1e-3, 1e-2, 1e-1)
    seed: int = 0
    slope_scale: float = 2.0
    mix_gain: float = 0.5


@dataclass
class AnchorRegressor:
    """Frozen random two-layer Tanh features with a closed-form ridge read-out."""

    features: "RandomTanhFeatures"
    weights: np.ndarray  # width + 1
    ridge: float
    cell: tuple

    def predict(self, x):
        return self.features(x) @ self.weights


class RandomTanhFeatures:
    def __init__(self, cfg: AnchorConfig):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA4C]))
        w = cfg.width
        slopes = rng.normal(0.0, cfg.slope_scale, size=w)
        centres = rng.uniform(*X_RANGE, size=w)
        self.w1 = _frozen(slopes[None, :])
        self.b1 = _frozen(-slopes * centres)
        self.w2 = _frozen(np.eye(w) + rng.normal(0.0, cfg.mix_gain / math.sqrt(w), size=(w, w)))
        self.b2 = _frozen(rng.normal(0.0, 0.1, size=w))

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)[..., None]
        h = np.tanh(x @ self.w1 + self.b1)
        h = np.tanh(h @ self.w2 + self.b2)
        return np.concatenate([h, np.ones(h.shape[:-1] + (1,))], -1)


def _ridge_fit(phi, y, lam):
    d = phi.shape[1]
    return np.linalg.solve(phi.T @ phi + lam * len(y) * np.eye(d), phi.T @ y)


class AnchorGrid:
    """Lazily trained, memoized many-shot regressors on a (a, v, b) lattice."""

    def __init__(self, cfg: AnchorConfig | None = None):
        self.cfg = cfg or AnchorConfig()
        self.features = RandomTanhFeatures(self.cfg)
        self.cache: dict = {}
        self.trained = 0
        self._locks: dict = {}
        self._guard = threading.Lock()
        step = self.cfg.step
        self.ranges = (AMPLITUDE_RANGE, FREQUENCY_RANGE, PHASE_RANGE)
        self.shape = tuple(int(math.ceil((hi - lo) / step - 1e-9)) for lo, hi in self.ranges)

    def cell_index(self, a: float, v: float, b: float) -> tuple:
        out = []
        for value, (lo, hi), n in zip((a, v, b), self.ranges, self.shape):
            if not lo <= value <= hi:
                raise EpisodeError(f"sine parameter {value} outside [{lo}, {hi}]")
            out.append(min(int(math.floor((value - lo) / self.cfg.step)), n - 1))
        return tuple(out)

    def cell_indices(self, a, v, b) -> np.ndarray:
        """Vectorised ``cell_index`` over arrays of parameters."""
        cols = []
        for value, (lo, hi), n in zip((a, v, b), self.ranges, self.shape):
            value = np.asarray(value)
            if np.any(value < lo) or np.any(value > hi):
                raise EpisodeError(f"sine parameters outside [{lo}, {hi}]")
            cols.append(np.minimum(np.floor((value - lo) / self.cfg.step).astype(int), n - 1))
        return np.stack(cols, -1)

    def cell_center(self, cell) -> SineTaskParams:
        vals = []
        for i, (lo, hi) in zip(cell, self.ranges):
            left = lo + i * self.cfg.step
            vals.append((left + min(left + self.cfg.step, hi)) / 2)
        return SineTaskParams(*vals)

    def _lock(self, cell):
        with self._guard:
            return self._locks.setdefault(cell, threading.Lock())

    def regressor(self, cell) -> AnchorRegressor:
        cell = tuple(int(c) for c in cell)
        hit = self.cache.get(cell)
        if hit is not None:
            return hit
        with self._lock(cell):
            hit = self.cache.get(cell)
            if hit is None:
                hit = self._train(cell)
                self.cache[cell] = hit
                self.trained += 1
        return hit

    def anchor_samples(self, cell, rng):
        p = self.cell_center(cell)
        x = rng.uniform(*X_RANGE, size=self.cfg.samples)
        y = p.a * np.sin(p.v * x + p.b) + p.noise_sigma * rng.standard_normal(x.shape)
        return x, y

    def _train(self, cell) -> AnchorRegressor:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, *cell]))
        x, y = self.anchor_samples(cell, rng)
        phi = self.features(x)
        folds = np.array_split(rng.permutation(len(x)), self.cfg.folds)
        best, best_err = None, np.inf
        for lam in self.cfg.ridge_grid:
            err = 0.0
            for k in range(self.cfg.folds):
                val = folds[k]
                tr = np.concatenate([folds[j] for j in range(self.cfg.folds) if j != k])
                w = _ridge_fit(phi[tr], y[tr], lam)
                err += np.mean((phi[val] @ w - y[val]) ** 2)
            if err < best_err:
                best, best_err = lam, err
        return AnchorRegressor(self.features, _frozen(_ridge_fit(phi, y, best)), best, cell)

    def weights_for(self, cells) -> np.ndarray:
        return np.stack([self.regressor(c).weights for c in map(tuple, cells)])

    def predict_batch(self, a, v, b, x) -> np.ndarray:
        """Teacher predictions for stacked tasks: x is (T, N)."""
        w = self.weights_for(self.cell_indices(a, v, b))
        return (self.features(x) @ w[:, :, None])[..., 0]

    def save(self, path):
        cells = sorted(self.cache)
        fields = {
            "config": ";".join(f"{k}={v}" for k, v in self.cfg.__dict__.items()
                               if k != "ridge_grid"),
            "ridge_grid": np.array(self.cfg.ridge_grid),
            "cells": np.array(cells, dtype=np.int64).reshape(-1, 3),
            "weights": np.array([self.cache[c].weights for c in cells]).reshape(len(cells), -1),
            "ridge": np.array([self.cache[c].ridge for c in cells]),
        }
        write_container(path, "AnchorGrid", fields)

    @classmethod
    def load(cls, path) -> "AnchorGrid":
        _, f = read_container(path, "AnchorGrid")
        kwargs = {}
        defaults = AnchorConfig()
        for item in f["config"].split(";"):
            k, v = item.split("=", 1)
            kwargs[k] = type(getattr(defaults, k))(v)
        kwargs["ridge_grid"] = tuple(float(r) for r in f["ridge_grid"])
        grid = cls(AnchorConfig(**kwargs))
        for cell, w, r in zip(f["cells"], f["weights"], f["ridge"]):
            cell = tuple(int(c) for c in cell)
            grid.cache[cell] = AnchorRegressor(grid.features, _frozen(w), float(r), cell)
        return grid


def build_anchor_grid(cfg: AnchorConfig | None = None) -> AnchorGrid:
    return AnchorGrid(cfg)


def lookup_anchor_teacher(grid: AnchorGrid, params: SineTaskParams) -> Teacher:
    cell = grid.cell_index(params.a, params.v, params.b)
    return Teacher("anchor", 1, {"regressor": grid.regressor(cell)})


# querying ---------------------------------------------------------------------------

def query_teacher(teacher: Teacher, x, mode="vanilla", rng=None, sigma: float = 0.1,
                  clean=None, phase: str = "train"):
    """Teacher scores for ``x`` under a query mode.

    ``mode`` may be a mode name or any object with ``mode`` and ``sigma``
    attributes. Non-vanilla modes are meta-training only.
    """
    if not isinstance(mode, str):
        sigma = getattr(mode, "sigma", sigma)
        mode = mode.mode
    if mode not in QUERY_MODES:
        raise ConfigError(f"unknown query mode {mode!r}")
    if phase != "train" and mode != "vanilla":
        raise ProtocolError(f"query mode {mode!r} is only allowed during meta-training")
    if mode == "vanilla":
        return teacher.logits(x)
    if mode == "strengthen":
        if teacher.kind == "anchor":
            return teacher.logits(x)  # anchors are already many-shot fits; nothing to strengthen
        if clean is None:
            raise ConfigError("strengthen mode needs the clean rendition of the queries")
        return teacher.logits(clean)
    if rng is None:
        raise ConfigError("weaken mode needs an rng stream")
    x = np.asarray(x, dtype=np.float64)
    return teacher.logits(x + sigma * rng.standard_normal(x.shape))
