"""Meta-test protocol: per-task scores, means and 95% confidence intervals."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lastshot.numkit import functional as F
from lastshot.rng import stream
from lastshot.taskgen import (
    ClassWorld,
    SineTaskParams,
    sample_classification_episode,
    sample_regression_episode,
    sample_sine_task,
)

CHUNK = 50  # tasks per batched forward pass; fixed so results never depend on workers


@dataclass
class EvalReport:
    metric: str  # accuracy | mse
    mean: float
    ci95: float
    n_tasks: int
    values: np.ndarray | None = None
    config_hash: str = ""
    run_id: str = ""
    learner: str = ""
    teacher: str = ""
    C: int = 0
    K: int = 0
    Q_train: int = 0
    lam: float = float("nan")
    tau: float = float("nan")
    mode: str = ""
    split: str = ""
    seed: int = 0
    wall_ms: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, metric: str, values, keep: bool = True, **meta) -> "EvalReport":
        values = np.asarray(values, dtype=np.float64)
        if values.size < 1:
            raise ValueError("an evaluation needs at least one task")
        mean, ci = summarize(values)
        return cls(metric, mean, ci, int(values.size), values if keep else None, **meta)


def summarize(values) -> tuple:
    """Mean and 1.96 * sample std / sqrt(n); the interval is 0 for a single task."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    sd = float(np.std(values, ddof=1)) if n > 1 else 0.0
    return float(np.mean(values)), 1.96 * sd / math.sqrt(n)


def _chunks(n_tasks):
    return [range(s, min(s + CHUNK, n_tasks)) for s in range(0, n_tasks, CHUNK)]


def _map_chunks(fn, n_tasks, workers):
    chunks = _chunks(n_tasks)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def classification_episodes(world: ClassWorld, split, C, K, Q, seed, indices, label="eval"):
    return [sample_classification_episode(world, split, C, K, Q, stream(seed, label, split, C, K, i))
            for i in indices]


def stack_episodes(eps):
    return (np.stack([e.support_x for e in eps]), np.stack([e.support_y for e in eps]),
            np.stack([e.query_x for e in eps]), np.stack([e.query_y for e in eps]))


def evaluate_classification(predict, world: ClassWorld, split: str = "novel", C: int = 5,
                            K: int = 1, Q: int = 15, n_tasks: int = 2000, seed: int = 0,
                            workers: int = 1, keep_values: bool = True, label: str = "eval",
                            **meta) -> EvalReport:
    """Mean per-task query accuracy.

    ``predict(support_x, support_y, query_x)`` takes stacked episodes and
    returns (T, N, C) scores; a ``Learner`` or anything with ``.predict`` works.
    Task ``i`` always comes from the stream keyed by its index.
    """
    fn = predict.predict if hasattr(predict, "predict") else predict
    start = time.perf_counter()

    def run(idx):
        eps = classification_episodes(world, split, C, K, Q, seed, idx, label)
        sx, sy, qx, qy = stack_episodes(eps)
        scores = np.asarray(fn(sx, sy, qx))
        return np.mean(np.argmax(scores, -1) == qy, axis=-1)

    acc = _map_chunks(run, n_tasks, workers)
    wall = (time.perf_counter() - start) * 1000
    meta.setdefault("C", C)
    meta.setdefault("K", K)
    return EvalReport.from_values("accuracy", acc, keep_values, split=split, seed=seed,
                                  wall_ms=wall, **meta)


def regression_tasks(K, n_tasks_indices, seed, Q=100, label="eval-reg"):
    eps = []
    for i in n_tasks_indices:
        rng = stream(seed, label, K, i)
        eps.append(sample_regression_episode(sample_sine_task(rng), K, Q, rng))
    return eps


def evaluate_regression(predict, K: int = 5, n_tasks: int = 1000, seed: int = 0, Q: int = 100,
                        workers: int = 1, keep_values: bool = True, label: str = "eval-reg",
                        task_filter=None, **meta) -> EvalReport:
    """Mean per-task MSE over ``Q`` query points of freshly drawn sine tasks.

    ``predict(support_x, support_y, query_x)`` maps (T, K), (T, K), (T, Q) to
    (T, Q) predictions. ``task_filter`` optionally rewrites task parameters
    (used to probe fixed curves).
    """
    fn = predict.predict if hasattr(predict, "predict") else predict
    start = time.perf_counter()

    def run(idx):
        eps = regression_tasks(K, idx, seed, Q, label)
        if task_filter is not None:
            eps = [task_filter(e, stream(seed, label, "filter", K, i)) for e, i in zip(eps, idx)]
        sx = np.stack([e.support_x for e in eps])
        sy = np.stack([e.support_y for e in eps])
        qx = np.stack([e.query_x for e in eps])
        qy = np.stack([e.query_y for e in eps])
        pred = np.asarray(fn(sx, sy, qx))
        return np.mean((pred - qy) ** 2, axis=-1)

    mse = _map_chunks(run, n_tasks, workers)
    wall = (time.perf_counter() - start) * 1000
    meta.setdefault("K", K)
    meta.setdefault("C", 1)
    return EvalReport.from_values("mse", mse, keep_values, split="test", seed=seed,
                                  wall_ms=wall, **meta)


def fixed_curve(params: SineTaskParams):
    """A ``task_filter`` that swaps every task for the given curve (fresh x and noise)."""

    def swap(ep, rng):
        return sample_regression_episode(params, len(ep.support_x), len(ep.query_x), rng)

    return swap


def ensemble_eval(scores_a, scores_b, query_y) -> float:
    """Accuracy of the argmax of the averaged softmax probabilities."""
    p = (F.softmax(np.asarray(scores_a, dtype=np.float64), -1)
         + F.softmax(np.asarray(scores_b, dtype=np.float64), -1)) / 2
    return float(np.mean(np.argmax(p, -1) == np.asarray(query_y)))


def evaluate_ensemble(learner_a, learner_b, world: ClassWorld, split="novel", C=5, K=1, Q=15,
                      n_tasks=2000, seed=0, workers=1, **meta) -> EvalReport:
    fa = learner_a.predict if hasattr(learner_a, "predict") else learner_a
    fb = learner_b.predict if hasattr(learner_b, "predict") else learner_b
    start = time.perf_counter()

    def run(idx):
        eps = classification_episodes(world, split, C, K, Q, seed, idx)
        sx, sy, qx, qy = stack_episodes(eps)
        a, b = fa(sx, sy, qx), fb(sx, sy, qx)
        return np.array([ensemble_eval(a[i], b[i], qy[i]) for i in range(len(eps))])

    acc = _map_chunks(run, n_tasks, workers)
    meta.setdefault("C", C)
    meta.setdefault("K", K)
    return EvalReport.from_values("accuracy", acc, split=split, seed=seed,
                                  wall_ms=(time.perf_counter() - start) * 1000, **meta)
