"""Training objectives that pair query labels with teacher predictions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lastshot.errors import ConfigError, EpisodeError, ShapeError
from lastshot.numkit import functional as F
from lastshot.numkit import tensor as T

QUERY_MODES = ("vanilla", "strengthen", "weaken")


@dataclass
class DistillConfig:
    tau: float = 4.0
    lam: float = 0.01
    mode: str = "vanilla"
    sigma: float = 0.1

    def validate(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.mode not in QUERY_MODES:
            raise ConfigError(f"unknown query mode {self.mode!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        return self


def kl_distill_loss(student_logits, teacher_logits, tau: float):
    """KL(softmax(teacher / tau) || softmax(student)) per row.

    Temperature smooths the teacher only. Gradients flow into the student
    logits; the teacher side is a constant.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    psi = T.as_tensor(student_logits)
    target = np.asarray(teacher_logits.data if isinstance(teacher_logits, T.Tensor)
                        else teacher_logits, dtype=np.float64)
    if target.shape != psi.shape:
        raise ShapeError(f"student logits {psi.shape} vs teacher logits {target.shape}")
    log_p = F.log_softmax(target / tau)
    p = np.exp(log_p)
    plogp = np.where(p > 0, p * log_p, 0.0).sum(-1)
    return T.Tensor(plogp) - (T.log_softmax(psi, -1) * T.Tensor(p)).sum(-1)


def cross_entropy_rows(logits, labels):
    logits = T.as_tensor(logits)
    onehot = np.eye(logits.shape[-1])[np.asarray(labels)]
    return T.logsumexp(logits, -1) - (logits * T.Tensor(onehot)).sum(-1)


def _teacher_logits(teacher, x, mode_cfg, phase, rng, clean):
    from lastshot.teachers import query_teacher

    if isinstance(teacher, (list, tuple)):
        x = np.asarray(x)
        rows = []
        for i, t in enumerate(teacher):
            rows.append(query_teacher(t, x[i], mode_cfg, rng, phase=phase,
                                      clean=None if clean is None else clean[i]))
        return np.stack(rows)
    return query_teacher(teacher, x, mode_cfg, rng, phase=phase, clean=clean)


def lastshot_episode_loss(generated, teacher, query_x, query_y, cfg: DistillConfig,
                          rng: np.random.Generator | None = None, query_clean=None):
    """Mean over queries of KL(teacher || student) + lambda * CE(student, y).

    ``teacher`` is one Teacher, or a sequence of Teachers for stacked episodes.
    """
    cfg.validate()
    query_x = np.asarray(query_x, dtype=np.float64)
    psi = generated.logits(query_x)
    n_way = psi.shape[-1]
    teachers = teacher if isinstance(teacher, (list, tuple)) else [teacher]
    for t in teachers:
        if t.n_way != n_way:
            raise EpisodeError(f"teacher is {t.n_way}-way but the episode is {n_way}-way")
    ce = cross_entropy_rows(psi, query_y).mean()
    if cfg.mode == "weaken":
        if rng is None:
            raise ConfigError("weaken mode needs an rng stream")
        noisy = query_x + cfg.sigma * rng.standard_normal(query_x.shape)
        psi_d = generated.logits(noisy)
        target = _teacher_logits(teacher, noisy, DistillConfig(cfg.tau, cfg.lam, "vanilla"),
                                 "train", rng, None)
    else:
        psi_d = psi
        target = _teacher_logits(teacher, query_x, cfg, "train", rng, query_clean)
    kl = kl_distill_loss(psi_d, target, cfg.tau).mean()
    return kl + cfg.lam * ce


def distill_weights(teacher_pred, query_y):
    """Softmax over the query set of -(h*(x) - y)^2."""
    err = -np.square(np.asarray(teacher_pred) - np.asarray(query_y))
    return F.softmax(err, axis=-1)


def weighted_square_distill(prediction, teacher_pred, query_y):
    """sum_q w_q (h*(x_q) - yhat(x_q))^2 per episode, weights from ``distill_weights``."""
    prediction = T.as_tensor(prediction)
    teacher_pred = np.asarray(teacher_pred, dtype=np.float64)
    if prediction.shape[-1] == 0:
        raise EpisodeError("empty query set")
    if teacher_pred.shape != prediction.shape:
        raise ShapeError(f"prediction {prediction.shape} vs teacher {teacher_pred.shape}")
    w = distill_weights(teacher_pred, query_y)
    return (T.Tensor(w) * T.square(T.Tensor(teacher_pred) - prediction)).sum(-1)


def regression_lastshot_loss(prediction, teacher_pred, query_y, lam: float):
    """Episode-mean weighted square distillation plus lambda * query MSE."""
    prediction = T.as_tensor(prediction)
    mse = T.square(prediction - T.Tensor(np.asarray(query_y))).mean(-1)
    return (weighted_square_distill(prediction, teacher_pred, query_y) + lam * mse).mean()


def model_regression_loss(phi, phi_star):
    """Squared Euclidean distance between two classifiers' parameters."""
    phi = T.as_tensor(phi)
    phi_star = T.as_tensor(phi_star)
    if phi.shape != phi_star.shape:
        raise ShapeError(f"parameter layouts differ: {phi.shape} vs {phi_star.shape}")
    return T.square(phi - phi_star).sum()
