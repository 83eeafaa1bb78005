"""Single runs and the shot / query-size / lambda sweeps."""
from __future__ import annotations

import logging
import math
import time

from lastshot.errors import ConfigError
from lastshot.harness.config import RunConfig
from lastshot.harness.evaluate import EvalReport, evaluate_classification, evaluate_regression
from lastshot.harness.train import Lab, meta_train, prepare_lab, pt_emb_predictor

log = logging.getLogger(__name__)

SHOT_GRID = (1, 5, 10, 20, 30, 50)
QUERY_GRID = (1, 5, 50)
LAMBDA_GRID = (0.0, 0.001, 0.01, 0.1, 1.0, 10.0)
EPISODE_BUDGET = 300  # points per training episode, C * (K + Q)
SWEEPS = ("shot", "query_size", "lambda")


def budget_queries(C: int, K: int, Q: int, budget: int = EPISODE_BUDGET) -> int:
    """Largest per-class query count <= Q with C * (K + Q) <= budget."""
    q = min(Q, budget // C - K)
    if q < 1:
        raise ConfigError(f"{C}-way {K}-shot episodes leave no room for queries under {budget}")
    return q


def _meta(cfg: RunConfig, label: str, learner: str | None = None,
          teacher: str | None = None) -> dict:
    teacher = cfg["teacher.kind"] if teacher is None else teacher
    distilled = teacher != "none"
    h = cfg.hash()
    return {
        "config_hash": h,
        "run_id": f"{label}-{h[:10]}" if label else h[:10],
        "learner": cfg["learner.kind"] if learner is None else learner,
        "teacher": teacher,
        "Q_train": cfg["train.queries"],
        "lam": cfg["distill.lambda"] if distilled else math.nan,
        "tau": cfg["distill.tau"] if distilled and cfg.task == "classification" else math.nan,
        "mode": cfg["distill.mode"] if distilled else "none",
    }


def evaluate_trained(trained, cfg: RunConfig, lab: Lab | None = None, label: str = "",
                     shots: int | None = None, split: str | None = None,
                     workers: int | None = None, **meta_over) -> EvalReport:
    """Meta-test a trained learner (or a bare predictor) at ``cfg``'s eval settings."""
    K = cfg["eval.shots"] if shots is None else shots
    workers = cfg["run.workers"] if workers is None else workers
    meta = {**_meta(cfg, label), **meta_over}
    if cfg.task == "regression":
        return evaluate_regression(trained, K=K, n_tasks=cfg["eval.tasks"], seed=cfg["run.seed"],
                                   Q=cfg["eval.queries"], workers=workers, **meta)
    return evaluate_classification(trained, lab.world, split or cfg["eval.split"],
                                   cfg["eval.ways"], K, cfg["eval.queries"], cfg["eval.tasks"],
                                   cfg["run.seed"], workers, **meta)


def run_single(cfg: RunConfig, lab: Lab | None = None, grid=None, label: str = ""):
    """Meta-train at ``cfg`` then meta-test; returns (trained learner, report)."""
    if cfg.task == "classification" and lab is None:
        lab = prepare_lab(cfg)
    start = time.perf_counter()
    trained = meta_train(cfg, lab, grid)
    report = evaluate_trained(trained, cfg, lab, label)
    report.extra["train_seconds"] = time.perf_counter() - start
    report.extra["best_iteration"] = trained.history.get("best_iteration")
    report.extra["notes"] = list(trained.notes)
    return trained, report


def pt_emb_report(cfg: RunConfig, lab: Lab, shots: int | None = None,
                  split: str | None = None, variant: str = "none") -> EvalReport:
    """PT-EMB at ``cfg``'s eval settings; ``variant`` picks the feature preprocessing."""
    pred = pt_emb_predictor(lab.pretrained, variant)
    name = "pt-emb" if variant == "none" else f"pt-emb+{variant}"
    return evaluate_trained(pred, cfg, lab, name, shots=shots, split=split,
                            learner=name, teacher="none", Q_train=0, lam=math.nan,
                            tau=math.nan, mode="none")


def _with_train_shape(cfg: RunConfig, K: int, Q: int) -> RunConfig:
    return cfg.override({"train.shots": K,
                         "train.queries": budget_queries(cfg["train.ways"], K, Q)})


def shot_sweep(cfg: RunConfig, lab: Lab, shots=SHOT_GRID, teachers=("none", "nc"),
               train_shots=None, select_tasks: int | None = None):
    """Accuracy against test K for PT-EMB and each method.

    Each method is meta-trained once per candidate training K; for every test
    K the candidate with the best validation-split accuracy at that K is
    meta-tested on the evaluation split.
    """
    train_shots = tuple(shots if train_shots is None else train_shots)
    n_select = select_tasks or cfg["train.val_tasks"] or 500
    reports = []
    for K in shots:
        r = pt_emb_report(cfg, lab, shots=K)
        r.Q_train = 0
        reports.append(r)
    for teacher in teachers:
        candidates = {}
        for Kt in train_shots:
            c = _with_train_shape(cfg.override({"teacher.kind": teacher}), Kt,
                                  cfg["train.queries"])
            candidates[Kt] = (c, meta_train(c, lab))
        for K in shots:
            sel = cfg.override({"eval.tasks": n_select, "eval.split": "val"})
            scored = []
            for Kt, (c, trained) in candidates.items():
                val = evaluate_trained(trained, sel.override({"teacher.kind": teacher}), lab,
                                       "select", shots=K, split="val")
                scored.append((val.mean, -Kt, Kt))
            best_Kt = max(scored)[2]
            c, trained = candidates[best_Kt]
            r = evaluate_trained(trained, c, lab, f"shot-{teacher}", shots=K)
            r.extra["train_shots"] = best_Kt
            r.extra["selection"] = {kt: m for m, _, kt in scored}
            reports.append(r)
            log.info("shot sweep %s K=%d (train K=%d): %.4f", teacher, K, best_Kt, r.mean)
    return reports


def query_size_sweep(cfg: RunConfig, lab: Lab, queries=QUERY_GRID, teachers=None):
    teachers = teachers or ("none", cfg["teacher.kind"] if cfg["teacher.kind"] != "none"
                            else "nc")
    reports = []
    for Q in queries:
        for teacher in teachers:
            c = _with_train_shape(cfg.override({"teacher.kind": teacher}), cfg["train.shots"], Q)
            if c["train.queries"] != Q:
                log.warning("query size %d clipped to %d by the episode budget", Q,
                            c["train.queries"])
            reports.append(run_single(c, lab, label=f"query-{Q}-{teacher}")[1])
    return reports


def lambda_sweep(cfg: RunConfig, lab: Lab | None = None, lambdas=LAMBDA_GRID, grid=None):
    """One distilled run per lambda value (the teacher defaults to NC / anchor)."""
    teacher = cfg["teacher.kind"]
    if teacher == "none":
        teacher = "anchor" if cfg.task == "regression" else "nc"
    reports = []
    for lam in lambdas:
        c = cfg.override({"teacher.kind": teacher, "distill.lambda": lam})
        if cfg.task == "classification":
            c = _with_train_shape(c, c["train.shots"], c["train.queries"])
        reports.append(run_single(c, lab, grid, label=f"lambda-{lam:g}")[1])
    return reports


def run_sweep(kind: str, cfg: RunConfig, lab: Lab | None = None, **kwargs):
    """Dispatch to one of the sweeps; returns a list of EvalReports."""
    if kind not in SWEEPS:
        raise ConfigError(f"unknown sweep {kind!r}; choose from {SWEEPS}")
    if cfg.task == "classification" and lab is None:
        lab = prepare_lab(cfg)
    if kind == "shot":
        return shot_sweep(cfg, lab, **kwargs)
    if kind == "query_size":
        return query_size_sweep(cfg, lab, **kwargs)
    return lambda_sweep(cfg, lab, **kwargs)


REGRESSION_METHODS = (("maml", "none"), ("kernel", "none"), ("kernel", "anchor"),
                      ("ridge", "none"), ("ridge", "anchor"))


def regression_reproduction(cfg: RunConfig, shots=(5, 50), methods=REGRESSION_METHODS,
                            grid=None, on_report=None):
    """The sine-regression comparison: every (learner, teacher) pair at every K."""
    reports = []
    for K in shots:
        for learner, teacher in methods:
            c = cfg.override({"learner.kind": learner, "teacher.kind": teacher,
                              "train.shots": K, "eval.shots": K})
            report = run_single(c, grid=grid, label=f"sine-{learner}-{teacher}-{K}")[1]
            reports.append(report)
            if on_report is not None:
                on_report(report)
    return reports


def sweep_x_field(kind: str) -> str:
    return {"shot": "K", "query_size": "Q_train", "lambda": "lambda"}[kind]


__all__ = ["SHOT_GRID", "QUERY_GRID", "LAMBDA_GRID", "EPISODE_BUDGET", "budget_queries",
           "run_single", "evaluate_trained", "pt_emb_report", "shot_sweep", "query_size_sweep",
           "lambda_sweep", "run_sweep", "sweep_x_field", "regression_reproduction",
           "REGRESSION_METHODS"]
