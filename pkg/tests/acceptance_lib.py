"""Run-or-load helpers for the acceptance suite.

Every (config, label) result is cached as JSON under ``results/acceptance``
keyed by the config hash, so the long runs can be produced ahead of time
(``python tests/acceptance_lib.py <criterion>``) and the suite re-reads them.
A cache entry is only ever written by actually running the configuration.
"""
from __future__ import annotations

import json
import math
import os
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
RESULTS = Path(os.environ.get("LASTSHOT_RESULTS", ROOT / "results" / "acceptance"))
LAB_CACHE = ROOT / ".cache"
SEEDS = (0, 1, 2)

sys.path.insert(0, str(ROOT / "src"))

from lastshot.harness.config import RunConfig  # noqa: E402
from lastshot.harness.evaluate import EvalReport  # noqa: E402


def _path(cfg: RunConfig, label: str) -> Path:
    return RESULTS / f"{label}-{cfg.hash()[:16]}.json"


def _to_json(r: EvalReport) -> dict:
    d = {k: getattr(r, k) for k in ("metric", "mean", "ci95", "n_tasks", "config_hash", "run_id",
                                    "learner", "teacher", "C", "K", "Q_train", "lam", "tau",
                                    "mode", "split", "seed", "wall_ms")}
    d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
    d["extra"] = {k: v for k, v in r.extra.items() if k != "selection"}
    return d


def _from_json(d: dict) -> EvalReport:
    d = dict(d)
    extra = d.pop("extra", {})
    for k in ("lam", "tau"):
        if d[k] is None:
            d[k] = math.nan
    return EvalReport(values=None, extra=extra, **d)


def lab_for(cfg: RunConfig):
    from lastshot.harness.train import prepare_lab

    return prepare_lab(cfg, cache_dir=LAB_CACHE)


def cached(cfg: RunConfig, label: str, compute) -> EvalReport:
    """Load the stored report for (cfg, label) or run ``compute()`` and store it."""
    path = _path(cfg, label)
    if path.exists():
        return _from_json(json.loads(path.read_text(encoding="utf-8")))
    start = time.perf_counter()
    report = compute()
    report.extra.setdefault("wall_seconds", time.perf_counter() - start)
    RESULTS.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(_to_json(report), indent=1, default=float), encoding="utf-8")
    tmp.replace(path)
    return report


def cached_list(cfg: RunConfig, label: str, compute) -> list:
    """As :func:`cached` for a computation returning several reports (a sweep)."""
    path = _path(cfg, label)
    if path.exists():
        return [_from_json(d) for d in json.loads(path.read_text(encoding="utf-8"))]
    reports = compute()
    RESULTS.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps([_to_json(r) for r in reports], indent=1, default=float),
                   encoding="utf-8")
    tmp.replace(path)
    return reports


def run(cfg: RunConfig, label: str, grid=None) -> EvalReport:
    from lastshot.harness.sweep import run_single

    def compute():
        lab = lab_for(cfg) if cfg.task == "classification" else None
        return run_single(cfg, lab, grid, label=label)[1]

    return cached(cfg, label, compute)


def pt_emb(cfg: RunConfig, K: int | None = None) -> EvalReport:
    from lastshot.harness.sweep import pt_emb_report

    c = cfg.override({"eval.shots": K}) if K is not None else cfg
    return cached(c, "pt-emb", lambda: pt_emb_report(c, lab_for(c)))


# configurations --------------------------------------------------------------------------

def classification(seed: int, **over) -> RunConfig:
    return RunConfig.defaults().override({"run.seed": seed, **over})


def regression(seed: int = 0, **over) -> RunConfig:
    return RunConfig.defaults("regression").override({"run.seed": seed, **over})


REPRO_TARGETS = {  # (learner, teacher) -> target MSE at K = 5 and K = 50
    ("maml", "none"): (0.693, 0.303),
    ("kernel", "none"): (0.681, 0.299),
    ("kernel", "anchor"): (0.630, 0.294),
    ("ridge", "none"): (0.622, 0.162),
    ("ridge", "anchor"): (0.616, 0.159),
}


def repro_config(learner: str, teacher: str, K: int) -> RunConfig:
    return regression(0, **{"learner.kind": learner, "teacher.kind": teacher,
                            "train.shots": K, "eval.shots": K})


def repro_report(learner, teacher, K) -> EvalReport:
    from lastshot.harness.train import anchor_grid_for

    cfg = repro_config(learner, teacher, K)
    grid = anchor_grid_for(cfg) if teacher == "anchor" else None
    return run(cfg, f"repro-{learner}-{teacher}-{K}", grid)


def shot_sweep_reports(seed: int = 0) -> list:
    from lastshot.harness.sweep import shot_sweep

    cfg = classification(seed)
    return cached_list(cfg, "shot-sweep", lambda: shot_sweep(cfg, lab_for(cfg)))


def lambda_report(seed: int, lam: float) -> EvalReport:
    from lastshot.harness.sweep import lambda_sweep

    cfg = classification(seed, **{"train.shots": 50, "eval.shots": 50})
    return cached(cfg.override({"distill.lambda": lam}), "lambda",
                  lambda: lambda_sweep(cfg, lab_for(cfg), lambdas=(lam,))[0])


def smoke_config(seed: int, teacher: str) -> RunConfig:
    return regression(seed, **{"teacher.kind": teacher, "train.iterations": 5000})


if __name__ == "__main__":
    # pre-compute the long runs, e.g. ``python tests/acceptance_lib.py repro``
    which = sys.argv[1:] or ["repro"]
    if "classification" in which:
        for seed in SEEDS:
            for teacher in ("none", "nc", "lr", "masked"):
                r = run(classification(seed, **{"teacher.kind": teacher}), f"c1shot-{teacher}")
                print(f"seed {seed} {teacher:>6} acc {r.mean:.4f} +- {r.ci95:.4f}", flush=True)
    if "smoke" in which:
        for seed in SEEDS:
            for teacher in ("none", "anchor"):
                from lastshot.harness.train import anchor_grid_for

                c = smoke_config(seed, teacher)
                g = anchor_grid_for(c) if teacher == "anchor" else None
                r = run(c, f"smoke-{teacher}", g)
                print(f"smoke seed {seed} {teacher:>6} mse {r.mean:.4f}", flush=True)
    if "repro" in which:
        for K in (5, 50):
            for learner, teacher in REPRO_TARGETS:
                r = repro_report(learner, teacher, K)
                print(f"repro {learner:>6} {teacher:>6} K={K:<2} mse {r.mean:.4f} "
                      f"+- {r.ci95:.4f}", flush=True)
