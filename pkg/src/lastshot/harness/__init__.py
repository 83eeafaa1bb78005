"""Experiment harness: configuration, meta-training, evaluation, sweeps and emission."""
from lastshot.harness.config import RunConfig, content_hash, load_config, parse_config_text
from lastshot.harness.emit import emit_results, read_results, write_manifest, write_plotdata
from lastshot.harness.evaluate import (
    EvalReport,
    ensemble_eval,
    evaluate_classification,
    evaluate_ensemble,
    evaluate_regression,
    summarize,
)
from lastshot.harness.sweep import (
    LAMBDA_GRID,
    QUERY_GRID,
    SHOT_GRID,
    budget_queries,
    run_single,
    run_sweep,
)
from lastshot.harness.train import (
    Lab,
    TrainedLearner,
    anchor_grid_for,
    meta_train,
    prepare_lab,
    pt_emb_predictor,
)

__all__ = [
    "RunConfig", "content_hash", "load_config", "parse_config_text",
    "emit_results", "read_results", "write_manifest", "write_plotdata",
    "EvalReport", "ensemble_eval", "evaluate_classification", "evaluate_ensemble",
    "evaluate_regression", "summarize",
    "LAMBDA_GRID", "QUERY_GRID", "SHOT_GRID", "budget_queries", "run_single", "run_sweep",
    "Lab", "TrainedLearner", "anchor_grid_for", "meta_train", "prepare_lab", "pt_emb_predictor",
]
