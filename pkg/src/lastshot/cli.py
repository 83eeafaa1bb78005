"""Command-line entry point: ``lastshot pretrain | train | eval | sweep | repro-regression``."""
from __future__ import annotations

import functools
import logging
import math
from pathlib import Path

import click

from lastshot.container import mlp_fields, mlp_from_fields, read_container, write_container
from lastshot.errors import ConfigError
from lastshot.harness.config import load_config
from lastshot.harness.emit import emit_results, render_plot, write_manifest
from lastshot.harness.sweep import (
    SWEEPS,
    evaluate_trained,
    pt_emb_report,
    regression_reproduction,
    run_single,
    run_sweep,
    sweep_x_field,
)
from lastshot.harness.train import Lab, anchor_grid_for, prepare_lab
from lastshot.learners import Learner
from lastshot.pretrain import PretrainedModel, extract_features
from lastshot.rng import stream
from lastshot.taskgen import build_class_world, enumerate_base_data

log = logging.getLogger("lastshot")

# CLI flag -> config keys it sets
FLAG_KEYS = {
    "seed": ("run.seed",),
    "learner": ("learner.kind",),
    "teacher": ("teacher.kind",),
    "lam": ("distill.lambda",),
    "tau": ("distill.tau",),
    "shots": ("train.shots", "eval.shots"),
    "ways": ("train.ways", "eval.ways"),
    "queries": ("train.queries",),
    "tasks": ("eval.tasks",),
    "workers": ("run.workers",),
    "task": ("run.task",),
}


def common_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="Flat key = value config file."),
        click.option("--task", type=click.Choice(["classification", "regression"]), default=None),
        click.option("--seed", type=int, default=None),
        click.option("--learner", type=click.Choice(["protonet", "maml", "protomaml", "ridge",
                                                     "kernel"]), default=None),
        click.option("--teacher", type=click.Choice(["none", "nc", "lr", "masked", "anchor"]),
                     default=None),
        click.option("--lambda", "lam", type=float, default=None),
        click.option("--tau", type=float, default=None),
        click.option("--shots", type=int, default=None, help="Train and test K."),
        click.option("--ways", type=int, default=None, help="Train and test C."),
        click.option("--queries", type=int, default=None, help="Training queries per class."),
        click.option("--tasks", type=int, default=None, help="Meta-test tasks."),
        click.option("--workers", type=int, default=None),
        click.option("--set", "extra", multiple=True, metavar="KEY=VALUE",
                     help="Any config key; repeatable."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/latest",
                     show_default=True),
        click.option("--pretrained", "pretrained_path", type=click.Path(dir_okay=False),
                     default=None, help="Pre-trained model container to load."),
        click.option("--anchor-cache", "anchor_cache", type=click.Path(dir_okay=False),
                     default=None, help="Anchor-grid container to reuse and update."),
        click.option("-v", "--verbose", is_flag=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def resolve_config(params: dict, task_default: str | None = None):
    overrides = {}
    for flag, keys in FLAG_KEYS.items():
        value = params.get(flag)
        if value is not None:
            for k in keys:
                overrides[k] = value
    for item in params.get("extra") or ():
        if "=" not in item:
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--set")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    try:
        return load_config(params.get("config_path"), overrides, task_default)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc


def with_config(task_default=None):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(**params):
            logging.basicConfig(level=logging.INFO if params.get("verbose") else logging.WARNING,
                                format="%(levelname)s %(name)s: %(message)s")
            cfg = resolve_config(params, task_default)
            out = Path(params["out_dir"])
            out.mkdir(parents=True, exist_ok=True)
            return fn(cfg, out, params)

        return wrapper

    return deco


def load_lab(cfg, pretrained_path) -> Lab:
    if not pretrained_path:
        return prepare_lab(cfg)
    seed = cfg["run.seed"]
    world = build_class_world(cfg.world(), stream(seed, "world"))
    pool = enumerate_base_data(world, cfg["world.per_class"], stream(seed, "pool"))
    model = PretrainedModel.load(pretrained_path)
    if model.feature_cache is None or len(model.feature_cache) != len(pool):
        extract_features(model, pool)
    return Lab(world, pool, model)


def grid_for(cfg, anchor_cache):
    if cfg.task != "regression":
        return None
    if cfg["teacher.kind"] != "anchor" and not anchor_cache:
        return None
    return anchor_grid_for(cfg, anchor_cache)


def finish(out: Path, cfg, reports, extra=None, x_field=None, plot=False):
    emit_results(reports, out / "results.csv",
                 plot_path=out / "plotdata.tsv" if x_field else None, x_field=x_field)
    digest = write_manifest(cfg, out / "manifest.txt", extra)
    if plot and x_field:
        try:
            render_plot(out / "plotdata.tsv", out / "plot.png", x_label=x_field,
                        y_label=reports[0].metric if reports else "mean")
        except ImportError:
            log.warning("matplotlib unavailable; skipped plot.png")
    for r in reports:
        click.echo(f"{r.run_id:<40} {r.learner:>9} {r.teacher:>7} C={r.C} K={r.K:<3} "
                   f"{r.metric} {r.mean:.4f} +- {r.ci95:.4f} (n={r.n_tasks})")
    click.echo(f"wrote {out / 'results.csv'} (manifest {digest[:12]})")


@click.group()
@click.version_option(package_name="lastshot")
def main():
    """Few-shot meta-learning distilled from many-shot teachers, on synthetic worlds and sine regression."""


@main.command()
@common_options
@with_config("classification")
def pretrain(cfg, out, params):
    """Pre-train the base classifier, cache its features, report PT-EMB."""
    lab = prepare_lab(cfg)
    path = out / "pretrained.bin"
    lab.pretrained.save(path)
    reports = [pt_emb_report(cfg, lab, variant=v) for v in ("none", "center_l2")]
    finish(out, cfg, reports, {"pretrained_path": str(path),
                                "pretrain.best_val_acc":
                                    lab.pretrained.history.get("best_val_acc", math.nan)})


@main.command()
@common_options
@with_config()
def train(cfg, out, params):
    """Meta-train one learner, save it and meta-test it."""
    lab = load_lab(cfg, params["pretrained_path"]) if cfg.task == "classification" else None
    grid = grid_for(cfg, params["anchor_cache"])
    trained, report = run_single(cfg, lab, grid, label="train")
    write_container(out / "learner.bin", "Learner", {
        **mlp_fields("learner", trained.learner.params),
        "kind": cfg["learner.kind"], "task": cfg.task,
    })
    if grid is not None and params["anchor_cache"]:
        grid.save(params["anchor_cache"])
    extra = {"best_iteration": trained.history.get("best_iteration"),
             "train_seconds": round(trained.history.get("train_seconds", 0.0), 3)}
    if "anchors_trained" in trained.history:
        extra["anchors_trained"] = trained.history["anchors_trained"]
    for i, note in enumerate(trained.notes):
        extra[f"note.{i}"] = note
    finish(out, cfg, [report], extra)


@main.command(name="eval")
@common_options
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="learner.bin from `train`; PT-EMB is evaluated when omitted.")
@with_config()
def evaluate(cfg, out, params):
    """Meta-test a saved learner (or PT-EMB, raw and centred+L2, when --model is omitted)."""
    lab = load_lab(cfg, params["pretrained_path"]) if cfg.task == "classification" else None
    if params.get("model_path"):
        _, f = read_container(params["model_path"], "Learner")
        learner = Learner(cfg.learner(), mlp_from_fields("learner", f), f["task"],
                          cfg["eval.ways"])
        reports = [evaluate_trained(learner, cfg, lab, "eval")]
    elif lab is None:
        raise click.ClickException("regression evaluation needs --model")
    else:
        reports = [pt_emb_report(cfg, lab, variant=v) for v in ("none", "center_l2")]
    finish(out, cfg, reports)


@main.command()
@click.argument("kind", type=click.Choice(SWEEPS))
@common_options
@click.option("--plot/--no-plot", default=True, help="Render plot.png from plotdata.tsv.")
@with_config()
def sweep(cfg, out, params):
    """Shot, query-size or lambda sweep."""
    kind = click.get_current_context().params["kind"]
    lab = load_lab(cfg, params["pretrained_path"]) if cfg.task == "classification" else None
    kwargs = {}
    if kind == "lambda" and cfg.task == "regression":
        kwargs["grid"] = anchor_grid_for(cfg, params["anchor_cache"])
    reports = run_sweep(kind, cfg, lab, **kwargs)
    if "grid" in kwargs and params["anchor_cache"]:
        kwargs["grid"].save(params["anchor_cache"])
    finish(out, cfg, reports, {"sweep": kind}, x_field=sweep_x_field(kind), plot=params["plot"])


@main.command(name="repro-regression")
@common_options
@click.option("--iterations", type=int, default=None,
              help="Meta-training iterations per run (default: the full 40,000).")
@with_config("regression")
def repro_regression(cfg, out, params):
    """All sine-regression learners at K=5 and K=50 (hours at the full budget)."""
    if cfg.task != "regression":
        raise click.ClickException("repro-regression runs the sine task; drop --task")
    if params.get("iterations") is not None:
        cfg = cfg.override({"train.iterations": params["iterations"]})
    grid = anchor_grid_for(cfg, params["anchor_cache"])
    done = []

    def checkpoint(report):
        done.append(report)
        emit_results(done, out / "results.csv")
        if params["anchor_cache"]:
            grid.save(params["anchor_cache"])

    reports = regression_reproduction(cfg, grid=grid, on_report=checkpoint)
    finish(out, cfg, reports, {"anchors_trained": grid.trained})


if __name__ == "__main__":
    main()
