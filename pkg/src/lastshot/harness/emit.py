"""Result emission: results.csv, manifest.txt and plotdata.tsv."""
from __future__ import annotations

import csv
import math
from pathlib import Path

from lastshot.harness.config import RunConfig, content_hash
from lastshot.harness.evaluate import EvalReport

COLUMNS = ("run_id", "config_hash", "learner", "teacher", "C", "K", "Q_train", "lambda", "tau",
           "mode", "split", "metric", "mean", "ci95", "n_tasks", "seed", "wall_ms")
FLOAT_COLUMNS = ("lambda", "tau", "mean", "ci95", "wall_ms")
INT_COLUMNS = ("C", "K", "Q_train", "n_tasks", "seed")


class EmitError(OSError):
    pass


def fmt_float(x) -> str:
    """17 significant digits: parses back to the identical double."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def report_row(r: EvalReport) -> dict:
    return {
        "run_id": r.run_id, "config_hash": r.config_hash, "learner": r.learner,
        "teacher": r.teacher, "C": r.C, "K": r.K, "Q_train": r.Q_train,
        "lambda": fmt_float(r.lam), "tau": fmt_float(r.tau), "mode": r.mode, "split": r.split,
        "metric": r.metric, "mean": fmt_float(r.mean), "ci95": fmt_float(r.ci95),
        "n_tasks": r.n_tasks, "seed": r.seed, "wall_ms": fmt_float(r.wall_ms),
    }


def _open(path, mode):
    try:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, encoding="utf-8", newline="")
    except OSError as exc:
        raise EmitError(f"cannot write {path}: {exc}") from exc


def emit_results(reports, path, plot_path=None, x_field: str | None = None):
    """Write one CSV row per report; optionally the (series, x, mean, ci95) plot data."""
    reports = list(reports)
    with _open(path, "w") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(report_row(r))
    if plot_path is not None:
        write_plotdata(reports, plot_path, x_field or "K")
    return Path(path)


def read_results(path) -> list:
    """Parse a results.csv back into dicts with numeric columns restored."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            for k in FLOAT_COLUMNS:
                row[k] = float(row[k])
            for k in INT_COLUMNS:
                row[k] = int(row[k])
            out.append(row)
    return out


def series_name(r: EvalReport) -> str:
    if r.teacher and r.teacher != "none":
        return f"{r.learner}+lastshot({r.teacher})"
    return r.learner


_X_FIELDS = {"K": "K", "Q_train": "Q_train", "lambda": "lam", "C": "C"}


def write_plotdata(reports, path, x_field: str = "K"):
    """Tab-separated series for sweep figures: one series per method, rows sorted by x."""
    attr = _X_FIELDS.get(x_field, x_field)
    rows = sorted(((series_name(r), float(getattr(r, attr)), r.mean, r.ci95) for r in reports),
                  key=lambda t: (t[0], t[1]))
    with _open(path, "w") as fh:
        fh.write(f"series\t{x_field}\tmean\tci95\n")
        for name, x, m, c in rows:
            fh.write(f"{name}\t{fmt_float(x)}\t{fmt_float(m)}\t{fmt_float(c)}\n")
    return Path(path)


def write_manifest(cfg: RunConfig, path, extra: dict | None = None) -> str:
    """All resolved keys (plus ``extra`` facts), closed by the git-style hash of the body."""
    body = cfg.text()
    for k in sorted(extra or {}):
        body += f"{k} = {extra[k]}\n"
    digest = content_hash(body.encode("utf-8"))
    with _open(path, "w") as fh:
        fh.write(body)
        fh.write(f"content_hash = {digest}\n")
    return digest


def read_plotdata(path) -> dict:
    """{series: [(x, mean, ci95), ...]} from a plotdata.tsv file."""
    out: dict = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        next(reader, None)
        for name, x, m, c in reader:
            out.setdefault(name, []).append((float(x), float(m), float(c)))
    return out


def render_plot(plot_path, image_path, x_label: str = "K", y_label: str = "mean"):
    """Line plot with 95% interval bands, one line per series."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for name, pts in read_plotdata(plot_path).items():
        x, m, c = (list(v) for v in zip(*pts))
        ax.errorbar(x, m, yerr=c, marker="o", capsize=3, label=name)
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    ax.legend(fontsize="small")
    fig.tight_layout()
    try:
        fig.savefig(image_path, dpi=120)
    except OSError as exc:
        raise EmitError(f"cannot write {image_path}: {exc}") from exc
    finally:
        plt.close(fig)
    return Path(image_path)
