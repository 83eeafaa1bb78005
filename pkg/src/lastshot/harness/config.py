"""Run configuration: flat ``key = value`` files, CLI overrides, manifests and hashes."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from lastshot.errors import ConfigError
from lastshot.learners import LearnerConfig
from lastshot.objectives import DistillConfig
from lastshot.pretrain import PretrainConfig
from lastshot.taskgen import WorldConfig
from lastshot.teachers import AnchorConfig

TEACHERS = ("none", "nc", "lr", "masked", "anchor")

# key -> (default, parser). Classification defaults are the desk-scale recipe;
# ``regression_defaults`` swaps in the sine-regression recipe.
_SCHEMA: dict = {}


def _key(name, default, kind=None):
    _SCHEMA[name] = (default, kind or type(default))


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _int_tuple(v):
    if isinstance(v, tuple):
        return v
    return tuple(int(p) for p in str(v).split(",") if p.strip())


_key("run.task", "classification", str)
_key("run.seed", 0)
_key("run.workers", 1)
_key("run.label", "", str)

_w = WorldConfig()
for _name in ("latent_dim", "obs_dim", "num_classes", "num_base", "num_val", "num_novel",
              "sigma", "mixer", "mixer_hidden", "mixer_gain", "mixer_condition",
              "clean_shrink"):
    _key(f"world.{_name}", getattr(_w, _name))
_key("world.per_class", 600)

_p = PretrainConfig()
_key("pretrain.hidden", _p.hidden, _int_tuple)
for _name in ("feat_dim", "epochs", "batch", "lr", "momentum", "weight_decay", "decay_at",
              "val_tasks", "val_queries"):
    _key(f"pretrain.{_name}", getattr(_p, _name))

_key("learner.kind", "protonet", str)
_key("learner.alpha", 0.01)
_key("learner.inner_steps", 1)
_key("learner.rho", 1.0)
_key("learner.meta_grad", "auto", str)
_key("learner.temperature", 16.0)

_key("distill.tau", 16.0)
_key("distill.lambda", 0.01)
_key("distill.mode", "vanilla", str)
_key("distill.sigma", 0.1)

_key("teacher.kind", "none", str)
_key("teacher.lr_per_class", 50)
_key("teacher.lr_reg", 1e-4)
_key("teacher.lr_max_iter", 500)

_a = AnchorConfig()
for _name in ("step", "samples", "width", "folds", "seed", "slope_scale", "mix_gain"):
    _key(f"anchor.{_name}", getattr(_a, _name))

_key("train.ways", 5)
_key("train.shots", 1)
_key("train.queries", 15)
_key("train.episodes_per_batch", 8)
_key("train.iterations", 2500)
_key("train.lr", 0.001)
_key("train.momentum", 0.9)
_key("train.decay_every_tasks", 0)  # 0: decay at fixed fractions instead
_key("train.decay_at", (0.5, 0.75), lambda v: v if isinstance(v, tuple)
     else tuple(float(p) for p in str(v).split(",") if p.strip()))
_key("train.decay_factor", 0.5)
_key("train.val_every", 250)
_key("train.val_tasks", 500)
_key("train.early_stop", True, _bool)

_key("eval.ways", 5)
_key("eval.shots", 1)
_key("eval.queries", 15)
_key("eval.tasks", 2000)
_key("eval.split", "novel", str)

REGRESSION_DEFAULTS = {
    "run.task": "regression",
    "learner.kind": "kernel",
    "learner.temperature": 1.0,
    "distill.lambda": 1.0,
    "train.ways": 1,
    "train.shots": 5,
    "train.queries": 100,
    "train.episodes_per_batch": 32,
    "train.iterations": 40_000,
    "train.lr": 0.001,
    "train.momentum": 0.9,
    "train.decay_every_tasks": 160_000,
    "train.decay_factor": 0.5,
    "train.val_every": 1000,
    "train.val_tasks": 1000,
    "train.early_stop": True,
    "eval.ways": 1,
    "eval.shots": 5,
    "eval.queries": 100,
    "eval.tasks": 1000,
    "eval.split": "test",
}

# desk-scale factors relative to the full-size reference protocols, echoed in manifests
SCALE_NOTES = {
    "classification": {"note.eval_tasks_reference": 10_000, "note.recipe": "extrapolated"},
    "regression": {"note.tasks_total_reference": 1_280_000, "note.recipe": "reference"},
}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def defaults(cls, task: str = "classification") -> "RunConfig":
        vals = {k: d for k, (d, _) in _SCHEMA.items()}
        if task == "regression":
            vals.update(REGRESSION_DEFAULTS)
        elif task != "classification":
            raise ConfigError(f"unknown task {task!r}")
        return cls(vals)

    def __getitem__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def override(self, updates: dict) -> "RunConfig":
        """A copy with ``updates`` applied; values are parsed and keys validated."""
        vals = dict(self.values)
        for k, v in updates.items():
            if k not in _SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            parser = _SCHEMA[k][1]
            try:
                vals[k] = parser(v.strip()) if isinstance(v, str) else parser(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from exc
        out = RunConfig(vals)
        out.validate()
        return out

    @property
    def task(self):
        return self.values["run.task"]

    def validate(self):
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self["teacher.kind"] not in TEACHERS:
            raise ConfigError(f"unknown teacher {self['teacher.kind']!r}")
        if self.task == "regression" and self["teacher.kind"] not in ("none", "anchor"):
            raise ConfigError("regression runs take teacher 'none' or 'anchor'")
        if self.task == "classification" and self["teacher.kind"] == "anchor":
            raise ConfigError("anchor teachers are for sine regression")
        for k in ("train.iterations", "train.episodes_per_batch", "eval.tasks"):
            if self[k] < 0 or (k != "train.iterations" and self[k] < 1):
                raise ConfigError(f"{k} out of range: {self[k]}")
        self.learner().validate()
        self.distill().validate()
        return self

    # typed views --------------------------------------------------------------

    def world(self) -> WorldConfig:
        return WorldConfig(**{k[6:]: v for k, v in self.values.items()
                              if k.startswith("world.") and k != "world.per_class"})

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(**{k[9:]: v for k, v in self.values.items()
                                 if k.startswith("pretrain.")})

    def learner(self) -> LearnerConfig:
        return LearnerConfig(self["learner.kind"], self["learner.alpha"],
                             self["learner.inner_steps"], self["learner.rho"],
                             self["learner.meta_grad"], self["learner.temperature"])

    def distill(self) -> DistillConfig:
        return DistillConfig(self["distill.tau"], self["distill.lambda"], self["distill.mode"],
                             self["distill.sigma"])

    def anchor(self) -> AnchorConfig:
        return AnchorConfig(**{k[7:]: v for k, v in self.values.items()
                               if k.startswith("anchor.")})

    # serialisation ------------------------------------------------------------

    def manifest(self) -> dict:
        out = {k: _format(self.values[k]) for k in sorted(self.values)}
        out.update({k: _format(v) for k, v in SCALE_NOTES[self.task].items()})
        return out

    def text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.manifest().items())

    def hash(self, exclude=("run.workers", "run.label")) -> str:
        """Git-style content hash: sha1 over ``blob <len>\\0`` + the canonical text."""
        body = "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.values.items())
                       if k not in exclude).encode("utf-8")
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        k, v = (p.strip() for p in line.split("=", 1))
        if k not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {k!r}")
        out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None, task: str | None = None) -> RunConfig:
    """Defaults, then the file's keys, then ``overrides`` (CLI flags win)."""
    file_vals = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    task = overrides.get("run.task") or file_vals.get("run.task") or task or "classification"
    return RunConfig.defaults(task).override({**file_vals, **overrides})


def content_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
