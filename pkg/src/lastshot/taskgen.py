"""Episode generators: sine-curve regression tasks and a synthetic classification world.

The classification world stands in for an image dataset: class prototypes are
Gaussian latents pushed through a frozen random Tanh network, with disjoint
base / validation / novel class splits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lastshot.container import mlp_fields, mlp_from_fields, read_container, write_container
from lastshot.errors import ConfigError, EpisodeError
from lastshot.numkit import MlpParams, mlp_forward

X_RANGE = (-5.0, 5.0)
AMPLITUDE_RANGE = (0.0, 2.0)
FREQUENCY_RANGE = (2.0, 4.0)
PHASE_RANGE = (0.0, 2.0 * math.pi)
NOISE_SIGMA = 0.3


# sine regression ------------------------------------------------------------

@dataclass(frozen=True)
class SineTaskParams:
    a: float
    v: float
    b: float
    noise_sigma: float = NOISE_SIGMA

    def __post_init__(self):
        for name, value, (lo, hi) in (("a", self.a, AMPLITUDE_RANGE),
                                      ("v", self.v, FREQUENCY_RANGE),
                                      ("b", self.b, PHASE_RANGE)):
            if not lo <= value <= hi:
                raise EpisodeError(f"sine parameter {name}={value} outside [{lo}, {hi}]")
        if self.noise_sigma < 0:
            raise EpisodeError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def sample_sine_task(rng: np.random.Generator, noise_sigma: float = NOISE_SIGMA) -> SineTaskParams:
    a = rng.uniform(*AMPLITUDE_RANGE)
    v = rng.uniform(*FREQUENCY_RANGE)
    b = rng.uniform(*PHASE_RANGE)
    return SineTaskParams(float(a), float(v), float(b), noise_sigma)


def eval_sine(params: SineTaskParams, x, rng: np.random.Generator | None = None):
    """a*sin(v*x + b), plus N(0, noise_sigma^2) noise when ``rng`` is given."""
    x = np.asarray(x, dtype=np.float64)
    y = params.a * np.sin(params.v * x + params.b)
    if rng is not None:
        y = y + params.noise_sigma * rng.standard_normal(x.shape)
    return float(y) if y.ndim == 0 else y


@dataclass
class RegressionEpisode:
    params: SineTaskParams
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray

    @property
    def support(self):
        return list(zip(self.support_x.tolist(), self.support_y.tolist()))

    @property
    def query(self):
        return list(zip(self.query_x.tolist(), self.query_y.tolist()))


def _distinct_uniform(rng, n, lo, hi):
    xs = rng.uniform(lo, hi, size=n)
    while len(np.unique(xs)) < n:  # measure-zero event, but the contract is hard
        xs = rng.uniform(lo, hi, size=n)
    return xs


def sample_regression_episode(params: SineTaskParams, K: int, Q: int,
                              rng: np.random.Generator, noisy: bool = True) -> RegressionEpisode:
    if K < 1 or Q < 1:
        raise EpisodeError(f"need K >= 1 and Q >= 1, got K={K}, Q={Q}")
    xs = _distinct_uniform(rng, K + Q, *X_RANGE)
    ys = eval_sine(params, xs, rng if noisy else None)
    return RegressionEpisode(params, xs[:K], ys[:K], xs[K:], ys[K:])


@dataclass
class SineBatch:
    """Many regression episodes stacked along the first axis."""

    a: np.ndarray
    v: np.ndarray
    b: np.ndarray
    support_x: np.ndarray  # (T, K)
    support_y: np.ndarray
    query_x: np.ndarray  # (T, Q)
    query_y: np.ndarray

    def __len__(self):
        return len(self.a)

    def task(self, i: int) -> SineTaskParams:
        return SineTaskParams(float(self.a[i]), float(self.v[i]), float(self.b[i]))


def sample_sine_batch(n: int, K: int, Q: int, rng: np.random.Generator,
                      noise_sigma: float = NOISE_SIGMA) -> SineBatch:
    """Vectorised draw of ``n`` independent regression episodes."""
    a = rng.uniform(*AMPLITUDE_RANGE, size=n)
    v = rng.uniform(*FREQUENCY_RANGE, size=n)
    b = rng.uniform(*PHASE_RANGE, size=n)
    x = rng.uniform(*X_RANGE, size=(n, K + Q))
    y = a[:, None] * np.sin(v[:, None] * x + b[:, None]) + noise_sigma * rng.standard_normal(x.shape)
    return SineBatch(a, v, b, x[:, :K], y[:, :K], x[:, K:], y[:, K:])


# classification world ---------------------------------------------------------

@dataclass
class WorldConfig:
    latent_dim: int = 16
    obs_dim: int = 32
    num_classes: int = 100
    num_base: int = 64
    num_val: int = 16
    num_novel: int = 20
    sigma: float = 1.0
    mixer: str = "tanh"  # or "identity"
    mixer_hidden: int = 64
    mixer_gain: float = 1.5
    mixer_condition: float = 30.0  # spread of the output-layer scales (max / min)
    clean_shrink: float = 0.5

    def validate(self):
        if min(self.num_base, self.num_val, self.num_novel) < 0:
            raise ConfigError("split sizes must be non-negative")
        if self.num_base + self.num_val + self.num_novel > self.num_classes:
            raise ConfigError(
                f"splits {self.num_base}/{self.num_val}/{self.num_novel} exceed "
                f"{self.num_classes} classes"
            )
        if self.mixer not in ("tanh", "identity"):
            raise ConfigError(f"unknown mixer {self.mixer!r}")
        if self.mixer == "identity" and self.obs_dim != self.latent_dim:
            raise ConfigError("identity mixer needs obs_dim == latent_dim")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.mixer_condition < 1:
            raise ConfigError("mixer_condition must be >= 1")


SPLITS = ("base", "val", "novel")


@dataclass
class ClassWorld:
    config: WorldConfig
    class_means: np.ndarray
    mixer: MlpParams | None
    split: dict
    _pools: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def latent_dim(self):
        return self.config.latent_dim

    @property
    def num_classes(self):
        return self.config.num_classes

    @property
    def within_class_sigma(self):
        return self.config.sigma

    @property
    def obs_dim(self):
        return self.config.obs_dim

    def observe(self, latents):
        if self.mixer is None:
            return np.array(latents, dtype=np.float64)
        return mlp_forward(self.mixer, latents)

    def render(self, class_ids, noise):
        """Observed and clean renditions for latent noise draws ``noise`` (n x latent)."""
        means = self.class_means[np.asarray(class_ids)]
        sigma = self.config.sigma
        x = self.observe(means + sigma * noise)
        clean = self.observe(means + self.config.clean_shrink * sigma * noise)
        return x, clean

    def save(self, path):
        fields = {
            "config": _config_str(self.config),
            "class_means": self.class_means,
            "split.base": self.split["base"],
            "split.val": self.split["val"],
            "split.novel": self.split["novel"],
        }
        if self.mixer is not None:
            fields.update(mlp_fields("mixer", self.mixer))
        for per_class, pool in sorted(self._pools.items()):
            fields.update(pool.to_fields(f"pool{per_class}"))
        write_container(path, "ClassWorld", fields)

    @classmethod
    def load(cls, path) -> "ClassWorld":
        _, f = read_container(path, "ClassWorld")
        config = _config_from_str(f["config"])
        mixer = mlp_from_fields("mixer", f) if "mixer.w0" in f else None
        split = {s: np.array(f[f"split.{s}"]) for s in SPLITS}
        world = cls(config, np.array(f["class_means"]), mixer, split)
        for key in f:
            if key.startswith("pool") and key.endswith(".x"):
                prefix = key[:-2]
                pool = BasePool.from_fields(prefix, f)
                world._pools[pool.per_class] = pool
        return world


def _config_str(cfg: WorldConfig) -> str:
    return ";".join(f"{k}={v}" for k, v in cfg.__dict__.items())


def _config_from_str(s: str) -> WorldConfig:
    defaults = WorldConfig()
    kwargs = {}
    for item in s.split(";"):
        k, v = item.split("=", 1)
        kwargs[k] = type(getattr(defaults, k))(v)
    return WorldConfig(**kwargs)


def build_class_world(config: WorldConfig, rng: np.random.Generator) -> ClassWorld:
    config.validate()
    means = rng.standard_normal((config.num_classes, config.latent_dim))
    if config.mixer == "identity":
        mixer = None
    else:
        h = config.mixer_hidden
        w1 = rng.standard_normal((config.latent_dim, h)) * config.mixer_gain / math.sqrt(config.latent_dim)
        b1 = rng.uniform(-0.5, 0.5, size=h)
        w2 = rng.standard_normal((h, config.obs_dim)) / math.sqrt(h)
        # observation channels get log-spaced gains, so raw Euclidean geometry is
        # dominated by a few channels unless an encoder learns to rescale them
        w2 = w2 * np.geomspace(1.0, 1.0 / config.mixer_condition, config.obs_dim)
        mixer = MlpParams([w1, w2], [b1, np.zeros(config.obs_dim)], ["tanh"])
    ids = np.arange(config.num_classes)
    nb, nv, nn = config.num_base, config.num_val, config.num_novel
    split = {"base": ids[:nb], "val": ids[nb:nb + nv], "novel": ids[nb + nv:nb + nv + nn]}
    return ClassWorld(config, means, mixer, split)


@dataclass
class ClassificationEpisode:
    way: int
    shot: int
    queries_per_class: int
    class_ids: np.ndarray
    support_x: np.ndarray  # (C*K, obs)
    support_y: np.ndarray  # local labels
    query_x: np.ndarray  # (C*Q, obs)
    query_y: np.ndarray
    query_clean: np.ndarray | None = None
    support_ids: np.ndarray | None = None  # pool instance ids when drawn from a pool
    query_ids: np.ndarray | None = None

    @property
    def support(self):
        return self.support_x, self.support_y

    @property
    def query(self):
        return self.query_x, self.query_y


def _pick_classes(world: ClassWorld, split: str, C: int, rng):
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    pool = world.split[split]
    if C > len(pool):
        raise ConfigError(f"{C}-way episode needs more classes than the {split} split has ({len(pool)})")
    return rng.choice(pool, size=C, replace=False)


def sample_classification_episode(world: ClassWorld, split: str, C: int, K: int, Q: int,
                                  rng: np.random.Generator) -> ClassificationEpisode:
    """Fresh instances: each is mixer(class_mean + sigma * N(0, I))."""
    class_ids = _pick_classes(world, split, C, rng)
    labels_s = np.repeat(np.arange(C), K)
    labels_q = np.repeat(np.arange(C), Q)
    noise = rng.standard_normal((C * (K + Q), world.latent_dim))
    ids = np.concatenate([class_ids[labels_s], class_ids[labels_q]])
    x, clean = world.render(ids, noise)
    n = C * K
    return ClassificationEpisode(C, K, Q, class_ids, x[:n], labels_s, x[n:], labels_q, clean[n:])


@dataclass
class BasePool:
    """Fixed labelled sample of the base classes; instance id = row index."""

    x: np.ndarray
    clean: np.ndarray
    labels: np.ndarray  # global class ids
    per_class: int

    def __len__(self):
        return len(self.labels)

    def class_rows(self, class_id: int) -> np.ndarray:
        # rows are laid out class-major, per_class rows per base class
        classes = self._class_order()
        k = classes[class_id]
        return np.arange(k * self.per_class, (k + 1) * self.per_class)

    def _class_order(self):
        order = getattr(self, "_order", None)
        if order is None:
            uniq = self.labels[:: self.per_class]
            order = {int(c): i for i, c in enumerate(uniq)}
            self._order = order
        return order

    @property
    def classes(self):
        return self.labels[:: self.per_class]

    def to_fields(self, prefix):
        return {f"{prefix}.x": self.x, f"{prefix}.clean": self.clean,
                f"{prefix}.labels": self.labels,
                f"{prefix}.per_class": np.array([self.per_class])}

    @classmethod
    def from_fields(cls, prefix, f):
        return cls(np.array(f[f"{prefix}.x"]), np.array(f[f"{prefix}.clean"]),
                   np.array(f[f"{prefix}.labels"]), int(f[f"{prefix}.per_class"][0]))


def enumerate_base_data(world: ClassWorld, per_class: int = 600,
                        rng: np.random.Generator | None = None) -> BasePool:
    """The base-class pool; built once per ``per_class`` and cached on the world."""
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    if per_class in world._pools:
        return world._pools[per_class]
    if rng is None:
        raise ConfigError("first call to enumerate_base_data needs an rng stream")
    base = world.split["base"]
    labels = np.repeat(base, per_class)
    noise = rng.standard_normal((len(labels), world.latent_dim))
    x, clean = world.render(labels, noise)
    pool = BasePool(x, clean, labels, per_class)
    world._pools[per_class] = pool
    return pool


def sample_pool_episode(pool: BasePool, C: int, K: int, Q: int,
                        rng: np.random.Generator) -> ClassificationEpisode:
    """Meta-training episode drawn without replacement from the fixed base pool."""
    classes = pool.classes
    if C > len(classes):
        raise ConfigError(f"{C}-way episode needs more classes than the pool has ({len(classes)})")
    if K + Q > pool.per_class:
        raise ConfigError(f"K+Q={K + Q} exceeds {pool.per_class} instances per class")
    class_ids = rng.choice(classes, size=C, replace=False)
    s_rows, q_rows = [], []
    for c in class_ids:
        rows = pool.class_rows(int(c))
        pick = rng.choice(rows, size=K + Q, replace=False)
        s_rows.append(pick[:K])
        q_rows.append(pick[K:])
    s_rows = np.concatenate(s_rows)
    q_rows = np.concatenate(q_rows)
    return ClassificationEpisode(
        C, K, Q, class_ids,
        pool.x[s_rows], np.repeat(np.arange(C), K),
        pool.x[q_rows], np.repeat(np.arange(C), Q),
        pool.clean[q_rows], s_rows, q_rows,
    )
