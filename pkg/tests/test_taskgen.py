import math

import numpy as np
import pytest

from lastshot.errors import ConfigError, EpisodeError
from lastshot.rng import stream
from lastshot.taskgen import (
    ClassWorld,
    SineTaskParams,
    WorldConfig,
    build_class_world,
    enumerate_base_data,
    eval_sine,
    sample_classification_episode,
    sample_pool_episode,
    sample_regression_episode,
    sample_sine_batch,
    sample_sine_task,
)


def test_sine_task_deterministic():
    assert sample_sine_task(stream(7, "t")) == sample_sine_task(stream(7, "t"))


def test_sine_task_moments_and_ranges():
    rng = stream(1, "lln")
    samples = np.array([(p.a, p.v, p.b) for p in (sample_sine_task(rng) for _ in range(100_000))])
    sd = np.array([2, 2, 2 * math.pi]) / math.sqrt(12) / math.sqrt(len(samples))
    assert np.all(np.abs(samples.mean(0) - [1, 3, math.pi]) < 3 * sd)
    assert samples[:, 0].min() >= 0 and samples[:, 0].max() <= 2
    assert samples[:, 1].min() >= 2 and samples[:, 1].max() <= 4
    assert samples[:, 2].min() >= 0 and samples[:, 2].max() <= 2 * math.pi


def test_sine_params_validated():
    with pytest.raises(EpisodeError):
        SineTaskParams(2.5, 3.0, 0.0)


def test_eval_sine_noise_free():
    assert eval_sine(SineTaskParams(1, 2, 0), math.pi / 4) == pytest.approx(1.0)
    assert eval_sine(SineTaskParams(2, 2, math.pi), 0.0) == pytest.approx(0.0, abs=1e-15)


def test_eval_sine_noise_std():
    p = SineTaskParams(1.0, 3.0, 1.0)
    ys = eval_sine(p, np.full(10_000, 0.7), stream(3, "noise"))
    assert abs(np.std(ys) - 0.3) < 0.05 * 0.3


def test_regression_episode_shapes():
    p = SineTaskParams(1.0, 3.0, 1.0)
    for K in (5, 50):
        ep = sample_regression_episode(p, K, 100, stream(0, K))
        assert ep.support_x.shape == (K,) and ep.query_x.shape == (100,)
        assert np.all(np.abs(np.concatenate([ep.support_x, ep.query_x])) <= 5)
        assert not set(ep.support_x) & set(ep.query_x)
    clean = sample_regression_episode(p, 5, 10, stream(1), noisy=False)
    np.testing.assert_allclose(clean.query_y, eval_sine(p, clean.query_x))


def test_sine_batch_shapes():
    b = sample_sine_batch(32, 5, 100, stream(2))
    assert b.support_x.shape == (32, 5) and b.query_y.shape == (32, 100)


def test_default_world_splits():
    w = build_class_world(WorldConfig(), stream(0, "world"))
    sizes = [len(w.split[s]) for s in ("base", "val", "novel")]
    assert sizes == [64, 16, 20] and w.num_classes == 100
    allc = np.concatenate([w.split[s] for s in ("base", "val", "novel")])
    assert len(set(allc.tolist())) == 100
    d = np.linalg.norm(w.class_means[:, None] - w.class_means[None], axis=-1)
    assert np.all(d[~np.eye(100, dtype=bool)] > 0)


def test_split_overflow_rejected():
    with pytest.raises(ConfigError):
        build_class_world(WorldConfig(num_classes=50), stream(0))


def test_identity_mixer_zero_sigma_gives_means():
    cfg = WorldConfig(latent_dim=8, obs_dim=8, mixer="identity", sigma=0.0)
    w = build_class_world(cfg, stream(0))
    ep = sample_classification_episode(w, "novel", 3, 2, 2, stream(1))
    np.testing.assert_array_equal(ep.support_x, w.class_means[ep.class_ids[ep.support_y]])


def test_world_deterministic():
    a = build_class_world(WorldConfig(), stream(5, "world"))
    b = build_class_world(WorldConfig(), stream(5, "world"))
    assert a.class_means.tobytes() == b.class_means.tobytes()
    for x, y in zip(a.mixer.arrays(), b.mixer.arrays()):
        assert x.tobytes() == y.tobytes()


@pytest.fixture(scope="module")
def world():
    return build_class_world(WorldConfig(), stream(11, "world"))


def test_episode_shapes(world):
    ep = sample_classification_episode(world, "novel", 5, 1, 15, stream(1))
    assert ep.support_x.shape == (5, 32) and ep.query_x.shape == (75, 32)
    assert set(ep.class_ids) <= set(world.split["novel"])
    assert np.bincount(ep.query_y).tolist() == [15] * 5
    ep1 = sample_classification_episode(world, "base", 5, 3, 1, stream(2))
    assert ep1.query_x.shape == (5, 32) and np.bincount(ep1.support_y).tolist() == [3] * 5


def test_too_many_ways(world):
    with pytest.raises(ConfigError):
        sample_classification_episode(world, "val", 17, 1, 1, stream(0))


def test_disjoint_streams_share_no_instance(world):
    a = sample_classification_episode(world, "base", 5, 5, 5, stream(0, "ep", 0))
    b = sample_classification_episode(world, "base", 5, 5, 5, stream(0, "ep", 1))
    rows_a = {r.tobytes() for r in np.vstack([a.support_x, a.query_x])}
    rows_b = {r.tobytes() for r in np.vstack([b.support_x, b.query_x])}
    assert not rows_a & rows_b


def test_base_pool_sizes_and_cache():
    w = build_class_world(WorldConfig(), stream(3, "world"))
    pool = enumerate_base_data(w, 600, stream(3, "pool"))
    assert len(pool) == 38_400
    assert enumerate_base_data(w, 600, stream(99)) is pool
    one = enumerate_base_data(w, 1, stream(3, "pool1"))
    assert len(one) == 64 and sorted(one.labels.tolist()) == sorted(w.split["base"].tolist())


def test_pool_episode_disjoint_support_query():
    w = build_class_world(WorldConfig(), stream(4, "world"))
    pool = enumerate_base_data(w, 50, stream(4, "pool"))
    for i in range(20):
        ep = sample_pool_episode(pool, 5, 3, 4, stream(4, "ep", i))
        assert not set(ep.support_ids) & set(ep.query_ids)
        assert set(ep.class_ids) <= set(w.split["base"])
        np.testing.assert_array_equal(pool.labels[ep.support_ids], ep.class_ids[ep.support_y])


def test_world_container_roundtrip(tmp_path):
    w = build_class_world(WorldConfig(), stream(6, "world"))
    pool = enumerate_base_data(w, 3, stream(6, "pool"))
    path = tmp_path / "world.bin"
    w.save(path)
    raw = path.read_bytes()
    assert raw[:8] == b"LSHOTBIN" and int.from_bytes(raw[8:12], "little") == 1
    w2 = ClassWorld.load(path)
    assert w2.config == w.config
    assert w2.class_means.tobytes() == w.class_means.tobytes()
    assert enumerate_base_data(w2, 3).x.tobytes() == pool.x.tobytes()
