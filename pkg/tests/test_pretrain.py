import numpy as np
import pytest

from lastshot.errors import ConfigError, TrainingError
from lastshot.numkit import MlpParams, mlp_forward
from lastshot.pretrain import (
    PreprocessMode,
    PretrainConfig,
    PretrainedModel,
    extract_features,
    nearest_centroid_logits,
    pretrain_base_classifier,
    pt_emb_classify,
)
from lastshot.rng import stream
from lastshot.taskgen import (
    BasePool,
    ClassificationEpisode,
    WorldConfig,
    build_class_world,
    enumerate_base_data,
    sample_classification_episode,
)

SMALL_WORLD = WorldConfig(num_classes=20, num_base=8, num_val=6, num_novel=6)
SMALL_PRETRAIN = PretrainConfig(hidden=(32,), feat_dim=16, epochs=1, val_tasks=5)


def small_setup(seed):
    world = build_class_world(SMALL_WORLD, stream(seed, "world"))
    pool = enumerate_base_data(world, 40, stream(seed, "pool"))
    return world, pool


@pytest.mark.parametrize("seed", range(3))
def test_first_epoch_lowers_pool_cross_entropy(seed):
    world, pool = small_setup(seed)
    model = pretrain_base_classifier(world, pool, SMALL_PRETRAIN, stream(seed, "pt"), seed=seed)
    assert model.history["pool_ce_epoch1"] < model.history["pool_ce_start"]
    assert model.head.shape == (16, 8)
    assert len(model.history["val_acc"]) == 1


def test_config_echoed_in_manifest():
    m = PretrainConfig().manifest()
    assert m["pretrain.momentum"] == 0.9 and m["pretrain.weight_decay"] == 5e-4
    assert m["pretrain.batch"] == 128 and m["pretrain.lr"] == 0.1


def test_single_class_pool_rejected():
    world, pool = small_setup(0)
    rows = pool.labels == pool.labels[0]
    one = BasePool(pool.x[rows], pool.clean[rows], pool.labels[rows], pool.per_class)
    with pytest.raises(TrainingError):
        pretrain_base_classifier(world, one, SMALL_PRETRAIN, stream(0, "pt"))
    empty = BasePool(pool.x[:0], pool.clean[:0], pool.labels[:0], pool.per_class)
    with pytest.raises(TrainingError):
        pretrain_base_classifier(world, empty, SMALL_PRETRAIN, stream(0, "pt"))


def test_extract_features_is_idempotent_and_pure():
    world, pool = small_setup(1)
    model = pretrain_base_classifier(world, pool, SMALL_PRETRAIN, stream(1, "pt"))
    cache = extract_features(model, pool)
    assert cache.shape == (len(pool), 16)
    assert model.extract_calls == 1
    again = extract_features(model, pool)
    assert model.extract_calls == 1 and again is cache
    np.testing.assert_array_equal(cache, mlp_forward(model.encoder, pool.x))
    np.testing.assert_array_equal(model.cache_labels, pool.labels)


def test_save_load_roundtrip(tmp_path):
    world, pool = small_setup(2)
    model = pretrain_base_classifier(world, pool, SMALL_PRETRAIN, stream(2, "pt"))
    extract_features(model, pool)
    model.save(tmp_path / "m.bin")
    back = PretrainedModel.load(tmp_path / "m.bin")
    np.testing.assert_array_equal(back.head, model.head)
    np.testing.assert_array_equal(back.feature_cache, model.feature_cache)
    np.testing.assert_array_equal(back.encoder.flatten(), model.encoder.flatten())


def identity_model(d=2):
    return PretrainedModel(MlpParams([np.eye(d)], [np.zeros(d)], []), np.zeros((d, 2)),
                           np.array([0, 1]))


def episode(sx, sy, qx, qy):
    sx, qx = np.asarray(sx, float), np.asarray(qx, float)
    return ClassificationEpisode(2, 1, len(qy), np.array([0, 1]), sx, np.asarray(sy), qx,
                                 np.asarray(qy), qx)


def test_query_equal_to_support_is_that_class():
    ep = episode([[0, 0], [3, 1]], [0, 1], [[3, 1], [0, 0]], [1, 0])
    labels, _ = pt_emb_classify(identity_model(), ep)
    assert labels.tolist() == [1, 0]


def test_equidistant_query_goes_to_lower_index():
    ep = episode([[-1, 0], [1, 0]], [0, 1], [[0, 5]], [0])
    labels, logits = pt_emb_classify(identity_model(), ep)
    assert logits[0, 0] == logits[0, 1]
    assert labels[0] == 0


def test_center_l2_unit_norm_and_scale_invariance():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((30, 5))
    mode = PreprocessMode("center_l2", feats.mean(0))
    np.testing.assert_allclose(np.linalg.norm(mode.apply(feats), axis=1), 1.0, atol=1e-10)
    scaled = PreprocessMode("center_l2", (10 * feats).mean(0))
    ys = np.array([0, 1, 2])
    a = nearest_centroid_logits(mode.apply(feats[:3]), ys, mode.apply(feats[3:]), 3)
    b = nearest_centroid_logits(scaled.apply(10 * feats[:3]), ys, scaled.apply(10 * feats[3:]), 3)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert np.array_equal(np.argmax(a, 1), np.argmax(b, 1))


@pytest.mark.parametrize("variant", ["center", "center_l2"])
def test_centered_modes_ignore_constant_shift(variant):
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((40, 4))
    shift = np.array([3.0, -7.0, 0.5, 2.0])
    m1 = PreprocessMode(variant, feats.mean(0))
    m2 = PreprocessMode(variant, (feats + shift).mean(0))
    ys = np.array([0, 1, 2, 3])
    a = nearest_centroid_logits(m1.apply(feats[:4]), ys, m1.apply(feats[4:]), 4)
    b = nearest_centroid_logits(m2.apply(feats[:4] + shift), ys, m2.apply(feats[4:] + shift), 4)
    assert np.array_equal(np.argmax(a, 1), np.argmax(b, 1))


def test_preprocess_needs_mean():
    with pytest.raises(ConfigError):
        PreprocessMode("center")
    with pytest.raises(ConfigError):
        PreprocessMode("whiten", np.zeros(2))


def test_pt_emb_calibration_gate(default_lab):
    lab = default_lab
    accs = []
    for i in range(500):
        ep = sample_classification_episode(lab.world, "novel", 5, 1, 15, stream(7, "gate", i))
        accs.append(np.mean(pt_emb_classify(lab.pretrained, ep)[0] == ep.query_y))
    assert 0.55 <= np.mean(accs) <= 0.85
