import numpy as np
import pytest

from helpers import central_diff, rel_err
from lastshot.errors import ConfigError, EpisodeError
from lastshot.learners import (
    Learner,
    LearnerConfig,
    as_inputs,
    kernel_regress,
    prototypes,
    protonet_generate,
    protomaml_generate,
    ridge_solve,
    with_linear_head,
)
from lastshot.numkit import MlpParams, Net, init_mlp
from lastshot.numkit import tensor as T
from lastshot.objectives import cross_entropy_rows


def identity_encoder(d):
    return MlpParams([np.eye(d)], [np.zeros(d)], [])


def small_encoder(seed, d_in=3, hidden=4, d_out=3):
    return init_mlp([d_in, hidden, d_out], activation="tanh", rng=np.random.default_rng(seed))


def class_episode(seed, C=3, K=2, Q=2, d=3):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 1.5, size=(C, d))
    sy = np.repeat(np.arange(C), K)
    qy = np.repeat(np.arange(C), Q)
    sx = centers[sy] + 0.5 * rng.standard_normal((C * K, d))
    qx = centers[qy] + 0.5 * rng.standard_normal((C * Q, d))
    return sx, sy, qx, qy


def reg_episode(seed, K=4, Q=5):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=K + Q)
    y = np.sin(2 * x) + 0.1 * rng.standard_normal(K + Q)
    return x[:K], y[:K], x[K:], y[K:]


# ProtoNet ----------------------------------------------------------------------------

def test_protonet_identity_encoder_examples():
    enc = identity_encoder(1).net()
    gen = protonet_generate(enc, np.array([[0.0], [2.0]]), np.array([0, 1]), 2)
    logits = gen.logits(np.array([[0.5], [2.0]])).data
    assert np.argmax(logits[0]) == 0
    assert logits[1, 1] == 0.0 and np.argmax(logits[1]) == 1


def test_three_shot_prototypes_match_direct_mean():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((9, 4))
    y = np.array([2, 0, 1, 1, 0, 2, 0, 1, 2])
    p = prototypes(T.Tensor(f), y, 3).data
    for c in range(3):
        rows = [f[i] for i in range(9) if y[i] == c]
        np.testing.assert_allclose(p[c], sum(rows) / 3, atol=1e-14)


def test_empty_class_rejected():
    with pytest.raises(EpisodeError):
        protonet_generate(identity_encoder(2).net(), np.zeros((2, 2)), np.array([0, 0]), 2)


def test_protonet_shift_invariance():
    sx, sy, qx, _ = class_episode(3)
    enc = identity_encoder(3)
    shifted = MlpParams([np.eye(3)], [np.array([5.0, -2.0, 0.7])], [])
    a = protonet_generate(enc.net(), sx, sy, 3).logits(qx).data
    b = protonet_generate(shifted.net(), sx, sy, 3).logits(qx).data
    assert np.array_equal(np.argmax(a, 1), np.argmax(b, 1))
    np.testing.assert_allclose(a - a[:, :1], b - b[:, :1], atol=1e-10)


# MAML / ProtoMAML --------------------------------------------------------------------

def test_maml_scalar_hand_update():
    # f(x) = w x + b with support (1, 0): L = (w + b)^2, so dL/dw = 2 at w=1, b=0
    params = MlpParams([np.array([[1.0]])], [np.array([0.0])], [])
    learner = Learner(LearnerConfig("maml", inner_lr=0.1), params, "regression")
    gen = learner.generate(params.net(), np.array([1.0]), np.array([0.0]))
    w, b = (t.data for t in gen.payload["tensors"])
    assert w.item() == pytest.approx(0.8) and b.item() == pytest.approx(-0.2)


def test_maml_zero_step_size_keeps_weights():
    params = with_linear_head(small_encoder(1), 3, np.random.default_rng(2))
    learner = Learner(LearnerConfig("maml", inner_lr=0.0), params, "classification", 3)
    sx, sy, qx, _ = class_episode(1)
    gen = learner.generate(params.net(), sx, sy)
    for t, a in zip(gen.payload["tensors"], params.arrays()):
        np.testing.assert_array_equal(t.data, a)


def test_exact_with_many_steps_rejected():
    with pytest.raises(ConfigError):
        LearnerConfig("maml", inner_steps=2, meta_grad_mode="exact").validate()
    assert LearnerConfig("maml", inner_steps=3).resolved_meta_grad() == "first_order"


def test_protomaml_zero_steps_is_protonet_up_to_query_constant():
    enc = small_encoder(4)
    sx, sy, qx, _ = class_episode(4)
    cfg = LearnerConfig("protomaml", inner_steps=0)
    head = protomaml_generate(enc.net(), sx, sy, cfg, 3).logits(qx).data
    proto = protonet_generate(enc.net(), sx, sy, 3).logits(qx).data
    diff = head - proto
    np.testing.assert_allclose(diff, np.repeat(diff[:, :1], 3, 1), atol=1e-12)


def test_protomaml_separated_classes_fit_support():
    enc = identity_encoder(2)
    sx = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    sy = np.array([0, 1, 2])
    gen = protomaml_generate(enc.net(), sx, sy, LearnerConfig("protomaml", inner_steps=0), 3)
    assert np.array_equal(np.argmax(gen.logits(sx).data, 1), sy)


# ridge / kernel -------------------------------------------------------------------

def test_ridge_hand_solve():
    w = ridge_solve(T.Tensor(np.eye(2)), np.array([[1.0], [2.0]]), 1.0).data
    np.testing.assert_allclose(w[:, 0], [0.5, 1.0], atol=1e-15)


def test_ridge_large_rho_shrinks_to_zero():
    sx, sy, qx, _ = class_episode(5)
    learner = Learner(LearnerConfig("ridge", ridge_rho=1e12), small_encoder(5), "classification", 3)
    assert np.max(np.abs(learner.predict(sx, sy, qx))) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_ridge_normal_equation_residual(seed):
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((8, 5))
    y = rng.standard_normal((8, 3))
    rho = 10 ** rng.uniform(-3, 1)
    w = ridge_solve(T.Tensor(phi), y, rho).data
    assert np.linalg.norm((phi.T @ phi + rho * np.eye(5)) @ w - phi.T @ y) <= 1e-8


def test_kernel_single_support():
    enc = small_encoder(6, d_in=1).net()
    y = kernel_regress(enc, np.array([[0.3]]), np.array([3.0]), np.array([[-1.0], [0.0], [2.0]]))
    np.testing.assert_allclose(y.data, 3.0, atol=1e-14)


def test_kernel_saturates_to_coinciding_support():
    enc = MlpParams([np.array([[10.0]])], [np.array([0.0])], []).net()
    sx = np.array([[0.0], [3.0], [-3.0]])
    y = kernel_regress(enc, sx, np.array([1.5, -2.0, 4.0]), np.array([[0.0]])).data
    assert y[0] == pytest.approx(1.5, abs=1e-12)


def test_kernel_matches_direct_loop():
    enc = small_encoder(7, d_in=1)
    sx, sy, qx, _ = reg_episode(7, K=5)
    got = kernel_regress(enc.net(), as_inputs(sx, "regression"), sy,
                         as_inputs(qx, "regression")).data
    from lastshot.numkit import mlp_forward

    fs = mlp_forward(enc, sx[:, None])
    fq = mlp_forward(enc, qx[:, None])
    for q in range(len(qx)):
        scores = [-sum((fq[q, j] - fs[k, j]) ** 2 for j in range(fs.shape[1])) for k in range(5)]
        m = max(scores)
        w = [np.exp(s - m) for s in scores]
        assert got[q] == pytest.approx(sum(wi * yi for wi, yi in zip(w, sy)) / sum(w), abs=1e-12)


# meta-gradients vs finite differences ------------------------------------------------

CLASSIFICATION_KINDS = [
    ("protonet", {}),
    ("maml", {"inner_lr": 0.1, "meta_grad_mode": "exact"}),
    ("protomaml", {"inner_lr": 0.1, "meta_grad_mode": "exact"}),
    ("ridge", {"ridge_rho": 0.5}),
]
REGRESSION_KINDS = [
    ("kernel", {}),
    ("maml", {"inner_lr": 0.05, "meta_grad_mode": "exact"}),
    ("ridge", {"ridge_rho": 0.5}),
]


def _query_loss_fn(kind, kw, task, seed):
    if task == "classification":
        params = small_encoder(seed)
        if kind == "maml":
            params = with_linear_head(params, 3, np.random.default_rng(seed + 100))
        sx, sy, qx, qy = class_episode(seed)
    else:
        params = small_encoder(seed, d_in=1, d_out=3)
        if kind == "maml":
            params = with_linear_head(params, 1, np.random.default_rng(seed + 100))
        sx, sy, qx, qy = reg_episode(seed)
    learner = Learner(LearnerConfig(kind, **kw), params, task, 3)

    def loss(leaves):
        gen = learner.generate(params.net(leaves), sx, sy)
        out = gen.logits(as_inputs(qx, task))
        if task == "classification":
            return cross_entropy_rows(out, qy).mean()
        return T.square(out - T.Tensor(qy)).mean()

    def numeric(flat):
        p = params.unflatten(flat)
        return float(loss(p.tensors()).data)

    return params, loss, numeric


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("kind,kw", CLASSIFICATION_KINDS, ids=[k for k, _ in CLASSIFICATION_KINDS])
def test_classification_meta_gradient(kind, kw, seed):
    params, loss, numeric = _query_loss_fn(kind, kw, "classification", seed)
    leaves = params.tensors()
    analytic = np.concatenate([g.data.ravel() for g in T.grad(loss(leaves), leaves)])
    assert rel_err(analytic, central_diff(numeric, params.flatten())) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("kind,kw", REGRESSION_KINDS, ids=[k for k, _ in REGRESSION_KINDS])
def test_regression_meta_gradient(kind, kw, seed):
    params, loss, numeric = _query_loss_fn(kind, kw, "regression", seed)
    leaves = params.tensors()
    analytic = np.concatenate([g.data.ravel() for g in T.grad(loss(leaves), leaves)])
    assert rel_err(analytic, central_diff(numeric, params.flatten())) <= 1e-4


def test_first_order_differs_from_exact():
    params, _, _ = _query_loss_fn("maml", {"inner_lr": 0.1}, "classification", 0)
    sx, sy, qx, qy = class_episode(0)
    grads = {}
    for mode in ("exact", "first_order"):
        learner = Learner(LearnerConfig("maml", inner_lr=0.1, meta_grad_mode=mode), params,
                          "classification", 3)
        leaves = params.tensors()
        gen = learner.generate(params.net(leaves), sx, sy)
        loss = cross_entropy_rows(gen.logits(qx), qy).mean()
        grads[mode] = np.concatenate([g.data.ravel() for g in T.grad(loss, leaves)])
    assert not np.allclose(grads["exact"], grads["first_order"])


# permutation invariance -------------------------------------------------------------

ALL_KINDS = [("classification", k, kw) for k, kw in CLASSIFICATION_KINDS] + [
    ("regression", k, kw) for k, kw in REGRESSION_KINDS]


@pytest.mark.parametrize("task,kind,kw", ALL_KINDS, ids=[f"{t}-{k}" for t, k, _ in ALL_KINDS])
def test_support_permutation_invariance(task, kind, kw):
    params, _, _ = _query_loss_fn(kind, kw, task, 11)
    sx, sy, qx, _ = class_episode(11) if task == "classification" else reg_episode(11)
    learner = Learner(LearnerConfig(kind, **kw), params, task, 3)
    perm = np.random.default_rng(0).permutation(len(sy))
    a = learner.predict(sx, sy, qx)
    b = learner.predict(sx[perm], sy[perm], qx)
    np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)


def test_batched_generation_matches_single_episodes():
    params = with_linear_head(small_encoder(3), 3, np.random.default_rng(3))
    eps = [class_episode(s) for s in range(4)]
    sx, sy, qx, _ = (np.stack(parts) for parts in zip(*eps))
    for kind in ("protonet", "maml", "protomaml", "ridge"):
        p = params if kind == "maml" else small_encoder(3)
        learner = Learner(LearnerConfig(kind, inner_lr=0.1), p, "classification", 3)
        batched = learner.predict(sx, sy, qx)
        for i, (a, b, c, _) in enumerate(eps):
            np.testing.assert_allclose(batched[i], learner.predict(a, b, c), atol=1e-12)


def test_bad_kind_rejected():
    with pytest.raises(ConfigError):
        LearnerConfig("feat").validate()
    with pytest.raises(ConfigError):
        LearnerConfig("ridge", ridge_rho=0.0).validate()


def test_net_unused_helper():
    # the encoder applied to a single row and to a batch agree
    enc = small_encoder(9)
    x = np.random.default_rng(9).standard_normal((5, 3))
    one = Net(enc.tensors(), enc.activations)(x[:1]).data
    np.testing.assert_allclose(one, Net(enc.tensors(), enc.activations)(x).data[:1], atol=1e-15)
