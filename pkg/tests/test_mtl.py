import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxfl.errors import ConfigError, DataError
from auxfl.mtl import (
    HardSharedModel,
    Shard,
    TaskSpec,
    WeightingStrategy,
    composite_loss,
    local_train,
    mtl_backward,
    mtl_forward,
    mtl_loss_and_grad,
    sample_rlw,
)
from auxfl.nn import Dense, LayerStack, softmax_cross_entropy

from conftest import TINY_TASKS, central_difference, relative_error, tiny_model


def _batch(model, n=5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n,) + model.trunk.input_shape)
    labels = {t.id: rng.integers(0, t.num_classes, n) for t in model.tasks}
    return x, labels


def test_forward_returns_declared_tasks_in_order():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(0))
    x, _ = _batch(model)
    logits, _ = mtl_forward(model, params, x)
    assert list(logits) == ["service", "duration", "bandwidth"]
    assert [v.shape[1] for v in logits.values()] == [4, 3, 2]
    again, _ = mtl_forward(model, params, x)
    assert all(again[k].tobytes() == logits[k].tobytes() for k in logits)


def test_forward_hand_computed_logits():
    tasks = [TaskSpec("a", "main", 2), TaskSpec("b", "auxiliary", 2)]
    trunk = LayerStack([Dense(2, 2)], (2,))
    heads = {"a": LayerStack([Dense(2, 2)], (2,)), "b": LayerStack([Dense(2, 2)], (2,))}
    model = HardSharedModel(trunk, heads, tasks)
    # trunk: identity weights, bias (1, -1); head a: [[1,2],[3,4]] bias 0; head b: [[0,1],[1,0]] bias (5, 6)
    params = np.array([1, 0, 0, 1, 1, -1, 1, 2, 3, 4, 0, 0, 0, 1, 1, 0, 5, 6], dtype=float)
    logits, _ = model.forward(params, np.array([[2.0, 3.0]]))
    # features = (3, 2); a = (3 + 4, 9 + 8) ; b = (2 + 5, 3 + 6)
    assert logits["a"].tolist() == [[7.0, 17.0]]
    assert logits["b"].tolist() == [[7.0, 9.0]]


def test_param_count_decomposes():
    model = tiny_model()
    assert model.n_params == model.trunk.n_params + sum(h.n_params for h in model.heads.values())
    assert model.init_params(np.random.default_rng(0)).shape == (model.n_params,)


def test_model_validates_heads():
    trunk = LayerStack([Dense(2, 3)], (2,))
    with pytest.raises(ConfigError):
        HardSharedModel(trunk, {"a": LayerStack([Dense(2, 2)], (2,))}, [TaskSpec("a", "main", 2)])
    with pytest.raises(ConfigError):
        HardSharedModel(trunk, {"a": LayerStack([Dense(3, 4)], (3,))}, [TaskSpec("a", "main", 2)])
    with pytest.raises(ConfigError):
        TaskSpec("a", "main", 1)


@pytest.mark.parametrize(
    "raw, expected",
    [((0.0, 0.0), (0.5, 0.5)), ((math.log(3), 0.0), (0.75, 0.25)), ((0.0, 0.0, 0.0), (1 / 3, 1 / 3, 1 / 3))],
)
def test_rlw_softmax_of_pinned_draw(raw, expected):
    tau = sample_rlw(np.random.default_rng(0), len(raw), raw=raw)
    np.testing.assert_allclose(tau, expected, rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_rlw_on_simplex(seed, n):
    tau = sample_rlw(np.random.default_rng(seed), n)
    assert abs(tau.sum() - 1.0) <= 1e-12
    assert (tau > 0).all()


def test_composite_loss_examples():
    losses = {"main": 0.9, "a": 0.6, "b": 0.3}
    assert composite_loss(losses, [0.5, 0.5], "fedaux", "main", ["a", "b"]) == pytest.approx(1.35, abs=1e-15)
    assert composite_loss(losses, [0.0, 0.0], "fedaux", "main", ["a", "b"]) == 0.9
    assert composite_loss({"x": 3.0, "y": 3.0, "z": 3.0}, [1 / 3] * 3, "mtdnn") == pytest.approx(3.0, abs=1e-15)
    with pytest.raises(ConfigError):
        composite_loss({"a": 1.0}, [1.0], "fedaux", "main", ["a"])


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0, 10),
    st.lists(st.floats(0, 10), min_size=1, max_size=5),
    st.integers(0, 2**32 - 1),
)
def test_composite_not_below_main(main, aux, seed):
    w = sample_rlw(np.random.default_rng(seed), len(aux))
    losses = {"m": main} | {f"a{i}": v for i, v in enumerate(aux)}
    assert composite_loss(losses, w, "fedaux", "m", [f"a{i}" for i in range(len(aux))]) >= main


def _single_task_grad(model, params, x, labels, tid, scale=1.0):
    logits, cache = model.forward(params, x)
    _, d = softmax_cross_entropy(logits[tid], labels[tid])
    return model.backward(params, cache, {tid: scale * d})


def test_zero_aux_weights_reduce_to_main_gradient():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(1))
    x, labels = _batch(model)
    g = mtl_backward(model, params, x, labels, np.zeros(2), "fedaux")
    main_only = _single_task_grad(model, params, x, labels, "service")
    assert g.tobytes() == main_only.tobytes()
    for tid in ("duration", "bandwidth"):
        assert not g[model.head_slices[tid]].any()


def test_gradient_linearity():
    tasks = [TaskSpec("a", "main", 3), TaskSpec("b", "auxiliary", 2)]
    model = tiny_model(tasks)
    params = model.init_params(np.random.default_rng(2))
    x, labels = _batch(model, seed=2)
    a, b = 0.7, 1.9
    g = mtl_backward(model, params, x, labels, np.array([a, b]), "mtdnn")
    ga = _single_task_grad(model, params, x, labels, "a")
    gb = _single_task_grad(model, params, x, labels, "b")
    np.testing.assert_allclose(g, a * ga + b * gb, rtol=0, atol=1e-12)


def test_single_task_backward_leaves_other_heads_zero():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(3))
    x, labels = _batch(model)
    for tid in model.task_ids:
        g = _single_task_grad(model, params, x, labels, tid)
        for other in model.task_ids:
            if other != tid:
                assert not g[model.head_slices[other]].any()


@pytest.mark.parametrize("mode, weights", [("fedaux", [0.3, 0.7]), ("mtdnn", [0.2, 0.5, 0.3])])
def test_composite_gradient_finite_differences(mode, weights):
    model = tiny_model()
    params = model.init_params(np.random.default_rng(4))
    params += 0.05 * np.random.default_rng(5).standard_normal(params.shape)
    x, labels = _batch(model, seed=4)
    w = np.array(weights)
    loss, _, g = mtl_loss_and_grad(model, params, x, labels, w, mode)
    numeric = central_difference(lambda p: mtl_loss_and_grad(model, p, x, labels, w, mode)[0], params)
    assert relative_error(g, numeric) < 1e-5


def test_unequal_label_batches_rejected():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(0))
    x, labels = _batch(model)
    labels["duration"] = labels["duration"][:-1]
    with pytest.raises(DataError):
        mtl_backward(model, params, x, labels, np.zeros(2), "fedaux")


def _shard(model, n, seed=0):
    x, labels = _batch(model, n, seed)
    return Shard(x, labels)


def test_local_train_zero_eta_is_identity():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(0))
    out, hist = local_train(model, params, _shard(model, 6), 0.0, 10, 1, WeightingStrategy(), np.random.default_rng(0))
    assert out.tobytes() == params.tobytes()
    assert set(hist) == set(model.task_ids) and all(len(v) == 1 for v in hist.values())


def test_local_train_single_sample_single_step():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(0))
    shard = _shard(model, 1)
    strategy = WeightingStrategy("rlw", "fedaux")
    out, _ = local_train(model, params, shard, 0.05, 1, 1, strategy, np.random.default_rng(9))
    # replay the rng: one permutation, then one RLW draw
    rng = np.random.default_rng(9)
    rng.permutation(1)
    tau = sample_rlw(rng, 2)
    _, _, g = mtl_loss_and_grad(model, params, shard.x, shard.labels, tau, "fedaux")
    assert out.tobytes() == (params - 0.05 * g).tobytes()


def test_local_train_deterministic():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(0))
    shard = _shard(model, 40)
    runs = [
        local_train(model, params, shard, 0.1, 8, 3, WeightingStrategy("rlw"), np.random.default_rng(5))
        for _ in range(2)
    ]
    assert runs[0][0].tobytes() == runs[1][0].tobytes()
    assert runs[0][1] == runs[1][1]


def test_local_train_reduces_loss():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(0))
    shard = _shard(model, 64)
    _, hist = local_train(model, params, shard, 0.1, 16, 30, WeightingStrategy("elw"), np.random.default_rng(1))
    assert hist["service"][-1] < hist["service"][0]


def test_local_train_rejects_empty_shard():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(0))
    empty = Shard(np.zeros((0, 1, 8)), {t.id: np.zeros(0, dtype=int) for t in TINY_TASKS})
    with pytest.raises(ConfigError):
        local_train(model, params, empty, 0.1, 4, 1, WeightingStrategy(), np.random.default_rng(0))


def test_weighting_strategy_scopes():
    model = tiny_model()
    rng = np.random.default_rng(0)
    assert WeightingStrategy("elw", "fedaux").draw(model, rng).tolist() == [0.5, 0.5]
    assert WeightingStrategy("elw", "mtdnn").expected(model).tolist() == [1 / 3] * 3
    assert WeightingStrategy("elw", "mtdnn", elw_normalized=False).expected(model).tolist() == [1.0] * 3
    assert WeightingStrategy("rlw", "mtdnn").draw(model, rng).shape == (3,)
    assert WeightingStrategy("elw", "fedaux", elw_weights=(0.25, 0.75)).expected(model).tolist() == [0.25, 0.75]
    with pytest.raises(ConfigError):
        WeightingStrategy("elw", elw_weights=(0.5, 0.6))
    with pytest.raises(ConfigError):
        WeightingStrategy("gradnorm")


@pytest.mark.parametrize("resample, draws", [("batch", 4), ("epoch", 2), ("round", 1)])
def test_rlw_resampling_granularity(resample, draws, monkeypatch):
    import auxfl.mtl as mtl

    calls = []
    real = mtl.sample_rlw
    monkeypatch.setattr(mtl, "sample_rlw", lambda rng, n, raw=None: calls.append(n) or real(rng, n))
    model = tiny_model()
    params = model.init_params(np.random.default_rng(0))
    local_train(model, params, _shard(model, 8), 0.01, 4, 2, WeightingStrategy("rlw", resample=resample),
                np.random.default_rng(0))
    assert len(calls) == draws
