import math

import numpy as np
import pytest
from sklearn.base import clone

from _oracles import gradcheck_topology, gradient_check, residual_pair
from netadjust import _streams
from netadjust.exceptions import TopologyError, TrainingDivergedError
from netadjust.mini_engine import (CNNEvaluator, ConvNet, ConvNetClassifier, SurrogateLogEvaluator,
                                   SyntheticDatasetSpec, load_tensor, make_dataset, save_tensor)
from netadjust.mini_engine import ops
from netadjust.mini_engine.ops import softmax_cross_entropy
from netadjust.topology import INPUT, LayerSpec, NetworkTopology
from netadjust.zoo import chain_net


def test_gradients_match_finite_differences(rng):
    topo = gradcheck_topology()
    net = ConvNet(topo, topo.default_config(), rng=np.random.default_rng(1))
    worst = gradient_check(net, rng.standard_normal((4, 3, 6, 6)), np.array([0, 1, 2, 1]))
    assert set(worst) >= {"conv.w", "conv.gamma", "conv.beta", "fc.w", "fc.b", "input"}
    assert max(worst.values()) < 1e-4, worst


def test_padded_add_equals_explicit_split(rng):
    padded, split = residual_pair()
    x = rng.standard_normal((100, 3, 8, 8))
    np.testing.assert_allclose(padded.forward(x), split.forward(x), atol=1e-6, rtol=0)


def test_add_pads_narrow_input(rng):
    wide = rng.standard_normal((2, 4, 4, 17))
    narrow = rng.standard_normal((2, 4, 4, 16))
    for a, b in ((wide, narrow), (narrow, wide)):
        out, _ = ops.add_forward(a, b)
        assert out.shape[-1] == 17
        np.testing.assert_array_equal(out[..., 16], wide[..., 16])
        np.testing.assert_allclose(out[..., :16], wide[..., :16] + narrow)


def test_identity_1x1_conv(rng):
    x = rng.standard_normal((2, 5, 5, 6))
    out, _ = ops.conv_forward(x, np.eye(6).reshape(6, 6, 1, 1))
    np.testing.assert_array_equal(out, x)


def test_strided_conv_shape(rng):
    out, _ = ops.conv_forward(rng.standard_normal((1, 8, 8, 3)), rng.standard_normal((4, 3, 3, 3)), 2)
    assert out.shape == (1, 4, 4, 4)


def test_bn_train_normalizes_and_eval_uses_running_stats(rng):
    x = rng.normal(3.0, 2.0, (64, 4, 4, 5))
    gamma, beta = np.ones(5), np.zeros(5)
    mean, var = np.zeros(5), np.ones(5)
    out, _ = ops.bn_forward(x, gamma, beta, mean, var, train=True)
    assert np.all(np.abs(out.mean(axis=(0, 1, 2))) < 0.05)
    assert np.all(np.abs(out.var(axis=(0, 1, 2)) - 1) < 0.05)
    assert np.all(mean > 0.2)  # running stats moved toward the batch

    mean, var = np.full(5, 1.0), np.full(5, 4.0)
    out, _ = ops.bn_forward(x, gamma, beta, mean, var, train=False)
    np.testing.assert_allclose(out, (x - 1.0) / np.sqrt(4.0 + ops.BN_EPS))
    assert mean[0] == 1.0 and var[0] == 4.0


def conv_only(channels=8):
    layers = [LayerSpec("a", "conv", (INPUT,), kernel_size=3, channels=channels, bn=False, relu=False)]
    return NetworkTopology((3, 6, 6), layers, ["a"], name="conv_only")


def test_dropped_channels_are_zero_everywhere(rng):
    topo = conv_only()
    net = ConvNet(topo, topo.default_config(), rng=np.random.default_rng(0))
    x = rng.standard_normal((20, 3, 6, 6))
    clean = net.forward(x).reshape(20, 6, 6, 8)
    dropped = net.forward(x, drop={"a": 0.5}, rng=np.random.default_rng(1)).reshape(20, 6, 6, 8)
    zero = np.all(dropped == 0, axis=(1, 2))
    assert zero.any() and not zero.all()
    kept = ~zero
    ratio = dropped.transpose(0, 3, 1, 2)[kept] / clean.transpose(0, 3, 1, 2)[kept]
    np.testing.assert_allclose(ratio, 2.0)


def test_forward_is_pure_outside_training(rng):
    topo = gradcheck_topology()
    net = ConvNet(topo, topo.default_config())
    before = {k: v.copy() for k, v in net.state_dict().items()}
    x = rng.standard_normal((3, 3, 6, 6))
    net.forward(x, drop={"a": 0.3}, rng=rng)
    net.forward(x, train=True, update_stats=False, rng=rng)
    for k, v in net.state_dict().items():
        assert np.array_equal(v, before[k])


def test_input_shape_mismatch_is_named(toy4):
    net = ConvNet(toy4, toy4.default_config())
    with pytest.raises(TopologyError) as info:
        net.forward(np.zeros((2, 3, 8, 8)))
    assert info.value.where == INPUT
    state = net.state_dict()
    state["conv2/w"] = np.zeros((1, 1, 3, 3))
    with pytest.raises(ValueError, match="conv2/w"):
        net.load_state_dict(state)


def test_initial_loss_is_log_k(rng):
    topo = chain_net(n_layers=3, channels=16, image_size=8, num_classes=10)
    net = ConvNet(topo, topo.default_config(), rng=np.random.default_rng(0))
    x = rng.standard_normal((256, 3, 8, 8))
    loss, _ = softmax_cross_entropy(net.forward(x, train=True, update_stats=False), rng.integers(10, size=256))
    assert abs(loss - math.log(10)) < 0.3


@pytest.fixture(scope="module")
def small_data():
    return make_dataset(SyntheticDatasetSpec(samples_per_class=30, noise_level=0.5))


def test_zero_lr_leaves_parameters_untouched(toy4, small_data):
    clf = ConvNetClassifier(toy4, epochs=1, lr_max=0.0, lr_min=0.0, batch_size=16)
    clf.fit(small_data.X_train, small_data.y_train)
    init = clf._init_network()
    for lid, p in init.params.items():
        for name, v in p.items():
            assert np.array_equal(v, clf.network_.params[lid][name])


def test_same_seed_same_weights(toy4, small_data):
    a = ConvNetClassifier(toy4, epochs=2, batch_size=16, random_state=3).fit(small_data.X_train, small_data.y_train)
    b = ConvNetClassifier(toy4, epochs=2, batch_size=16, random_state=3).fit(small_data.X_train, small_data.y_train)
    c = ConvNetClassifier(toy4, epochs=2, batch_size=16, random_state=4).fit(small_data.X_train, small_data.y_train)
    sa, sb, sc = (m.network_.state_dict() for m in (a, b, c))
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert not all(np.array_equal(sa[k], sc[k]) for k in sa)


def test_divergence_raises(toy4, small_data):
    clf = ConvNetClassifier(toy4, epochs=3, lr_max=1e30, batch_size=16)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as info:
        clf.fit(small_data.X_train, small_data.y_train)
    assert info.value.iteration is not None and info.value.activation_max


def test_classifier_api(toy4, small_data):
    labels = np.array(["w", "x", "y", "z"])[small_data.y_train]
    clf = ConvNetClassifier(toy4, epochs=1, batch_size=16)
    assert clone(clf).get_params()["epochs"] == 1
    clf.fit(small_data.X_train, labels)
    proba = clf.predict_proba(small_data.X_val)
    assert proba.shape == (len(small_data.X_val), 4)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(clf.predict(small_data.X_val)) <= set(labels)
    assert 0.0 <= clf.score(small_data.X_val, np.array(["w", "x", "y", "z"])[small_data.y_val]) <= 1.0
    with pytest.raises(ValueError):
        clf.predict(np.zeros((2, 3, 4, 4)))
    with pytest.raises(ValueError):
        ConvNetClassifier(toy4, dropout_kind="nope").fit(small_data.X_train, labels)


def test_gaussian_dropout_trains(toy4, small_data):
    clf = ConvNetClassifier(toy4, epochs=1, batch_size=16, dropout=0.2, dropout_kind="gaussian")
    clf.fit(small_data.X_train, small_data.y_train)
    assert np.isfinite(clf.loss_curve_).all()


def test_cosine_schedule():
    from netadjust.mini_engine.classifier import cosine_lr

    assert cosine_lr(0, 10, 0.1, 0.001) == pytest.approx(0.1)
    assert cosine_lr(9, 10, 0.1, 0.001) == pytest.approx(0.001)
    assert cosine_lr(0, 1, 0.1, 0.001) == 0.1


def test_dataset_is_pure_and_splits_disjoint():
    spec = SyntheticDatasetSpec(samples_per_class=20, num_classes=5)
    a, b = make_dataset(spec), make_dataset(spec)
    for name in ("train", "val", "test"):
        for u, v in zip(a.split(name), b.split(name)):
            assert u.tobytes() == v.tobytes()
    rows = {name: {x.tobytes() for x in a.split(name)[0]} for name in ("train", "val", "test")}
    assert not rows["train"] & rows["val"] and not rows["train"] & rows["test"]
    assert not rows["val"] & rows["test"]
    assert len(a.X_val) == len(a.X_test) == 20 and len(a.X_train) == 60
    assert make_dataset(SyntheticDatasetSpec(samples_per_class=20, seed=1)).X_train.tobytes() != a.X_train.tobytes()


def test_dataset_spec_checks():
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(num_classes=11)
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(val_fraction=0.5, test_fraction=0.5)


def test_tensor_file_round_trip(tmp_path, rng):
    path = tmp_path / "t.bin"
    arr = np.arange(6, dtype=np.int32).reshape(2, 3)
    save_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:8] == b"NATN\x01\x03\x02\x00"
    assert raw[8:24] == (2).to_bytes(8, "little") + (3).to_bytes(8, "little")
    assert len(raw) == 24 + 24
    assert np.array_equal(load_tensor(path), arr)

    x = rng.standard_normal((2, 3, 4)).astype(">f8")
    save_tensor(path, x)
    assert np.array_equal(load_tensor(path), x)

    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_tensor(path)
    path.write_bytes(raw[:-1])
    with pytest.raises(ValueError, match="payload"):
        load_tensor(path)


def test_dataset_export_import(tmp_path):
    from netadjust.mini_engine.data import export_dataset, import_dataset

    ds = make_dataset(SyntheticDatasetSpec(samples_per_class=5))
    export_dataset(ds, tmp_path / "d")
    again = import_dataset(tmp_path / "d")
    for name in ("train", "val", "test"):
        assert np.array_equal(again.split(name)[0], ds.split(name)[0])


def test_checkpoint_round_trip(tmp_path, toy4, toy_cnn):
    ev, handle = toy_cnn
    path = tmp_path / "model.npz"
    handle.network_.save(path)
    net = ConvNet.load(path)
    assert net.config == handle.network_.config
    x = ev.dataset.X_val[:8]
    assert np.array_equal(net.forward(x), handle.network_.forward(x))
    assert ev.evaluate(ev.load_handle(path)) == ev.evaluate(handle)


def test_untrained_network_is_at_chance(toy4, toy_cnn):
    ev, _ = toy_cnn
    accs = [ev.evaluate(ev.train(toy4, toy4.default_config(), budget=0, seed=s)) for s in range(5)]
    assert abs(np.mean(accs) - 0.25) <= 0.1


def test_toy_training_reaches_high_accuracy(toy4):
    ev = CNNEvaluator(SyntheticDatasetSpec(), epochs=20, batch_size=32)
    assert ev.evaluate(ev.train(toy4, toy4.default_config())) > 0.9


def test_sample_caps_are_deterministic(toy4):
    ev = CNNEvaluator(SyntheticDatasetSpec(samples_per_class=20), max_train_samples=10, max_val_samples=7)
    assert len(ev._split("train")[0]) == 10 and len(ev._split("val")[0]) == 7
    assert np.array_equal(ev._split("val")[0], ev._split("val")[0])


@pytest.fixture(params=["surrogate", "cnn"])
def evaluator_and_handle(request, toy4, toy_surrogate, toy_cnn):
    if request.param == "surrogate":
        return toy_surrogate, toy_surrogate.train(toy4, toy4.default_config())
    return toy_cnn


def test_contract_p_zero_equals_evaluate(evaluator_and_handle):
    ev, handle = evaluator_and_handle
    seq = _streams.seed_sequence(0, "contract")
    assert ev.evaluate_with_drop(handle, "conv2", 0.0, 4, seq) == ev.evaluate(handle)
    assert np.all(ev.drop_samples(handle, "conv2", 0.0, 3, seq) == ev.evaluate(handle))


def test_contract_deterministic(evaluator_and_handle):
    ev, handle = evaluator_and_handle
    assert ev.evaluate(handle) == ev.evaluate(handle)
    a = ev.drop_samples(handle, "conv3", 0.3, 4, _streams.seed_sequence(1, "c"))
    b = ev.drop_samples(handle, "conv3", 0.3, 4, _streams.seed_sequence(1, "c"))
    assert a.shape == (4,) and np.array_equal(a, b)
    assert np.all((0 <= a) & (a <= 1))


@pytest.mark.parametrize("p", [-0.1, 1.0])
def test_contract_rejects_bad_p(evaluator_and_handle, p):
    ev, handle = evaluator_and_handle
    with pytest.raises(ValueError):
        ev.drop_samples(handle, "conv2", p, 1, _streams.seed_sequence(0))


def test_surrogate_symmetry_and_diminishing_returns(toy4):
    ev = SurrogateLogEvaluator(toy4, bias=2.0)
    c = np.array([8, 16, 24, 32])
    assert ev.accuracy(c) == pytest.approx(ev.accuracy(c[::-1]))
    g = ev.gradient(c)
    g2 = ev.gradient(c * np.array([2, 1, 1, 1]))
    assert g2[0] < g[0]
    with pytest.raises(ValueError):
        SurrogateLogEvaluator(toy4, weights=[1, 2])
    with pytest.raises(ValueError):
        SurrogateLogEvaluator(toy4, weights=[1, 0, 1, 1])
