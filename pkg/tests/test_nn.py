import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from interpguard import nn
from interpguard._validation import (ClassIndexError, InputShapeError, ModelFormatError,
                                     ModelVersionError, TrainingDivergedError)
from interpguard.data import synth_dataset
from conftest import small_cnn


def linear_net(w, b=None):
    shape = w.shape[:-1]
    n_in, n_out = int(np.prod(shape)), w.shape[-1]
    params = [None, {"W": w.reshape(n_in, n_out), "b": np.zeros(n_out) if b is None else b}, None]
    return nn.Network(shape, [nn.flatten(), nn.dense(n_in, n_out), nn.softmax()], params=params)


def central_difference(fn, x, index, h=1e-3):
    xp, xm = x.copy(), x.copy()
    xp[index] += h
    xm[index] -= h
    return (fn(xp) - fn(xm)) / (2 * h)


def test_zero_network_is_uniform():
    net = small_cnn()
    for p in net.params:
        if p is not None:
            p["W"][:] = 0
            p["b"][:] = 0
    probs, _ = nn.forward(net, np.random.default_rng(0).random((6, 6, 1)))
    np.testing.assert_allclose(probs, np.full(3, 1 / 3))


def test_dense_template_logits():
    templates = np.zeros((2, 2, 1, 2))
    templates[0, 0, 0, 0] = templates[1, 1, 0, 0] = 1.0
    templates[0, 1, 0, 1] = templates[1, 0, 0, 1] = 1.0
    net = linear_net(templates)
    x = np.array([[1.0, 0.0], [0.0, 0.8]])[..., None]
    z = nn.logits(net, x)
    np.testing.assert_allclose(z, [1.8, 0.0])
    assert nn.predict(net, x) == 0


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_probabilities_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    net = small_cnn(seed=seed)
    probs, _ = nn.forward(net, rng.random((4, 6, 6, 1)) * rng.uniform(0.1, 50))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_trace_replays_bit_exactly():
    net = small_cnn()
    x = np.random.default_rng(3).random((2, 6, 6, 1))
    _, trace = nn.forward(net, x)
    assert len(trace.inputs) == len(net.layers) == len(trace.outputs)
    for i in range(len(net.layers)):
        sub = nn.Network(net.shapes[i], list(net.layers[i:-1]) + [nn.softmax()] if i < len(net.layers) - 1
                         else [nn.softmax()], params=net.params[i:-1] + [None] if i < len(net.layers) - 1
                         else [None])
        _, replay = nn.forward(sub, trace.inputs[i])
        np.testing.assert_array_equal(replay.outputs[0], trace.outputs[i])


def test_shape_mismatch_rejected():
    with pytest.raises(InputShapeError):
        nn.forward(small_cnn(), np.zeros((5, 5, 1)))


def test_linear_gradient_equals_weights(rng):
    w = rng.normal(size=(4, 3, 1, 2))
    net = linear_net(w)
    _, trace = nn.forward(net, rng.random((4, 3, 1)))
    for c in range(2):
        np.testing.assert_allclose(nn.backward_input(net, trace, c), w[..., c])


def test_input_gradient_matches_finite_differences(rng):
    net = small_cnn(seed=7)
    x = rng.random((6, 6, 1))
    _, trace = nn.forward(net, x)
    for _ in range(100):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        cls = int(rng.integers(0, 3))
        analytic = nn.backward_input(net, trace, cls)[idx]
        numeric = central_difference(lambda v: nn.logits(net, v)[cls], x, idx)
        assert abs(analytic - numeric) / (abs(numeric) + 1e-8) < 1e-3 or abs(analytic - numeric) < 1e-9


def test_class_index_out_of_range():
    net = small_cnn()
    _, trace = nn.forward(net, np.zeros((6, 6, 1)))
    with pytest.raises(ClassIndexError):
        nn.backward_input(net, trace, 3)


def test_dead_relu_pixel_has_zero_gradient():
    # pixel (0,0) only feeds hidden unit 0, whose bias keeps it negative
    w1 = np.zeros((4, 2))
    w1[0, 0] = 1.0
    w1[1:, 1] = 1.0
    params = [None, {"W": w1, "b": np.array([-10.0, 0.0])}, None,
              {"W": np.array([[1.0, -1.0], [2.0, 0.5]]), "b": np.zeros(2)}, None]
    net = nn.Network((2, 2, 1), [nn.flatten(), nn.dense(4, 2), nn.relu(), nn.dense(2, 2), nn.softmax()],
                     params=params)
    x = np.full((2, 2, 1), 0.5)
    _, trace = nn.forward(net, x)
    for c in range(2):
        g = nn.backward_input(net, trace, c)
        assert g[0, 0, 0] == 0.0
        assert np.any(g != 0)


def test_saturated_loss_gradient_vanishes():
    w = np.zeros((2, 1, 1, 2))
    w[0, 0, 0, 0] = 200.0
    net = linear_net(w)
    _, trace = nn.forward(net, np.array([[1.0], [0.0]])[..., None])
    assert np.linalg.norm(nn.backward_loss(net, trace, 0)) < 1e-12


def test_loss_gradient_finite_differences(rng):
    net = small_cnn(seed=2)
    x = rng.random((6, 6, 1))
    _, trace = nn.forward(net, x)
    g = nn.backward_loss(net, trace, 1)
    loss = lambda v: nn.cross_entropy(nn.forward(net, v)[0], 1)[0]
    for _ in range(30):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        numeric = central_difference(loss, x, idx)
        assert abs(g[idx] - numeric) <= 1e-3 * (abs(numeric) + 1e-8) or abs(g[idx] - numeric) < 1e-9


def test_loss_gradient_from_probability_gradient(rng):
    net = small_cnn(seed=4)
    x = rng.random((6, 6, 1))
    probs, trace = nn.forward(net, x)
    l = 2
    # dp_l/dx = p_l * (dz_l/dx - sum_k p_k dz_k/dx)
    dz = np.stack([nn.backward_input(net, trace, k) for k in range(3)])
    dp = probs[l] * (dz[l] - np.tensordot(probs, dz, axes=1))
    np.testing.assert_allclose(nn.backward_loss(net, trace, l), -dp / probs[l], atol=1e-12)
    np.testing.assert_allclose(nn.backward_loss(net, trace, np.eye(3)[l]), -dp / probs[l], atol=1e-12)


def test_separable_blobs_train_to_99_percent():
    data = synth_dataset("blobs", 400, seed=0, size=8, n_classes=2)
    net = nn.build_preset("mlp", data.images.shape[1:], 2, seed=0)
    trained, history = nn.train(net, data.images, data.labels,
                                nn.TrainConfig(learning_rate=0.01, batch_size=32, epochs=20))
    assert history.train_accuracy >= 0.99
    assert nn.accuracy(trained, data.images, data.labels) >= 0.99


def test_zero_epochs_leaves_parameters():
    net = small_cnn()
    x = np.random.default_rng(0).random((8, 6, 6, 1))
    out, _ = nn.train(net, x, np.arange(8) % 3, nn.TrainConfig(epochs=0))
    for a, b in zip(net.params, out.params):
        if a is not None:
            np.testing.assert_array_equal(a["W"], b["W"])
            np.testing.assert_array_equal(a["b"], b["b"])


def test_training_is_deterministic():
    x = np.random.default_rng(0).random((40, 6, 6, 1))
    y = np.arange(40) % 3
    cfg = nn.TrainConfig(learning_rate=0.01, batch_size=8, epochs=2, seed=5)
    a, _ = nn.train(small_cnn(), x, y, cfg)
    b, _ = nn.train(small_cnn(), x, y, cfg)
    for pa, pb in zip(a.params, b.params):
        if pa is not None:
            np.testing.assert_array_equal(pa["W"], pb["W"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    net = small_cnn()
    net.params[-2]["b"][0] = np.inf
    x = np.random.default_rng(0).random((16, 6, 6, 1))
    with pytest.raises(TrainingDivergedError) as err:
        nn.train(net, x, np.arange(16) % 3, nn.TrainConfig(epochs=3))
    assert err.value.epoch == 0


def test_desk_classifier_accuracy(trained_cnn, stripes):
    train, test = stripes
    assert nn.accuracy(trained_cnn, test.images, test.labels) >= 0.85
    sample = np.arange(200)
    assert nn.accuracy(trained_cnn, train.images[sample], train.labels[sample]) >= 0.95


def test_fine_tune_zero_epochs_and_improvement(trained_cnn, stripes):
    train, test = stripes
    same, _ = nn.fine_tune(trained_cnn, train.images[:10], train.labels[:10], nn.TrainConfig(epochs=0))
    np.testing.assert_array_equal(nn.predict_proba(same, test.images), nn.predict_proba(trained_cnn, test.images))
    rng = np.random.default_rng(0)
    noisy = np.clip(train.images[:300] + rng.normal(0, 0.25, train.images[:300].shape), 0, 1)
    before = nn.accuracy(trained_cnn, noisy, train.labels[:300])
    x = np.concatenate([noisy, train.images[300:600]])
    y = np.concatenate([train.labels[:300], train.labels[300:600]])
    tuned, _ = nn.fine_tune(trained_cnn, x, y, nn.TrainConfig(learning_rate=0.001, batch_size=32, epochs=3))
    assert nn.accuracy(tuned, noisy, train.labels[:300]) > before
    clean_before = nn.accuracy(trained_cnn, test.images, test.labels)
    assert nn.accuracy(tuned, test.images, test.labels) > clean_before - 0.05


def test_model_round_trip(tmp_path, trained_cnn, stripes):
    path = tmp_path / "m.npz"
    nn.save_model(trained_cnn, path)
    loaded = nn.load_model(path)
    x = stripes[1].images
    np.testing.assert_array_equal(nn.predict_proba(loaded, x), nn.predict_proba(trained_cnn, x))


def test_corrupted_model_file(tmp_path):
    path = tmp_path / "m.npz"
    path.write_bytes(b"not a model")
    with pytest.raises(ModelFormatError):
        nn.load_model(path)


def test_model_version_mismatch(tmp_path):
    arrays = nn.network_to_arrays(small_cnn())
    header = bytes(arrays["header"]).decode().replace('"format_version": 1', '"format_version": 99')
    arrays["header"] = np.frombuffer(header.encode(), dtype=np.uint8)
    path = tmp_path / "m.npz"
    np.savez(path, **arrays)
    with pytest.raises(ModelVersionError):
        nn.load_model(path)


def test_softmax_only_last():
    with pytest.raises(ValueError):
        nn.Network((2, 2, 1), [nn.flatten(), nn.softmax(), nn.dense(4, 2), nn.softmax()])


def test_argmax_ties_lowest_index():
    net = linear_net(np.zeros((2, 2, 1, 4)))
    assert nn.predict(net, np.ones((2, 2, 1))) == 0


def test_estimator_interface(stripes):
    train, test = stripes
    clf = nn.NetworkClassifier(architecture="mlp", learning_rate=0.005, batch_size=32, epochs=3, seed=0)
    assert clf.get_params()["epochs"] == 3
    clf.fit(train.images[:300], train.labels[:300])
    assert clf.predict(test.images[:20]).shape == (20,)
    np.testing.assert_allclose(clf.predict_proba(test.images[:5]).sum(axis=1), 1.0)
