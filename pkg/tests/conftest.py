import numpy as np
import pytest

from interpguard import nn
from interpguard.data import synth_dataset


def small_cnn(seed=0, shape=(6, 6, 1), n_classes=3):
    layers = [nn.conv2d(shape[2], 2, 3, padding=1), nn.relu(), nn.maxpool(2), nn.flatten(),
              nn.dense(shape[0] // 2 * shape[1] // 2 * 2, 5), nn.relu(), nn.dense(5, n_classes), nn.softmax()]
    return nn.Network(shape, layers, seed=seed)


def bias_free(net):
    out = net.copy()
    for p in out.params:
        if p is not None:
            p["b"][:] = 0.0
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def stripes():
    data = synth_dataset("stripes", 1400, seed=5, size=16)
    return data.subset(np.arange(1000)), data.subset(np.arange(1000, 1400))


@pytest.fixture(scope="session")
def trained_cnn(stripes):
    train, _ = stripes
    net = nn.build_preset("cnn", train.images.shape[1:], train.n_classes, seed=1, width=8)
    net, _ = nn.train(net, train.images, train.labels,
                      nn.TrainConfig(learning_rate=0.003, batch_size=32, epochs=10, seed=0))
    return net


@pytest.fixture(scope="session")
def mini_detection(trained_cnn):
    """Small detection sets (A for sub-detectors, B for the forest, C held out) and a fitted ensemble."""
    from interpguard.attacks import AttackConfig
    from interpguard.detect import EnsembleDetector, build_detection_dataset
    from interpguard.interpret import IGConfig

    pool = synth_dataset("stripes", 900, seed=17, size=16)
    l2 = [AttackConfig("DeepFool")]
    linf = [AttackConfig("FGSM")]
    sets = []
    for part in np.array_split(np.arange(900), [500, 700]):
        det, _ = build_detection_dataset(trained_cnn, pool.images[part], pool.labels[part], l2, linf,
                                         ig_config=IGConfig(steps=8), source_ids=part)
        sets.append(det)
    ens = EnsembleDetector(trained_cnn, ig_steps=8, sub_epochs=6, n_trees=30, seed=0)
    ens.fit(sets[0], rf_set=sets[1])
    return ens, sets
