import numpy as np
import pytest

from interpguard import detect, nn
from interpguard._validation import ConfigError, DegenerateForestError, NotFittedError
from interpguard.attacks import AttackConfig
from interpguard.detect import SUB_KINDS, TriLabel
from interpguard.forest import RandomForest
from interpguard.interpret import IGConfig
from interpguard.metrics import roc_auc


@pytest.fixture(scope="module")
def clean_pool(trained_cnn, stripes):
    test = stripes[1]
    return test.images[:60], test.labels[:60]


def test_trilabel_encoding():
    np.testing.assert_array_equal(TriLabel.CLEAN.one_hot, [1, 0, 0])
    np.testing.assert_array_equal(TriLabel.L2.one_hot, [0, 1, 0])
    np.testing.assert_array_equal(TriLabel.LINF.one_hot, [0, 0, 1])
    assert TriLabel.for_norm("linf") is TriLabel.LINF
    with pytest.raises(ConfigError):
        TriLabel.for_norm("l0")


def test_clean_only_dataset(trained_cnn, clean_pool):
    x, y = clean_pool
    det, report = detect.build_detection_dataset(trained_cnn, x, y, vaccinated=False, balance=False,
                                                 ig_config=IGConfig(steps=3))
    assert len(det) and np.all(det.labels == TriLabel.CLEAN)
    assert report["after_balancing"]["clean"] == len(det)


def test_fgsm_samples_labeled_linf(trained_cnn, clean_pool):
    x, y = clean_pool
    det, _ = detect.build_detection_dataset(trained_cnn, x, y, linf_attacks=[AttackConfig("FGSM")],
                                            vaccinated=False, balance=False, ig_config=IGConfig(steps=3))
    attacked = det.provenance != "clean"
    assert attacked.any()
    assert np.all(det.labels[attacked] == TriLabel.LINF)
    # only successful examples enter the set
    assert np.all(nn.predict(trained_cnn, det.images[attacked]) != det.true_labels[attacked])
    # maps are taken at the classifier's prediction
    np.testing.assert_array_equal(det.predicted, nn.predict(trained_cnn, det.images))
    np.testing.assert_array_equal(det.maps["VG"], detect.compute_maps(trained_cnn, det.images, ("VG",))["VG"])


def test_vaccinated_requires_both_families(trained_cnn, clean_pool):
    x, y = clean_pool
    with pytest.raises(ConfigError):
        detect.build_detection_dataset(trained_cnn, x, y, linf_attacks=[AttackConfig("FGSM")])


def test_balanced_counts(mini_detection):
    _, sets = mini_detection
    for det in sets:
        counts = np.array(list(det.counts().values()))
        assert counts.min() >= 0.9 * counts.max()


def test_round_robin_assignment(trained_cnn, clean_pool):
    x, y = clean_pool
    l2 = [AttackConfig("DeepFool"), AttackConfig("DDN", iterations=10)]
    det, _ = detect.build_detection_dataset(trained_cnn, x, y, l2, [AttackConfig("FGSM")], balance=False,
                                            ig_config=IGConfig(steps=2), assignment="round_robin")
    correct = np.flatnonzero(nn.predict(trained_cnn, x) == y)
    pos = {sid: i for i, sid in enumerate(correct)}
    for prov, sid in zip(det.provenance, det.source_ids):
        if prov == "DeepFool-U":
            assert pos[sid] % 2 == 0
        elif prov == "DDN-U":
            assert pos[sid] % 2 == 1


def test_sub_detector_zero_epochs_and_routing(mini_detection):
    ens, (det_a, _, det_c) = mini_detection
    untrained = detect.train_sub_detector("VG", det_a, nn.TrainConfig(epochs=0), width=4)
    fresh = nn.build_preset("cnn", det_a.maps["VG"].shape[1:], 3, seed=0, width=4)
    np.testing.assert_array_equal(untrained.network.params[0]["W"], fresh.params[0]["W"])
    sample = det_c[0]
    org = ens.sub_detectors_["ORG"]
    np.testing.assert_array_equal(detect.sub_detector_scores(org, sample), org.scores(sample.image[None])[0])
    vg = ens.sub_detectors_["VG"]
    np.testing.assert_array_equal(detect.sub_detector_scores(vg, sample), vg.scores(sample.maps["VG"][None])[0])
    assert detect.sub_detector_scores(vg, sample).sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(detect.sub_detector_scores(vg, sample), detect.sub_detector_scores(vg, sample))


def test_sub_detectors_beat_chance(mini_detection):
    ens, (_, _, det_c) = mini_detection
    for kind, sub in ens.sub_detectors_.items():
        assert sub.accuracy(det_c) > 1 / 3, kind


def test_feature_vector_blocks(mini_detection):
    ens, (_, _, det_c) = mini_detection
    feats = ens.features(det_c)
    assert feats.shape == (len(det_c), 15)
    np.testing.assert_allclose(feats.reshape(-1, 5, 3).sum(axis=2), 1.0, atol=1e-6)
    assert feats.min() >= 0 and feats.max() <= 1


def test_ensemble_detect_recomputes(mini_detection):
    ens, (_, _, det_c) = mini_detection
    out = ens.detect(det_c.images)
    np.testing.assert_allclose(out.features, ens.features(det_c), atol=1e-12)
    np.testing.assert_array_equal(out.z, (out.vote_fraction > 0.5).astype(int))
    assert set(out.sub_scores) == set(SUB_KINDS)
    auc = roc_auc(out.vote_fraction, det_c.binary_labels)
    assert auc > 0.8


def test_rf_predict_single_and_batch(mini_detection):
    ens, (_, _, det_c) = mini_detection
    feats = ens.features(det_c)
    z, frac = detect.rf_predict(ens.forest_, feats)
    z0, f0 = detect.rf_predict(ens.forest_, feats[0])
    assert (z0, f0) == (z[0], frac[0])


def test_rf_degenerate_guards(mini_detection):
    ens, (_, _, det_c) = mini_detection
    with pytest.raises(DegenerateForestError):
        detect.rf_train(np.random.default_rng(0).random((10, 15)), np.ones(10, int))
    with pytest.raises(NotFittedError):
        detect.ensemble_detect(ens.network, ens.sub_detectors_, RandomForest(n_trees=0), det_c.images[:2])


def test_detector_scalar_score():
    assert detect.detector_scalar_score([1, 0, 0]) == -1
    assert detect.detector_scalar_score([0, 0.5, 0.5]) == 1
    assert detect.detector_scalar_score([1 / 3] * 3) == pytest.approx(1 / 3)


def test_detector_round_trip(tmp_path, mini_detection):
    ens, (_, _, det_c) = mini_detection
    np.savez(tmp_path / "d.npz", **ens.to_arrays())
    with np.load(tmp_path / "d.npz") as data:
        back = detect.EnsembleDetector(ens.network, ig_steps=8).load_arrays(dict(data))
    np.testing.assert_array_equal(back.decision_function(det_c.images), ens.decision_function(det_c.images))


def test_detection_set_persistence(tmp_path, mini_detection):
    _, (_, _, det_c) = mini_detection
    detect.save_detection_set(tmp_path / "s.npz", det_c, "h1")
    back = detect.load_detection_set(tmp_path / "s.npz", "h1")
    np.testing.assert_array_equal(back.maps["IG"], det_c.maps["IG"])
    np.testing.assert_array_equal(back.provenance, det_c.provenance)
    with pytest.raises(ConfigError):
        detect.load_detection_set(tmp_path / "s.npz", "h2")


def test_restrict_detection_set(mini_detection):
    _, (det_a, _, _) = mini_detection
    only = detect.restrict_detection_set(det_a, ["clean", "FGSM-U"])
    assert set(only.provenance) == {"clean", "FGSM-U"}
    assert only.counts()["l2"] == 0
    assert only.counts()["clean"] == only.counts()["linf"]


def test_estimator_params():
    ens = detect.EnsembleDetector(n_trees=7)
    assert ens.get_params()["n_trees"] == 7
    with pytest.raises(NotFittedError):
        ens.predict(np.zeros((1, 16, 16, 1)))
