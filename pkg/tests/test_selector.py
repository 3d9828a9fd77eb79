import numpy as np
import pytest

from accgrad import codec, engine, fixtures, models, scenes, selector
from accgrad.engine import PropagationCounter
from accgrad.selector import AccModelNet, LabeledSample, TrainConfig, TrainingDiverged


@pytest.fixture(scope="module")
def detector():
    return fixtures.load_fixture("blob_detector")


@pytest.fixture(scope="module")
def fixture_samples(detector):
    return fixtures.selector_dataset(detector)


def test_dataset_size_and_counter(detector):
    images = [sc.frame for sc in scenes.make_scenes(0, 100, height=32, width=32)]
    counter = PropagationCounter()
    samples = selector.build_dataset(images, detector, TrainConfig(), counter)
    assert len(samples) == 10
    assert counter.snapshot() == (20, 10)
    assert all(s.mask.shape == (2, 2) for s in samples)


def test_flat_frame_labels_follow_tie_break(detector):
    flat = np.zeros((1, 64, 64))
    cfg = TrainConfig(downsample=1, qp_low=0)
    [sample] = selector.build_dataset([flat], detector, cfg)
    expected = np.zeros(16, bool)
    expected[:2] = True
    assert np.array_equal(sample.mask.ravel(), expected)


def test_labels_concentrate_near_blobs(detector):
    hits = total = 0
    for seed in range(20):
        sc = scenes.make_scene(np.random.default_rng(seed), **fixtures.SELECTOR_SCENE)
        [s] = selector.build_dataset([sc.frame], detector, TrainConfig(downsample=1))
        blocks = [(int(y) // 16, int(x) // 16) for x, y in sc.centers]
        for by, bx in zip(*np.nonzero(s.mask)):
            total += 1
            hits += any(max(abs(by - y), abs(bx - x)) <= 5 for y, x in blocks)
    assert hits / total >= 0.7


def test_output_grid_matches_blocks():
    model = AccModelNet.create(1, seed=0)
    for h, w in ((16, 16), (32, 48), (64, 128)):
        mask, probs = selector.predict_mask(model, np.random.default_rng(0).random((1, h, w)))
        assert mask.shape == probs.shape == (h // 16, w // 16)
        assert np.all(np.isfinite(probs))


def test_predict_mask_alpha_edges():
    model = AccModelNet.create(1, seed=1)
    frame = np.random.default_rng(1).random((1, 64, 64))
    assert selector.predict_mask(model, frame, 0.0)[0].all()
    _, probs = selector.predict_mask(model, frame)
    assert not selector.predict_mask(model, frame, probs.max() + 1e-9)[0].any()
    a, _ = selector.predict_mask(model, frame)
    b, _ = selector.predict_mask(model, frame)
    assert np.array_equal(a, b)


def test_training_never_touches_final_dnn(fixture_samples):
    counter = PropagationCounter(5, 3)
    cfg = TrainConfig(epochs=3, seed=1)
    _, losses = selector.train(AccModelNet.create(1, seed=1), fixture_samples[:160], cfg, counter)
    assert counter.snapshot() == (5, 3)
    assert losses[0] >= losses[1] >= losses[2]


def test_all_zero_labels_drive_probabilities_down():
    rng = np.random.default_rng(2)
    samples = [LabeledSample(rng.random((1, 64, 64)), np.zeros((4, 4), bool)) for _ in range(5)]
    model, _ = selector.train(AccModelNet.create(1, seed=2), samples, TrainConfig(seed=2))
    probs = np.concatenate([selector.predict_mask(model, s.frame)[1].ravel() for s in samples])
    assert probs.mean() < 0.1


def test_divergence_names_epoch():
    rng = np.random.default_rng(3)
    samples = [LabeledSample(rng.random((1, 32, 32)), rng.random((2, 2)) < 0.5) for _ in range(4)]
    cfg = TrainConfig(epochs=3, optimizer="sgd", lr=1e300, batch_size=1)
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        selector.train(AccModelNet.create(1, seed=3), samples, cfg)


def test_config_validation():
    for bad in (dict(epochs=0), dict(pos_weight=0), dict(budget=0), dict(budget=1.5),
                dict(optimizer="rmsprop"), dict(lr=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_shipped_selector_heldout_f1(detector, fixture_samples):
    model = fixtures.load_selector()
    assert selector.evaluate_labels(model, fixture_samples[160:])["f1"] >= 0.7


def test_positive_weighting_raises_recall(fixture_samples):
    train, test = fixture_samples[:160], fixture_samples[160:]
    recalls = {}
    for pw in (1.0, 4.0):
        model, _ = selector.train(AccModelNet.create(1, seed=4), train, TrainConfig(seed=4), pos_weight=pw)
        recalls[pw] = selector.evaluate_labels(model, test)["recall"]
    assert recalls[4.0] >= recalls[1.0]


def test_cost_report_examples():
    r = selector.cost_report(1000, TrainConfig())
    assert (r["decoupled_passes"], r["conventional_passes"], r["ratio"]) == (300, 45000, 150)
    assert selector.cost_report(7, TrainConfig(epochs=1, downsample=1))["ratio"] == 1
    assert selector.cost_report(100, TrainConfig(downsample=1))["ratio"] == 15
    with pytest.raises(ValueError):
        selector.cost_report(0, TrainConfig())


def test_block_f1():
    a = np.array([[True, False], [True, False]])
    assert selector.block_f1(a, a) == 1.0
    assert selector.block_f1(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert selector.block_f1(a, ~a) == 0.0
    assert selector.block_f1(a, np.array([[True, True], [False, False]])) == 0.5


def test_manifest_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    samples = [LabeledSample(rng.random((1, 32, 32)), rng.random((2, 2)) < 0.5) for _ in range(3)]
    selector.write_manifest(samples, tmp_path)
    back = selector.read_manifest(tmp_path)
    assert len(back) == 3
    for a, b in zip(samples, back):
        assert np.array_equal(a.frame, b.frame) and np.array_equal(a.mask, b.mask)


def test_checkpoint_round_trip(tmp_path):
    model = AccModelNet.create(1, seed=6)
    model.params.save(tmp_path / "m.agp")
    back = AccModelNet.load(tmp_path / "m.agp")
    frame = np.random.default_rng(6).random((1, 32, 32))
    assert np.array_equal(selector.logits(model, frame), selector.logits(back, frame))


def test_selector_reused_with_another_detector():
    from accgrad import pipeline

    model = fixtures.load_selector()
    other = fixtures.load_fixture("blob_detector_b")
    wins = 0
    frames = fixtures.selector_images(99, 40)
    for f in frames:
        mask, _ = selector.predict_mask(model, f)
        roi = codec.encode_frame(f, codec.mask_to_qpmap(mask))
        uni = pipeline.equal_size_uniform(f, codec.frame_size(roi))
        ref = models.dnn_infer(other, f)
        wins += (models.accuracy(other, codec.decode_frame(roi), ref)
                 >= models.accuracy(other, codec.decode_frame(uni), ref))
    assert wins / len(frames) >= 0.7
