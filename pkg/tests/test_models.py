import numpy as np
import pytest

from accgrad import fixtures, models, scenes
from accgrad.models import Detection, FinalDnn, eval_f1, eval_iou, extract_peaks
from accgrad.tensor import Graph, ShapeError, evaluate, grad_check


def test_extract_peaks_nms_and_threshold():
    hm = np.zeros((12, 12))
    hm[2, 2] = 0.95
    hm[2, 4] = 0.9  # within radius 3 of the stronger peak
    hm[9, 9] = 0.85
    hm[6, 6] = 0.3
    peaks = extract_peaks(hm)
    assert [(p.x, p.y) for p in peaks] == [(2, 2), (9, 9)]
    assert extract_peaks(hm, score_thresh=0.9) == [Detection(2, 2, 0.95)]


def test_plateau_peak_kept_once():
    hm = np.zeros((8, 8))
    hm[3, 3] = hm[3, 4] = 0.9
    peaks = extract_peaks(hm)
    assert [(p.x, p.y) for p in peaks] == [(3, 3)]


def test_f1_examples():
    ref = [Detection(10, 10, 1), Detection(30, 30, 1)]
    assert eval_f1(ref, ref) == 1.0
    assert eval_f1([], []) == 1.0
    assert eval_f1([], ref) == 0.0
    assert eval_f1([Detection(12, 12, 1)], ref) == pytest.approx(2 / 3)
    # 5 px away is beyond the match distance
    assert eval_f1([Detection(15, 10, 1)], ref[:1]) == 0.0


def test_matching_is_one_to_one():
    pred = [Detection(0, 0, 1), Detection(1, 0, 1)]
    ref = [Detection(0, 0, 1)]
    assert models.match_detections(pred, ref) == [(0, 0)]
    assert eval_f1(pred, ref) == pytest.approx(2 / 3)


def test_iou_examples():
    ref = np.zeros((4, 4), int)
    ref[:2, :2] = 1
    assert eval_iou(ref, ref) == 1.0
    pred = np.zeros((4, 4), int)
    pred[:2, :3] = 1
    assert eval_iou(pred, ref) == pytest.approx(4 / 6)
    assert eval_iou(np.zeros((4, 4), int), np.zeros((4, 4), int)) == 1.0
    with pytest.raises(ShapeError):
        eval_iou(pred, ref[:3])


def test_acc_diff_zero_on_identical_detector_output():
    out = np.random.default_rng(0).random((2, 1, 8, 8))
    assert np.all(models.acc_diff_value(out, out, models.DETECTOR) == 0)


def test_segmenter_ce_hand_value():
    # logits (0, ln 3) -> p = (1/4, 3/4); reference argmax is class 1
    logits = np.zeros((1, 2, 1, 1))
    logits[0, 1] = np.log(3.0)
    ref = np.array([[[0.0]], [[5.0]]])
    assert models.acc_diff_value(logits, ref, models.SEGMENTER)[0] == pytest.approx(-np.log(0.75))
    g = Graph()
    x = g.input("x", logits.shape)
    loss = models.acc_diff(g, x, ref[None], models.SEGMENTER)
    evaluate(g, {"x": logits})
    assert float(g.values[loss]) == pytest.approx(-np.log(0.75))


def test_acc_diff_shape_mismatch():
    g = Graph()
    x = g.input("x", (1, 1, 8, 8))
    with pytest.raises(ShapeError):
        models.acc_diff(g, x, np.zeros((1, 1, 4, 4)), models.DETECTOR)


def test_final_dnn_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    for kind in (models.DETECTOR, models.SEGMENTER):
        dnn = FinalDnn.create(kind, 1, (3, 3), seed=5)
        frame = rng.random((1, 1, 32, 32))
        ref = models.forward_batch(dnn, rng.random((1, 1, 32, 32)))
        g = Graph()
        x = g.input("x", frame.shape, requires_grad=True)
        loss = models.acc_diff(g, dnn.build(g, x), ref, kind)
        assert grad_check(g, loss, dnn.params, {"x": frame}, names=["x"]) < 1e-4


def test_channel_mismatch_rejected():
    dnn = FinalDnn.create(models.DETECTOR, 3, (2,))
    with pytest.raises(ShapeError, match="channels"):
        models.dnn_infer(dnn, np.zeros((1, 16, 16)))


def test_pad_frame():
    f = models.pad_frame(np.arange(20.0).reshape(4, 5))
    assert f.shape == (1, 16, 16)
    assert f[0, 15, 15] == 19.0


def test_fixture_detector_finds_blob():
    dnn = fixtures.load_fixture("blob_detector")
    rng = np.random.default_rng(21)
    hits = 0
    for _ in range(10):
        sc = scenes.make_scene(rng, 64, 64, n_blobs=(1, 1), amplitude=(0.3, 0.4))
        peaks = models.detections(dnn, sc.frame)
        cx, cy = sc.centers[0]
        hits += any(np.hypot(p.x - cx, p.y - cy) <= 2 for p in peaks)
    assert hits >= 9


def test_fixture_segmenter_beats_trivial():
    dnn = fixtures.load_fixture("blob_segmenter")
    rng = np.random.default_rng(22)
    ious = []
    for _ in range(10):
        sc = scenes.make_scene(rng, 64, 64, n_blobs=(2, 3))
        pred = models.dnn_infer(dnn, sc.frame).argmax(axis=0)
        ious.append(eval_iou(pred, scenes.segmentation_target(sc)))
    assert np.mean(ious) > 0.4


def test_degrade_is_lossy_but_close():
    f = scenes.make_scene(np.random.default_rng(3), 32, 32).frame
    d = models.degrade_frame(f, 40)
    assert 0 < np.abs(d - f).max() < 0.5
