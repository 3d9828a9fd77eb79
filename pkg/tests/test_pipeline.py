import math

import numpy as np
import pytest

from accgrad import codec, engine, fixtures, models, pipeline, scenes, selector
from accgrad.pipeline import StreamConfig, delay_model


@pytest.fixture(scope="module")
def selector_model():
    return fixtures.load_selector()


@pytest.fixture(scope="module")
def detector():
    return fixtures.load_fixture("blob_detector")


def video(n, size=64, seed=0, **kw):
    return [sc.frame for sc in scenes.moving_blobs(seed, n, size, size, n_blobs=2, texture=0.02, **kw)]


def test_delay_model_examples():
    assert delay_model(31_250) == pytest.approx(0.6, abs=1e-12)
    assert delay_model(0) == pytest.approx(0.1, abs=1e-12)
    for b in (1, 777, 10 ** 6):
        assert abs(delay_model(b) - (8 * b / (2.5e6 / 5) + 0.1)) <= 1e-12
        assert (delay_model(2 * b) - 0.1) == pytest.approx(2 * (delay_model(b) - 0.1), rel=1e-15)
    with pytest.raises(ValueError):
        delay_model(-1)


def test_stream_config_validation():
    for bad in (dict(k=0), dict(chunk=0), dict(bandwidth=0), dict(streams=0)):
        with pytest.raises(ValueError):
            StreamConfig(**bad)


def test_sampling_contract(selector_model):
    frames = video(100)
    _, results = pipeline.encode_stream(frames, selector_model, StreamConfig())
    assert sum(r.selector_invocations for r in results) == 10
    assert all(r.selector_invocations == 1 for r in results)
    sources = [s for r in results for s in r.mask_sources]
    assert sources == [(j // 10) * 10 for j in range(100)]


@pytest.mark.parametrize("n,k,chunk", [(23, 4, 10), (7, 3, 7), (30, 10, 6), (1, 5, 5)])
def test_invocations_follow_global_index(selector_model, n, k, chunk):
    frames = video(n, size=32)
    _, results = pipeline.encode_stream(frames, selector_model, StreamConfig(k=k, chunk=chunk))
    assert sum(r.selector_invocations for r in results) == math.ceil(n / k)
    for r in results:
        assert r.selector_invocations == sum(1 for j in r.frame_indices if j % k == 0)
        assert r.mask_sources == [(j // k) * k for j in r.frame_indices]


def test_k1_masks_match_predict_mask(selector_model):
    frames = video(5)
    cfg = StreamConfig(k=1, gamma=1)
    chunks, results = pipeline.encode_stream(frames, selector_model, cfg)
    for j, enc in enumerate(chunks[0]):
        mask = engine.dilate_mask(selector.predict_mask(selector_model, frames[j], cfg.alpha)[0], 1)
        assert np.array_equal(enc.qpmap, codec.mask_to_qpmap(mask))


def test_static_video_chunks_identical(selector_model):
    frame = video(1)[0]
    chunks, results = pipeline.encode_stream([frame] * 30, selector_model, StreamConfig())
    blobs = [codec.pack_chunk(c) for c in chunks]
    assert blobs[0] == blobs[1] == blobs[2]
    assert results[0].bytes == len(blobs[0])
    assert results[0].streaming_delay == delay_model(len(blobs[0]))


def test_all_high_quality_near_lossless_is_exact(detector):
    frames = video(6)
    encs = [codec.encode_frame(f, codec.uniform_qpmap(f, 0)) for f in frames]
    accs, mean = pipeline.evaluate_stream([encs[:3], encs[3:]], detector, frames)
    assert accs == [1.0] * 6 and mean == 1.0


def test_low_quality_background_hurts(detector):
    rng = np.random.default_rng(1)
    frames = [scenes.make_scene(rng, 64, 64, n_blobs=(2, 3), texture=0.08).frame for _ in range(10)]
    ones = [pipeline.encode_with_masks(frames, [np.ones((4, 4), bool)] * 10, 30, 51)]
    zeros = [pipeline.encode_with_masks(frames, [np.zeros((4, 4), bool)] * 10, 30, 51)]
    _, hi = pipeline.evaluate_stream(ones, detector, frames)
    _, lo = pipeline.evaluate_stream(zeros, detector, frames)
    assert lo < hi


def test_evaluate_empty_and_errors(detector):
    assert pipeline.evaluate_stream([], detector, []) == ([], None)
    f = video(1)[0]
    enc = codec.encode_frame(f, codec.uniform_qpmap(f, 30))
    bad = codec.EncodedFrame(enc.width, enc.height, enc.channels, enc.qpmap, enc.payload[:-4])
    with pytest.raises(pipeline.StreamDecodeError, match="frame 1"):
        pipeline.evaluate_stream([[enc, bad]], detector, [f, f])
    with pytest.raises(pipeline.StreamDecodeError, match="reference"):
        pipeline.evaluate_stream([[enc, enc]], detector, [f])


def test_persistence_edge_cases():
    static = [np.eye(4, dtype=bool)] * 5
    assert pipeline.mask_persistence(static, 4) == [(1, 1.0), (2, 1.0), (3, 1.0), (4, 1.0)]
    flip = [np.eye(4, dtype=bool) ^ bool(i % 2) for i in range(6)]
    curve = pipeline.mask_persistence(flip, 2)
    assert curve[0] == (1, 0.0) and curve[1] == (2, 1.0)
    with pytest.raises(ValueError):
        pipeline.mask_persistence(static[:1], 3)


def test_persistence_static_video(selector_model):
    frame = video(1)[0]
    curve = pipeline.persistence_curve([frame] * 4, selector_model, 3)
    assert [f for _, f in curve] == [1.0, 1.0, 1.0]


def test_sweep_alpha_zero_is_all_high_quality(selector_model, detector):
    frames = video(10)
    [p] = pipeline.sweep(frames, selector_model, detector, [0.0])
    hq = pipeline.uniform_point(frames, detector, 30)
    assert p.total_bytes == hq.total_bytes


def test_sweep_bytes_monotone_and_csv(tmp_path, selector_model, detector):
    frames = video(20)
    alphas = [0.0, 0.1, 0.3, 0.6, 0.95]
    path = tmp_path / "sweep.csv"
    points = pipeline.sweep(frames, selector_model, detector, alphas, StreamConfig(gamma=0), path)
    sizes = [p.total_bytes for p in points]
    assert sizes == sorted(sizes, reverse=True)
    lines = path.read_text().splitlines()
    assert lines[0] == "alpha,mean_acc,std_acc,total_bytes,mean_delay"
    assert len(lines) == 1 + len(alphas)
    again = tmp_path / "again.csv"
    pipeline.sweep(frames, selector_model, detector, alphas, StreamConfig(gamma=0), again)
    assert again.read_bytes() == path.read_bytes()
    with pytest.raises(ValueError):
        pipeline.sweep(frames, selector_model, detector, [])


def test_equal_size_uniform():
    f = video(1)[0]
    enc = pipeline.equal_size_uniform(f, 400)
    assert codec.frame_size(enc) <= 400
    finer = int(enc.qpmap[0, 0]) - 1
    if finer >= 0:
        assert codec.frame_size(codec.encode_frame(f, codec.uniform_qpmap(f, finer))) > 400


def test_fp_tolerance_shape():
    samples = pipeline.seg_samples_from_scenes(scenes.make_scenes(0, 6, height=32, width=32))
    result = pipeline.fp_tolerance_experiment([1, 2], samples[:4], samples[4:], epochs=2)
    assert set(result) == {"pixel_ce", "block_wbce"}
    for runs in result.values():
        assert set(runs) == {1, 2}
        for r in runs.values():
            assert len(r.curve) == 2 and all(np.isfinite(v) and v >= 0 for v in r.curve)
            assert np.isfinite(r.final) and r.final >= 0
    with pytest.raises(ValueError):
        pipeline.fp_tolerance_experiment([3], samples)


def test_block_class_labels():
    labels = np.zeros((32, 32), int)
    labels[:3, :3] = 2
    labels[1:2, :2] = 4
    labels[20:, 20:] = 3
    assert pipeline.block_class_labels(labels).tolist() == [[2, 0], [0, 3]]


def test_svg_chart():
    svg = pipeline.svg_line_chart({"a": [(0, 0), (1, 1)]}, "delay", "accuracy")
    assert svg.startswith("<svg") and "delay" in svg and "accuracy" in svg and "polyline" in svg
    with pytest.raises(ValueError):
        pipeline.svg_line_chart({}, "x", "y")
