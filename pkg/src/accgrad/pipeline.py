"""Online encoding with frame sampling, delay model, evaluation and sweeps."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import codec, engine, models, selector
from .codec import MB


@dataclass
class StreamConfig:
    chunk: int = 10
    k: int = 10
    alpha: float = 0.2
    gamma: int = 5
    qp_hi: int = 30
    qp_lo: int = 40
    bandwidth: float = 2.5e6  # bits per second, shared
    streams: int = 5
    latency: float = 0.1  # seconds, one way
    fps: float = 30.0

    def __post_init__(self):
        if self.k < 1 or self.chunk < 1:
            raise ValueError("k and chunk must be >= 1")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.streams < 1:
            raise ValueError("streams must be >= 1")


@dataclass
class ChunkResult:
    index: int
    frame_indices: list
    bytes: int
    selector_invocations: int
    mask_sources: list  # global index of the frame whose selector output encoded each frame
    hq_blocks: list
    encoding_ops: int
    wall_time: float
    streaming_delay: float
    accuracies: list = field(default_factory=list)


@dataclass
class TradeoffPoint:
    label: str
    mean_acc: float
    std_acc: float
    total_bytes: int
    mean_delay: float


def delay_model(nbytes, cfg=None):
    """Seconds to push ``nbytes`` over this stream's share of the link, plus latency."""
    cfg = cfg or StreamConfig()
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    return 8.0 * nbytes / (cfg.bandwidth / cfg.streams) + cfg.latency


def sampled_indices(n_frames, k):
    return list(range(0, n_frames, k))


def selector_masks(frames, model, cfg, probs_cache=None):
    """Dilated alpha-masks for frames 0, k, 2k, ...; returns {index: mask}."""
    masks = {}
    for i in sampled_indices(len(frames), cfg.k):
        if probs_cache is not None and i in probs_cache:
            probs = probs_cache[i]
        else:
            _, probs = selector.predict_mask(model, frames[i], 0.0)
            if probs_cache is not None:
                probs_cache[i] = probs
        masks[i] = engine.dilate_mask(probs >= cfg.alpha, cfg.gamma)
    return masks


def encode_stream(frames, model, cfg=None, probs_cache=None):
    """Encode ``frames`` chunk by chunk with selector masks reused for ``k`` frames.

    Returns ``(chunks, results)``; ``chunks`` is a list of lists of
    :class:`~accgrad.codec.EncodedFrame`.
    """
    cfg = cfg or StreamConfig()
    if len(frames) == 0:
        raise ValueError("no frames to encode")
    masks = selector_masks(frames, model, cfg, probs_cache)
    macs = model.flops(*np.asarray(frames[0]).shape[1:])
    chunks, results = [], []
    for ci, start in enumerate(range(0, len(frames), cfg.chunk)):
        t0 = time.perf_counter()
        idx = list(range(start, min(start + cfg.chunk, len(frames))))
        encs, sources, hq, coeffs = [], [], [], 0
        for j in idx:
            src = (j // cfg.k) * cfg.k
            qp = codec.mask_to_qpmap(masks[src], cfg.qp_hi, cfg.qp_lo)
            enc = codec.encode_frame(frames[j], qp)
            encs.append(enc)
            sources.append(src)
            hq.append(int(masks[src].sum()))
            coeffs += (len(enc.payload) - enc.qpmap.size * enc.channels * 4) // 3
        invocations = sum(1 for j in idx if j % cfg.k == 0)
        size = len(codec.pack_chunk(encs))
        chunks.append(encs)
        results.append(ChunkResult(
            index=ci, frame_indices=idx, bytes=size, selector_invocations=invocations,
            mask_sources=sources, hq_blocks=hq, encoding_ops=invocations * macs + coeffs,
            wall_time=time.perf_counter() - t0, streaming_delay=delay_model(size, cfg)))
    return chunks, results


def encode_with_masks(frames, masks, qp_hi=30, qp_lo=40):
    return [codec.encode_frame(f, codec.mask_to_qpmap(m, qp_hi, qp_lo)) for f, m in zip(frames, masks)]


class ReferenceCache:
    """D(H) for each reference frame, computed once per stream."""

    def __init__(self, dnn, reference_frames):
        self.dnn = dnn
        self.frames = reference_frames
        self._out = {}

    def __getitem__(self, i):
        if i not in self._out:
            self._out[i] = models.dnn_infer(self.dnn, self.frames[i])
        return self._out[i]

    def __len__(self):
        return len(self.frames)


class StreamDecodeError(RuntimeError):
    pass


def evaluate_stream(chunks, dnn, reference_frames, reference=None):
    """Accuracy of every decoded frame against ``D`` on the matching reference frame.

    Returns ``(per-frame accuracies, mean)``; the mean is ``None`` for an
    empty stream.
    """
    reference = reference or ReferenceCache(dnn, reference_frames)
    accs = []
    i = 0
    for chunk in chunks:
        for enc in chunk:
            if i >= len(reference):
                raise StreamDecodeError(f"frame {i} has no reference frame")
            try:
                frame = codec.decode_frame(enc)
            except codec.CodecError as exc:
                raise StreamDecodeError(f"frame {i}: {exc}") from exc
            out = models.dnn_infer(dnn, frame)
            accs.append(models.output_accuracy(dnn.kind, out, reference[i]))
            i += 1
    return accs, (float(np.mean(accs)) if accs else None)


def mask_persistence(masks, max_distance):
    """Fraction of macroblocks whose bit is unchanged ``d`` frames later, d = 1..max."""
    masks = np.asarray(masks, dtype=bool)
    if len(masks) < 2:
        raise ValueError("need at least two masks")
    curve = []
    for d in range(1, min(max_distance, len(masks) - 1) + 1):
        curve.append((d, float((masks[d:] == masks[:-d]).mean())))
    return curve


def persistence_curve(frames, model, max_distance=10, cfg=None):
    cfg = cfg or StreamConfig()
    per_frame = StreamConfig(**{**cfg.__dict__, "k": 1})
    masks = selector_masks(frames, model, per_frame)
    return mask_persistence([masks[i] for i in range(len(frames))], max_distance)


def sweep(frames, model, dnn, alphas, cfg=None, csv_path=None):
    """One tradeoff point per alpha, with the selector output shared across alphas."""
    cfg = cfg or StreamConfig()
    if len(alphas) == 0:
        raise ValueError("no alpha values")
    reference = ReferenceCache(dnn, frames)
    probs = {}
    points = []
    for alpha in alphas:
        run = StreamConfig(**{**cfg.__dict__, "alpha": alpha})
        chunks, results = encode_stream(frames, model, run, probs)
        accs, _ = evaluate_stream(chunks, dnn, frames, reference)
        points.append(TradeoffPoint(
            label=f"alpha={alpha:g}", mean_acc=float(np.mean(accs)), std_acc=float(np.std(accs)),
            total_bytes=sum(r.bytes for r in results),
            mean_delay=float(np.mean([r.streaming_delay for r in results]))))
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            fh.write(tradeoff_csv(points, alphas))
    return points


def uniform_point(frames, dnn, qp, cfg=None, label=None):
    """Tradeoff point for plain uniform-QP encoding of the whole stream."""
    cfg = cfg or StreamConfig()
    encs = [codec.encode_frame(f, codec.uniform_qpmap(f, qp)) for f in frames]
    chunks = [encs[i:i + cfg.chunk] for i in range(0, len(encs), cfg.chunk)]
    accs, _ = evaluate_stream(chunks, dnn, frames)
    sizes = [len(codec.pack_chunk(c)) for c in chunks]
    return TradeoffPoint(label or f"qp={qp}", float(np.mean(accs)), float(np.std(accs)),
                         sum(sizes), float(np.mean([delay_model(s, cfg) for s in sizes])))


def equal_size_uniform(frame, nbytes):
    """Finest uniform-QP encoding of ``frame`` no larger than ``nbytes``.

    Falls back to QP 51 when even that exceeds the budget.
    """
    for qp in range(52):
        enc = codec.encode_frame(frame, codec.uniform_qpmap(frame, qp))
        if codec.frame_size(enc) <= nbytes:
            return enc
    return enc


def tradeoff_csv(points, alphas):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["alpha", "mean_acc", "std_acc", "total_bytes", "mean_delay"])
    for a, p in zip(alphas, points):
        writer.writerow([repr(float(a)), repr(p.mean_acc), repr(p.std_acc), p.total_bytes, repr(p.mean_delay)])
    return buf.getvalue()


def svg_line_chart(series, xlabel, ylabel, width=480, height=320):
    """Minimal SVG chart; ``series`` maps a name to a list of (x, y) points."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("nothing to plot")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1
    pad = 48

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
           f'<text x="14" y="{height / 2}" transform="rotate(-90 14 {height / 2})" '
           f'text-anchor="middle">{ylabel}</text>',
           f'<text x="{pad}" y="{height - pad + 16}" text-anchor="middle">{x0:.3g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 16}" text-anchor="middle">{x1:.3g}</text>',
           f'<text x="{pad - 6}" y="{height - pad}" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{pad - 6}" y="{pad}" text-anchor="end">{y1:.3g}</text>']
    for i, (name, s) in enumerate(series.items()):
        color = colors[i % len(colors)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{color}" points="{path}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * i}" fill="{color}" text-anchor="end">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# false-positive tolerance experiment

@dataclass
class SegSample:
    frame: np.ndarray  # (C, H, W)
    labels: np.ndarray  # (h, w) fine class id per macroblock, 0 = background
    mask: np.ndarray  # (h, w) bool, any foreground in the block


FP_CLASSES = 5
FP_SCENE = dict(height=128, width=128, n_blobs=6, texture=0.02)


def block_class_labels(labels, classes=FP_CLASSES):
    """Majority foreground class per macroblock, background where a block has no foreground."""
    counts = np.stack([engine.block_sum((labels == k).astype(np.float64)) for k in range(1, classes)])
    return np.where(counts.sum(axis=0) > 0, 1 + counts.argmax(axis=0), 0)


def seg_samples_from_scenes(scene_list):
    """Fine class labels for the segmentation loss, binary block masks for the block loss."""
    out = []
    for sc in scene_list:
        labels = block_class_labels(scenes.fine_segmentation_target(sc))
        out.append(SegSample(sc.frame, labels, labels > 0))
    return out


@dataclass
class FpRun:
    curve: list  # per-epoch mean training loss
    final: float  # loss on the held-out samples after the last epoch


def _fp_loss(g, logits, target, loss_kind, pos_weight):
    if loss_kind == "pixel_ce":
        return g.softmax_ce(logits, target)
    return g.weighted_bce(logits, target, pos_weight=pos_weight)


def _fp_targets(samples, loss_kind):
    if loss_kind == "pixel_ce":
        return np.stack([s.labels for s in samples]).astype(np.float64)
    return np.stack([s.mask for s in samples]).astype(np.float64)[:, None]


def _train_fp(net, samples, heldout, loss_kind, epochs, lr, seed, pos_weight=4.0, batch=8):
    from .tensor import Adam, Graph, backward, evaluate

    frames = np.stack([s.frame for s in samples])
    targets = _fp_targets(samples, loss_kind)
    opt = Adam(net.params, lr=lr)
    rng = np.random.default_rng(seed)
    curve = []
    for _ in range(epochs):
        total = 0.0
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), batch):
            idx = order[start:start + batch]
            g = Graph()
            x = g.input("x", frames[idx].shape)
            t = g.input("t", targets[idx].shape)
            loss = _fp_loss(g, net.build(g, x), t, loss_kind, pos_weight)
            evaluate(g, {"x": frames[idx], "t": targets[idx]}, net.params)
            opt.step(net.params, backward(g, loss))
            total += float(g.values[loss]) * len(idx)
        curve.append(total / len(samples))
    frames = np.stack([s.frame for s in heldout])
    targets = _fp_targets(heldout, loss_kind)
    g = Graph()
    x = g.input("x", frames.shape)
    t = g.input("t", targets.shape)
    loss = _fp_loss(g, net.build(g, x), t, loss_kind, pos_weight)
    evaluate(g, {"x": frames, "t": targets}, net.params)
    return FpRun(curve, float(g.values[loss]))


def fp_tolerance_experiment(widths, samples, heldout=None, epochs=20, lr=0.003, seed=0):
    """Train one selector-shaped net per compute multiplier under both losses.

    Multiplier m scales every encoder and head width by m/8, so 8 is the
    full selector.  ``pixel_ce`` is unweighted cross-entropy over the fine
    classes at every output position; ``block_wbce`` is the binary block loss
    with positives weighted 4x.  Returns ``{loss: {m: FpRun}}``; final losses
    are measured on ``heldout`` (the training samples when omitted).
    """
    allowed = {1, 2, 4, 6, 8}
    if not set(widths) <= allowed:
        raise ValueError(f"width multipliers must come from {sorted(allowed)}")
    heldout = samples if heldout is None else heldout
    result = {}
    for loss_kind, outputs in (("pixel_ce", FP_CLASSES), ("block_wbce", 1)):
        result[loss_kind] = {}
        for m in widths:
            net = selector.AccModelNet.create(1, seed=seed, width_mult=m / 8, outputs=outputs)
            result[loss_kind][m] = _train_fp(net, samples, heldout, loss_kind, epochs, lr, seed)
    return result


def relative_gap(runs, small=4, large=8):
    """(final loss at ``small`` - final loss at ``large``) / final loss at ``large``."""
    return (runs[small].final - runs[large].final) / runs[large].final


from . import scenes  # noqa: E402  (used by seg_samples_from_scenes)
