"""Toy per-pixel final DNNs, the differentiable accuracy proxy, and metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec
from .tensor import Graph, ParamStore, ShapeError, evaluate

DETECTOR = "heatmap-detector"
SEGMENTER = "segmenter"

DIST_THRESH = 4.0
NMS_RADIUS = 3
SCORE_THRESH = 0.8


@dataclass
class Detection:
    x: int
    y: int
    score: float


def pad_frame(frame, multiple=codec.MB):
    """Edge-pad a (C, H, W) frame up to multiples of 16."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[None]
    _, h, w = frame.shape
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        frame = np.pad(frame, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return frame


def _conv_init(rng, out_c, in_c, k):
    fan_in = in_c * k * k
    return rng.standard_normal((out_c, in_c, k, k)) * np.sqrt(2.0 / fan_in)


@dataclass
class FinalDnn:
    """Stack of padded 3x3 conv + ReLU layers and a 1x1 head.

    The detector head is a sigmoid objectness map of shape (1, H, W); the
    segmenter head emits ``classes`` logits per pixel.
    """

    kind: str
    params: ParamStore
    widths: tuple
    in_channels: int = 1
    classes: int = 1

    @classmethod
    def create(cls, kind, in_channels=1, widths=(8, 8), classes=None, seed=0, zero=False):
        if kind not in (DETECTOR, SEGMENTER):
            raise ValueError(f"unknown DNN kind '{kind}'")
        classes = 1 if kind == DETECTOR else (classes or 2)
        rng = np.random.default_rng(seed)
        params = ParamStore()
        prev = in_channels
        for i, width in enumerate(widths):
            w = np.zeros((width, prev, 3, 3)) if zero else _conv_init(rng, width, prev, 3)
            params.add(f"conv{i}.w", w)
            params.add(f"conv{i}.b", np.zeros(width))
            prev = width
        head = np.zeros((classes, prev, 1, 1)) if zero else _conv_init(rng, classes, prev, 1)
        params.add("head.w", head)
        params.add("head.b", np.zeros(classes))
        return cls(kind, params, tuple(widths), in_channels, classes)

    @classmethod
    def load(cls, path, kind, widths, in_channels=1, classes=None):
        dnn = cls.create(kind, in_channels, widths, classes, zero=True)
        loaded = ParamStore.load(path)
        for name in dnn.params:
            dnn.params.set(name, loaded[name])
        return dnn

    def build(self, g, x):
        """Append the network to graph ``g`` after node ``x``; returns the output node."""
        h = x
        for i in range(len(self.widths)):
            w = g.param(f"conv{i}.w", self.params[f"conv{i}.w"].shape)
            b = g.param(f"conv{i}.b", self.params[f"conv{i}.b"].shape)
            h = g.relu(g.conv2d(h, w, b, stride=1, pad=1))
        w = g.param("head.w", self.params["head.w"].shape)
        b = g.param("head.b", self.params["head.b"].shape)
        out = g.conv2d(h, w, b)
        if self.kind == DETECTOR:
            out = g.sigmoid(out)
        return out


def _check_channels(dnn, frames):
    if frames.shape[1] != dnn.in_channels:
        raise ShapeError(f"frame has {frames.shape[1]} channels, DNN expects {dnn.in_channels}")


def forward_batch(dnn, frames, batch=256):
    """Numpy-only inference on (N, C, H, W); returns (N, K, H, W)."""
    frames = np.asarray(frames, dtype=np.float64)
    _check_channels(dnn, frames)
    outs = []
    for start in range(0, len(frames), batch):
        x = frames[start:start + batch]
        g = Graph()
        out = dnn.build(g, g.input("x", x.shape))
        evaluate(g, {"x": x}, dnn.params)
        outs.append(g.values[out])
    return np.concatenate(outs) if outs else np.zeros((0, dnn.classes) + frames.shape[2:])


def dnn_infer(dnn, frame):
    """Per-pixel output (K, H, W) for one (C, H, W) frame."""
    frame = np.asarray(frame, dtype=np.float64)
    return forward_batch(dnn, frame[None])[0]


def acc_diff(g, out, ref, kind):
    """Add the accuracy-loss node comparing ``out`` against fixed ``ref``.

    Detector: mean squared heatmap difference.  Segmenter: mean per-pixel
    cross-entropy of the logits against the reference argmax labels.
    """
    ref = np.asarray(ref, dtype=np.float64)
    shape = g.nodes[out].shape
    if kind == DETECTOR:
        if ref.shape != shape:
            raise ShapeError(f"output shape {shape} != reference shape {ref.shape}")
        return g.mean(g.square(g.sub(out, g.const(ref))))
    if ref.shape != shape:
        raise ShapeError(f"output shape {shape} != reference shape {ref.shape}")
    labels = ref.argmax(axis=1).astype(np.float64)
    return g.softmax_ce(out, g.const(labels))


def acc_diff_value(out, ref, kind):
    """Per-sample loss values for batches (N, K, H, W), numpy only."""
    out = np.asarray(out, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if out.shape[1:] != ref.shape[-3:]:
        raise ShapeError(f"output shape {out.shape[1:]} != reference shape {ref.shape[-3:]}")
    if kind == DETECTOR:
        return ((out - ref) ** 2).mean(axis=(1, 2, 3))
    labels = np.broadcast_to(ref, out.shape).argmax(axis=1)
    m = out.max(axis=1, keepdims=True)
    logp = out - m - np.log(np.exp(out - m).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, labels[:, None], 1)[:, 0]
    return -picked.mean(axis=(1, 2))


def extract_peaks(heatmap, score_thresh=SCORE_THRESH, nms_radius=NMS_RADIUS):
    """Local maxima above threshold, greedily suppressed by score.

    A candidate is any pixel no smaller than its 8 neighbours; candidates are
    taken in descending score (row-major order on ties) and kept if farther
    than ``nms_radius`` from every kept peak.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim == 3:
        hm = hm[0]
    padded = np.pad(hm, 1, constant_values=-np.inf)
    h, w = hm.shape
    is_max = hm > score_thresh
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                is_max &= hm >= padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    ys, xs = np.nonzero(is_max)
    order = np.lexsort((np.arange(len(ys)), -hm[ys, xs]))
    kept = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        if all((x - k.x) ** 2 + (y - k.y) ** 2 > nms_radius ** 2 for k in kept):
            kept.append(Detection(x, y, float(hm[y, x])))
    return kept


def match_detections(pred, ref, dist_thresh=DIST_THRESH):
    """Greedy one-to-one matching by ascending distance; returns (i_pred, i_ref) pairs."""
    pairs = []
    for i, p in enumerate(pred):
        for j, r in enumerate(ref):
            d = float(np.hypot(p.x - r.x, p.y - r.y))
            if d <= dist_thresh:
                pairs.append((d, i, j))
    pairs.sort()
    used_p, used_r, matches = set(), set(), []
    for _, i, j in pairs:
        if i not in used_p and j not in used_r:
            used_p.add(i)
            used_r.add(j)
            matches.append((i, j))
    return matches


def eval_f1(pred, ref, dist_thresh=DIST_THRESH):
    if not pred and not ref:
        return 1.0
    tp = len(match_detections(pred, ref, dist_thresh))
    if tp == 0:
        return 0.0
    precision, recall = tp / len(pred), tp / len(ref)
    return 2 * precision * recall / (precision + recall)


def eval_iou(pred_labels, ref_labels, background=0):
    """Mean IoU over classes present in ``ref_labels``.

    The ``background`` class is left out of the mean; pass ``None`` to count
    every class.  With no scored class in the reference, returns 1.0 when the
    prediction has none either and 0.0 otherwise.
    """
    pred = np.asarray(pred_labels)
    ref = np.asarray(ref_labels)
    if pred.shape != ref.shape:
        raise ShapeError(f"label maps differ in shape: {pred.shape} vs {ref.shape}")
    classes = [c for c in np.unique(ref) if c != background]
    if not classes:
        others = [c for c in np.unique(pred) if c != background]
        return 0.0 if others else 1.0
    ious = []
    for c in classes:
        inter = np.logical_and(pred == c, ref == c).sum()
        union = np.logical_or(pred == c, ref == c).sum()
        ious.append(inter / union)
    return float(np.mean(ious))


def detections(dnn, frame, score_thresh=SCORE_THRESH, nms_radius=NMS_RADIUS):
    return extract_peaks(dnn_infer(dnn, frame)[0], score_thresh, nms_radius)


def accuracy(dnn, frame, ref_output):
    """F1 (detector) or IoU (segmenter) of ``frame``'s output against a reference output."""
    out = dnn_infer(dnn, frame)
    return output_accuracy(dnn.kind, out, ref_output)


def output_accuracy(kind, out, ref_output):
    if kind == DETECTOR:
        return eval_f1(extract_peaks(out[0]), extract_peaks(ref_output[0]))
    return eval_iou(out.argmax(axis=0), ref_output.argmax(axis=0))


def degrade_frame(frame, qp):
    """Round-trip through the codec at a uniform QP."""
    frame = np.asarray(frame, dtype=np.float64)
    enc = codec.encode_frame(frame, codec.uniform_qpmap(frame, qp))
    return codec.decode_frame(enc)
