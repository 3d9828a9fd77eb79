"""The camera-side quality selector (AccModel) and its decoupled training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import engine, models
from .codec import MB
from .tensor import Adam, Graph, NonFiniteError, ParamStore, backward, evaluate, sgd_step

ENCODER_WIDTHS = (8, 16, 32, 32)
HEAD_WIDTHS = (16, 16)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 0.003
    pos_weight: float = 4.0
    downsample: int = 10
    budget: float = 0.10
    qp_low: int = 40
    seed: int = 0
    batch_size: int = 8
    optimizer: str = "adam"  # or "sgd" (with momentum)
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.pos_weight <= 0:
            raise ValueError("pos_weight must be positive")
        if not 0 < self.budget <= 1:
            raise ValueError("budget must lie in (0, 1]")
        if self.downsample < 1 or self.batch_size < 1:
            raise ValueError("downsample and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class LabeledSample:
    frame: np.ndarray  # (C, H, W), high quality
    mask: np.ndarray  # (h, w) bool


@dataclass
class AccModelNet:
    """Four stride-2 conv stages (one output cell per macroblock) and a three-layer conv head."""

    params: ParamStore
    in_channels: int = 1
    encoder: tuple = ENCODER_WIDTHS
    head: tuple = HEAD_WIDTHS

    @classmethod
    def create(cls, in_channels=1, seed=0, width_mult=1.0, encoder=ENCODER_WIDTHS, head=HEAD_WIDTHS, outputs=1):
        encoder = tuple(max(1, int(round(w * width_mult))) for w in encoder)
        head = tuple(max(1, int(round(w * width_mult))) for w in head)
        rng = np.random.default_rng(seed)
        params = ParamStore()
        prev = in_channels
        for i, w in enumerate(encoder):
            params.add(f"enc{i}.w", rng.standard_normal((w, prev, 3, 3)) * np.sqrt(2.0 / (9 * prev)))
            params.add(f"enc{i}.b", np.zeros(w))
            prev = w
        for i, w in enumerate(head):
            params.add(f"head{i}.w", rng.standard_normal((w, prev, 3, 3)) * np.sqrt(2.0 / (9 * prev)))
            params.add(f"head{i}.b", np.zeros(w))
            prev = w
        params.add("out.w", rng.standard_normal((outputs, prev, 1, 1)) * np.sqrt(1.0 / prev))
        params.add("out.b", np.zeros(outputs))
        return cls(params, in_channels, encoder, head)

    @classmethod
    def load(cls, path, in_channels=1, width_mult=1.0):
        model = cls.create(in_channels, width_mult=width_mult)
        loaded = ParamStore.load(path)
        for name in model.params:
            model.params.set(name, loaded[name])
        return model

    def build(self, g, x):
        # centre pixel values around zero
        h = g.sub(x, g.const(np.full(g.nodes[x].shape, 0.5)))
        for i in range(len(self.encoder)):
            w = g.param(f"enc{i}.w", self.params[f"enc{i}.w"].shape)
            b = g.param(f"enc{i}.b", self.params[f"enc{i}.b"].shape)
            h = g.relu(g.conv2d(h, w, b, stride=2, pad=1))
        for i in range(len(self.head)):
            w = g.param(f"head{i}.w", self.params[f"head{i}.w"].shape)
            b = g.param(f"head{i}.b", self.params[f"head{i}.b"].shape)
            h = g.relu(g.conv2d(h, w, b, stride=1, pad=1))
        w = g.param("out.w", self.params["out.w"].shape)
        b = g.param("out.b", self.params["out.b"].shape)
        return g.conv2d(h, w, b)

    def flops(self, height, width):
        """Multiply-accumulates for one frame."""
        total, prev, h, w = 0, self.in_channels, height, width
        for c in self.encoder:
            h, w = h // 2, w // 2
            total += h * w * c * prev * 9
            prev = c
        for c in self.head:
            total += h * w * c * prev * 9
            prev = c
        return total + h * w * prev


def logits(model, frames, batch=64):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    outs = []
    for start in range(0, len(frames), batch):
        x = frames[start:start + batch]
        g = Graph()
        out = model.build(g, g.input("x", x.shape))
        evaluate(g, {"x": x}, model.params)
        outs.append(g.values[out][:, 0])
    return np.concatenate(outs)


def predict_mask(model, frame, alpha=0.2):
    """Blocks whose predicted probability is at least ``alpha``; returns (mask, probs)."""
    probs = expit(logits(model, frame)[0])
    return probs >= alpha, probs


def label_count(grid, budget):
    return int(round(budget * grid[0] * grid[1]))


def build_dataset(images, dnn, cfg, counter=None):
    """Label a 1-in-``downsample`` random subset of ``images`` with top-c AccGrad masks."""
    if len(images) == 0:
        raise ValueError("no images to label")
    n = len(images)
    kept = sorted(np.random.default_rng(cfg.seed).choice(n, math.ceil(n / cfg.downsample), replace=False))
    samples = []
    for i in kept:
        H = np.asarray(images[i], dtype=np.float64)
        L = models.degrade_frame(H, cfg.qp_low)
        values = engine.compute_accgrad(dnn, H, L, counter)
        c = label_count(values.shape, cfg.budget)
        samples.append(LabeledSample(H, engine.topc_mask(values, c)))
    return samples


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def train(model, samples, cfg, counter=None, pos_weight=None, log=None):
    """Minimise positive-weighted BCE between per-block logits and label masks.

    Never touches the final DNN: ``counter`` is accepted only so callers can
    assert that it does not move.  Returns ``(model, per-epoch mean losses)``.
    """
    if not samples:
        raise ValueError("no training samples")
    before = counter.snapshot() if counter is not None else None
    pw = cfg.pos_weight if pos_weight is None else pos_weight
    frames = np.stack([s.frame for s in samples])
    targets = np.stack([s.mask for s in samples]).astype(np.float64)[:, None]
    rng = np.random.default_rng(cfg.seed)
    params = model.params.copy()
    adam = Adam(params, cfg.lr) if cfg.optimizer == "adam" else None
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    losses = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(len(samples), cfg.batch_size, rng):
            g = Graph()
            x = g.input("x", frames[idx].shape)
            t = g.input("t", targets[idx].shape)
            loss = g.weighted_bce(model.build(g, x), t, pos_weight=pw)
            try:
                evaluate(g, {"x": frames[idx], "t": targets[idx]}, params)
                grads = backward(g, loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}") from None
            if adam is not None:
                adam.step(params, grads)
            else:
                for name in velocity:
                    velocity[name] = cfg.momentum * velocity[name] + grads[name]
                params = sgd_step(params, velocity, cfg.lr)
            total += float(g.values[loss]) * len(idx)
        mean = total / len(samples)
        if not math.isfinite(mean):
            raise TrainingDiverged(f"training diverged in epoch {epoch}: loss {mean}")
        losses.append(mean)
        if log:
            log(f"epoch {epoch}: loss {mean:.5f}")
    model.params = params
    if counter is not None:
        assert counter.snapshot() == before
    return model, losses


def block_f1(pred, label):
    pred = np.asarray(pred, dtype=bool)
    label = np.asarray(label, dtype=bool)
    tp = np.logical_and(pred, label).sum()
    if tp == 0:
        return 1.0 if not pred.any() and not label.any() else 0.0
    precision, recall = tp / pred.sum(), tp / label.sum()
    return float(2 * precision * recall / (precision + recall))


def evaluate_labels(model, samples, alpha=0.5):
    """Pooled macroblock-label precision, recall and F1 over ``samples``."""
    pred = np.concatenate([predict_mask(model, s.frame, alpha)[0].ravel() for s in samples])
    label = np.concatenate([s.mask.ravel() for s in samples])
    tp = np.logical_and(pred, label).sum()
    precision = tp / pred.sum() if pred.sum() else 0.0
    recall = tp / label.sum() if label.sum() else 0.0
    return {"precision": float(precision), "recall": float(recall), "f1": block_f1(pred, label)}


def cost_report(n_images, cfg):
    """Final-DNN passes: decoupled labelling vs end-to-end training.

    Decoupled: one forward on H, one forward and one backward on L, for each
    kept image.  Conventional: the same three passes per image per epoch.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    decoupled = 3 * math.ceil(n_images / cfg.downsample)
    conventional = 3 * n_images * cfg.epochs
    return {"decoupled_passes": decoupled, "conventional_passes": conventional,
            "ratio": conventional / decoupled}


def write_manifest(samples, directory):
    """Write ``frame_NNNN.npy`` / ``mask_NNNN.pbm`` pairs and ``manifest.txt``."""
    import os

    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        fp = os.path.join(directory, f"frame_{i:04d}.npy")
        mp = os.path.join(directory, f"mask_{i:04d}.pbm")
        np.save(fp, s.frame)
        with open(mp, "w") as fh:
            fh.write(engine.mask_to_pbm(s.mask))
        lines.append(f"{os.path.basename(fp)},{os.path.basename(mp)}")
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(directory):
    import os

    samples = []
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            if not line.strip():
                continue
            fp, mp = line.strip().split(",")
            with open(os.path.join(directory, mp)) as mh:
                mask = engine.mask_from_pbm(mh.read())
            samples.append(LabeledSample(np.load(os.path.join(directory, fp)), mask))
    return samples
