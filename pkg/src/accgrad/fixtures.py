"""Shipped fixture weights and the deterministic script that produced them.

Run ``python -m accgrad.fixtures`` to regenerate ``data/*.agp``.
"""

from __future__ import annotations

import os
from importlib import resources

import numpy as np

from . import models, scenes
from .tensor import Adam, Graph, backward, evaluate

DATA = resources.files("accgrad") / "data"

# name -> (kind, widths, training seed)
FIXTURES = {
    "blob_detector": (models.DETECTOR, (8, 8, 8), 1),
    "blob_detector_b": (models.DETECTOR, (8, 8, 8), 4),
    "blob_segmenter": (models.SEGMENTER, (8, 8, 8), 3),
}


# scenes the selector is trained and evaluated on
SELECTOR_SCENE = dict(height=128, width=128, n_blobs=6, texture=0.02)
SELECTOR_SEED = 7


def selector_images(seed=SELECTOR_SEED, n=2000, **overrides):
    """Frames of the selector fixture distribution (128x128, six blobs, light texture)."""
    kw = {**SELECTOR_SCENE, **overrides}
    return [sc.frame for sc in scenes.make_scenes(seed, n, **kw)]


def selector_dataset(dnn, n=2000, seed=SELECTOR_SEED, counter=None):
    """The 200-sample labelled fixture set: 2000 frames, 1-in-10 downsampled."""
    from . import selector

    cfg = selector.TrainConfig(seed=seed)
    return selector.build_dataset(selector_images(seed, n), dnn, cfg, counter)


def train_selector_fixture(dnn, log=None):
    from . import selector

    samples = selector_dataset(dnn)
    model = selector.AccModelNet.create(1, seed=SELECTOR_SEED)
    model, _ = selector.train(model, samples[:160], selector.TrainConfig(seed=SELECTOR_SEED), log=log)
    return model


def load_selector():
    from . import selector

    return selector.AccModelNet.load(fixture_path("blob_selector"))


def fixture_path(name):
    return os.fspath(DATA / f"{name}.agp")


def load_fixture(name):
    kind, widths, _ = FIXTURES[name]
    return models.FinalDnn.load(fixture_path(name), kind, widths)


def _training_set(seed, n, size=64):
    rng = np.random.default_rng(seed)
    frames, targets = [], []
    for _ in range(n):
        sc = scenes.make_scene(rng, size, size, n_blobs=(0, 4))
        frame = sc.frame
        # a share of lightly compressed copies keeps the detector stable on decoded input
        if rng.random() < 0.3:
            frame = models.degrade_frame(frame, int(rng.integers(10, 31)))
        frames.append(frame)
        targets.append(sc)
    return np.stack(frames), targets


def train_final_dnn(kind, widths, seed, n=400, epochs=40, batch=16, lr=0.01, pos_weight=3.0, log=None):
    dnn = models.FinalDnn.create(kind, 1, widths, seed=seed)
    frames, sc = _training_set(seed + 100, n)
    _, _, h, w = frames.shape
    if kind == models.DETECTOR:
        target = np.stack([scenes.heatmap_target(s.centers, h, w)[None] for s in sc])
    else:
        target = np.stack([scenes.segmentation_target(s) for s in sc]).astype(np.float64)
    opt = Adam(dnn.params, lr=lr)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            g = Graph()
            x = g.input("x", frames[idx].shape)
            t = g.input("t", target[idx].shape)
            if kind == models.DETECTOR:
                dnn_logits = models.FinalDnn(models.SEGMENTER, dnn.params, dnn.widths, 1, 1)
                out = dnn_logits.build(g, x)
                loss = g.weighted_bce(out, t, pos_weight=pos_weight)
            else:
                loss = g.softmax_ce(dnn.build(g, x), t)
            evaluate(g, {"x": frames[idx], "t": target[idx]}, dnn.params)
            grads = backward(g, loss)
            opt.step(dnn.params, grads)
            total += float(g.values[loss]) * len(idx)
        if log:
            log(f"epoch {epoch}: loss {total / n:.5f}")
    return dnn


def main(names=None):
    os.makedirs(os.fspath(DATA), exist_ok=True)
    for name, (kind, widths, seed) in FIXTURES.items():
        if names and name not in names:
            continue
        dnn = train_final_dnn(kind, widths, seed, log=print)
        dnn.params.save(fixture_path(name))
        print(f"wrote {fixture_path(name)}")
    if not names or "blob_selector" in names:
        model = train_selector_fixture(load_fixture("blob_detector"), log=print)
        model.params.save(fixture_path("blob_selector"))
        print(f"wrote {fixture_path('blob_selector')}")


if __name__ == "__main__":
    import sys

    main(sys.argv[1:])
