"""Synthetic scenes: bright Gaussian blobs over a smooth textured background."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass
class Scene:
    frame: np.ndarray  # (C, H, W)
    centers: list = field(default_factory=list)  # (x, y) pixel coordinates
    sigmas: list = field(default_factory=list)
    amplitudes: list = field(default_factory=list)


def background(rng, height, width, channels=1, texture=0.04):
    base = gaussian_filter(rng.standard_normal((height, width)), sigma=6.0, mode="wrap")
    base = (base - base.min()) / max(base.max() - base.min(), 1e-9)
    frame = np.empty((channels, height, width))
    for c in range(channels):
        tint = rng.uniform(-0.05, 0.05)
        fine = gaussian_filter(rng.standard_normal((height, width)), sigma=0.7)
        frame[c] = 0.3 + 0.25 * base + tint + texture * fine / max(fine.std(), 1e-9)
    return frame


def render_blobs(frame, centers, sigmas, amplitudes):
    _, h, w = frame.shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = frame.copy()
    for (x, y), s, a in zip(centers, sigmas, amplitudes):
        out += a * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * s * s))
    return np.clip(out, 0.0, 1.0)


def _place(rng, n, height, width, margin, min_sep):
    centers = []
    for _ in range(200 * max(n, 1)):
        if len(centers) == n:
            break
        x = rng.uniform(margin, width - 1 - margin)
        y = rng.uniform(margin, height - 1 - margin)
        if all(np.hypot(x - cx, y - cy) >= min_sep for cx, cy in centers):
            centers.append((float(x), float(y)))
    return centers


def make_scene(rng, height=64, width=64, n_blobs=(1, 3), channels=1,
               sigma=(1.2, 2.0), amplitude=(0.12, 0.4), min_sep=10.0, texture=0.04):
    """Random scene; ``n_blobs`` is an int or an inclusive (lo, hi) range."""
    if isinstance(n_blobs, tuple):
        n_blobs = int(rng.integers(n_blobs[0], n_blobs[1] + 1))
    frame = background(rng, height, width, channels, texture)
    centers = _place(rng, n_blobs, height, width, margin=4, min_sep=min_sep)
    sigmas = [float(rng.uniform(*sigma)) for _ in centers]
    amps = [float(rng.uniform(*amplitude)) for _ in centers]
    return Scene(render_blobs(frame, centers, sigmas, amps), centers, sigmas, amps)


def make_scenes(seed, n, **kw):
    rng = np.random.default_rng(seed)
    return [make_scene(rng, **kw) for _ in range(n)]


def moving_blobs(seed, n_frames, height=128, width=128, n_blobs=3, channels=1,
                 speed=1.0, sigma=(1.2, 2.0), amplitude=(0.12, 0.4), texture=0.04):
    """Video of blobs drifting at most ``speed`` px/frame over a fixed background.

    Blobs bounce off the frame margins.  Returns a list of :class:`Scene`.
    """
    rng = np.random.default_rng(seed)
    bg = background(rng, height, width, channels, texture)
    pos = np.array(_place(rng, n_blobs, height, width, margin=6, min_sep=12.0)).reshape(-1, 2)
    angle = rng.uniform(0, 2 * np.pi, len(pos))
    vel = speed * np.stack([np.cos(angle), np.sin(angle)], axis=1) * rng.uniform(0.5, 1.0, (len(pos), 1))
    sigmas = [float(rng.uniform(*sigma)) for _ in pos]
    amps = [float(rng.uniform(*amplitude)) for _ in pos]
    lo, hi = np.array([4.0, 4.0]), np.array([width - 5.0, height - 5.0])
    scenes = []
    for _ in range(n_frames):
        centers = [(float(x), float(y)) for x, y in pos]
        scenes.append(Scene(render_blobs(bg, centers, sigmas, amps), centers, sigmas, amps))
        pos = pos + vel
        bounce = (pos < lo) | (pos > hi)
        vel = np.where(bounce, -vel, vel)
        pos = np.clip(pos, lo, hi)
    return scenes


def fine_segmentation_target(scene, level=0.5, amplitude_split=0.26, sigma_split=1.6):
    """Per-pixel labels with four blob classes (dim/bright x small/large) plus background 0."""
    _, h, w = scene.frame.shape
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.int64)
    for (x, y), s, a in zip(scene.centers, scene.sigmas, scene.amplitudes):
        g = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * s * s))
        labels[g >= level] = 1 + int(a >= amplitude_split) + 2 * int(s >= sigma_split)
    return labels


def heatmap_target(centers, height, width, sigma=1.5):
    """Objectness target: max of unit Gaussians at blob centers."""
    yy, xx = np.mgrid[0:height, 0:width]
    out = np.zeros((height, width))
    for x, y in centers:
        out = np.maximum(out, np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma * sigma)))
    return out


def segmentation_target(scene, level=0.5):
    """Per-pixel class ids: 1 where a blob exceeds ``level`` of its peak."""
    _, h, w = scene.frame.shape
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.int64)
    for (x, y), s in zip(scene.centers, scene.sigmas):
        g = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * s * s))
        labels[g >= level] = 1
    return labels
