"""Accuracy-gradient maps, quality masks and brute-force reference searches.

Block maps are ``(h, w)`` arrays indexed ``[by, bx]`` (row-major over the
macroblock grid).  Frames are ``(C, H, W)``.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from . import models
from .codec import MB, expand_mask
from .tensor import Graph, NonFiniteError, ShapeError, backward, evaluate


@dataclass
class PropagationCounter:
    """Counts forward/backward passes through the final DNN."""

    forward: int = 0
    backward: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, forward=0, backward=0):
        with self._lock:
            self.forward += forward
            self.backward += backward

    def snapshot(self):
        return self.forward, self.backward


def block_sum(pixels, block=MB):
    h, w = pixels.shape
    return pixels.reshape(h // block, block, w // block, block).sum(axis=(1, 3))


def _check_pair(H, L):
    H = np.asarray(H, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if H.shape != L.shape:
        raise ShapeError(f"high/low frames differ in shape: {H.shape} vs {L.shape}")
    if H.ndim != 3 or H.shape[1] % MB or H.shape[2] % MB:
        raise ShapeError(f"frames must be (C, H, W) padded to multiples of {MB}, got {H.shape}")
    return H, L


def loss_gradient(dnn, H, L, counter=None):
    """Gradient of the accuracy loss at ``L`` against ``D(H)``; shape (C, H, W)."""
    H, L = _check_pair(H, L)
    ref = models.dnn_infer(dnn, H)
    g = Graph()
    x = g.input("L", (1,) + L.shape, requires_grad=True)
    loss = models.acc_diff(g, dnn.build(g, x), ref[None], dnn.kind)
    evaluate(g, {"L": L[None]}, dnn.params)
    grad = backward(g, loss)["L"][0]
    if counter is not None:
        counter.add(forward=2, backward=1)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("accuracy gradient is not finite")
    return grad


def compute_accgrad(dnn, H, L, counter=None):
    """Per-macroblock sum of |dLoss/dL_i|_1 * |H_i - L_i|_1.

    Costs two forward passes (on ``H`` and ``L``) and one backward pass.
    """
    H, L = _check_pair(H, L)
    grad = loss_gradient(dnn, H, L, counter)
    pixels = np.abs(grad).sum(axis=0) * np.abs(H - L).sum(axis=0)
    return block_sum(pixels)


def topc_mask(values, c):
    """Select the ``c`` largest blocks; ties go to the smaller row-major index."""
    values = np.asarray(values, dtype=np.float64)
    if not 0 <= c <= values.size:
        raise ValueError(f"c={c} outside [0, {values.size}]")
    order = np.argsort(-values.ravel(), kind="stable")
    mask = np.zeros(values.size, dtype=bool)
    mask[order[:c]] = True
    return mask.reshape(values.shape)


def threshold_mask(values, alpha=0.2, normalize=True):
    values = np.asarray(values, dtype=np.float64)
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if normalize:
        peak = values.max(initial=0.0)
        if peak <= 0:
            return np.zeros(values.shape, dtype=bool)
        values = values / peak
    return values >= alpha


def dilate_mask(mask, gamma=5):
    """Chebyshev dilation by ``gamma`` blocks, clipped at the grid border."""
    mask = np.asarray(mask, dtype=bool)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0 or mask.size == 0:
        return mask.copy()
    return maximum_filter(mask, size=2 * gamma + 1, mode="constant", cval=False)


def composite(H, L, mask):
    """Block-wise selection: ``H`` where the mask is set, ``L`` elsewhere."""
    keep = expand_mask(mask).astype(bool)
    return np.where(keep[None], H, L)


def enumerate_masks(n_blocks, c):
    """All masks with at most ``c`` bits, as an (M, n_blocks) bool array.

    Ordered by weight, then lexicographically by selected indices.
    """
    rows = []
    for k in range(c + 1):
        for combo in itertools.combinations(range(n_blocks), k):
            row = np.zeros(n_blocks, dtype=bool)
            row[list(combo)] = True
            rows.append(row)
    return np.array(rows).reshape(-1, n_blocks)


def composite_losses(dnn, H, L, masks, ref=None, batch=128):
    """Loss of every composite ``masks[i]`` against ``D(H)`` by direct inference."""
    H, L = _check_pair(H, L)
    grid = (H.shape[1] // MB, H.shape[2] // MB)
    ref = models.dnn_infer(dnn, H) if ref is None else ref
    masks = np.asarray(masks, dtype=bool).reshape(-1, *grid)
    losses = np.empty(len(masks))
    for start in range(0, len(masks), batch):
        xs = np.stack([composite(H, L, m) for m in masks[start:start + batch]])
        out = models.forward_batch(dnn, xs)
        losses[start:start + batch] = models.acc_diff_value(out, ref, dnn.kind)
    return losses


def _pixel_losses(kind, out, ref):
    if kind == models.DETECTOR:
        return ((out - ref) ** 2).sum(axis=1)
    labels = np.broadcast_to(ref.argmax(axis=0), (out.shape[0],) + ref.shape[1:])
    m = out.max(axis=1, keepdims=True)
    logp = out - m - np.log(np.exp(out - m).sum(axis=1, keepdims=True))
    return -np.take_along_axis(logp, labels[:, None], 1)[:, 0]


def receptive_radius(dnn):
    return len(dnn.widths)


def local_composite_losses(dnn, H, L, masks, ref=None):
    """Same values as :func:`composite_losses`, computed block by block.

    Output block ``b`` only sees input pixels within the network's receptive
    radius, so its loss depends only on the mask bits of ``b`` and its eight
    neighbours.  Each block's loss is tabulated over the neighbour
    configurations that occur in ``masks`` using small crops.
    """
    H, L = _check_pair(H, L)
    r = receptive_radius(dnn)
    if r > MB:
        raise ValueError("receptive field too wide for neighbourhood tabulation")
    _, ph, pw = H.shape
    hb, wb = ph // MB, pw // MB
    ref = models.dnn_infer(dnn, H) if ref is None else ref
    masks = np.asarray(masks, dtype=bool).reshape(len(masks), hb * wb)
    total = np.zeros(len(masks))
    for by in range(hb):
        for bx in range(wb):
            nb = [(y, x) for y in range(by - 1, by + 2) for x in range(bx - 1, bx + 2)
                  if 0 <= y < hb and 0 <= x < wb]
            idx = np.array([y * wb + x for y, x in nb])
            codes = masks[:, idx].astype(np.int64) @ (1 << np.arange(len(idx)))
            uniq, inverse = np.unique(codes, return_inverse=True)
            y0, y1 = max(0, by * MB - r), min(ph, (by + 1) * MB + r)
            x0, x1 = max(0, bx * MB - r), min(pw, (bx + 1) * MB + r)
            crops = np.repeat(L[None, :, y0:y1, x0:x1], len(uniq), axis=0)
            for k, (y, x) in enumerate(nb):
                sel = (uniq >> k) & 1 == 1
                if not sel.any():
                    continue
                ys = slice(max(y * MB, y0) - y0, min((y + 1) * MB, y1) - y0)
                xs = slice(max(x * MB, x0) - x0, min((x + 1) * MB, x1) - x0)
                src = H[:, max(y * MB, y0):min((y + 1) * MB, y1), max(x * MB, x0):min((x + 1) * MB, x1)]
                crops[sel, :, ys, xs] = src
            out = models.forward_batch(dnn, crops)
            oy, ox = by * MB - y0, bx * MB - x0
            centre = out[:, :, oy:oy + MB, ox:ox + MB]
            block_ref = ref[:, by * MB:(by + 1) * MB, bx * MB:(bx + 1) * MB]
            table = _pixel_losses(dnn.kind, centre, block_ref).sum(axis=(1, 2))
            total += table[inverse.ravel()]
    return total / (ph * pw)


def exhaustive_best_mask(dnn, H, L, c, method="local", max_blocks=20):
    """Brute force over every mask with at most ``c`` bits.

    Returns ``(mask, loss)`` for the composite with the lowest accuracy loss;
    exact ties go to the lexicographically largest row-major bit pattern.
    """
    H, L = _check_pair(H, L)
    grid = (H.shape[1] // MB, H.shape[2] // MB)
    n = grid[0] * grid[1]
    if n > max_blocks:
        raise ValueError(f"grid of {n} blocks exceeds the exhaustive-search limit of {max_blocks}")
    if not 0 <= c <= n:
        raise ValueError(f"c={c} outside [0, {n}]")
    masks = enumerate_masks(n, c)
    if method == "local":
        losses = local_composite_losses(dnn, H, L, masks)
    elif method == "direct":
        losses = composite_losses(dnn, H, L, masks)
    else:
        raise ValueError(f"unknown method '{method}'")
    best = losses.min()
    tied = masks[losses == best]
    pick = max(tied.tolist())
    return np.array(pick, dtype=bool).reshape(grid), float(best)


def single_block_gains(dnn, H, L):
    """Loss reduction from swapping each single block of ``L`` for ``H``."""
    H, L = _check_pair(H, L)
    grid = (H.shape[1] // MB, H.shape[2] // MB)
    n = grid[0] * grid[1]
    masks = np.vstack([np.zeros((1, n), dtype=bool), np.eye(n, dtype=bool)])
    losses = local_composite_losses(dnn, H, L, masks)
    return (losses[0] - losses[1:]).reshape(grid)


@dataclass
class SearchResult:
    mask: np.ndarray
    converged: bool
    iterations: int
    accuracy: float
    history: list


def _missed_elements(dnn, out, ref_out, ref_dets):
    """Keys and seed blocks of reference elements not reproduced by ``out``."""
    if dnn.kind == models.DETECTOR:
        pred = models.extract_peaks(out[0])
        matched = {j for _, j in models.match_detections(pred, ref_dets)}
        return {j: (d.y // MB, d.x // MB) for j, d in enumerate(ref_dets) if j not in matched}
    wrong = out.argmax(axis=0) != ref_out.argmax(axis=0)
    blocks = block_sum(wrong.astype(np.float64)) > 0
    return {(int(y), int(x)): (int(y), int(x)) for y, x in zip(*np.nonzero(blocks))}


def idealized_search(dnn, H, qp_low=40, target_acc=1.0, max_iters=10, L=None):
    """Grow high-quality regions around missed elements until they are recovered.

    Each element the DNN misses at low quality is seeded with the block that
    contains it; on every following round, regions of elements that are
    still missed grow by one block up, down, left and right.
    """
    if not 0 < target_acc <= 1:
        raise ValueError("target_acc must lie in (0, 1]")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    H = np.asarray(H, dtype=np.float64)
    L = models.degrade_frame(H, qp_low) if L is None else L
    hb, wb = H.shape[1] // MB, H.shape[2] // MB
    ref_out = models.dnn_infer(dnn, H)
    ref_dets = models.extract_peaks(ref_out[0]) if dnn.kind == models.DETECTOR else None
    regions = {}
    mask = np.zeros((hb, wb), dtype=bool)
    history = [mask.copy()]
    iterations = 0
    while True:
        out = models.dnn_infer(dnn, composite(H, L, mask))
        acc = models.output_accuracy(dnn.kind, out, ref_out)
        missed = _missed_elements(dnn, out, ref_out, ref_dets)
        if acc >= target_acc or not missed or iterations >= max_iters:
            break
        for key, (y, x) in missed.items():
            if key in regions:
                y0, x0, y1, x1 = regions[key]
                regions[key] = (max(0, y0 - 1), max(0, x0 - 1), min(hb - 1, y1 + 1), min(wb - 1, x1 + 1))
            else:
                regions[key] = (y, x, y, x)
        for y0, x0, y1, x1 in regions.values():
            mask[y0:y1 + 1, x0:x1 + 1] = True
        iterations += 1
        history.append(mask.copy())
    return SearchResult(mask, acc >= target_acc, iterations, acc, history)


def write_accgrad_csv(values, path):
    with open(path, "w") as fh:
        fh.write("bx,by,accgrad\n")
        for by, bx in np.ndindex(values.shape):
            fh.write(f"{bx},{by},{float(values[by, bx])!r}\n")


def read_accgrad_csv(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.size == 0:
        return np.zeros((0, 0))
    bx, by = rows[:, 0].astype(int), rows[:, 1].astype(int)
    out = np.zeros((by.max() + 1, bx.max() + 1))
    out[by, bx] = rows[:, 2]
    return out


def mask_to_pbm(mask):
    mask = np.asarray(mask, dtype=bool)
    lines = ["P1", f"{mask.shape[1]} {mask.shape[0]}"]
    lines += [" ".join("1" if v else "0" for v in row) for row in mask]
    return "\n".join(lines) + "\n"


def mask_from_pbm(text):
    tokens = [t for line in text.splitlines() for t in line.split("#")[0].split()]
    if not tokens or tokens[0] != "P1":
        raise ValueError("not a plain PBM (P1) mask")
    w, h = int(tokens[1]), int(tokens[2])
    bits = tokens[3:]
    if len(bits) == 1 and len(bits[0]) == w * h:
        bits = list(bits[0])
    if len(bits) != w * h:
        raise ValueError(f"PBM mask has {len(bits)} bits, expected {w * h}")
    return np.array([b == "1" for b in bits], dtype=bool).reshape(h, w)
