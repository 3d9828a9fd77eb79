"""Per-block AccGrad on one scene, next to the brute-force best mask.

    python demos/accgrad_map.py [seed]
"""

import sys

import numpy as np

from accgrad import engine, fixtures, models, scenes


def show(name, grid):
    print(name)
    for row in grid:
        print("  " + " ".join(f"{v:8.4f}" if grid.dtype.kind == "f" else ("#" if v else ".") for v in row))


def main(seed=0):
    dnn = fixtures.load_fixture("blob_detector")
    H = scenes.make_scene(np.random.default_rng(seed), 64, 64).frame
    L = models.degrade_frame(H, 40)
    ag = engine.compute_accgrad(dnn, H, L)
    top = engine.topc_mask(ag, 4)
    best, best_loss = engine.exhaustive_best_mask(dnn, H, L, 4)
    ours = engine.local_composite_losses(dnn, H, L, top.reshape(1, -1))[0]
    show("AccGrad per macroblock", ag)
    show("top-4 AccGrad", top)
    show("exhaustive best (up to 4 blocks)", best)
    print(f"loss: top-4 {ours:.5f}, exhaustive {best_loss:.5f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
