"""Accuracy, bytes and delay over the selector threshold on a moving-blob video.

    python demos/stream_tradeoff.py [seed] [out.svg]
"""

import sys

from accgrad import fixtures, pipeline, scenes


def main(seed=11, svg=None):
    dnn = fixtures.load_fixture("blob_detector")
    model = fixtures.load_selector()
    frames = [sc.frame for sc in scenes.moving_blobs(seed, 30, 128, 128, n_blobs=6, texture=0.02)]
    points = [pipeline.uniform_point(frames, dnn, qp) for qp in (30, 35, 40)]
    points += pipeline.sweep(frames, model, dnn, [0.1, 0.2, 0.3, 0.5, 0.7], pipeline.StreamConfig(gamma=0))
    hq = points[0]
    print(f"{'setting':>12} {'acc':>6} {'bytes':>8} {'delay s':>8} {'acc/HQ':>7} {'bytes/HQ':>8}")
    for p in points:
        print(f"{p.label:>12} {p.mean_acc:6.3f} {p.total_bytes:8d} {p.mean_delay:8.3f} "
              f"{p.mean_acc / hq.mean_acc:7.3f} {p.total_bytes / hq.total_bytes:8.3f}")
    if svg:
        uniform = [(p.mean_delay, p.mean_acc) for p in points[:3]]
        roi = [(p.mean_delay, p.mean_acc) for p in points[3:]]
        with open(svg, "w") as fh:
            fh.write(pipeline.svg_line_chart({"uniform QP": uniform, "selector": roi}, "delay (s)", "accuracy"))
        print(f"wrote {svg}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 11, sys.argv[2] if len(sys.argv) > 2 else None)
