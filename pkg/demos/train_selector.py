"""Label frames with AccGrad, train a selector, and report held-out F1 and cost.

    python demos/train_selector.py [n_frames]
"""

import sys
import time

from accgrad import fixtures, selector
from accgrad.engine import PropagationCounter


def main(n=1000):
    dnn = fixtures.load_fixture("blob_detector")
    counter = PropagationCounter()
    t0 = time.time()
    samples = fixtures.selector_dataset(dnn, n=n, counter=counter)
    split = int(0.8 * len(samples))
    cfg = selector.TrainConfig(seed=fixtures.SELECTOR_SEED)
    model, losses = selector.train(selector.AccModelNet.create(1, seed=cfg.seed), samples[:split], cfg,
                                   log=print)
    scores = selector.evaluate_labels(model, samples[split:])
    print(f"{len(samples)} labelled frames, {counter.snapshot()} forward/backward passes of the final DNN")
    print(f"held-out F1 {scores['f1']:.3f} (precision {scores['precision']:.3f}, recall {scores['recall']:.3f})")
    report = selector.cost_report(n, cfg)
    print(f"final DNN passes: {report['decoupled_passes']} here vs {report['conventional_passes']} "
          f"with the DNN in the loop ({report['ratio']:.0f}x); {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1000)
