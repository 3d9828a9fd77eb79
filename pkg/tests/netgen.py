"""Random small graphs that exercise every op kind, kept away from ReLU/max kinks."""

import numpy as np

from accgrad.tensor import Graph, ParamStore, evaluate

KINK_GAP = 1e-3


def _away_from_kinks(g, relu_inputs, pool_inputs):
    for node in relu_inputs:
        if np.min(np.abs(g.values[node])) < KINK_GAP:
            return False
    for node in pool_inputs:
        x = g.values[node]
        n, c, h, w = x.shape
        win = np.sort(x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
                      .reshape(n, c, h // 2, w // 2, 4), axis=-1)
        if np.min(win[..., -1] - win[..., -2]) < KINK_GAP:
            return False
    return True


def random_all_ops_net(rng):
    """Returns (graph, loss node, params, inputs) using all sixteen op kinds."""
    while True:
        c_in, c_mid = int(rng.integers(1, 3)), int(rng.integers(2, 4))
        params = ParamStore({
            "w1": rng.standard_normal((c_mid, c_in, 3, 3)) * 0.6,
            "b1": rng.standard_normal(c_mid) * 0.3,
            "w2": rng.standard_normal((2, c_mid, 2, 2)) * 0.6,
            "b2": rng.standard_normal(2) * 0.3,
            "m": rng.standard_normal((3, 2)),
        })
        inputs = {
            "x": rng.standard_normal((1, c_in, 6, 6)),
            "a": rng.standard_normal((4, 3)),
        }
        g = Graph()
        x = g.input("x", (1, c_in, 6, 6), requires_grad=True)
        a = g.input("a", (4, 3), requires_grad=True)
        pre = g.conv2d(x, g.param("w1", params["w1"].shape), g.param("b1", (c_mid,)), pad=1)
        h = g.relu(pre)
        pooled = g.maxpool2x2(h)
        z = g.conv2d(pooled, g.param("w2", params["w2"].shape), g.param("b2", (2,)), stride=1)
        labels = g.const(rng.integers(0, 2, (1, 2, 2)).astype(float))
        ce = g.softmax_ce(z, labels)
        targets = g.const(rng.integers(0, 2, (1, 2, 2, 2)).astype(float))
        bce = g.weighted_bce(z, targets, pos_weight=float(rng.uniform(1, 5)))
        s = g.sigmoid(z)
        m = g.matmul(a, g.param("m", (3, 2)))
        lin = g.mean(g.square(g.sub(g.mul(m, m), g.const(rng.standard_normal((4, 2))))))
        loss = g.add(g.add(ce, g.scale(bce, 0.5)), g.add(lin, g.scale(g.sum(s), 0.1)))
        evaluate(g, inputs, params)
        if _away_from_kinks(g, [pre], [h]):
            return g, loss, params, inputs
