"""Dense tensors with define-then-run reverse-mode differentiation.

A :class:`Graph` is built once from a small closed set of ops, with every
node's output shape known at build time.  :func:`evaluate` binds inputs and
parameters and caches each node's value; :func:`backward` walks the nodes in
reverse creation order (which is a topological order) and caches gradients.

Tensors are plain ``float64`` numpy arrays.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

OP_KINDS = (
    "const", "input", "add", "mul", "matmul", "conv2d", "relu", "sigmoid",
    "maxpool2x2", "mean", "sum", "scale", "sub", "square", "softmax_ce",
    "weighted_bce",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphStateError(RuntimeError):
    pass


class MissingGradientError(KeyError):
    pass


@dataclass
class Node:
    id: int
    kind: str
    parents: tuple
    shape: tuple
    attrs: dict = field(default_factory=dict)
    name: str | None = None

    def label(self):
        if self.name:
            return f"node {self.id} ({self.kind} '{self.name}')"
        return f"node {self.id} ({self.kind})"


class ParamStore:
    """Ordered name -> array map of trainable parameters.

    Shapes are fixed when a name is first added.
    """

    def __init__(self, items=None):
        self._data = OrderedDict()
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._data:
            raise KeyError(f"parameter '{name}' already exists")
        self._data[name] = np.array(value, dtype=np.float64)

    def set(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._data[name].shape:
            raise ShapeError(
                f"parameter '{name}' has shape {self._data[name].shape}, got {value.shape}")
        self._data[name] = value.copy()

    def __getitem__(self, name):
        return self._data[name]

    def __contains__(self, name):
        return name in self._data

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def items(self):
        return self._data.items()

    def names(self):
        return list(self._data)

    def copy(self):
        return ParamStore({k: v.copy() for k, v in self._data.items()})

    def count(self):
        return int(sum(v.size for v in self._data.values()))

    def to_bytes(self):
        out = [b"AGP1"]
        for name, value in self._data.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.append(struct.pack("<B", value.ndim))
            out.append(struct.pack(f"<{value.ndim}I", *value.shape))
            out.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != b"AGP1":
            raise ValueError("not an AGP1 checkpoint (bad magic)")
        store = cls()
        pos = 4
        try:
            while pos < len(data):
                (n,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos:pos + n].decode("utf-8")
                if len(name.encode("utf-8")) != n:
                    raise struct.error("truncated name")
                pos += n
                (rank,) = struct.unpack_from("<B", data, pos)
                pos += 1
                dims = struct.unpack_from(f"<{rank}I", data, pos)
                pos += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                if pos + 8 * size > len(data):
                    raise struct.error("truncated values")
                values = np.frombuffer(data, dtype="<f8", count=size, offset=pos)
                pos += 8 * size
                store.add(name, values.reshape(dims).astype(np.float64))
        except struct.error as exc:
            raise ValueError(f"corrupt AGP1 checkpoint at byte {pos}: {exc}") from None
        return store

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


class Graph:
    """Computation graph builder.

    Builder methods return integer node ids.  Inputs and parameters are both
    ``input`` nodes; parameters are looked up by name in a :class:`ParamStore`
    at evaluation time.
    """

    def __init__(self):
        self.nodes = []
        self.values = None
        self.grads = None

    def _add(self, kind, parents, shape, name=None, **attrs):
        node = Node(len(self.nodes), kind, tuple(parents), tuple(shape), attrs, name)
        self.nodes.append(node)
        return node.id

    def _shape(self, i):
        return self.nodes[i].shape

    def _fail(self, kind, msg):
        raise ShapeError(f"node {len(self.nodes)} ({kind}): {msg}")

    # leaves

    def input(self, name, shape, requires_grad=False):
        return self._add("input", (), shape, name=name, param=False,
                         requires_grad=requires_grad)

    def param(self, name, shape):
        return self._add("input", (), shape, name=name, param=True, requires_grad=True)

    def const(self, value, name=None):
        value = np.array(value, dtype=np.float64)
        return self._add("const", (), value.shape, name=name, value=value)

    # elementwise

    def _same(self, kind, a, b, name):
        if self._shape(a) != self._shape(b):
            self._fail(kind, f"operand shapes differ: {self._shape(a)} vs {self._shape(b)}")
        return self._add(kind, (a, b), self._shape(a), name=name)

    def add(self, a, b, name=None):
        return self._same("add", a, b, name)

    def sub(self, a, b, name=None):
        return self._same("sub", a, b, name)

    def mul(self, a, b, name=None):
        return self._same("mul", a, b, name)

    def relu(self, a, name=None):
        return self._add("relu", (a,), self._shape(a), name=name)

    def sigmoid(self, a, name=None):
        return self._add("sigmoid", (a,), self._shape(a), name=name)

    def square(self, a, name=None):
        return self._add("square", (a,), self._shape(a), name=name)

    def scale(self, a, k, name=None):
        return self._add("scale", (a,), self._shape(a), name=name, k=float(k))

    # reductions

    def sum(self, a, name=None):
        return self._add("sum", (a,), (), name=name)

    def mean(self, a, name=None):
        return self._add("mean", (a,), (), name=name)

    # structured

    def matmul(self, a, b, name=None):
        sa, sb = self._shape(a), self._shape(b)
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            self._fail("matmul", f"cannot multiply {sa} by {sb}")
        return self._add("matmul", (a, b), (sa[0], sb[1]), name=name)

    def conv2d(self, x, w, b=None, stride=1, pad=0, name=None):
        """``x`` is (N, C, H, W), ``w`` is (O, C, kh, kw), ``b`` is (O,)."""
        sx, sw = self._shape(x), self._shape(w)
        if len(sx) != 4 or len(sw) != 4:
            self._fail("conv2d", f"expected 4-d input and kernel, got {sx} and {sw}")
        if sx[1] != sw[1]:
            self._fail("conv2d", f"input has {sx[1]} channels, kernel expects {sw[1]}")
        if b is not None and self._shape(b) != (sw[0],):
            self._fail("conv2d", f"bias shape {self._shape(b)} != ({sw[0]},)")
        ho = _conv_out(sx[2], sw[2], stride, pad)
        wo = _conv_out(sx[3], sw[3], stride, pad)
        if ho < 1 or wo < 1:
            self._fail("conv2d", f"kernel {sw[2:]} does not fit input {sx[2:]}")
        parents = (x, w) if b is None else (x, w, b)
        return self._add("conv2d", parents, (sx[0], sw[0], ho, wo), name=name,
                         stride=int(stride), pad=int(pad))

    def maxpool2x2(self, a, name=None):
        s = self._shape(a)
        if len(s) != 4 or s[2] % 2 or s[3] % 2:
            self._fail("maxpool2x2", f"needs 4-d input with even spatial dims, got {s}")
        return self._add("maxpool2x2", (a,), (s[0], s[1], s[2] // 2, s[3] // 2), name=name)

    def softmax_ce(self, logits, labels, name=None):
        """Mean per-pixel cross-entropy; logits (N, K, H, W), labels (N, H, W)."""
        sl, sy = self._shape(logits), self._shape(labels)
        if len(sl) != 4 or sy != (sl[0],) + sl[2:]:
            self._fail("softmax_ce", f"logits {sl} incompatible with labels {sy}")
        return self._add("softmax_ce", (logits, labels), (), name=name)

    def weighted_bce(self, logits, targets, pos_weight=1.0, name=None):
        """Mean binary cross-entropy on logits, positive terms scaled by ``pos_weight``."""
        if self._shape(logits) != self._shape(targets):
            self._fail("weighted_bce",
                       f"logits {self._shape(logits)} vs targets {self._shape(targets)}")
        return self._add("weighted_bce", (logits, targets), (), name=name,
                         pos_weight=float(pos_weight))

    # lookup

    def find(self, name):
        for node in self.nodes:
            if node.name == name:
                return node.id
        raise KeyError(name)


# forward rules: (node, parent values) -> (output, cache)

def _im2col(x, kh, kw, stride, pad):
    """Patches laid out as (kh, kw, C, N, Ho, Wo) so each offset is one slice copy."""
    n, c, h, w = x.shape
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((kh, kw, c, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(kh * kw * c, n * ho * wo), ho, wo


def _fwd_conv2d(node, vals):
    x, w = vals[0], vals[1]
    o, c, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, node.attrs["stride"], node.attrs["pad"])
    out = w.transpose(0, 2, 3, 1).reshape(o, -1) @ cols
    if len(vals) == 3:
        out += vals[2][:, None]
    return out.reshape(o, x.shape[0], ho, wo).transpose(1, 0, 2, 3), cols


def _fwd_maxpool(node, vals):
    x = vals[0]
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], -1)[..., 0], idx


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _fwd_softmax_ce(node, vals):
    logits, labels = vals
    y = labels.astype(np.int64)
    k = logits.shape[1]
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ShapeError(f"{node.label()}: label outside [0, {k})")
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, y[:, None], 1)[:, 0]
    return np.array(-picked.mean()), (logp, y)


def _fwd_wbce(node, vals):
    z, t = vals
    pw = node.attrs["pos_weight"]
    loss = pw * t * np.logaddexp(0.0, -z) + (1.0 - t) * np.logaddexp(0.0, z)
    return np.array(loss.mean()), None


_FORWARD = {
    "add": lambda n, v: (v[0] + v[1], None),
    "sub": lambda n, v: (v[0] - v[1], None),
    "mul": lambda n, v: (v[0] * v[1], None),
    "matmul": lambda n, v: (v[0] @ v[1], None),
    "relu": lambda n, v: (np.maximum(v[0], 0.0), None),
    "sigmoid": lambda n, v: (expit(v[0]), None),
    "square": lambda n, v: (v[0] * v[0], None),
    "scale": lambda n, v: (v[0] * n.attrs["k"], None),
    "sum": lambda n, v: (np.array(v[0].sum()), None),
    "mean": lambda n, v: (np.array(v[0].mean()), None),
    "conv2d": _fwd_conv2d,
    "maxpool2x2": _fwd_maxpool,
    "softmax_ce": _fwd_softmax_ce,
    "weighted_bce": _fwd_wbce,
}


# backward rules: (node, parent values, output, cache, upstream grad) -> parent grads
# A None entry means "no gradient flows to this parent".

def _bwd_conv2d(node, vals, out, cols, g):
    x, w = vals[0], vals[1]
    o, c, kh, kw = w.shape
    n, _, ho, wo = g.shape
    s, p = node.attrs["stride"], node.attrs["pad"]
    gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
    gw = (gm @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
    dcols = (w.transpose(0, 2, 3, 1).reshape(o, -1).T @ gm).reshape(kh, kw, c, n, ho, wo)
    hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
    dxp = np.zeros((c, n, hp, wp))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[i, j]
    gx = dxp[:, :, p:hp - p, p:wp - p] if p else dxp
    grads = [gx.transpose(1, 0, 2, 3), gw]
    if len(vals) == 3:
        grads.append(gm.sum(axis=1))
    return grads


def _bwd_maxpool(node, vals, out, idx, g):
    n, c, h, w = vals[0].shape
    onehot = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(onehot, idx[..., None], g[..., None], -1)
    gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return [gx.reshape(n, c, h, w)]


def _bwd_softmax_ce(node, vals, out, cache, g):
    logp, y = cache
    grad = np.exp(logp)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, y[:, None], 1.0, 1)
    count = y.size
    return [g * (grad - onehot) / count, None]


def _bwd_wbce(node, vals, out, cache, g):
    z, t = vals
    pw = node.attrs["pos_weight"]
    s = expit(z)
    return [g * (pw * t * (s - 1.0) + (1.0 - t) * s) / z.size, None]


_BACKWARD = {
    "add": lambda n, v, o, c, g: [g, g],
    "sub": lambda n, v, o, c, g: [g, -g],
    "mul": lambda n, v, o, c, g: [g * v[1], g * v[0]],
    "matmul": lambda n, v, o, c, g: [g @ v[1].T, v[0].T @ g],
    "relu": lambda n, v, o, c, g: [g * (v[0] > 0.0)],
    "sigmoid": lambda n, v, o, c, g: [g * o * (1.0 - o)],
    "square": lambda n, v, o, c, g: [2.0 * g * v[0]],
    "scale": lambda n, v, o, c, g: [g * n.attrs["k"]],
    "sum": lambda n, v, o, c, g: [np.full(v[0].shape, float(g))],
    "mean": lambda n, v, o, c, g: [np.full(v[0].shape, float(g) / max(v[0].size, 1))],
    "conv2d": _bwd_conv2d,
    "maxpool2x2": _bwd_maxpool,
    "softmax_ce": _bwd_softmax_ce,
    "weighted_bce": _bwd_wbce,
}


def evaluate(graph, inputs=None, params=None):
    """Run the graph forward and return the values of all named nodes.

    ``inputs`` maps input names to arrays; parameter nodes are read from
    ``params``.
    """
    inputs = inputs or {}
    values = [None] * len(graph.nodes)
    caches = [None] * len(graph.nodes)
    for node in graph.nodes:
        if node.kind == "const":
            out = node.attrs["value"]
        elif node.kind == "input":
            source = params if node.attrs["param"] else inputs
            if source is None or node.name not in source:
                what = "parameter" if node.attrs["param"] else "input"
                raise GraphStateError(f"{node.label()}: {what} '{node.name}' is not bound")
            out = np.asarray(source[node.name], dtype=np.float64)
            if out.shape != node.shape:
                raise ShapeError(f"{node.label()}: bound shape {out.shape} != declared {node.shape}")
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                out, caches[node.id] = _FORWARD[node.kind](node, [values[p] for p in node.parents])
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(f"{node.label()}: non-finite output")
        values[node.id] = out
    graph.values = values
    graph._caches = caches
    graph.grads = None
    return {n.name: values[n.id] for n in graph.nodes if n.name}


def backward(graph, loss):
    """Back-propagate from scalar node ``loss``.

    Returns gradients keyed by name for every parameter and every input
    declared with ``requires_grad``.  All reachable node gradients are cached
    on ``graph.grads``.
    """
    if graph.values is None:
        raise GraphStateError("backward called before evaluate")
    if graph.nodes[loss].shape != ():
        raise ShapeError(f"{graph.nodes[loss].label()}: loss must be scalar, "
                         f"has shape {graph.nodes[loss].shape}")
    grads = [None] * len(graph.nodes)
    grads[loss] = np.array(1.0)
    for node in reversed(graph.nodes[:loss + 1]):
        g = grads[node.id]
        if g is None or not node.parents:
            continue
        vals = [graph.values[p] for p in node.parents]
        parts = _BACKWARD[node.kind](node, vals, graph.values[node.id], graph._caches[node.id], g)
        for p, gp in zip(node.parents, parts):
            if gp is None:
                continue
            grads[p] = gp if grads[p] is None else grads[p] + gp
    for node in graph.nodes:
        frozen = node.kind == "const" or (node.kind == "input" and not node.attrs["requires_grad"])
        if node.id <= loss and (grads[node.id] is None or frozen):
            grads[node.id] = np.zeros(node.shape)
    graph.grads = grads
    return {n.name: grads[n.id] for n in graph.nodes
            if n.kind == "input" and n.attrs["requires_grad"] and grads[n.id] is not None}


def grad_check(graph, loss, params=None, inputs=None, eps=1e-4, names=None):
    """Compare analytic gradients against central differences.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.  Every parameter and every
    ``requires_grad`` input is checked unless ``names`` restricts the set.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    params = params.copy() if params is not None else ParamStore()
    inputs = {k: np.array(v, dtype=np.float64) for k, v in (inputs or {}).items()}
    evaluate(graph, inputs, params)
    analytic = backward(graph, loss)
    worst = 0.0
    for name, ga in analytic.items():
        if names is not None and name not in names:
            continue
        target = params._data if name in params else inputs
        arr = target[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            evaluate(graph, inputs, params)
            up = float(graph.values[loss])
            arr[idx] = orig - eps
            evaluate(graph, inputs, params)
            down = float(graph.values[loss])
            arr[idx] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(ga[idx] - numeric) / max(1.0, abs(numeric)))
    evaluate(graph, inputs, params)
    return worst


def sgd_step(params, grads, lr):
    """Return a new store with ``w - lr * g`` applied to every parameter."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    out = ParamStore()
    for name, w in params.items():
        if name not in grads:
            raise MissingGradientError(f"no gradient for parameter '{name}'")
        g = np.asarray(grads[name])
        if g.shape != w.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, expected {w.shape}")
        out.add(name, w - lr * g)
    return out


class Adam:
    """Adam optimizer state over a ParamStore; ``step`` updates the store in place."""

    def __init__(self, params, lr=0.003, b1=0.9, b2=0.999, eps=1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for name, w in params.items():
            if name not in grads:
                raise MissingGradientError(f"no gradient for parameter '{name}'")
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = self.m[name] / (1 - self.b1 ** self.t)
            vhat = self.v[name] / (1 - self.b2 ** self.t)
            params.set(name, w - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return params
