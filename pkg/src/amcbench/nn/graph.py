"""Dense-tensor compute graph with reverse-mode differentiation.

A Graph is built once (define-then-run), holds its parameters in a named
registry, caches activations on forward, and walks the node list backwards to
produce gradients for every parameter and, on request, for the input tensor.
Data is float32; reductions accumulate in float64. Every node's output is
checked finite so NaN/Inf surfaces as a NumericFaultError naming the node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidArgumentError, NumericFaultError, ShapeError, StateError


@dataclass
class Node:
    idx: int
    op: str
    inputs: tuple[int, ...]
    out_shape: tuple[int, ...]  # excludes the batch axis
    name: str
    attrs: dict[str, Any] = field(default_factory=dict)
    params: dict[str, str] = field(default_factory=dict)  # local slot -> registry key


@dataclass
class Grads:
    """Backward-pass result: parameter gradients plus optional input gradient."""

    params: dict[str, np.ndarray]
    input: np.ndarray | None = None


def _check_finite(arr: np.ndarray, context: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericFaultError(f"non-finite values in {context}")


class Graph:
    """Static feed-forward graph; single input node, insertion order = topo order."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.output: int | None = None
        self._registry: dict[str, np.ndarray] = {}
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))
        self._acts: list[np.ndarray] | None = None
        self._cache: list[Any] | None = None
        self._batch: int | None = None

    # -- construction -------------------------------------------------------

    def _add(self, op, inputs, out_shape, name, attrs=None, params=None) -> int:
        if name is None:
            name = f"{op}{len(self.nodes)}"
        if any(n.name == name for n in self.nodes):
            raise InvalidArgumentError(f"duplicate node name {name!r}")
        node = Node(len(self.nodes), op, tuple(inputs), tuple(out_shape), name,
                    attrs or {}, params or {})
        self.nodes.append(node)
        self.output = node.idx
        return node.idx

    def _register(self, key: str, array: np.ndarray) -> str:
        if key in self._registry:
            raise InvalidArgumentError(f"duplicate parameter {key!r}")
        self._registry[key] = np.ascontiguousarray(array, dtype=self.dtype)
        return key

    def _shape_of(self, idx: int) -> tuple[int, ...]:
        return self.nodes[idx].out_shape

    def input(self, shape) -> int:
        if self.nodes:
            raise InvalidArgumentError("graph already has an input node")
        return self._add("input", (), tuple(int(s) for s in shape), "input")

    def conv2d(self, src: int, filters: int, kh: int, kw: int,
               padding: str = "same", name: str | None = None) -> int:
        shape = self._shape_of(src)
        if len(shape) != 3:
            raise ShapeError(f"conv2d needs (C,H,W) input, got {shape} from node {src}")
        c, h, w = shape
        if padding == "same":
            pads = ((kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2)
            ho, wo = h, w
        elif padding == "valid":
            pads = (0, 0, 0, 0)
            ho, wo = h - kh + 1, w - kw + 1
        else:
            raise InvalidArgumentError(f"padding must be same/valid, got {padding!r}")
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {kh}x{kw} exceeds input {h}x{w}")
        name = name or f"conv{len(self.nodes)}"
        fan_in = c * kh * kw
        bound = np.sqrt(6.0 / fan_in)
        wkey = self._register(f"{name}.w",
                              self._rng.uniform(-bound, bound, size=(filters, c, kh, kw)))
        bkey = self._register(f"{name}.b", np.zeros(filters))
        return self._add("conv2d", (src,), (filters, ho, wo), name,
                         attrs={"kh": kh, "kw": kw, "pads": pads},
                         params={"w": wkey, "b": bkey})

    def dense(self, src: int, units: int, name: str | None = None) -> int:
        shape = self._shape_of(src)
        if len(shape) != 1:
            raise ShapeError(f"dense needs flat input, got {shape} from node {src}")
        name = name or f"dense{len(self.nodes)}"
        bound = np.sqrt(6.0 / shape[0])
        wkey = self._register(f"{name}.w",
                              self._rng.uniform(-bound, bound, size=(shape[0], units)))
        bkey = self._register(f"{name}.b", np.zeros(units))
        return self._add("dense", (src,), (units,), name, params={"w": wkey, "b": bkey})

    def relu(self, src: int, name: str | None = None) -> int:
        return self._add("relu", (src,), self._shape_of(src), name)

    def maxpool2(self, src: int, name: str | None = None) -> int:
        shape = self._shape_of(src)
        if shape[-1] % 2 != 0 or shape[-1] < 2:
            raise ShapeError(f"maxpool2 needs even sample axis, got {shape}")
        return self._add("maxpool2", (src,), shape[:-1] + (shape[-1] // 2,), name)

    def add(self, a: int, b: int, name: str | None = None) -> int:
        if self._shape_of(a) != self._shape_of(b):
            raise ShapeError(
                f"add shape mismatch {self._shape_of(a)} vs {self._shape_of(b)}"
            )
        return self._add("add", (a, b), self._shape_of(a), name)

    def flatten(self, src: int, name: str | None = None) -> int:
        return self._add("flatten", (src,), (int(np.prod(self._shape_of(src))),), name)

    def softmax(self, src: int, name: str | None = None) -> int:
        return self._add("softmax", (src,), self._shape_of(src), name)

    def to_sequence(self, src: int, name: str | None = None) -> int:
        shape = self._shape_of(src)
        if len(shape) != 3:
            raise ShapeError(f"to_sequence needs (C,H,W) input, got {shape}")
        c, h, w = shape
        return self._add("to_sequence", (src,), (w, c * h), name)

    def lstm(self, src: int, hidden: int, name: str | None = None) -> int:
        shape = self._shape_of(src)
        if len(shape) != 2:
            raise ShapeError(f"lstm needs (T,D) sequence input, got {shape}")
        t, d = shape
        name = name or f"lstm{len(self.nodes)}"
        wx = self._rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=(d, 4 * hidden))
        wh = self._rng.uniform(-1 / np.sqrt(hidden), 1 / np.sqrt(hidden),
                               size=(hidden, 4 * hidden))
        wxkey = self._register(f"{name}.wx", wx)
        whkey = self._register(f"{name}.wh", wh)
        bkey = self._register(f"{name}.b", np.zeros(4 * hidden))
        return self._add("lstm", (src,), (hidden,), name, attrs={"hidden": hidden},
                         params={"wx": wxkey, "wh": whkey, "b": bkey})

    # -- parameter registry --------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        return self._registry

    def param_count(self) -> int:
        return sum(p.size for p in self._registry.values())

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._registry.items()}

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._registry) - set(values)
        extra = set(values) - set(self._registry)
        if missing or extra:
            raise InvalidArgumentError(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for key, arr in values.items():
            dst = self._registry[key]
            if tuple(arr.shape) != tuple(dst.shape):
                raise ShapeError(f"parameter {key!r}: expected {dst.shape}, got {arr.shape}")
            dst[...] = np.asarray(arr, dtype=self.dtype)
        self._acts = None
        self._cache = None

    # -- forward -------------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.output is None:
            raise StateError("graph has no nodes")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        in_shape = self.nodes[0].out_shape
        if x.ndim != len(in_shape) + 1 or tuple(x.shape[1:]) != in_shape:
            raise ShapeError(f"input must be (batch, {', '.join(map(str, in_shape))}),"
                             f" got {x.shape}")
        _check_finite(x, "graph input")
        acts: list[np.ndarray] = [None] * len(self.nodes)
        cache: list[Any] = [None] * len(self.nodes)
        acts[0] = x
        for node in self.nodes[1:]:
            fwd = _FORWARD[node.op]
            acts[node.idx], cache[node.idx] = fwd(self, node, acts)
            _check_finite(acts[node.idx], f"node {node.name!r}")
        self._acts, self._cache, self._batch = acts, cache, x.shape[0]
        return acts[self.output]

    def activation(self, idx: int) -> np.ndarray:
        if self._acts is None:
            raise StateError("forward has not been run")
        return self._acts[idx]

    # -- backward ------------------------------------------------------------

    def backward(self, grad: np.ndarray, at: int | None = None,
                 wrt_input: bool = False) -> Grads:
        """Propagate `grad` (seeded at node `at`, default the output) to parameters.

        The activation cache is left untouched, so repeated calls on the same
        forward pass return identical gradients.
        """
        if self._acts is None:
            raise StateError("backward called before forward")
        at = self.output if at is None else at
        grad = np.ascontiguousarray(grad, dtype=self.dtype)
        if grad.shape != self._acts[at].shape:
            raise ShapeError(
                f"seed gradient shape {grad.shape} does not match node "
                f"{self.nodes[at].name!r} activation {self._acts[at].shape}"
            )
        node_grads: dict[int, np.ndarray] = {at: grad}
        param_grads = {k: np.zeros_like(v) for k, v in self._registry.items()}
        for node in reversed(self.nodes[1 : at + 1]):
            gy = node_grads.pop(node.idx, None)
            if gy is None:
                continue
            bwd = _BACKWARD[node.op]
            input_grads = bwd(self, node, gy, param_grads)
            for src, g in zip(node.inputs, input_grads):
                if src in node_grads:
                    node_grads[src] += g
                else:
                    node_grads[src] = g
        for key, g in param_grads.items():
            _check_finite(g, f"gradient of {key!r}")
        input_grad = None
        if wrt_input:
            input_grad = node_grads.get(0)
            if input_grad is None:
                input_grad = np.zeros_like(self._acts[0])
            _check_finite(input_grad, "input gradient")
        return Grads(params=param_grads, input=input_grad)


# ---------------------------------------------------------------------------
# Op kernels. Forward returns (activation, cache); backward returns one
# gradient per node input and accumulates into param_grads.
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # xp (B,C,Hp,Wp) padded -> (C*kh*kw, B*Ho*Wo)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B,C,Ho,Wo,kh,kw)
    b, c, ho, wo = win.shape[:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * ho * wo), (b, ho, wo)


def _pad_input(x, pads):
    ph0, ph1, pw0, pw1 = pads
    if ph0 or ph1 or pw0 or pw1:
        return np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    return x


def _conv2d_fwd(g: Graph, node: Node, acts):
    x = acts[node.inputs[0]]
    w = g._registry[node.params["w"]]
    b = g._registry[node.params["b"]]
    kh, kw = node.attrs["kh"], node.attrs["kw"]
    xp = _pad_input(x, node.attrs["pads"])
    cols, (nb, ho, wo) = _im2col(xp, kh, kw)
    f = w.shape[0]
    y = (w.reshape(f, -1) @ cols).reshape(f, nb, ho, wo).transpose(1, 0, 2, 3)
    y = y + b[None, :, None, None]
    return np.ascontiguousarray(y), None


def _conv2d_bwd(g: Graph, node: Node, gy, param_grads):
    x = g._acts[node.inputs[0]]
    w = g._registry[node.params["w"]]
    kh, kw = node.attrs["kh"], node.attrs["kw"]
    pads = node.attrs["pads"]
    xp = _pad_input(x, pads)
    cols, (nb, ho, wo) = _im2col(xp, kh, kw)  # recomputed; cheaper than caching
    f = w.shape[0]
    c = x.shape[1]
    gym = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(f, -1)
    param_grads[node.params["w"]] += (gym @ cols.T).reshape(w.shape)
    param_grads[node.params["b"]] += gy.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
    dcols = (w.reshape(f, -1).T @ gym).reshape(c, kh, kw, nb, ho, wo)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + ho, j : j + wo] += dcols[:, i, j].transpose(1, 0, 2, 3)
    ph0, ph1, pw0, pw1 = pads
    hp, wp = gxp.shape[2], gxp.shape[3]
    return (gxp[:, :, ph0 : hp - ph1, pw0 : wp - pw1],)


def _dense_fwd(g: Graph, node: Node, acts):
    x = acts[node.inputs[0]]
    w = g._registry[node.params["w"]]
    b = g._registry[node.params["b"]]
    return x @ w + b, None


def _dense_bwd(g: Graph, node: Node, gy, param_grads):
    x = g._acts[node.inputs[0]]
    w = g._registry[node.params["w"]]
    param_grads[node.params["w"]] += x.T @ gy
    param_grads[node.params["b"]] += gy.sum(axis=0, dtype=np.float64).astype(g.dtype)
    return (gy @ w.T,)


def _relu_fwd(g: Graph, node: Node, acts):
    return np.maximum(acts[node.inputs[0]], 0), None


def _relu_bwd(g: Graph, node: Node, gy, param_grads):
    x = g._acts[node.inputs[0]]
    return (gy * (x > 0),)


def _maxpool2_fwd(g: Graph, node: Node, acts):
    x = acts[node.inputs[0]]
    pairs = x.reshape(x.shape[:-1] + (x.shape[-1] // 2, 2))
    left_wins = pairs[..., 0] >= pairs[..., 1]  # ties go left: deterministic routing
    return np.where(left_wins, pairs[..., 0], pairs[..., 1]), left_wins


def _maxpool2_bwd(g: Graph, node: Node, gy, param_grads):
    left_wins = g._cache[node.idx]
    gx = np.zeros(gy.shape + (2,), dtype=gy.dtype)
    gx[..., 0] = np.where(left_wins, gy, 0)
    gx[..., 1] = np.where(left_wins, 0, gy)
    return (gx.reshape(gy.shape[:-1] + (gy.shape[-1] * 2,)),)


def _add_fwd(g: Graph, node: Node, acts):
    return acts[node.inputs[0]] + acts[node.inputs[1]], None


def _add_bwd(g: Graph, node: Node, gy, param_grads):
    return gy, gy.copy()


def _flatten_fwd(g: Graph, node: Node, acts):
    x = acts[node.inputs[0]]
    return x.reshape(x.shape[0], -1), None


def _flatten_bwd(g: Graph, node: Node, gy, param_grads):
    x = g._acts[node.inputs[0]]
    return (gy.reshape(x.shape),)


def _softmax_fwd(g: Graph, node: Node, acts):
    x = acts[node.inputs[0]]
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g: Graph, node: Node, gy, param_grads):
    y = g._acts[node.idx]
    inner = (gy * y).sum(axis=-1, keepdims=True)
    return (y * (gy - inner),)


def _to_sequence_fwd(g: Graph, node: Node, acts):
    x = acts[node.inputs[0]]  # (B,C,H,W) -> (B,W,C*H)
    b, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)).reshape(b, w, c * h), None


def _to_sequence_bwd(g: Graph, node: Node, gy, param_grads):
    b, c, h, w = g._acts[node.inputs[0]].shape
    return (np.ascontiguousarray(gy.reshape(b, w, c, h).transpose(0, 2, 3, 1)),)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _lstm_fwd(g: Graph, node: Node, acts):
    x = acts[node.inputs[0]]  # (B,T,D)
    wx = g._registry[node.params["wx"]]
    wh = g._registry[node.params["wh"]]
    b = g._registry[node.params["b"]]
    nh = node.attrs["hidden"]
    nb, nt, _ = x.shape
    h = np.zeros((nb, nh), dtype=g.dtype)
    c = np.zeros((nb, nh), dtype=g.dtype)
    gates = np.empty((nt, nb, 4 * nh), dtype=g.dtype)
    cells = np.empty((nt, nb, nh), dtype=g.dtype)
    tanh_c = np.empty((nt, nb, nh), dtype=g.dtype)
    h_prev = np.empty((nt, nb, nh), dtype=g.dtype)
    xw = x.reshape(nb * nt, -1) @ wx  # hoist the input projection out of the loop
    xw = xw.reshape(nb, nt, 4 * nh)
    for t in range(nt):
        h_prev[t] = h
        z = xw[:, t] + h @ wh + b
        zi = _sigmoid(z[:, :nh])
        zf = _sigmoid(z[:, nh : 2 * nh])
        zg = np.tanh(z[:, 2 * nh : 3 * nh])
        zo = _sigmoid(z[:, 3 * nh :])
        c = zf * c + zi * zg
        tc = np.tanh(c)
        h = zo * tc
        gates[t, :, :nh] = zi
        gates[t, :, nh : 2 * nh] = zf
        gates[t, :, 2 * nh : 3 * nh] = zg
        gates[t, :, 3 * nh :] = zo
        cells[t] = c
        tanh_c[t] = tc
    return h, (gates, cells, tanh_c, h_prev)


def _lstm_bwd(g: Graph, node: Node, gy, param_grads):
    x = g._acts[node.inputs[0]]
    gates, cells, tanh_c, h_prev = g._cache[node.idx]
    wx = g._registry[node.params["wx"]]
    wh = g._registry[node.params["wh"]]
    nh = node.attrs["hidden"]
    nb, nt, _ = x.shape
    gwx = np.zeros_like(wx)
    gwh = np.zeros_like(wh)
    gb = np.zeros(4 * nh, dtype=np.float64)
    gx = np.empty_like(x)
    dh = gy.astype(g.dtype)
    dc = np.zeros((nb, nh), dtype=g.dtype)
    for t in range(nt - 1, -1, -1):
        zi = gates[t, :, :nh]
        zf = gates[t, :, nh : 2 * nh]
        zg = gates[t, :, 2 * nh : 3 * nh]
        zo = gates[t, :, 3 * nh :]
        c_prev = cells[t - 1] if t > 0 else np.zeros((nb, nh), dtype=g.dtype)
        do = dh * tanh_c[t]
        dc = dc + dh * zo * (1.0 - tanh_c[t] ** 2)
        di = dc * zg
        df = dc * c_prev
        dg = dc * zi
        dz = np.concatenate(
            [
                di * zi * (1.0 - zi),
                df * zf * (1.0 - zf),
                dg * (1.0 - zg**2),
                do * zo * (1.0 - zo),
            ],
            axis=1,
        )
        gwx += x[:, t].T @ dz
        gwh += h_prev[t].T @ dz
        gb += dz.sum(axis=0, dtype=np.float64)
        gx[:, t] = dz @ wx.T
        dh = dz @ wh.T
        dc = dc * zf
    param_grads[node.params["wx"]] += gwx
    param_grads[node.params["wh"]] += gwh
    param_grads[node.params["b"]] += gb.astype(g.dtype)
    return (gx,)


_FORWARD = {
    "conv2d": _conv2d_fwd,
    "dense": _dense_fwd,
    "relu": _relu_fwd,
    "maxpool2": _maxpool2_fwd,
    "add": _add_fwd,
    "flatten": _flatten_fwd,
    "softmax": _softmax_fwd,
    "to_sequence": _to_sequence_fwd,
    "lstm": _lstm_fwd,
}

_BACKWARD = {
    "conv2d": _conv2d_bwd,
    "dense": _dense_bwd,
    "relu": _relu_bwd,
    "maxpool2": _maxpool2_bwd,
    "add": _add_bwd,
    "flatten": _flatten_bwd,
    "softmax": _softmax_bwd,
    "to_sequence": _to_sequence_bwd,
    "lstm": _lstm_bwd,
}
