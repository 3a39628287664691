"""A small tape-based reverse-mode autodiff engine and toy networks.

Graphs are built once, node by node, with per-sample shapes checked at
construction. All arrays carry a leading batch axis at run time. Arithmetic
is float64; parameters keep the dtype they were created with (float32 for
anything that is checkpointed) and are upcast on use.

Only first-order gradients are available. The gradient penalty's derivative
with respect to critic parameters is therefore written out by hand for the
single-hidden-layer critic (``MLPCritic.penalty``) and approximated by finite
differences for any other graph critic (``penalty_param_grads_fd``).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import load_tensor, save_tensor

ACTIVATIONS = ("identity", "relu", "leaky_relu", "tanh", "sigmoid")


class GraphError(ValueError):
    pass


@dataclass
class Node:
    op: str
    name: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    inputs: dict[str, np.ndarray]


class Graph:
    """Acyclic computation graph with named parameters and an execution tape."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.input_nodes: dict[str, int] = {}
        self.output_nodes: dict[str, int] = {}
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)
        self._tape: list[np.ndarray] | None = None

    # -- construction -------------------------------------------------
    def _add(self, op, name, inputs, shape, **attrs) -> int:
        name = name or f"{op}{len(self.nodes)}"
        if any(n <= 0 for n in shape):
            raise GraphError(f"node {name!r}: non-positive output shape {shape}")
        self.nodes.append(Node(op, name, tuple(inputs), tuple(int(s) for s in shape), attrs))
        return len(self.nodes) - 1

    def _param(self, name, shape, fan_in):
        if name in self.params:
            raise GraphError(f"duplicate parameter {name!r}")
        s = 1.0 / np.sqrt(fan_in)
        self.params[name] = self._rng.uniform(-s, s, size=shape).astype(self.dtype)
        return name

    def shape(self, node: int) -> tuple[int, ...]:
        return self.nodes[node].shape

    def input(self, name: str, shape) -> int:
        if name in self.input_nodes:
            raise GraphError(f"duplicate input {name!r}")
        nid = self._add("input", name, (), tuple(shape))
        self.input_nodes[name] = nid
        return nid

    def output(self, name: str, node: int) -> None:
        self.output_nodes[name] = node

    def affine(self, x: int, units: int, name: str | None = None) -> int:
        shp = self.shape(x)
        name = name or f"affine{len(self.nodes)}"
        if len(shp) != 1:
            raise GraphError(f"node {name!r}: affine expects a flat input, got shape {shp}")
        w = self._param(f"{name}.weight", (shp[0], units), shp[0])
        b = self._param(f"{name}.bias", (units,), shp[0])
        return self._add("affine", name, (x,), (units,), weight=w, bias=b)

    def conv2d(self, x: int, channels: int, kernel: int = 3, stride: int = 1,
               padding: int | None = None, name: str | None = None) -> int:
        shp = self.shape(x)
        name = name or f"conv{len(self.nodes)}"
        if len(shp) != 3:
            raise GraphError(f"node {name!r}: conv2d expects H x W x C, got shape {shp}")
        pad = kernel // 2 if padding is None else padding
        H, W, C = shp
        Ho = (H + 2 * pad - kernel) // stride + 1
        Wo = (W + 2 * pad - kernel) // stride + 1
        if Ho <= 0 or Wo <= 0:
            raise GraphError(f"node {name!r}: input {shp} too small for kernel {kernel}")
        fan_in = kernel * kernel * C
        w = self._param(f"{name}.weight", (kernel, kernel, C, channels), fan_in)
        b = self._param(f"{name}.bias", (channels,), fan_in)
        return self._add("conv2d", name, (x,), (Ho, Wo, channels), weight=w, bias=b,
                         kernel=kernel, stride=stride, padding=pad)

    def upsample(self, x: int, factor: int = 2, name: str | None = None) -> int:
        shp = self.shape(x)
        if len(shp) != 3:
            raise GraphError(f"node {name!r}: upsample expects H x W x C, got {shp}")
        return self._add("upsample", name, (x,), (shp[0] * factor, shp[1] * factor, shp[2]),
                         factor=factor)

    def activation(self, x: int, kind: str, name: str | None = None) -> int:
        if kind not in ACTIVATIONS:
            raise GraphError(f"unknown activation {kind!r}")
        return self._add("act", name, (x,), self.shape(x), kind=kind)

    def reshape(self, x: int, shape, name: str | None = None) -> int:
        shape = tuple(shape)
        if int(np.prod(shape)) != int(np.prod(self.shape(x))):
            raise GraphError(f"node {name!r}: cannot reshape {self.shape(x)} to {shape}")
        return self._add("reshape", name, (x,), shape)

    def add(self, a: int, b: int, name: str | None = None) -> int:
        if self.shape(a) != self.shape(b):
            raise GraphError(f"node {name!r}: add of shapes {self.shape(a)} and {self.shape(b)}")
        return self._add("add", name, (a, b), self.shape(a))

    def reduce(self, x: int, how: str = "sum", name: str | None = None) -> int:
        if how not in ("sum", "mean"):
            raise GraphError(f"unknown reduction {how!r}")
        return self._add(how, name, (x,), (1,))

    # -- execution ----------------------------------------------------
    def _p(self, name):
        return self.params[name].astype(np.float64, copy=False)

    def forward(self, inputs: dict) -> dict[str, np.ndarray]:
        tape: list[np.ndarray | None] = [None] * len(self.nodes)
        batch = None
        for name, nid in self.input_nodes.items():
            if name not in inputs:
                raise GraphError(f"input {name!r} is not bound")
            val = np.asarray(inputs[name], dtype=np.float64)
            if val.shape[1:] != self.nodes[nid].shape:
                raise GraphError(
                    f"node {name!r}: expected per-sample shape {self.nodes[nid].shape}, got {val.shape[1:]}")
            if batch is not None and val.shape[0] != batch:
                raise GraphError(f"node {name!r}: batch size {val.shape[0]} differs from {batch}")
            batch = val.shape[0]
            tape[nid] = val
        for nid, node in enumerate(self.nodes):
            if node.op != "input":
                tape[nid] = self._eval(node, [tape[i] for i in node.inputs])
        self._tape = tape
        return {name: tape[nid] for name, nid in self.output_nodes.items()}

    def _eval(self, node: Node, xs):
        x = xs[0]
        op = node.op
        if op == "affine":
            return x @ self._p(node.attrs["weight"]) + self._p(node.attrs["bias"])
        if op == "conv2d":
            cols = _im2col(x, node.attrs["kernel"], node.attrs["stride"], node.attrs["padding"])
            node.attrs["_cols"] = cols
            w = self._p(node.attrs["weight"])
            out = cols.reshape(-1, cols.shape[-1]) @ w.reshape(-1, w.shape[-1])
            return out.reshape(x.shape[0], *node.shape) + self._p(node.attrs["bias"])
        if op == "upsample":
            f = node.attrs["factor"]
            return x.repeat(f, axis=1).repeat(f, axis=2)
        if op == "act":
            return _act(node.attrs["kind"], x)
        if op == "reshape":
            return x.reshape(x.shape[0], *node.shape)
        if op == "add":
            return x + xs[1]
        if op == "sum":
            return x.reshape(x.shape[0], -1).sum(axis=1, keepdims=True)
        if op == "mean":
            return x.reshape(x.shape[0], -1).mean(axis=1, keepdims=True)
        raise GraphError(f"node {node.name!r}: unknown op {op!r}")

    def backward(self, output_grad) -> Gradients:
        if self._tape is None:
            raise GraphError("backward called before forward")
        tape = self._tape
        if not isinstance(output_grad, dict):
            if len(self.output_nodes) != 1:
                raise GraphError("graph has several outputs; pass a dict of output gradients")
            output_grad = {next(iter(self.output_nodes)): output_grad}
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        for name, g in output_grad.items():
            nid = self.output_nodes[name]
            g = np.asarray(g, dtype=np.float64)
            if g.shape != tape[nid].shape:
                raise GraphError(f"output {name!r}: gradient shape {g.shape} != {tape[nid].shape}")
            grads[nid] = g if grads[nid] is None else grads[nid] + g
        pgrads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.params.items()}
        for nid in range(len(self.nodes) - 1, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.op == "input":
                continue
            xs = [tape[i] for i in node.inputs]
            for i, gi in zip(node.inputs, self._vjp(node, xs, tape[nid], g, pgrads)):
                grads[i] = gi if grads[i] is None else grads[i] + gi
        ins = {}
        for name, nid in self.input_nodes.items():
            ins[name] = grads[nid] if grads[nid] is not None else np.zeros_like(tape[nid])
        return Gradients(pgrads, ins)

    def _vjp(self, node: Node, xs, y, g, pgrads):
        x = xs[0]
        op = node.op
        if op == "affine":
            w = node.attrs["weight"]
            pgrads[w] += x.T @ g
            pgrads[node.attrs["bias"]] += g.sum(axis=0)
            return [g @ self._p(w).T]
        if op == "conv2d":
            w = node.attrs["weight"]
            cols = node.attrs["_cols"]
            wm = self._p(w)
            gf = g.reshape(-1, g.shape[-1])
            pgrads[w] += (cols.reshape(-1, cols.shape[-1]).T @ gf).reshape(wm.shape)
            pgrads[node.attrs["bias"]] += gf.sum(axis=(0,))
            dcols = (gf @ wm.reshape(-1, wm.shape[-1]).T).reshape(cols.shape)
            return [_col2im(dcols, x.shape, node.attrs["kernel"], node.attrs["stride"],
                            node.attrs["padding"])]
        if op == "upsample":
            f = node.attrs["factor"]
            B, H, W, C = x.shape
            return [g.reshape(B, H, f, W, f, C).sum(axis=(2, 4))]
        if op == "act":
            return [g * _act_grad(node.attrs["kind"], x, y)]
        if op == "reshape":
            return [g.reshape(x.shape)]
        if op == "add":
            return [g, g]
        if op == "sum":
            return [np.broadcast_to(g.reshape(-1, *([1] * (x.ndim - 1))), x.shape).copy()]
        if op == "mean":
            n = int(np.prod(x.shape[1:]))
            return [np.broadcast_to(g.reshape(-1, *([1] * (x.ndim - 1))), x.shape) / n]
        raise GraphError(f"node {node.name!r}: unknown op {op!r}")


def _im2col(x, k, stride, pad):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # (B, Ho, Wo, C, k, k) -> (B, Ho, Wo, k, k, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(*win.shape[:3], -1)


def _col2im(dcols, x_shape, k, stride, pad):
    B, H, W, C = x_shape
    Ho, Wo = dcols.shape[1:3]
    d = dcols.reshape(B, Ho, Wo, k, k, C)
    dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, C))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += d[:, :, :, i, j, :]
    return dxp[:, pad:pad + H, pad:pad + W, :]


def _act(kind, x):
    if kind == "identity":
        return x
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, 0.2 * x)
    if kind == "tanh":
        return np.tanh(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _act_grad(kind, x, y):
    if kind == "identity":
        return np.ones_like(x)
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(x > 0, 1.0, 0.2)
    if kind == "tanh":
        return 1.0 - y * y
    return y * (1.0 - y)


def forward(g: Graph, inputs: dict) -> dict[str, np.ndarray]:
    return g.forward(inputs)


def backward(g: Graph, output_grad) -> Gradients:
    return g.backward(output_grad)


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


def sgd_step(params: dict, grads: dict, lr: float) -> dict[str, np.ndarray]:
    """Return ``p - lr * g`` for every parameter, keeping each parameter's dtype."""
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise KeyError(f"parameter/gradient names differ: {missing}")
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        out[name] = (p.astype(np.float64) - lr * g).astype(p.dtype)
    return out


# -- critics ----------------------------------------------------------

class ConstantCritic:
    def __init__(self, c: float):
        self.c = float(c)
        self.params: dict[str, np.ndarray] = {}

    def score(self, x):
        return np.full(len(x), self.c)

    def input_grad(self, x):
        return np.zeros(np.shape(x), dtype=np.float64)


class LinearCritic:
    """D(x) = w . vec(x) + b."""

    def __init__(self, w, b: float = 0.0):
        self.params = {"weight": np.asarray(w, dtype=np.float64).ravel(),
                       "bias": np.array([b], dtype=np.float64)}

    def score(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(len(x), -1) @ self.params["weight"] + self.params["bias"][0]

    def input_grad(self, x):
        x = np.asarray(x)
        return np.broadcast_to(self.params["weight"].reshape(x.shape[1:]), x.shape).astype(np.float64)

    def param_grads(self, x, out_grad):
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return {"weight": x.T @ out_grad, "bias": np.array([np.sum(out_grad)])}

    def penalty(self, x_hat):
        w = self.params["weight"]
        n = np.linalg.norm(w)
        dn = 2.0 * (n - 1.0) * w / n if n > 0 else np.zeros_like(w)
        return float((n - 1.0) ** 2), {"weight": dn, "bias": np.zeros(1)}


class GraphCritic:
    """Critic backed by a graph with input ``x`` and a single scalar output ``score``."""

    def __init__(self, graph: Graph):
        self.graph = graph

    @property
    def params(self):
        return self.graph.params

    @params.setter
    def params(self, value):
        self.graph.params = value

    def score(self, x):
        return self.graph.forward({"x": x})["score"][:, 0]

    def input_grad(self, x):
        self.graph.forward({"x": x})
        return self.graph.backward(np.ones((len(x), 1))).inputs["x"]

    def param_grads(self, x, out_grad):
        self.graph.forward({"x": x})
        return self.graph.backward(np.asarray(out_grad, dtype=np.float64).reshape(-1, 1)).params


class MLPCritic(GraphCritic):
    """D(x) = v . tanh(W^T vec(x) + b) + c, with a closed-form penalty gradient."""

    def __init__(self, in_shape, hidden: int = 16, seed: int = 0, dtype=np.float32):
        g = Graph(seed=seed, dtype=dtype)
        n = int(np.prod(in_shape))
        x = g.input("x", tuple(in_shape))
        h = g.reshape(x, (n,), name="flat")
        h = g.activation(g.affine(h, hidden, name="fc1"), "tanh")
        g.output("score", g.affine(h, 1, name="fc2"))
        super().__init__(g)

    def penalty(self, x_hat):
        """Mean of (||grad_x D(x_hat)|| - 1)^2 and its gradient w.r.t. every parameter."""
        p = {k: v.astype(np.float64) for k, v in self.params.items()}
        W, b, v = p["fc1.weight"], p["fc1.bias"], p["fc2.weight"][:, 0]
        x = np.asarray(x_hat, dtype=np.float64).reshape(len(x_hat), -1)
        B = x.shape[0]
        t = np.tanh(x @ W + b)
        sp = 1.0 - t * t
        u = v * sp
        gin = u @ W.T
        norm = np.linalg.norm(gin, axis=1)
        value = float(np.mean((norm - 1.0) ** 2))
        safe = np.where(norm > 0, norm, 1.0)
        G = (2.0 / B) * ((norm - 1.0) / safe)[:, None] * gin
        G[norm == 0] = 0.0
        dW = G.T @ u
        du = G @ W
        dv = np.sum(du * sp, axis=0)
        da = (-2.0 * t * (du * v)) * sp
        dW += x.T @ da
        db = da.sum(axis=0)
        grads = {"fc1.weight": dW, "fc1.bias": db,
                 "fc2.weight": dv[:, None], "fc2.bias": np.zeros(1)}
        return value, grads


def gradient_penalty(critic, x_hat) -> float:
    g = critic.input_grad(x_hat)
    norms = np.linalg.norm(np.asarray(g).reshape(len(g), -1), axis=1)
    return float(np.mean((norms - 1.0) ** 2))


def penalty_param_grads_fd(critic, x_hat, eps: float = 1e-4) -> dict[str, np.ndarray]:
    """Central-difference gradient of the gradient penalty w.r.t. critic parameters."""
    out = {}
    for name, p in critic.params.items():
        base = p.copy()
        work = p.astype(np.float64)
        g = np.zeros_like(work)
        for idx in np.ndindex(*work.shape):
            old = work[idx]
            work[idx] = old + eps
            critic.params[name] = work.astype(base.dtype)
            hi = gradient_penalty(critic, x_hat)
            work[idx] = old - eps
            critic.params[name] = work.astype(base.dtype)
            lo = gradient_penalty(critic, x_hat)
            work[idx] = old
            g[idx] = (hi - lo) / (2 * eps)
        critic.params[name] = base
        out[name] = g
    return out


# -- toy generator ------------------------------------------------------

GENERATOR_EXTRA_CHANNELS = 3  # mask, row coordinate, column coordinate


def generator_input(x, t) -> np.ndarray:
    """Stack masked images (B, H, W, C), masks (B, H, W, 1) and two coordinate planes.

    The coordinate planes keep outputs inside a large hole from being
    translation invariant, which would otherwise produce exactly repeated
    feature patches.
    """
    B, H, W, _ = x.shape
    rows, cols = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    coords = np.broadcast_to(np.stack([rows, cols], axis=-1), (B, H, W, 2))
    return np.concatenate([x, t, coords], axis=-1)


def build_generator(shape, width: int = 8, seed: int = 0, dtype=np.float32) -> Graph:
    """Encoder-decoder mapping ``generator_input`` planes to a full image.

    ``shape`` is the image H x W x C; H and W must be divisible by 4.
    """
    H, W, C = shape
    if H % 4 or W % 4:
        raise GraphError(f"generator needs H and W divisible by 4, got {H}x{W}")
    g = Graph(seed=seed, dtype=dtype)
    x = g.input("x", (H, W, C + GENERATOR_EXTRA_CHANNELS))
    e1 = g.activation(g.conv2d(x, width, stride=2, name="enc1"), "tanh")
    e2 = g.activation(g.conv2d(e1, 2 * width, stride=2, name="enc2"), "tanh")
    d1 = g.activation(g.conv2d(g.upsample(e2), width, name="dec1"), "tanh")
    d1 = g.add(d1, e1)
    d2 = g.conv2d(g.upsample(d1), width, name="dec2")
    skip = g.conv2d(x, width, kernel=1, name="skip")
    h = g.activation(g.add(d2, skip), "tanh")
    out = g.activation(g.conv2d(h, C, name="out"), "identity")
    g.output("image", out)
    return g


# -- checkpoints ----------------------------------------------------------

MANIFEST = "manifest.txt"


def save_checkpoint(directory: str | os.PathLike, params: dict, meta: dict | None = None) -> None:
    """Write each parameter as ``<name>.dt`` plus a key=value manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(params):
        arr = np.asarray(params[name])
        if arr.dtype != np.float32:
            raise TypeError(f"{name}: checkpoints store float32 parameters, got {arr.dtype}")
        save_tensor(arr, d / f"{name}.dt")
        lines.append(f"param.{name} = {json.dumps(list(arr.shape))}")
    for key, value in sorted((meta or {}).items()):
        lines.append(f"{key} = {value}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")


def load_checkpoint(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    d = Path(directory)
    params, meta = {}, {}
    for line in (d / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("param."):
            name = key[len("param."):]
            arr = load_tensor(d / f"{name}.dt")
            if list(arr.shape) != json.loads(value):
                raise ValueError(f"{name}: manifest shape {value} != file shape {list(arr.shape)}")
            params[name] = arr
        else:
            meta[key] = value
    return params, meta
