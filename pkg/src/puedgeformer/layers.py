"""Learnable blocks: per-point MLP, EdgeConv, multi-head attention, EdgeFormer."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .geometry import KnnGraph, knn
from .tensor import ShapeError, Tensor

ACTIVATIONS = ("relu", "leaky_relu", "none")
LEAKY_SLOPE = 0.2

# inference-only attention is evaluated in query-row chunks above this many logits
_ATTN_CHUNK_ELEMS = 1 << 23


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def init_bias(n: int, name: str) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True, name=name)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "leaky_relu":
        return T.leaky_relu(x, LEAKY_SLOPE)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


class Module:
    """Minimal parameter container; subclasses list children in ``_children``."""

    _children: tuple[str, ...] = ()
    _own: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr in self._own:
            p = getattr(self, attr)
            if p is not None:
                yield prefix + attr, p
        for attr in self._children:
            child = getattr(self, attr)
            if child is not None:
                yield from child.named_parameters(prefix + attr + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class MlpLayer(Module):
    _own = ("weight", "bias")

    def __init__(self, weight: Tensor, bias: Tensor, activation: str = "none"):
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ShapeError(f"inconsistent MLP shapes: weight {weight.shape}, bias {bias.shape}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @classmethod
    def create(cls, c_in: int, c_out: int, activation: str, rng: np.random.Generator) -> "MlpLayer":
        return cls(init_weight(rng, c_in, c_out, "weight"), init_bias(c_out, "bias"), activation)

    @property
    def c_in(self) -> int:
        return self.weight.shape[0]

    @property
    def c_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(layer: MlpLayer, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.c_in:
        raise ShapeError(f"MLP expects N x {layer.c_in} input, got {x.shape}")
    return activate(T.matmul(x, layer.weight) + layer.bias, layer.activation)


class EdgeConvLayer(Module):
    """Shared affine map on edge features ``[f_i, f_j - f_i]``, LeakyReLU, max over neighbours."""

    _own = ("weight", "bias")

    def __init__(self, k: int, weight: Tensor, bias: Tensor):
        if weight.ndim != 2 or weight.shape[0] % 2 or bias.shape != (weight.shape[1],):
            raise ShapeError(f"inconsistent EdgeConv shapes: weight {weight.shape}, bias {bias.shape}")
        self.k = int(k)
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, k: int, c_in: int, c_out: int, rng: np.random.Generator) -> "EdgeConvLayer":
        return cls(k, init_weight(rng, 2 * c_in, c_out, "weight"), init_bias(c_out, "bias"))

    @property
    def c_in(self) -> int:
        return self.weight.shape[0] // 2

    @property
    def c_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, f: Tensor, graph: KnnGraph) -> Tensor:
        return edgeconv_forward(self, f, graph)


def edgeconv_forward(layer: EdgeConvLayer, f: Tensor, graph: KnnGraph) -> Tensor:
    """EdgeConv over a precomputed neighbour graph.

    The affine map of ``[f_i, f_j - f_i]`` splits into
    ``f_i (W_top - W_bottom) + f_j W_bottom``, so the per-edge work is a gather
    and an add instead of a (N k) x 2C matrix product.
    """
    n, c = f.shape
    if c != layer.c_in:
        raise ShapeError(f"EdgeConv expects {layer.c_in} input channels, got {c}")
    if graph.n != n:
        raise ShapeError(f"graph has {graph.n} rows but features have {n}")
    if graph.k != layer.k:
        raise ShapeError(f"graph k={graph.k} does not match layer k={layer.k}")
    w_top = T.gather_rows(layer.weight, np.arange(c))
    w_bottom = T.gather_rows(layer.weight, np.arange(c, 2 * c))
    centre = T.matmul(f, w_top - w_bottom) + layer.bias
    neigh = T.gather_rows(T.matmul(f, w_bottom), graph.neighbors)
    edges = T.leaky_relu(neigh + T.reshape(centre, (n, 1, layer.c_out)), LEAKY_SLOPE)
    out, _ = T.max_over_axis(edges, axis=1)
    return out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    return T.transpose(T.reshape(x, (n, heads, c // heads)), (1, 0, 2))


def attention_weights(q: Tensor, k: Tensor, heads: int, scaled: bool = True) -> Tensor:
    """Row-stochastic attention matrices, shape ``heads x N x N``."""
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    logits = T.matmul(qh, T.transpose(kh, (0, 2, 1)))
    if scaled:
        logits = T.scale(logits, 1.0 / math.sqrt(q.shape[1] // heads))
    return T.softmax_rows(logits)


def multihead_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    out_weight: Tensor | None = None,
    out_bias: Tensor | None = None,
    scaled: bool = True,
) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated, then projected.

    With ``out_weight=None`` the concatenated head outputs are returned as is.
    """
    n, c = q.shape
    if k.shape != (n, c) or v.shape != (n, c):
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if c % heads:
        raise ShapeError(f"channel count {c} is not divisible by {heads} heads")
    if not T.is_recording() and heads * n * n > _ATTN_CHUNK_ELEMS:
        merged = Tensor._wrap(_attention_chunked(q.data, k.data, v.data, heads, scaled))
    else:
        a = attention_weights(q, k, heads, scaled)
        per_head = T.matmul(a, _split_heads(v, heads))
        merged = T.reshape(T.transpose(per_head, (1, 0, 2)), (n, c))
    if out_weight is None:
        return merged
    out = T.matmul(merged, out_weight)
    return out + out_bias if out_bias is not None else out


def _attention_chunked(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int, scaled: bool) -> np.ndarray:
    n, c = q.shape
    d = c // heads
    qh = q.reshape(n, heads, d).transpose(1, 0, 2)
    kt = k.reshape(n, heads, d).transpose(1, 2, 0)
    vh = v.reshape(n, heads, d).transpose(1, 0, 2)
    factor = 1.0 / math.sqrt(d) if scaled else 1.0
    rows = max(1, _ATTN_CHUNK_ELEMS // (heads * n))
    out = np.empty((heads, n, d))
    for s in range(0, n, rows):
        logits = np.matmul(qh[:, s : s + rows], kt)
        if scaled:
            logits *= factor
        logits -= logits.max(axis=-1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=-1, keepdims=True)
        out[:, s : s + rows] = np.matmul(logits, vh)
    return out.transpose(1, 0, 2).reshape(n, c)


class EdgeFormerUnit(Module):
    """Multi-head self-attention whose q/k/v projections are EdgeConv layers."""

    _children = ("q_conv", "k_conv", "v_conv")
    _own = ("out_weight", "out_bias", "shortcut_weight", "shortcut_bias")

    def __init__(
        self,
        q_conv: EdgeConvLayer,
        k_conv: EdgeConvLayer,
        v_conv: EdgeConvLayer,
        out_weight: Tensor,
        out_bias: Tensor,
        heads: int,
        shortcut_weight: Tensor | None = None,
        shortcut_bias: Tensor | None = None,
        residual: bool = True,
        attention_scaling: bool = True,
    ):
        c = q_conv.c_out
        if c % heads:
            raise ShapeError(f"unit width {c} is not divisible by {heads} heads")
        for conv in (k_conv, v_conv):
            if conv.c_out != c or conv.c_in != q_conv.c_in or conv.k != q_conv.k:
                raise ShapeError("q/k/v EdgeConv layers must agree in k and widths")
        self.q_conv, self.k_conv, self.v_conv = q_conv, k_conv, v_conv
        self.out_weight = out_weight
        self.out_bias = out_bias
        self.heads = heads
        self.shortcut_weight = shortcut_weight
        self.shortcut_bias = shortcut_bias
        self.residual = residual
        self.attention_scaling = attention_scaling

    @classmethod
    def create(
        cls,
        c_in: int,
        c_out: int,
        k: int,
        heads: int,
        rng: np.random.Generator,
        residual: bool = True,
        attention_scaling: bool = True,
    ) -> "EdgeFormerUnit":
        convs = [EdgeConvLayer.create(k, c_in, c_out, rng) for _ in range(3)]
        out_w = init_weight(rng, c_out, c_out, "out_weight")
        out_b = init_bias(c_out, "out_bias")
        sc_w = sc_b = None
        if residual and c_in != c_out:
            sc_w = init_weight(rng, c_in, c_out, "shortcut_weight")
            sc_b = init_bias(c_out, "shortcut_bias")
        return cls(*convs, out_w, out_b, heads, sc_w, sc_b, residual, attention_scaling)

    @property
    def k(self) -> int:
        return self.q_conv.k

    @property
    def c_in(self) -> int:
        return self.q_conv.c_in

    @property
    def c_out(self) -> int:
        return self.q_conv.c_out

    def __call__(self, f: Tensor) -> Tensor:
        return edgeformer_forward(self, f)


def edgeformer_forward(unit: EdgeFormerUnit, f: Tensor, graph: KnnGraph | None = None) -> Tensor:
    n = f.shape[0]
    if n <= unit.k:
        raise ShapeError(f"EdgeFormer needs more than k={unit.k} points, got {n}")
    if graph is None:
        graph = knn(f.data, unit.k)
    q = unit.q_conv(f, graph)
    k = unit.k_conv(f, graph)
    v = unit.v_conv(f, graph)
    out = multihead_attention(
        q, k, v, unit.heads, unit.out_weight, unit.out_bias, scaled=unit.attention_scaling
    )
    if not unit.residual:
        return out
    if unit.shortcut_weight is not None:
        return out + (T.matmul(f, unit.shortcut_weight) + unit.shortcut_bias)
    if unit.c_in != unit.c_out:
        raise ShapeError("residual across a width change needs a shortcut affine")
    return out + f
