"""Dense f64 tensor algebra with reverse-mode automatic differentiation.

Everything is float64 and C-contiguous. Ops run in a fixed evaluation order
so that repeated runs with identical inputs are bit-identical. When a Graph
is active (``with Graph() as g:``), ops that touch a differentiable tensor
record themselves on the tape; ``g.backward(root)`` then walks the tape in
reverse and accumulates gradients into every ``requires_grad`` leaf. With no
active graph, ops are plain numpy evaluations.

Broadcasting is deliberately narrow: for add/sub/mul the second operand's
shape must be a suffix of the first operand's shape (covers bias vectors,
row-wise masks and scalars, nothing else).
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf, expit


class ShapeMismatchError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class Tensor:
    """A dense float64 value with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "meta")

    def __init__(self, data, requires_grad: bool = False):
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.meta: dict | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    """One recorded op: kind, input node ids, output tensor, backward rule."""

    __slots__ = ("kind", "input_ids", "inputs", "out", "bwd")

    def __init__(self, kind, input_ids, inputs, out, bwd):
        self.kind = kind
        self.input_ids = input_ids
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_tls = threading.local()


def _active() -> "Graph | None":
    return getattr(_tls, "graph", None)


class Graph:
    """Tape of ops in construction order; topological by construction."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._ids: dict[int, int] = {}  # id(tensor) -> node index

    def __enter__(self) -> "Graph":
        if _active() is not None:
            raise RuntimeError("a Graph is already active on this thread")
        _tls.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _tls.graph = None

    def _node_id(self, t: Tensor) -> int | None:
        return self._ids.get(id(t))

    def _register_leaf(self, t: Tensor) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), (t,), t, None))
        self._ids[id(t)] = nid
        return nid

    def _tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._ids

    def record(self, kind, inputs, out, bwd) -> None:
        input_ids = []
        for t in inputs:
            nid = self._node_id(t)
            if nid is None:
                if not t.requires_grad:
                    input_ids.append(None)  # constant, no gradient path
                    continue
                nid = self._register_leaf(t)
            input_ids.append(nid)
        nid = len(self.nodes)
        self.nodes.append(Node(kind, tuple(input_ids), tuple(inputs), out, bwd))
        self._ids[id(out)] = nid

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into each requires_grad leaf."""
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        root_id = self._node_id(root)
        if root_id is None:
            raise ValueError("root tensor was not produced by this graph")
        grads: dict[int, np.ndarray] = {root_id: np.ones_like(root.data)}
        for nid in range(root_id, -1, -1):
            node = self.nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node.kind == "leaf":
                t = node.out
                if t.requires_grad:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            in_grads = node.bwd(g)
            for iid, ig in zip(node.input_ids, in_grads):
                if iid is None or ig is None:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + ig
                else:
                    grads[iid] = ig


def _finish(kind, inputs, out_data, bwd_builder) -> Tensor:
    """Wrap op output; record on the active graph when a gradient can flow."""
    out = Tensor(out_data)
    g = _active()
    if g is not None and any(g._tracked(t) for t in inputs):
        g.record(kind, inputs, out, bwd_builder())
    return out


def _suffix_check(kind: str, a: Tensor, b: Tensor) -> None:
    if b.data.ndim > a.data.ndim or a.shape[a.data.ndim - b.data.ndim:] != b.shape:
        raise ShapeMismatchError(
            f"{kind}: second operand shape {b.shape} is not a suffix of {a.shape}"
        )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum leading axes of g until it matches shape (suffix-broadcast inverse)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _suffix_check("add", a, b)
    bshape = b.shape

    def bwd_builder():
        def bwd(g):
            return g, _reduce_to(g, bshape)
        return bwd

    return _finish("add", (a, b), a.data + b.data, bwd_builder)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _suffix_check("sub", a, b)
    bshape = b.shape

    def bwd_builder():
        def bwd(g):
            return g, -_reduce_to(g, bshape)
        return bwd

    return _finish("sub", (a, b), a.data - b.data, bwd_builder)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _suffix_check("mul", a, b)
    ad, bd = a.data, b.data

    def bwd_builder():
        def bwd(g):
            return g * bd, _reduce_to(g * ad, bd.shape)
        return bwd

    return _finish("mul", (a, b), ad * bd, bwd_builder)


def mask_mul(a: Tensor, mask: Tensor) -> Tensor:
    """Elementwise product with a constant 0/1 mask.

    Output is exactly 0.0 wherever the mask is 0, and so is the gradient
    flowing back into ``a`` at those entries. The mask never receives a
    gradient.
    """
    if mask.shape != a.shape:
        raise ShapeMismatchError(f"mask-mul: mask shape {mask.shape} != {a.shape}")
    if mask.requires_grad:
        raise ValueError("mask-mul: mask must not require grad")
    md = mask.data

    def bwd_builder():
        def bwd(g):
            return g * md, None
        return bwd

    return _finish("mask-mul", (a, mask), a.data * md, bwd_builder)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2D@2D, batched 3D@3D, or 3D@2D (shared right matrix)."""
    ad, bd = a.data, b.data
    ok = (
        (ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[0])
        or (ad.ndim == 3 and bd.ndim == 2 and ad.shape[2] == bd.shape[0])
        or (ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] == bd.shape[0]
            and ad.shape[2] == bd.shape[1])
    )
    if not ok:
        raise ShapeMismatchError(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")

    def bwd_builder():
        def bwd(g):
            if ad.ndim == 2:
                return g @ bd.T, ad.T @ g
            if bd.ndim == 2:
                ga = g @ bd.T
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                return ga, gb
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g
        return bwd

    return _finish("matmul", (a, b), np.matmul(ad, bd), bwd_builder)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeMismatchError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def bwd_builder():
        def bwd(g):
            return (np.ascontiguousarray(g.transpose(inv)),)
        return bwd

    return _finish("transpose", (a,), a.data.transpose(axes), bwd_builder)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def bwd_builder():
        def bwd(g):
            return (g.reshape(old),)
        return bwd

    return _finish("reshape", (a,), a.data.reshape(shape), bwd_builder)


def slice_(a: Tensor, key: tuple[slice, ...]) -> Tensor:
    """Basic slicing with a tuple of slice objects (unit step)."""
    for s in key:
        if not isinstance(s, slice) or (s.step not in (None, 1)):
            raise ValueError("slice_: key must be unit-step slices")
    shape = a.shape

    def bwd_builder():
        def bwd(g):
            full = np.zeros(shape, dtype=np.float64)
            full[key] = g
            return (full,)
        return bwd

    return _finish("slice", (a,), a.data[key], bwd_builder)


def embed_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: table [V, d] indexed by an integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embed-lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embed-lookup: id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    tshape = table.shape
    d = tshape[1]

    def bwd_builder():
        def bwd(g):
            gt = np.zeros(tshape, dtype=np.float64)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
            return (gt,)
        return bwd

    return _finish("embed-lookup", (table,), table.data[ids], bwd_builder)


# ---------------------------------------------------------------------------
# nonlinearities and norms


def softmax_lastdim(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd_builder():
        def bwd(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
        return bwd

    return _finish("softmax-lastdim", (a,), p, bwd_builder)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(
            f"layernorm: gamma/beta {gamma.shape}/{beta.shape} vs feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bwd_builder():
        def bwd(g):
            gxh = g * gd
            gx = inv / d * (
                d * gxh
                - gxh.sum(axis=-1, keepdims=True)
                - xhat * (gxh * xhat).sum(axis=-1, keepdims=True)
            )
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
            gbeta = g.reshape(-1, d).sum(axis=0)
            return gx, ggamma, gbeta
        return bwd

    return _finish("layernorm", (x, gamma, beta), xhat * gd + beta.data, bwd_builder)


def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,):
        raise ShapeMismatchError(f"rmsnorm: gamma {gamma.shape} vs feature dim {d}")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    gd = gamma.data

    def bwd_builder():
        def bwd(g):
            gxh = g * gd
            gx = inv * (gxh - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
            return gx, ggamma
        return bwd

    return _finish("rmsnorm", (x, gamma), xhat * gd, bwd_builder)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bwd_builder():
        def bwd(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
            return (g * (phi + xd * pdf),)
        return bwd

    return _finish("gelu", (x,), xd * phi, bwd_builder)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)

    def bwd_builder():
        def bwd(g):
            return (g * (s + xd * s * (1.0 - s)),)
        return bwd

    return _finish("silu", (x,), xd * s, bwd_builder)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bwd_builder():
        def bwd(g):
            return (np.full(shape, float(g), dtype=np.float64),)
        return bwd

    return _finish("sum", (x,), np.array(x.data.sum()), bwd_builder)


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.size

    def bwd_builder():
        def bwd(g):
            return (np.full(shape, float(g) / n, dtype=np.float64),)
        return bwd

    return _finish("mean", (x,), np.array(x.data.mean()), bwd_builder)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse-loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bwd_builder():
        def bwd(g):
            gp = (2.0 * float(g) / n) * diff
            return gp, -gp
        return bwd

    return _finish("mse-loss", (pred, target), np.array((diff * diff).mean()), bwd_builder)


def cosine_loss(pred: Tensor, target: Tensor) -> Tensor:
    """1 - cosine similarity per position over the last axis, averaged.

    A position where either vector has zero norm contributes 1 (treated as
    orthogonal); the count of such positions is reported in
    ``out.meta["zero_norm_positions"]``.
    """
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"cos-loss: {pred.shape} vs {target.shape}")
    p = pred.data.reshape(-1, pred.shape[-1])
    t = target.data.reshape(-1, target.shape[-1])
    pn = np.sqrt((p * p).sum(axis=1))
    tn = np.sqrt((t * t).sum(axis=1))
    valid = (pn > 0.0) & (tn > 0.0)
    denom = np.where(valid, pn * tn, 1.0)
    cos = np.where(valid, (p * t).sum(axis=1) / denom, 0.0)
    npos = p.shape[0]
    loss = 1.0 - cos.sum() / npos
    pshape = pred.shape

    def bwd_builder():
        def bwd(g):
            # d cos/dp = t/(|p||t|) - cos * p/|p|^2, zeroed at degenerate rows
            safe_pn2 = np.where(valid, pn * pn, 1.0)
            gp = t / denom[:, None] - cos[:, None] * p / safe_pn2[:, None]
            gp = np.where(valid[:, None], gp, 0.0)
            gp *= -float(g) / npos
            gt = p / denom[:, None] - cos[:, None] * t / np.where(valid, tn * tn, 1.0)[:, None]
            gt = np.where(valid[:, None], gt, 0.0)
            gt *= -float(g) / npos
            return gp.reshape(pshape), gt.reshape(pshape)
        return bwd

    out = _finish("cos-loss", (pred, target), np.array(loss), bwd_builder)
    out.meta = {"zero_norm_positions": int(npos - valid.sum())}
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood; targets are class ids."""
    ld = logits.data
    v = ld.shape[-1]
    flat = ld.reshape(-1, v)
    ids = np.asarray(targets).reshape(-1)
    if ids.shape[0] != flat.shape[0]:
        raise ShapeMismatchError(
            f"cross-entropy: {ld.shape} logits vs {np.asarray(targets).shape} targets"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ValueError(f"cross-entropy: target id out of range [0, {v})")
    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=1))
    n = flat.shape[0]
    nll = lse - z[np.arange(n), ids]
    lshape = ld.shape

    def bwd_builder():
        def bwd(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(n), ids] -= 1.0
            return ((float(g) / n) * p.reshape(lshape),)
        return bwd

    return _finish("cross-entropy", (logits,), np.array(nll.mean()), bwd_builder)


#: every differentiable op kind exposed by this module
OP_KINDS = (
    "matmul", "add", "sub", "mul", "mask-mul", "transpose", "reshape", "slice",
    "embed-lookup", "softmax-lastdim", "layernorm", "rmsnorm", "gelu", "silu",
    "sum", "mean", "mse-loss", "cos-loss", "cross-entropy",
)
