"""Decoder-only transformer with dual weight sets and granularity taps.

Every prunable matrix carries a frozen reference copy (``dense``), a working
copy (``current``) and, once pruned, a binary mask. The residual stream is
tapped after the embedding and after every sublayer residual add; those tap
points are the boundaries at which reconstruction units are cut.

Weight layout is [d_in, d_out] so activations are row vectors: y = x @ W.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

NORM_KINDS = ("layernorm", "rmsnorm")

#: prunable matrices of one block, in depth order
BLOCK_MATRICES = ("wq", "wk", "wv", "wo", "w1", "w2")

#: forward chunk size (samples) for no-grad streaming passes
STREAM_CHUNK = 32


@dataclass
class ModelConfig:
    n_blocks: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab: int
    seq_len: int
    norm_kind: str = "layernorm"
    tie_lm_head: bool = False

    def __post_init__(self):
        dims = (self.n_blocks, self.d_model, self.n_heads, self.d_ff,
                self.vocab, self.seq_len)
        if any(int(v) <= 0 for v in dims):
            raise ValueError(f"all model dimensions must be positive, got {self}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}")

    def to_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ff": self.d_ff, "vocab": self.vocab,
            "seq_len": self.seq_len, "norm_kind": self.norm_kind,
            "tie_lm_head": self.tie_lm_head,
        }


class Param:
    """A named parameter: frozen reference copy, working copy, optional mask."""

    __slots__ = ("name", "dense", "current", "mask", "prunable")

    def __init__(self, name: str, value: np.ndarray, prunable: bool = False):
        self.name = name
        self.dense = Tensor(value)
        self.current = Tensor(value.copy())
        self.mask: Tensor | None = None
        self.prunable = prunable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.dense.shape

    def set_mask(self, mask: np.ndarray) -> None:
        if mask.shape != self.dense.shape:
            raise ValueError(f"mask shape {mask.shape} != param shape {self.dense.shape}")
        self.mask = Tensor(np.ascontiguousarray(mask, dtype=np.float64))

    def apply_mask(self) -> None:
        if self.mask is not None:
            self.current.data *= self.mask.data

    def pruned_violation(self) -> float:
        """Max |current| over masked-out entries (0.0 when the invariant holds)."""
        if self.mask is None:
            return 0.0
        return float(np.abs(self.current.data * (1.0 - self.mask.data)).max())


class GptModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        std = 0.02
        res_std = std / np.sqrt(2.0 * c.n_blocks)

        def normal(shape, s=std):
            return rng.normal(0.0, s, size=shape)

        self.params: dict[str, Param] = {}

        def add(name, value, prunable=False):
            p = Param(name, value, prunable=prunable)
            self.params[name] = p
            return p

        add("embed", normal((c.vocab, c.d_model)))
        add("pos", normal((c.seq_len, c.d_model)))
        for b in range(c.n_blocks):
            pre = f"blocks.{b}."
            add(pre + "ln1.g", np.ones(c.d_model))
            if c.norm_kind == "layernorm":
                add(pre + "ln1.b", np.zeros(c.d_model))
            add(pre + "wq", normal((c.d_model, c.d_model)), prunable=True)
            add(pre + "wk", normal((c.d_model, c.d_model)), prunable=True)
            add(pre + "wv", normal((c.d_model, c.d_model)), prunable=True)
            add(pre + "wo", normal((c.d_model, c.d_model), res_std), prunable=True)
            add(pre + "ln2.g", np.ones(c.d_model))
            if c.norm_kind == "layernorm":
                add(pre + "ln2.b", np.zeros(c.d_model))
            add(pre + "w1", normal((c.d_model, c.d_ff)), prunable=True)
            add(pre + "w2", normal((c.d_ff, c.d_model), res_std), prunable=True)
        add("ln_f.g", np.ones(c.d_model))
        if c.norm_kind == "layernorm":
            add("ln_f.b", np.zeros(c.d_model))
        if not c.tie_lm_head:
            add("lm_head", normal((c.d_model, c.vocab)))

        self._causal_bias: dict[int, Tensor] = {}

    # -- parameter access ---------------------------------------------------

    def prunable_names(self) -> list[str]:
        return [f"blocks.{b}.{m}" for b in range(self.config.n_blocks)
                for m in BLOCK_MATRICES]

    def param(self, name: str) -> Param:
        return self.params[name]

    def weight(self, name: str, weights: str) -> Tensor:
        p = self.params[name]
        return p.dense if weights == "dense" else p.current

    def apply_masks(self) -> None:
        for name in self.prunable_names():
            self.params[name].apply_mask()

    def max_mask_violation(self) -> float:
        return max(self.params[n].pruned_violation() for n in self.prunable_names())

    def copy(self) -> "GptModel":
        m = GptModel.__new__(GptModel)
        m.config = self.config
        m.params = {}
        for name, p in self.params.items():
            q = Param(name, p.dense.data.copy(), prunable=p.prunable)
            q.current = Tensor(p.current.data.copy())
            if p.mask is not None:
                q.mask = Tensor(p.mask.data.copy())
            m.params[name] = q
        m._causal_bias = {}
        return m

    def set_requires_grad(self, names, flag: bool, which: str = "current") -> None:
        for n in names:
            (self.params[n].dense if which == "dense" else self.params[n].current
             ).requires_grad = flag

    # -- forward machinery ----------------------------------------------------

    def _bias(self, t: int) -> Tensor:
        if t not in self._causal_bias:
            m = np.zeros((t, t))
            m[np.triu_indices(t, k=1)] = -1e30
            self._causal_bias[t] = Tensor(m)
        return self._causal_bias[t]

    def _mat(self, name: str, weights: str, trainable: set | None) -> Tensor:
        """Weight tensor for the forward pass; the working copy of a matrix
        under training enters the graph through its mask so pruned entries
        get exactly-zero gradients."""
        p = self.params[name]
        t = p.dense if weights == "dense" else p.current
        if (trainable is not None and name in trainable
                and weights == "pruned" and p.mask is not None):
            return ag.mask_mul(t, p.mask)
        return t

    def _norm(self, x: Tensor, prefix: str, weights: str) -> Tensor:
        if self.config.norm_kind == "layernorm":
            return ag.layernorm(x, self.weight(prefix + ".g", weights),
                                self.weight(prefix + ".b", weights))
        return ag.rmsnorm(x, self.weight(prefix + ".g", weights))

    def attn_merged(self, b: int, h: Tensor, weights: str,
                    trainable: set | None = None, sink=None) -> Tensor:
        """Causal multi-head attention up to (not including) the output
        projection; returns merged head outputs [B, T, d]."""
        c = self.config
        bsz, t, d = h.shape
        nh, dh = c.n_heads, c.d_model // c.n_heads
        pre = f"blocks.{b}."
        q = ag.matmul(h, self._mat(pre + "wq", weights, trainable))
        k = ag.matmul(h, self._mat(pre + "wk", weights, trainable))
        v = ag.matmul(h, self._mat(pre + "wv", weights, trainable))

        def heads(x):
            x = ag.reshape(x, (bsz, t, nh, dh))
            x = ag.transpose(x, (0, 2, 1, 3))
            return ag.reshape(x, (bsz * nh, t, dh))

        qs, ks, vs = heads(q), heads(k), heads(v)
        scores = ag.matmul(qs, ag.transpose(ks, (0, 2, 1)))
        scores = ag.mul(scores, Tensor(1.0 / np.sqrt(dh)))
        scores = ag.add(scores, self._bias(t))
        probs = ag.softmax_lastdim(scores)
        ctx = ag.matmul(probs, vs)
        ctx = ag.reshape(ctx, (bsz, nh, t, dh))
        ctx = ag.transpose(ctx, (0, 2, 1, 3))
        merged = ag.reshape(ctx, (bsz, t, d))
        if sink is not None:
            sink(pre + "wo", merged)
        return merged

    def attn_half(self, b: int, x: Tensor, weights: str,
                  trainable: set | None = None, sink=None) -> Tensor:
        """Attention sublayer including pre-norm and residual add."""
        pre = f"blocks.{b}."
        h = self._norm(x, pre + "ln1", weights)
        if sink is not None:
            for m in ("wq", "wk", "wv"):
                sink(pre + m, h)
        merged = self.attn_merged(b, h, weights, trainable, sink)
        y = ag.matmul(merged, self._mat(pre + "wo", weights, trainable))
        return ag.add(x, y)

    def mlp_half(self, b: int, x: Tensor, weights: str,
                 trainable: set | None = None, sink=None) -> Tensor:
        """Feed-forward sublayer including pre-norm and residual add."""
        pre = f"blocks.{b}."
        h = self._norm(x, pre + "ln2", weights)
        if sink is not None:
            sink(pre + "w1", h)
        u = ag.gelu(ag.matmul(h, self._mat(pre + "w1", weights, trainable)))
        if sink is not None:
            sink(pre + "w2", u)
        y = ag.matmul(u, self._mat(pre + "w2", weights, trainable))
        return ag.add(x, y)

    def block_forward(self, b: int, x: Tensor, weights: str,
                      trainable: set | None = None, sink=None) -> Tensor:
        x = self.attn_half(b, x, weights, trainable, sink)
        return self.mlp_half(b, x, weights, trainable, sink)

    def embed_tokens(self, tokens: np.ndarray, weights: str) -> Tensor:
        c = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be [batch, seq], got {tokens.shape}")
        if tokens.shape[1] > c.seq_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds {c.seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab):
            raise ValueError(
                f"token id out of range [0, {c.vocab}): max={tokens.max()}"
            )
        e = ag.embed_lookup(self.weight("embed", weights), tokens)
        p = ag.slice_(self.weight("pos", weights), (slice(0, tokens.shape[1]),))
        return ag.add(e, p)

    def lm_logits(self, x: Tensor, weights: str) -> Tensor:
        h = self._norm(x, "ln_f", weights)
        if self.config.tie_lm_head:
            head = ag.transpose(self.weight("embed", weights), (1, 0))
        else:
            head = self.weight("lm_head", weights)
        return ag.matmul(h, head)

    def forward_with_taps(self, tokens: np.ndarray, weights: str,
                          trainable: set | None = None):
        """Full forward pass; returns (logits, residual-stream taps).

        Tap i is the residual value at boundary i: tap 0 is the embedding
        output, tap 2b+1 follows block b's attention residual add, tap 2b+2
        follows its MLP residual add. The last tap is the pre-LM-head state.
        """
        x = self.embed_tokens(tokens, weights)
        taps = [x]
        for b in range(self.config.n_blocks):
            x = self.attn_half(b, x, weights, trainable)
            taps.append(x)
            x = self.mlp_half(b, x, weights, trainable)
            taps.append(x)
        return self.lm_logits(x, weights), taps

    def logits(self, tokens: np.ndarray, weights: str,
               trainable: set | None = None) -> Tensor:
        return self.forward_with_taps(tokens, weights, trainable)[0]


# ---------------------------------------------------------------------------
# granularities and reconstruction units


@dataclass(frozen=True)
class Granularity:
    kind: str              # "per-matrix" | "half-block" | "blocks" | "full-decoder"
    k: int | None = None   # block count for kind == "blocks"

    def __post_init__(self):
        if self.kind not in ("per-matrix", "half-block", "blocks", "full-decoder"):
            raise ValueError(f"unknown granularity kind {self.kind!r}")
        if self.kind == "blocks":
            if self.k is None or self.k < 1:
                raise ValueError("blocks granularity needs k >= 1")
        elif self.k is not None:
            raise ValueError(f"{self.kind} takes no k")

    @classmethod
    def per_matrix(cls):
        return cls("per-matrix")

    @classmethod
    def half_block(cls):
        return cls("half-block")

    @classmethod
    def blocks(cls, k: int):
        return cls("blocks", k)

    @classmethod
    def full_decoder(cls):
        return cls("full-decoder")

    @classmethod
    def parse(cls, text: str) -> "Granularity":
        t = text.strip().lower()
        if t in ("matrix", "per-matrix"):
            return cls.per_matrix()
        if t in ("half", "half-block"):
            return cls.half_block()
        if t in ("full", "full-decoder"):
            return cls.full_decoder()
        if t.startswith("blocks:"):
            return cls.blocks(int(t.split(":", 1)[1]))
        if t == "block":
            return cls.blocks(1)
        raise ValueError(
            f"cannot parse granularity {text!r}; expected matrix|half|blocks:<k>|full"
        )

    def label(self) -> str:
        if self.kind == "blocks":
            return f"blocks:{self.k}"
        return {"per-matrix": "matrix", "half-block": "half",
                "full-decoder": "full"}[self.kind]


@dataclass
class ReconUnit:
    """One slice of the model that is reconstructed as a whole."""
    unit_id: str
    kind: str                       # "matrix" | "half" | "span"
    param_names: tuple[str, ...]    # trainable matrices, depth order
    input_tap: object               # int residual boundary or "mat:<b>:<name>" key
    output_tap: object
    contains_residual: bool
    train_norm_params: bool = False
    norm_param_names: tuple[str, ...] = ()
    block: int = -1                 # matrix/half units
    matrix: str = ""                # matrix units
    sub: str = ""                   # half units: "attn" | "mlp"
    span: tuple[int, int] = (-1, -1)  # span units: [b0, b1)

    def trainable_names(self) -> tuple[str, ...]:
        if self.train_norm_params:
            return self.param_names + self.norm_param_names
        return self.param_names


def _norm_names(config: ModelConfig, prefix: str) -> tuple[str, ...]:
    if config.norm_kind == "layernorm":
        return (prefix + ".g", prefix + ".b")
    return (prefix + ".g",)


def matrix_input_tap(block: int, matrix: str) -> str:
    """Canonical tap key for a matrix's immediate input activation."""
    if matrix in ("wq", "wk", "wv"):
        return f"mat:{block}:qkv"
    return f"mat:{block}:{matrix}"


def split(config: ModelConfig, g: Granularity,
          train_norm_params: bool = False) -> list[ReconUnit]:
    """Cut the decoder into ordered, parameter-disjoint reconstruction units."""
    n = config.n_blocks
    units: list[ReconUnit] = []
    if g.kind == "per-matrix":
        # norm parameters are never trained at this granularity
        for b in range(n):
            for m in BLOCK_MATRICES:
                name = f"blocks.{b}.{m}"
                units.append(ReconUnit(
                    unit_id=f"b{b}.{m}", kind="matrix", param_names=(name,),
                    input_tap=matrix_input_tap(b, m),
                    output_tap=f"matout:{b}:{m}",
                    contains_residual=False, block=b, matrix=m,
                ))
        return units
    if g.kind == "half-block":
        for b in range(n):
            pre = f"blocks.{b}."
            units.append(ReconUnit(
                unit_id=f"b{b}.attn", kind="half",
                param_names=tuple(pre + m for m in ("wq", "wk", "wv", "wo")),
                input_tap=2 * b, output_tap=2 * b + 1, contains_residual=True,
                train_norm_params=train_norm_params,
                norm_param_names=_norm_names(config, pre + "ln1"),
                block=b, sub="attn",
            ))
            units.append(ReconUnit(
                unit_id=f"b{b}.mlp", kind="half",
                param_names=(pre + "w1", pre + "w2"),
                input_tap=2 * b + 1, output_tap=2 * b + 2, contains_residual=True,
                train_norm_params=train_norm_params,
                norm_param_names=_norm_names(config, pre + "ln2"),
                block=b, sub="mlp",
            ))
        return units
    if g.kind == "blocks":
        k = g.k
        if k > n:
            raise ValueError(f"blocks:{k} exceeds n_blocks={n}")
    else:  # full-decoder: one span over everything, embedding stays frozen
        k = n
    for b0 in range(0, n, k):
        b1 = min(b0 + k, n)
        names = tuple(f"blocks.{b}.{m}" for b in range(b0, b1)
                      for m in BLOCK_MATRICES)
        norms = tuple(nn for b in range(b0, b1)
                      for ln in ("ln1", "ln2")
                      for nn in _norm_names(config, f"blocks.{b}.{ln}"))
        units.append(ReconUnit(
            unit_id=f"span{b0}-{b1}", kind="span", param_names=names,
            input_tap=2 * b0, output_tap=2 * b1, contains_residual=True,
            train_norm_params=train_norm_params, norm_param_names=norms,
            span=(b0, b1),
        ))
    return units


def unit_forward(model: GptModel, unit: ReconUnit, x: Tensor, weights: str,
                 trainable: set | None = None) -> Tensor:
    """Run one unit from its input tap value to its output tap value."""
    if unit.kind == "matrix":
        w = model._mat(unit.param_names[0], weights, trainable)
        return ag.matmul(x, w)
    if unit.kind == "half":
        fn = model.attn_half if unit.sub == "attn" else model.mlp_half
        return fn(unit.block, x, weights, trainable)
    b0, b1 = unit.span
    for b in range(b0, b1):
        x = model.block_forward(b, x, weights, trainable)
    return x


# ---------------------------------------------------------------------------
# checkpoint io: header (JSON config + array index) then raw little-endian f64

_MAGIC = b"PLCKPT01"


def save_checkpoint(model: GptModel, path: str, extra: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, p in model.params.items():
        arrays.append((name, p.dense.data))
        arrays.append((name + ".current", p.current.data))
        if p.mask is not None:
            arrays.append((name + ".mask", p.mask.data))
    index = []
    offset = 0
    for name, arr in arrays:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({
        "config": model.config.to_dict(),
        "arrays": index,
        "extra": extra or {},
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[GptModel, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    config = ModelConfig(**header["config"])
    model = GptModel(config, seed=0)
    by_name = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size,
                            offset=entry["offset"]).reshape(shape)
        # frombuffer views are read-only; params must stay writable
        by_name[entry["name"]] = np.array(arr, dtype=np.float64)
    for name, p in model.params.items():
        p.dense = Tensor(by_name[name])
        p.current = Tensor(by_name[name + ".current"])
        if name + ".mask" in by_name:
            p.mask = Tensor(by_name[name + ".mask"])
    return model, header["extra"]
