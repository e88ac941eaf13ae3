"""Reconstruction engine: analytic per-matrix least squares, gradient-based
unit reconstruction under three propagation strategies and two losses, the
sequential pipeline over units, and the full-retraining baseline.

The three strategies differ only in where a unit's training inputs and
targets come from:

  dense:  input = dense stream,  target = dense stream
  sparse: input = sparse stream, target = the unit's own frozen dense
          parameters applied to that sparse input
  mixed:  input = sparse stream, target = dense stream

The dense stream is the frozen reference model's activations, computed once.
The sparse stream is recomputed through each reconstructed unit before the
next unit starts. Both streams run through the same chunked code path so
that equal weights give bit-identical activations.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import autograd as ag
from .autograd import Tensor, Graph
from .errors import NumericalFailure
from .model import (GptModel, Granularity, ReconUnit, matrix_input_tap, split,
                    unit_forward, BLOCK_MATRICES, STREAM_CHUNK)
from .optim import AdamW, OptimConfig
from .criteria import SparsityPattern, prune_matrix

STRATEGIES = ("dense", "sparse", "mixed")
LOSSES = ("mse", "cos")


def parse_strategy(text: str) -> str:
    t = str(text).strip().lower()
    if t not in STRATEGIES:
        raise ValueError(f"unknown strategy {text!r}; expected one of {STRATEGIES}")
    return t


def parse_loss(text: str) -> str:
    t = str(text).strip().lower()
    if t in ("cos", "cosine", "cs"):
        return "cos"
    if t == "mse":
        return "mse"
    raise ValueError(f"unknown loss {text!r}; expected one of {LOSSES}")


# ---------------------------------------------------------------------------
# losses (plain-array twins of the autograd ops, for traces and tests)


def cosine_value(pred: np.ndarray, target: np.ndarray) -> tuple[float, int]:
    """1 - mean cosine over last-axis positions; zero-norm positions count
    as orthogonal (contribute 1) and are tallied."""
    p = pred.reshape(-1, pred.shape[-1])
    t = target.reshape(-1, target.shape[-1])
    np_ = np.sqrt(np.einsum("ij,ij->i", p, p))
    nt = np.sqrt(np.einsum("ij,ij->i", t, t))
    bad = (np_ == 0.0) | (nt == 0.0)
    denom = np.where(bad, 1.0, np_ * nt)
    cos = np.einsum("ij,ij->i", p, t) / denom
    cos[bad] = 0.0
    return float(np.mean(1.0 - cos)), int(bad.sum())


def loss_value(pred: np.ndarray, target: np.ndarray, loss: str) -> float:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if loss == "mse":
        return float(np.mean((pred - target) ** 2))
    if loss == "cos":
        return cosine_value(pred, target)[0]
    raise ValueError(f"unknown loss {loss!r}")


def _loss_op(pred: Tensor, target: Tensor, loss: str) -> Tensor:
    return ag.mse_loss(pred, target) if loss == "mse" else ag.cosine_loss(pred, target)


# ---------------------------------------------------------------------------
# analytic per-matrix reconstruction


def analytic_matrix_recon(w: np.ndarray, mask: np.ndarray, x: np.ndarray,
                          ridge: float = 0.0) -> np.ndarray:
    """Least-squares refit of w [d_out, d_in] on its mask support.

    X is [d_in, B]. For each output row i with support S, solves
    (X_S X_S^T + ridge I) w_hat_S = X_S X^T w_i so that w_hat X matches
    w X as closely as the support allows; entries off the support are 0.
    """
    w = np.asarray(w, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if mask.shape != w.shape:
        raise ValueError(f"mask shape {mask.shape} != w shape {w.shape}")
    if x.ndim != 2 or x.shape[0] != w.shape[1]:
        raise ValueError(f"activations must be [d_in={w.shape[1]}, B], got {x.shape}")
    gram = x @ x.T
    w_hat = np.zeros_like(w)
    for i in range(w.shape[0]):
        s = np.flatnonzero(mask[i] != 0.0)
        if s.size == 0:
            continue
        a = gram[np.ix_(s, s)]
        if ridge:
            a = a + ridge * np.eye(s.size)
        b = gram[s, :] @ w[i]
        try:
            c, low = cho_factor(a, lower=False)
        except np.linalg.LinAlgError as e:
            raise NumericalFailure(
                "normal matrix on the mask support is singular; "
                "set ridge > 0 or use more calibration samples"
            ) from e
        w_hat[i, s] = cho_solve((c, low), b)
    return w_hat


# ---------------------------------------------------------------------------
# activation streams


def _residual_boundaries(units: list[ReconUnit], n_blocks: int) -> list[int]:
    taps = {0}
    for u in units:
        if u.kind == "matrix":
            taps.add(2 * u.block)
            taps.add(2 * u.block + 2)
        else:
            taps.add(u.input_tap)
            taps.add(u.output_tap)
    return sorted(taps)


class ActivationStreams:
    """Dense residual taps (fixed) plus the advancing sparse frontier.

    The dense stream is computed once at the boundaries the unit split
    needs. The sparse frontier starts as an exact copy of the dense
    embedding output and is pushed through each unit with the pruned
    weights after that unit's reconstruction finishes.
    """

    def __init__(self, model: GptModel, tokens: np.ndarray,
                 units: list[ReconUnit], chunk: int = STREAM_CHUNK):
        self.model = model
        self.tokens = np.asarray(tokens)
        self.chunk = chunk
        self.boundaries = _residual_boundaries(units, model.config.n_blocks)
        self.dense: dict[int, np.ndarray] = {}
        self._compute_dense_taps()
        self.sparse_tap = 0
        self.sparse = self.dense[0].copy()
        # lazy per-block caches of matrix-level activations
        self._mat_cache: dict[tuple, np.ndarray] = {}

    # dense stream ---------------------------------------------------------

    def _chunks(self):
        n = self.tokens.shape[0]
        for lo in range(0, n, self.chunk):
            yield lo, min(lo + self.chunk, n)

    def _compute_dense_taps(self) -> None:
        m = self.model
        need = set(self.boundaries)
        last = max(need)
        n, t = self.tokens.shape
        d = m.config.d_model
        for tap in need:
            self.dense[tap] = np.empty((n, t, d))
        for lo, hi in self._chunks():
            x = m.embed_tokens(self.tokens[lo:hi], "dense")
            if 0 in need:
                self.dense[0][lo:hi] = x.data
            for b in range(m.config.n_blocks):
                if 2 * b >= last:
                    break
                x = m.attn_half(b, x, "dense")
                if 2 * b + 1 in need:
                    self.dense[2 * b + 1][lo:hi] = x.data
                x = m.mlp_half(b, x, "dense")
                if 2 * b + 2 in need:
                    self.dense[2 * b + 2][lo:hi] = x.data

    # matrix-level activations ----------------------------------------------

    def matrix_input(self, block: int, matrix: str, stream: str) -> np.ndarray:
        """Immediate input of one prunable matrix, from either stream.

        Sparse-side values reflect every weight already reconstructed,
        including earlier matrices of the same block, so the cache is
        invalidated by unit completion (see advance_matrix_unit).
        """
        key = (stream, block, matrix_input_tap(block, matrix))
        if key in self._mat_cache:
            return self._mat_cache[key]
        m = self.model
        if stream == "dense":
            base = self.dense[2 * block]
            weights = "dense"
        else:
            if self.sparse_tap != 2 * block:
                raise ValueError(
                    f"sparse frontier at tap {self.sparse_tap}, block {block} "
                    f"needs tap {2 * block}"
                )
            base = self.sparse
            weights = "pruned"
        want = matrix_input_tap(block, matrix)
        out: np.ndarray | None = None

        for lo, hi in self._chunks():
            got = {}

            def sink(name, tensor):
                tap = matrix_input_tap(block, name.rsplit(".", 1)[1])
                if tap == want:
                    got["x"] = tensor.data
            x = Tensor(base[lo:hi])
            if matrix in ("wq", "wk", "wv", "wo"):
                m.attn_half(block, x, weights, sink=sink)
            else:
                m.mlp_half(block, x, weights, sink=sink)
            part = got["x"]
            if out is None:
                out = np.empty((base.shape[0],) + part.shape[1:])
            out[lo:hi] = part
        self._mat_cache[key] = out
        return out

    def matrix_dense_output(self, block: int, matrix: str) -> np.ndarray:
        """Dense-stream output of one matrix: its dense input times the
        frozen dense weights."""
        x = self.matrix_input(block, matrix, "dense")
        w = self.model.params[f"blocks.{block}.{matrix}"].dense.data
        return x @ w

    # sparse frontier -------------------------------------------------------

    def advance(self, unit: ReconUnit) -> None:
        """Push the sparse frontier through a finished unit."""
        m = self.model
        if unit.kind == "matrix":
            # frontier moves a whole residual boundary only after the last
            # matrix of the block; mid-block only sparse captures go stale
            if unit.matrix == BLOCK_MATRICES[-1]:
                self._mat_cache.clear()
                nxt = np.empty_like(self.sparse)
                for lo, hi in self._chunks():
                    x = Tensor(self.sparse[lo:hi])
                    x = m.block_forward(unit.block, x, "pruned")
                    nxt[lo:hi] = x.data
                self.sparse = nxt
                self.sparse_tap = 2 * unit.block + 2
            else:
                self._mat_cache = {k: v for k, v in self._mat_cache.items()
                                   if k[0] == "dense"}
            return
        if unit.input_tap != self.sparse_tap:
            raise ValueError(
                f"unit {unit.unit_id} starts at tap {unit.input_tap} but the "
                f"sparse frontier is at {self.sparse_tap}"
            )
        nxt = np.empty_like(self.sparse)
        for lo, hi in self._chunks():
            x = Tensor(self.sparse[lo:hi])
            y = unit_forward(m, unit, x, "pruned")
            nxt[lo:hi] = y.data
        self.sparse = nxt
        self.sparse_tap = unit.output_tap

    def run_unit_dense(self, unit: ReconUnit, base: np.ndarray) -> np.ndarray:
        """The unit's frozen dense parameters applied to given activations."""
        out = None
        for lo, hi in self._chunks():
            y = unit_forward(self.model, unit, Tensor(base[lo:hi]), "dense")
            if out is None:
                out = np.empty((base.shape[0],) + y.shape[1:])
            out[lo:hi] = y.data
        return out


def build_unit_batch(streams: ActivationStreams, unit: ReconUnit,
                     strategy: str) -> tuple[np.ndarray, np.ndarray]:
    """Detached (inputs, targets) for one unit under one strategy."""
    strategy = parse_strategy(strategy)
    if unit.kind == "matrix":
        b, mat = unit.block, unit.matrix
        if strategy == "dense":
            x = streams.matrix_input(b, mat, "dense")
            y = streams.matrix_dense_output(b, mat)
        elif strategy == "sparse":
            x = streams.matrix_input(b, mat, "sparse")
            w = streams.model.params[unit.param_names[0]].dense.data
            y = x @ w
        else:
            x = streams.matrix_input(b, mat, "sparse")
            y = streams.matrix_dense_output(b, mat)
        return x.copy(), y.copy()
    if unit.input_tap not in streams.dense:
        raise ValueError(f"missing dense tap {unit.input_tap}")
    if strategy == "dense":
        x = streams.dense[unit.input_tap]
        y = streams.dense[unit.output_tap]
    elif strategy == "sparse":
        if streams.sparse_tap != unit.input_tap:
            raise ValueError(
                f"sparse frontier at {streams.sparse_tap}, unit needs "
                f"{unit.input_tap}"
            )
        x = streams.sparse
        y = streams.run_unit_dense(unit, x)
    else:
        if streams.sparse_tap != unit.input_tap:
            raise ValueError(
                f"sparse frontier at {streams.sparse_tap}, unit needs "
                f"{unit.input_tap}"
            )
        x = streams.sparse
        y = streams.dense[unit.output_tap]
    return x.copy(), y.copy()


# ---------------------------------------------------------------------------
# gradient-based unit reconstruction


@dataclass
class TraceRow:
    unit: str
    epoch: int
    loss: float
    lr: float

    def as_dict(self) -> dict:
        return {"unit": self.unit, "epoch": self.epoch,
                "loss": self.loss, "lr": self.lr}


def _unit_loss(model: GptModel, unit: ReconUnit, x: np.ndarray, y: np.ndarray,
               loss: str, chunk: int) -> float:
    """Current (no-grad) loss of the unit over the whole batch."""
    total = 0.0
    n = x.shape[0]
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        pred = unit_forward(model, unit, Tensor(x[lo:hi]), "pruned")
        total += loss_value(pred.data, y[lo:hi], loss) * (hi - lo)
    return total / n


def reconstruct_unit(model: GptModel, unit: ReconUnit,
                     streams: ActivationStreams, strategy: str, loss: str,
                     opt_cfg: OptimConfig, unit_index: int = 0,
                     trace: list | None = None) -> None:
    """Train one unit's masked parameters against its strategy targets,
    then advance the sparse frontier through it."""
    loss = parse_loss(loss)
    x, y = build_unit_batch(streams, unit, strategy)
    names = unit.trainable_names()
    trainable = set(names)
    tensors = [model.params[n].current for n in names]
    masks = [None if model.params[n].mask is None else model.params[n].mask.data
             for n in names]

    init_loss = _unit_loss(model, unit, x, y, loss, streams.chunk)
    if trace is not None:
        trace.append(TraceRow(unit.unit_id, 0, init_loss, 0.0))

    n = x.shape[0]
    steps_per_epoch = int(np.ceil(n / opt_cfg.batch_size))
    total_steps = opt_cfg.epochs * steps_per_epoch
    if opt_cfg.epochs == 0 or init_loss < 1e-12:
        streams.advance(unit)
        return

    snapshot = [t.data.copy() for t in tensors]
    optimizer = AdamW(list(zip(tensors, masks)), opt_cfg, total_steps)
    rng = np.random.default_rng([opt_cfg.seed, unit_index])
    for t in tensors:
        t.requires_grad = True
    failed = False
    try:
        for epoch in range(1, opt_cfg.epochs + 1):
            order = rng.permutation(n)
            epoch_loss = 0.0
            lr = 0.0
            for lo in range(0, n, opt_cfg.batch_size):
                idx = order[lo:lo + opt_cfg.batch_size]
                xb = Tensor(np.ascontiguousarray(x[idx]))
                yb = Tensor(np.ascontiguousarray(y[idx]))
                with Graph() as g:
                    pred = unit_forward(model, unit, xb, "pruned", trainable)
                    batch_loss = _loss_op(pred, yb, loss)
                    val = float(batch_loss.data)
                    if not np.isfinite(val):
                        print(f"[recon] {unit.unit_id}: non-finite loss at "
                              f"epoch {epoch}, rolling back", file=sys.stderr)
                        failed = True
                        break
                    g.backward(batch_loss)
                lr = optimizer.step()
                optimizer.zero_grad()
                epoch_loss += val * idx.size
            if failed:
                break
            if trace is not None:
                trace.append(TraceRow(unit.unit_id, epoch, epoch_loss / n, lr))
    finally:
        for t in tensors:
            t.requires_grad = False
            t.grad = None
    if failed:
        for t, snap in zip(tensors, snapshot):
            t.data[...] = snap
    streams.advance(unit)


# ---------------------------------------------------------------------------
# pruning sweep over a model (sequential, propagating through pruned blocks)


def prune_model(model: GptModel, tokens: np.ndarray, pattern: SparsityPattern,
                criterion: str, damp: float | None = None, blocksize: int = 4,
                chunk: int = STREAM_CHUNK) -> None:
    """Choose masks (and compensated weights, for sparsegpt) for every
    prunable matrix, walking blocks front to back.

    All six matrices of a block are scored from one forward capture of that
    block, then pruned together; the frontier then advances through the
    pruned block, so downstream statistics see upstream pruning. Criteria
    operate on [d_out, d_in] views, the model stores [d_in, d_out].
    """
    m = model
    n, t = tokens.shape
    d = m.config.d_model
    front = np.empty((n, t, d))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        front[lo:hi] = m.embed_tokens(tokens[lo:hi], "pruned").data

    need_stats = criterion in ("wanda", "sparsegpt")
    for b in range(m.config.n_blocks):
        stats: dict[str, np.ndarray] = {}
        if need_stats:
            for lo in range(0, n, chunk):
                hi = min(lo + chunk, n)
                seen: set[str] = set()  # wq/wk/wv share one input capture

                def sink(name, tensor):
                    mat = name.rsplit(".", 1)[1]
                    key = matrix_input_tap(b, mat)
                    if key in seen:
                        return
                    seen.add(key)
                    xs = tensor.data.reshape(-1, tensor.shape[-1])
                    if criterion == "wanda":
                        acc = np.einsum("ij,ij->j", xs, xs)
                    else:
                        acc = xs.T @ xs
                    if key in stats:
                        stats[key] += acc
                    else:
                        stats[key] = acc
                x = Tensor(front[lo:hi])
                m.block_forward(b, x, "pruned", sink=sink)
        for mat in BLOCK_MATRICES:
            name = f"blocks.{b}.{mat}"
            p = m.params[name]
            w_t = p.current.data.T  # [d_out, d_in] view for the criteria
            key = matrix_input_tap(b, mat)
            if criterion == "magnitude":
                mask_t, what_t = prune_matrix(w_t, pattern, criterion)
            elif criterion == "wanda":
                mask_t, what_t = prune_matrix(
                    w_t, pattern, criterion, x_norm=np.sqrt(stats[key]))
            else:
                mask_t, what_t = prune_matrix(
                    w_t, pattern, criterion, hessian=stats[key], damp=damp,
                    blocksize=blocksize)
            p.set_mask(np.ascontiguousarray(mask_t.T))
            p.current.data[...] = what_t.T
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            front[lo:hi] = m.block_forward(b, Tensor(front[lo:hi]), "pruned").data


# ---------------------------------------------------------------------------
# pipeline and retraining baseline


def run_pipeline(model: GptModel, tokens: np.ndarray, granularity: Granularity,
                 strategy: str, loss: str, opt_cfg: OptimConfig,
                 pattern: SparsityPattern | None = None,
                 criterion: str | None = None,
                 damp: float | None = None, blocksize: int = 4,
                 train_norm_params: bool = False) -> list[TraceRow]:
    """Prune (unless masks are already set) and reconstruct unit by unit.

    Returns the per-unit loss trace. The model is modified in place; its
    dense copies are never touched.
    """
    strategy = parse_strategy(strategy)
    loss = parse_loss(loss)
    if any(model.params[nm].mask is None for nm in model.prunable_names()):
        if pattern is None or criterion is None:
            raise ValueError("model has no masks; pattern and criterion required")
        prune_model(model, tokens, pattern, criterion, damp=damp,
                    blocksize=blocksize)
    units = split(model.config, granularity, train_norm_params)
    streams = ActivationStreams(model, tokens, units)
    trace: list[TraceRow] = []
    for i, unit in enumerate(units):
        reconstruct_unit(model, unit, streams, strategy, loss, opt_cfg,
                         unit_index=i, trace=trace)
    return trace


def retrain_full(model: GptModel, tokens: np.ndarray, opt_cfg: OptimConfig,
                 trace: list | None = None) -> None:
    """Cross-entropy retraining of the pruned model on the calibration
    tokens: prunable matrices (masked), norm parameters and the LM head
    train; the embedding stays frozen."""
    names = list(model.prunable_names())
    names += [nm for nm in model.params
              if ".ln1." in nm or ".ln2." in nm or nm.startswith("ln_f.")]
    if "lm_head" in model.params:
        names.append("lm_head")
    trainable = set(names)
    tensors = [model.params[nm].current for nm in names]
    masks = [None if model.params[nm].mask is None else model.params[nm].mask.data
             for nm in names]
    snapshot = [t.data.copy() for t in tensors]

    n = tokens.shape[0]
    steps_per_epoch = int(np.ceil(n / opt_cfg.batch_size))
    optimizer = AdamW(list(zip(tensors, masks)), opt_cfg,
                      opt_cfg.epochs * steps_per_epoch)
    rng = np.random.default_rng([opt_cfg.seed, 997])
    for t in tensors:
        t.requires_grad = True
    failed = False
    try:
        for epoch in range(1, opt_cfg.epochs + 1):
            order = rng.permutation(n)
            epoch_loss = 0.0
            lr = 0.0
            for lo in range(0, n, opt_cfg.batch_size):
                idx = order[lo:lo + opt_cfg.batch_size]
                batch = np.ascontiguousarray(tokens[idx])
                with Graph() as g:
                    logits = model.logits(batch, "pruned", trainable)
                    pred = ag.slice_(logits, (slice(None), slice(0, batch.shape[1] - 1)))
                    ce = ag.cross_entropy(pred, batch[:, 1:])
                    val = float(ce.data)
                    if not np.isfinite(val):
                        print("[retrain] non-finite loss, rolling back",
                              file=sys.stderr)
                        failed = True
                        break
                    g.backward(ce)
                lr = optimizer.step()
                optimizer.zero_grad()
                epoch_loss += val * idx.size
            if failed:
                break
            if trace is not None:
                trace.append(TraceRow("full-retrain", epoch, epoch_loss / n, lr))
    finally:
        for t in tensors:
            t.requires_grad = False
            t.grad = None
    if failed:
        for t, snap in zip(tensors, snapshot):
            t.data[...] = snap
