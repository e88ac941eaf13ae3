"""Perplexity, recovery, paired recovery differences, and the analytic
peak-memory estimator for reconstruction at each granularity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import (GptModel, ModelConfig, Granularity, ReconUnit, split,
                    STREAM_CHUNK)


# ---------------------------------------------------------------------------
# perplexity


def perplexity(model: GptModel, tokens: np.ndarray, weights: str = "pruned",
               max_windows: int | None = None, chunk: int = STREAM_CHUNK) -> float:
    """exp(mean next-token NLL) over non-overlapping seq_len windows.

    tokens is a flat id array; each window of seq_len tokens contributes
    seq_len - 1 predictions. Windows beyond max_windows are ignored.
    """
    tokens = np.asarray(tokens).reshape(-1)
    t = model.config.seq_len
    n_win = tokens.shape[0] // t
    if n_win == 0:
        raise ValueError(
            f"need at least seq_len={t} tokens for one window, got {tokens.shape[0]}"
        )
    if max_windows is not None:
        n_win = min(n_win, max_windows)
    windows = tokens[:n_win * t].reshape(n_win, t)
    total_nll = 0.0
    total_preds = 0
    for lo in range(0, n_win, chunk):
        hi = min(lo + chunk, n_win)
        batch = windows[lo:hi]
        logits = model.logits(batch, weights).data
        z = logits[:, :-1, :]
        zmax = z.max(axis=-1, keepdims=True)
        zs = z - zmax
        lse = np.log(np.exp(zs).sum(axis=-1))
        rows = np.arange(batch.shape[0])[:, None]
        cols = np.arange(t - 1)[None, :]
        picked = zs[rows, cols, batch[:, 1:]]
        total_nll += float((lse - picked).sum())
        total_preds += batch.shape[0] * (t - 1)
    return float(np.exp(total_nll / total_preds))


# ---------------------------------------------------------------------------
# recovery


def recovery(ppl_dense: float, ppl_pruned: float, ppl_reconstructed: float) -> float:
    """Fraction of the pruned-to-dense perplexity gap closed; NaN when the
    gap is zero (undefined)."""
    gap = ppl_pruned - ppl_dense
    if gap == 0.0:
        return float("nan")
    return (ppl_pruned - ppl_reconstructed) / gap


@dataclass
class RecoveryReport:
    ppl_dense: float
    ppl_pruned: float
    ppl_reconstructed: float
    fingerprint: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.ppl_dense, self.ppl_pruned, self.ppl_reconstructed) <= 0:
            raise ValueError("perplexities must be positive")

    @property
    def defined(self) -> bool:
        return self.ppl_pruned != self.ppl_dense

    @property
    def recovery(self) -> float:
        return recovery(self.ppl_dense, self.ppl_pruned, self.ppl_reconstructed)


def recovery_diffs(runs: list[RecoveryReport], axis: str, first, second,
                   pairing: str = "identical-config",
                   best_group: tuple[str, ...] = ("model", "pattern")):
    """Paired recovery differences (first side minus second) along one
    fingerprint axis, e.g. axis="strategy", first="mixed", second="dense".

    identical-config pairs runs agreeing on every other fingerprint field;
    best-per picks each side's maximum recovery within each best_group cell.
    Returns a list of (pair_key, difference).
    """
    if pairing not in ("identical-config", "best-per"):
        raise ValueError(f"unknown pairing {pairing!r}")
    a_runs = [r for r in runs if r.defined and r.fingerprint.get(axis) == first]
    b_runs = [r for r in runs if r.defined and r.fingerprint.get(axis) == second]
    out = []
    if pairing == "identical-config":
        def key(r):
            return tuple(sorted((k, str(v)) for k, v in r.fingerprint.items()
                                if k != axis))
        b_by_key = {}
        for r in b_runs:
            b_by_key.setdefault(key(r), []).append(r)
        for r in a_runs:
            for other in b_by_key.get(key(r), []):
                out.append((key(r), r.recovery - other.recovery))
    else:
        def gkey(r):
            return tuple(str(r.fingerprint.get(f)) for f in best_group)
        best_a, best_b = {}, {}
        for r in a_runs:
            k = gkey(r)
            if k not in best_a or r.recovery > best_a[k]:
                best_a[k] = r.recovery
        for r in b_runs:
            k = gkey(r)
            if k not in best_b or r.recovery > best_b[k]:
                best_b[k] = r.recovery
        for k in sorted(set(best_a) & set(best_b)):
            out.append((k, best_a[k] - best_b[k]))
    if not out:
        warnings.warn(f"no valid pairs for axis {axis!r} ({first} vs {second})")
    return out


# ---------------------------------------------------------------------------
# analytic peak-memory estimate
#
# Counts f64 floats only. A unit under reconstruction holds: weights for the
# whole model (trainable + frozen), gradient and two AdamW moments for the
# trainable parameters, and the stored forward activations of the unit's
# layers for one batch. peak_bytes = 8 * (4*trainable + frozen + activations).


@dataclass
class MemoryEstimate:
    trainable_params: int
    frozen_params: int
    optimizer_state_floats: int
    activation_floats: int
    peak_bytes: int
    unit_id: str = ""


def _param_counts(c: ModelConfig) -> dict[str, int]:
    counts = {"embed": c.vocab * c.d_model, "pos": c.seq_len * c.d_model}
    norm = 2 * c.d_model if c.norm_kind == "layernorm" else c.d_model
    for b in range(c.n_blocks):
        pre = f"blocks.{b}."
        counts[pre + "ln1"] = norm
        counts[pre + "ln2"] = norm
        for mat in ("wq", "wk", "wv", "wo"):
            counts[pre + mat] = c.d_model * c.d_model
        counts[pre + "w1"] = c.d_model * c.d_ff
        counts[pre + "w2"] = c.d_model * c.d_ff
    counts["ln_f"] = norm
    if not c.tie_lm_head:
        counts["lm_head"] = c.d_model * c.vocab
    return counts


def _attn_activation_floats(c: ModelConfig, batch: int) -> int:
    bt = batch * c.seq_len
    # x, ln out, q, k, v, merged context, projection, residual sum
    dense_tensors = 8 * bt * c.d_model
    # attention scores and probabilities per head
    square = 2 * batch * c.n_heads * c.seq_len * c.seq_len
    return dense_tensors + square


def _mlp_activation_floats(c: ModelConfig, batch: int) -> int:
    bt = batch * c.seq_len
    # x, ln out, projection, residual sum + the two d_ff-wide tensors
    return 4 * bt * c.d_model + 2 * bt * c.d_ff


def _unit_activation_floats(c: ModelConfig, unit: ReconUnit, batch: int) -> int:
    if unit.kind == "matrix":
        bt = batch * c.seq_len
        din_dout = {
            "wq": 2 * c.d_model, "wk": 2 * c.d_model, "wv": 2 * c.d_model,
            "wo": 2 * c.d_model,
            "w1": c.d_model + c.d_ff, "w2": c.d_ff + c.d_model,
        }[unit.matrix]
        return bt * din_dout
    if unit.kind == "half":
        return (_attn_activation_floats(c, batch) if unit.sub == "attn"
                else _mlp_activation_floats(c, batch))
    b0, b1 = unit.span
    return (b1 - b0) * (_attn_activation_floats(c, batch)
                        + _mlp_activation_floats(c, batch))


def estimate_peak_memory(config: ModelConfig, granularity: Granularity,
                         batch_size: int = 2,
                         train_norm_params: bool = False) -> MemoryEstimate:
    """Peak floats for the most expensive unit of the split."""
    counts = _param_counts(config)
    total_params = sum(counts.values())
    units = split(config, granularity, train_norm_params)
    best: MemoryEstimate | None = None
    for unit in units:
        trainable = sum(counts[_count_key(n)] for n in unit.trainable_names())
        frozen = total_params - trainable
        act = _unit_activation_floats(config, unit, batch_size)
        opt_state = 2 * trainable
        peak = 8 * (4 * trainable + frozen + act)
        est = MemoryEstimate(trainable, frozen, opt_state, act, peak, unit.unit_id)
        if best is None or est.peak_bytes > best.peak_bytes:
            best = est
    return best


def _count_key(param_name: str) -> str:
    # "blocks.0.ln1.g" -> "blocks.0.ln1"; matrices map to themselves
    if param_name.endswith(".g") or param_name.endswith(".b"):
        return param_name.rsplit(".", 1)[0]
    return param_name
