"""Sweep machinery: config grids, content-addressed run cells, resume by
skipping finished cells, and CSV/markdown report assembly.

A cell is one (granularity, strategy, loss, lr, epochs, seed) combination.
Its fingerprint is the sha256 of the canonical JSON of everything that
determines the result; the result file runs/<fingerprint>.json doubles as
the resume marker, so an interrupted sweep recomputes nothing.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .criteria import SparsityPattern
from .errors import ConfigError
from .metrics import RecoveryReport, perplexity, recovery
from .model import Granularity, load_checkpoint
from .optim import OptimConfig
from .recon import run_pipeline


def fingerprint(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class SweepCell:
    granularity: str
    strategy: str
    loss: str
    lr: float
    epochs: int
    seed: int

    def payload(self, base: dict) -> dict:
        d = dict(base)
        d.update(granularity=self.granularity, strategy=self.strategy,
                 loss=self.loss, lr=repr(self.lr), epochs=self.epochs,
                 seed=self.seed)
        return d


def grid(sweep_cfg: dict) -> list[SweepCell]:
    """Expand the sweep section of a config into cells, validated."""
    try:
        grans = [str(g) for g in sweep_cfg["granularities"]]
        strategies = [str(s) for s in sweep_cfg.get("strategies", ["mixed"])]
        losses = [str(x) for x in sweep_cfg.get("losses", ["mse"])]
        lrs = [float(x) for x in sweep_cfg.get("lrs", [3e-5])]
        epochs_list = [int(x) for x in sweep_cfg.get("epochs", [20])]
        seeds = [int(x) for x in sweep_cfg.get("seeds", [0])]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad sweep section: {e}") from e
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    for g in grans:
        Granularity.parse(g)
    cells = []
    for g in grans:
        for s in strategies:
            for lo in losses:
                for lr in lrs:
                    for ep in epochs_list:
                        for sd in seeds:
                            cells.append(SweepCell(g, s, lo, lr, ep, sd))
    return cells


def run_cell(cell: SweepCell, dense_ckpt_path: str, calib_tokens: np.ndarray,
             holdout_tokens: np.ndarray, prune_cfg: dict,
             ppl_dense: float, ppl_pruned: float,
             max_windows: int | None) -> dict:
    """Execute one pipeline cell from the dense checkpoint and score it."""
    model, _ = load_checkpoint(dense_ckpt_path)
    opt = OptimConfig(lr=cell.lr, epochs=cell.epochs, seed=cell.seed)
    pattern = SparsityPattern.parse(prune_cfg.get("pattern", "0.5"))
    damp = prune_cfg.get("damp")
    trace = run_pipeline(
        model, calib_tokens, Granularity.parse(cell.granularity),
        cell.strategy, cell.loss, opt, pattern=pattern,
        criterion=prune_cfg.get("criterion", "wanda"),
        damp=None if damp is None else float(damp),
        blocksize=int(prune_cfg.get("blocksize", 4)),
    )
    ppl_recon = perplexity(model, holdout_tokens, "pruned",
                           max_windows=max_windows)
    violation = model.max_mask_violation()
    return {
        "ppl_dense": ppl_dense,
        "ppl_pruned": ppl_pruned,
        "ppl_reconstructed": ppl_recon,
        "recovery": recovery(ppl_dense, ppl_pruned, ppl_recon),
        "mask_violation": violation,
        "final_losses": {r.unit: r.loss for r in trace
                         if r.epoch == max(x.epoch for x in trace
                                           if x.unit == r.unit)},
    }


class SweepRunner:
    """Drives a grid of cells with resume-by-fingerprint semantics."""

    def __init__(self, out_dir: str, base_payload: dict):
        self.out_dir = out_dir
        self.runs_dir = os.path.join(out_dir, "runs")
        os.makedirs(self.runs_dir, exist_ok=True)
        self.base_payload = base_payload
        self.executed = 0
        self.skipped = 0

    def cell_path(self, cell: SweepCell) -> str:
        return os.path.join(self.runs_dir,
                            fingerprint(cell.payload(self.base_payload)) + ".json")

    def is_done(self, cell: SweepCell) -> bool:
        return os.path.exists(self.cell_path(cell))

    def record(self, cell: SweepCell, result: dict) -> None:
        fp = fingerprint(cell.payload(self.base_payload))
        row = {"fingerprint": fp, "granularity": cell.granularity,
               "strategy": cell.strategy, "loss": cell.loss,
               "lr": cell.lr, "epochs": cell.epochs, "seed": cell.seed}
        row.update(result)
        tmp = self.cell_path(cell) + ".tmp"
        with open(tmp, "w") as f:
            json.dump(row, f, sort_keys=True, indent=1)
        os.replace(tmp, self.cell_path(cell))

    def run(self, cells: list[SweepCell], executor) -> None:
        for cell in cells:
            if self.is_done(cell):
                self.skipped += 1
                continue
            result = executor(cell)
            self.record(cell, result)
            self.executed += 1

    def load_rows(self) -> list[dict]:
        rows = []
        for name in sorted(os.listdir(self.runs_dir)):
            if name.endswith(".json"):
                with open(os.path.join(self.runs_dir, name)) as f:
                    rows.append(json.load(f))
        rows.sort(key=lambda r: (r["granularity"], r["strategy"], r["loss"],
                                 r["lr"], r["epochs"], r["seed"]))
        return rows


SUMMARY_FIELDS = ("fingerprint", "granularity", "strategy", "loss", "lr",
                  "epochs", "seed", "ppl_dense", "ppl_pruned",
                  "ppl_reconstructed", "recovery", "mask_violation")


def write_summary(out_dir: str, rows: list[dict]) -> tuple[str, str]:
    """summary.csv (one row per cell) and summary.md (aggregates)."""
    csv_path = os.path.join(out_dir, "summary.csv")
    md_path = os.path.join(out_dir, "summary.md")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, extrasaction="ignore",
                            lineterminator="\n")
    writer.writeheader()
    for r in rows:
        out = dict(r)
        for k in ("ppl_dense", "ppl_pruned", "ppl_reconstructed", "recovery",
                  "mask_violation", "lr"):
            if k in out and isinstance(out[k], float):
                out[k] = repr(out[k])
        writer.writerow(out)
    with open(csv_path, "w") as f:
        f.write(buf.getvalue())
    with open(md_path, "w") as f:
        f.write(render_markdown(rows))
    return csv_path, md_path


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean recovery over seeds per (granularity, strategy, loss, lr, epochs)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        key = (r["granularity"], r["strategy"], r["loss"], r["lr"], r["epochs"])
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        members = groups[key]
        recs = [m["recovery"] for m in members]
        out.append({
            "granularity": key[0], "strategy": key[1], "loss": key[2],
            "lr": key[3], "epochs": key[4], "n_seeds": len(members),
            "mean_recovery": float(np.mean(recs)),
            "mean_ppl_reconstructed": float(np.mean(
                [m["ppl_reconstructed"] for m in members])),
        })
    return out


def best_per_granularity(rows: list[dict]) -> list[dict]:
    agg = aggregate(rows)
    best: dict[str, dict] = {}
    for a in agg:
        g = a["granularity"]
        if g not in best or a["mean_recovery"] > best[g]["mean_recovery"]:
            best[g] = a
    ranked = sorted(best.values(), key=lambda a: -a["mean_recovery"])
    return ranked


def render_markdown(rows: list[dict]) -> str:
    lines = ["# Sweep summary", ""]
    if not rows:
        lines.append("(no finished cells)")
        return "\n".join(lines) + "\n"
    d = rows[0]
    lines.append(f"Dense ppl {d['ppl_dense']:.4f}, pruned ppl "
                 f"{d['ppl_pruned']:.4f} ({len(rows)} cells).")
    lines.append("")
    lines.append("## Mean recovery over seeds")
    lines.append("")
    lines.append("| granularity | strategy | loss | lr | epochs | seeds | mean recovery | mean ppl |")
    lines.append("|---|---|---|---|---|---|---|---|")
    for a in aggregate(rows):
        lines.append(
            f"| {a['granularity']} | {a['strategy']} | {a['loss']} "
            f"| {a['lr']:g} | {a['epochs']} | {a['n_seeds']} "
            f"| {a['mean_recovery']:.4f} | {a['mean_ppl_reconstructed']:.4f} |")
    lines.append("")
    lines.append("## Granularity ranking (best cell per granularity)")
    lines.append("")
    lines.append("| rank | granularity | best lr | epochs | mean recovery |")
    lines.append("|---|---|---|---|---|")
    for i, a in enumerate(best_per_granularity(rows), 1):
        lines.append(f"| {i} | {a['granularity']} | {a['lr']:g} "
                     f"| {a['epochs']} | {a['mean_recovery']:.4f} |")
    lines.append("")
    return "\n".join(lines)
