"""Command-line front end.

Commands: train-dense, prune, reconstruct, eval, sweep, report. A YAML
config file supplies the full experiment description; flags override the
matching config fields. Exit codes: 0 success, 2 config error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np
import yaml

from . import autograd as ag
from .autograd import Graph, Tensor
from .criteria import SparsityPattern
from .data import Corpus, sample_calibration, synthesize_corpus, tokenize
from .errors import ConfigError, NumericalFailure
from .metrics import perplexity, recovery
from .model import (GptModel, Granularity, ModelConfig, load_checkpoint,
                    save_checkpoint)
from .optim import AdamW, OptimConfig
from .recon import TraceRow, parse_loss, parse_strategy, prune_model, run_pipeline
from .sweep import (SweepCell, SweepRunner, fingerprint, grid, run_cell,
                    write_summary)

DEFAULT_CONFIG: dict = {
    "model": {"n_blocks": 4, "d_model": 128, "n_heads": 4, "d_ff": 512,
              "vocab": 257, "seq_len": 128, "norm_kind": "layernorm",
              "tie_lm_head": False},
    "corpus": None,
    "out": "out",
    "calibration": {"n_samples": 256, "seq_len": 128, "seed": 0},
    "train": {"max_steps": 1500, "batch_size": 8, "lr": 1e-3,
              "target_ppl": None, "seed": 0, "eval_every": 250,
              "warmup_frac": 0.1},
    "prune": {"criterion": "wanda", "pattern": "0.5", "damp": None,
              "blocksize": 4},
    "recon": {"granularity": "half", "strategy": "mixed", "loss": "mse",
              "lr": 3e-5, "epochs": 20, "batch_size": 2, "seed": 0,
              "train_norm_params": False},
    "eval": {"max_windows": 64},
    "sweep": {"granularities": ["matrix", "half", "blocks:1", "blocks:2", "full"],
              "strategies": ["mixed"], "losses": ["mse"],
              "lrs": [1e-5, 3e-5, 1e-4], "epochs": [20], "seeds": [0, 1]},
}


def _deep_update(base: dict, override: dict) -> dict:
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            try:
                user = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse config {path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"config root must be a mapping, got {type(user)}")
        _deep_update(cfg, user)
    return cfg


def apply_overrides(cfg: dict, args: argparse.Namespace, command: str) -> None:
    if getattr(args, "corpus", None):
        cfg["corpus"] = args.corpus
    if getattr(args, "out", None):
        cfg["out"] = args.out
    if getattr(args, "pattern", None):
        cfg["prune"]["pattern"] = args.pattern
    if getattr(args, "criterion", None):
        cfg["prune"]["criterion"] = args.criterion
    for key in ("granularity", "strategy", "loss"):
        val = getattr(args, key, None)
        if val:
            cfg["recon"][key] = val
            plural = {"granularity": "granularities", "strategy": "strategies",
                      "loss": "losses"}[key]
            cfg["sweep"][plural] = [val]
    if getattr(args, "lr", None) is not None:
        cfg["recon"]["lr"] = args.lr
        cfg["sweep"]["lrs"] = [args.lr]
    if getattr(args, "epochs", None) is not None:
        cfg["recon"]["epochs"] = args.epochs
        cfg["sweep"]["epochs"] = [args.epochs]
    if getattr(args, "seed", None) is not None:
        if command == "train-dense":
            cfg["train"]["seed"] = args.seed
        elif command == "prune":
            cfg["calibration"]["seed"] = args.seed
        elif command == "sweep":
            cfg["sweep"]["seeds"] = [args.seed]
        else:
            cfg["recon"]["seed"] = args.seed


# ---------------------------------------------------------------------------
# shared loading helpers


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad model section: {e}") from e


def load_corpus(cfg: dict) -> Corpus:
    path = cfg.get("corpus")
    if not path:
        raise ConfigError("no corpus given; set corpus: in the config or --corpus")
    if not os.path.exists(path):
        raise ConfigError(f"corpus not found: {path}")
    return Corpus.from_file(path)


def calibration_tokens(cfg: dict, corpus: Corpus) -> np.ndarray:
    c = cfg["calibration"]
    try:
        cal = sample_calibration(corpus, int(c["n_samples"]), int(c["seq_len"]),
                                 int(c["seed"]))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cal.tokens


def _paths(cfg: dict) -> dict:
    out = cfg["out"]
    ck = os.path.join(out, "checkpoints")
    return {"out": out, "checkpoints": ck,
            "dense": os.path.join(ck, "dense.ckpt"),
            "pruned": os.path.join(ck, "pruned.ckpt"),
            "traces": os.path.join(out, "traces")}


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"{path} missing; run `{hint}` first")
    return path


# ---------------------------------------------------------------------------
# train-dense


def train_dense(cfg: dict, quiet: bool = False) -> str:
    corpus = load_corpus(cfg)
    mc = model_config(cfg)
    tc = cfg["train"]
    model = GptModel(mc, seed=int(tc["seed"]))
    max_steps = int(tc["max_steps"])
    batch_size = int(tc["batch_size"])
    target_ppl = tc.get("target_ppl")
    eval_every = int(tc.get("eval_every", 250))
    max_windows = cfg["eval"].get("max_windows")

    train_tokens = corpus.train_tokens
    t = mc.seq_len
    if train_tokens.shape[0] < t + 1:
        raise ConfigError(
            f"corpus train split has {train_tokens.shape[0]} tokens, "
            f"need > {t}"
        )
    names = list(model.params)
    tensors = [model.params[n].current for n in names]
    opt_cfg = OptimConfig(lr=float(tc["lr"]), epochs=1, batch_size=batch_size,
                          warmup_frac=float(tc.get("warmup_frac", 0.1)),
                          seed=int(tc["seed"]))
    optimizer = AdamW([(x, None) for x in tensors], opt_cfg, max_steps)
    rng = np.random.default_rng([int(tc["seed"]), 31])
    trainable = set(names)
    for x in tensors:
        x.requires_grad = True
    last_ppl = float("inf")
    try:
        for step in range(max_steps):
            starts = rng.integers(0, train_tokens.shape[0] - t, size=batch_size)
            batch = np.stack([train_tokens[s:s + t] for s in starts])
            with Graph() as g:
                logits = model.logits(batch, "pruned", trainable)
                pred = ag.slice_(logits, (slice(None), slice(0, t - 1)))
                loss = ag.cross_entropy(pred, batch[:, 1:])
                if not np.isfinite(float(loss.data)):
                    raise NumericalFailure(
                        f"training loss became non-finite at step {step}; "
                        "lower the learning rate"
                    )
                g.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            if (step + 1) % eval_every == 0 or step + 1 == max_steps:
                last_ppl = perplexity(model, corpus.holdout_tokens, "pruned",
                                      max_windows=max_windows)
                if not quiet:
                    print(f"step {step + 1}: loss {float(loss.data):.4f} "
                          f"holdout ppl {last_ppl:.3f}")
                if target_ppl is not None and last_ppl <= float(target_ppl):
                    break
    finally:
        for x in tensors:
            x.requires_grad = False
            x.grad = None
    # the dense reference copies are what the pipeline reads
    for n in names:
        model.params[n].dense.data[...] = model.params[n].current.data

    paths = _paths(cfg)
    os.makedirs(paths["checkpoints"], exist_ok=True)
    save_checkpoint(model, paths["dense"], extra={"holdout_ppl": last_ppl,
                                                  "trained_steps": max_steps})
    if not quiet:
        print(f"wrote {paths['dense']}")
    return paths["dense"]


# ---------------------------------------------------------------------------
# prune / reconstruct / eval


def cmd_prune(cfg: dict, quiet: bool = False) -> str:
    corpus = load_corpus(cfg)
    paths = _paths(cfg)
    _require(paths["dense"], "prunelab train-dense")
    model, _ = load_checkpoint(paths["dense"])
    tokens = calibration_tokens(cfg, corpus)
    pc = cfg["prune"]
    try:
        pattern = SparsityPattern.parse(pc["pattern"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    damp = pc.get("damp")
    prune_model(model, tokens, pattern, pc["criterion"],
                damp=None if damp is None else float(damp),
                blocksize=int(pc.get("blocksize", 4)))
    save_checkpoint(model, paths["pruned"], extra={
        "pattern": pattern.label(), "criterion": pc["criterion"]})
    if not quiet:
        viol = model.max_mask_violation()
        print(f"wrote {paths['pruned']} (mask violation {viol})")
    return paths["pruned"]


def cmd_reconstruct(cfg: dict, quiet: bool = False) -> str:
    corpus = load_corpus(cfg)
    paths = _paths(cfg)
    rc = cfg["recon"]
    src = paths["pruned"] if os.path.exists(paths["pruned"]) else \
        _require(paths["dense"], "prunelab train-dense")
    model, _ = load_checkpoint(src)
    tokens = calibration_tokens(cfg, corpus)
    pc = cfg["prune"]
    try:
        gran = Granularity.parse(rc["granularity"])
        pattern = SparsityPattern.parse(pc["pattern"])
        opt = OptimConfig(lr=float(rc["lr"]), epochs=int(rc["epochs"]),
                          batch_size=int(rc.get("batch_size", 2)),
                          seed=int(rc.get("seed", 0)))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    damp = pc.get("damp")
    trace = run_pipeline(
        model, tokens, gran, rc["strategy"], rc["loss"], opt,
        pattern=pattern, criterion=pc["criterion"],
        damp=None if damp is None else float(damp),
        blocksize=int(pc.get("blocksize", 4)),
        train_norm_params=bool(rc.get("train_norm_params", False)))
    label = (f"{gran.label().replace(':', '')}_{parse_strategy(rc['strategy'])}"
             f"_{parse_loss(rc['loss'])}_lr{opt.lr:g}_e{opt.epochs}"
             f"_s{opt.seed}")
    os.makedirs(paths["traces"], exist_ok=True)
    trace_path = os.path.join(paths["traces"], label + ".csv")
    with open(trace_path, "w") as f:
        f.write("unit,epoch,loss,lr\n")
        for r in trace:
            f.write(f"{r.unit},{r.epoch},{r.loss!r},{r.lr!r}\n")
    ckpt_path = os.path.join(paths["checkpoints"], f"recon_{label}.ckpt")
    save_checkpoint(model, ckpt_path, extra={"recon": label})
    if not quiet:
        print(f"wrote {ckpt_path}\nwrote {trace_path}")
    return ckpt_path


def cmd_eval(cfg: dict, checkpoint: str | None, quiet: bool = False) -> dict:
    corpus = load_corpus(cfg)
    paths = _paths(cfg)
    path = checkpoint or (paths["pruned"] if os.path.exists(paths["pruned"])
                          else paths["dense"])
    _require(path, "prunelab train-dense")
    model, _ = load_checkpoint(path)
    max_windows = cfg["eval"].get("max_windows")
    result = {
        "checkpoint": path,
        "ppl_current": perplexity(model, corpus.holdout_tokens, "pruned",
                                  max_windows=max_windows),
        "ppl_dense_weights": perplexity(model, corpus.holdout_tokens, "dense",
                                        max_windows=max_windows),
        "mask_violation": model.max_mask_violation(),
    }
    if not quiet:
        print(json.dumps(result, indent=1, sort_keys=True))
    return result


# ---------------------------------------------------------------------------
# sweep / report


def _base_payload(cfg: dict) -> dict:
    return {
        "model": cfg["model"],
        "calibration": cfg["calibration"],
        "prune": {k: cfg["prune"][k] for k in ("criterion", "pattern",
                                               "blocksize", "damp")},
        "eval_windows": cfg["eval"].get("max_windows"),
    }


def cmd_sweep(cfg: dict, quiet: bool = False) -> dict:
    corpus = load_corpus(cfg)
    paths = _paths(cfg)
    _require(paths["dense"], "prunelab train-dense")
    tokens = calibration_tokens(cfg, corpus)
    holdout = corpus.holdout_tokens
    max_windows = cfg["eval"].get("max_windows")
    base = _base_payload(cfg)
    runner = SweepRunner(cfg["out"], base)

    # dense / pruned reference perplexities, cached beside the runs
    ref_path = os.path.join(cfg["out"], f"baseline_{fingerprint(base)}.json")
    if os.path.exists(ref_path):
        with open(ref_path) as f:
            ref = json.load(f)
    else:
        model, _ = load_checkpoint(paths["dense"])
        ppl_dense = perplexity(model, holdout, "dense", max_windows=max_windows)
        pc = cfg["prune"]
        damp = pc.get("damp")
        try:
            pattern = SparsityPattern.parse(pc["pattern"])
        except ValueError as e:
            raise ConfigError(str(e)) from e
        prune_model(model, tokens, pattern, pc["criterion"],
                    damp=None if damp is None else float(damp),
                    blocksize=int(pc.get("blocksize", 4)))
        ppl_pruned = perplexity(model, holdout, "pruned",
                                max_windows=max_windows)
        ref = {"ppl_dense": ppl_dense, "ppl_pruned": ppl_pruned}
        with open(ref_path, "w") as f:
            json.dump(ref, f, sort_keys=True)

    cells = grid(cfg["sweep"])

    def executor(cell: SweepCell) -> dict:
        if not quiet:
            print(f"cell {cell.granularity}/{cell.strategy}/{cell.loss}"
                  f"/lr{cell.lr:g}/e{cell.epochs}/s{cell.seed}", flush=True)
        return run_cell(cell, paths["dense"], tokens, holdout, cfg["prune"],
                        ref["ppl_dense"], ref["ppl_pruned"], max_windows)

    runner.run(cells, executor)
    rows = runner.load_rows()
    csv_path, md_path = write_summary(cfg["out"], rows)
    if not quiet:
        print(f"executed {runner.executed}, skipped {runner.skipped}")
        print(f"wrote {csv_path}\nwrote {md_path}")
    return {"executed": runner.executed, "skipped": runner.skipped,
            "rows": len(rows)}


def cmd_report(cfg: dict, quiet: bool = False) -> str:
    runner = SweepRunner(cfg["out"], {})
    rows = runner.load_rows()
    csv_path, md_path = write_summary(cfg["out"], rows)
    if not quiet:
        print(f"wrote {csv_path}\nwrote {md_path}")
    return md_path


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="prunelab",
        description="Post-pruning reconstruction experiments on a toy GPT.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--corpus", help="path to the text corpus")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--granularity",
                        help="matrix | half | blocks:<k> | full")
    common.add_argument("--strategy", help="dense | sparse | mixed")
    common.add_argument("--loss", help="mse | cos")
    common.add_argument("--lr", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--pattern", help="sparsity: ratio or n:m")
    common.add_argument("--criterion", help="magnitude | wanda | sparsegpt")
    common.add_argument("--quiet", action="store_true")
    sub.add_parser("train-dense", parents=[common])
    sub.add_parser("prune", parents=[common])
    sub.add_parser("reconstruct", parents=[common])
    pe = sub.add_parser("eval", parents=[common])
    pe.add_argument("checkpoint", nargs="?", help="checkpoint to evaluate")
    sub.add_parser("sweep", parents=[common])
    sub.add_parser("report", parents=[common])
    gen = sub.add_parser("make-corpus", parents=[common])
    gen.add_argument("--bytes", type=int, default=1_200_000)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        apply_overrides(cfg, args, args.command)
        quiet = bool(getattr(args, "quiet", False))
        if args.command == "train-dense":
            train_dense(cfg, quiet)
        elif args.command == "prune":
            cmd_prune(cfg, quiet)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg, quiet)
        elif args.command == "eval":
            cmd_eval(cfg, getattr(args, "checkpoint", None), quiet)
        elif args.command == "sweep":
            cmd_sweep(cfg, quiet)
        elif args.command == "report":
            cmd_report(cfg, quiet)
        elif args.command == "make-corpus":
            path = cfg.get("corpus") or "corpus.txt"
            seed = args.seed if args.seed is not None else 0
            raw = synthesize_corpus(args.bytes, seed=seed)
            with open(path, "wb") as f:
                f.write(raw)
            if not quiet:
                print(f"wrote {path} ({len(raw)} bytes)")
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
