"""Command-line entry point: ``advlm {train,eval,inspect,bench,synth}``.

Machine-readable results go to stdout (JSON) or files (JSON/CSV); human
summaries go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adversarial import mc_perturb, mean_norm_ratio
from . import checkpoint as ckpt
from .config import RunConfig, dump_config, load_config, parse_config
from .corpus import batchify, read_tokens, write_synthetic_corpus
from .errors import (
    ConfigInvalid,
    CorpusTooSmall,
    CorruptCheckpoint,
    EmptyCorpus,
    IoFailure,
    NoGeneratorInCheckpoint,
    NonFiniteLoss,
    VersionMismatch,
)
from .models import embed, forward_embedded
from .trainer import Trainer, bench_overhead, evaluate, load_checkpoint, load_corpus

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_CHECKPOINT = 5

RATIO_BINS = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0, 1.1, 1.25, 1.5, 2.0, 4.0, float("inf")]


def _err(msg: str) -> None:
    print(f"advlm: {msg}", file=sys.stderr)


def _resolve(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "out", None) is not None:
        overrides.append(f"train.out_dir={args.out}")
    return load_config(args.config, overrides)


def _checkpoint_corpus(trainer: Trainer, split: str, data_path: str | None) -> np.ndarray:
    vocab = trainer.corpus.vocab
    if data_path:
        return vocab.encode(read_tokens(data_path))
    cfg = trainer.cfg
    if cfg.data.synthetic_tokens > 0:
        return load_corpus(cfg).split(split)
    path = getattr(cfg.data, split)
    if not path or not Path(path).is_file():
        raise IoFailure(f"corpus file for split {split!r} not found: {path!r}")
    return vocab.encode(read_tokens(path))


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.train.out_dir)
    if args.resume:
        data = ckpt.read(args.resume)
        corpus = load_corpus(parse_config(data.meta["config"]))
        trainer = Trainer.from_checkpoint(data, corpus, out)
    else:
        corpus = load_corpus(cfg)
        trainer = Trainer(cfg, corpus, out)
    result = trainer.run()
    for rec in result.history:
        print(f"epoch {rec['epoch']}: val ppl {rec['val_ppl']:.3f}", file=sys.stderr)
    print(json.dumps({"out_dir": str(out), "steps": result.steps, "best_val_ppl": result.best_val_ppl}))
    return 0


def cmd_eval(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    ids = _checkpoint_corpus(trainer, args.split, args.data)
    t = trainer.cfg.train
    res = evaluate(trainer.model, ids, args.batch_size or t.eval_batch_size, t.bptt)
    print(json.dumps({"split": args.split, "token_count": res.token_count, "nll": res.nll, "perplexity": res.perplexity}))
    return 0


def inspect_rows(trainer: Trainer, ids: np.ndarray, n_batches: int):
    """Per-token perturbation statistics for the first ``n_batches`` windows.

    The language model runs in eval mode along the clean trajectory; the
    generator keeps its dropout and MC iterations, seeded per window.
    Returns ``(rows, per-batch mean ratios)``.
    """
    if trainer.gen is None:
        raise NoGeneratorInCheckpoint("checkpoint has no generator parameters")
    cfg = trainer.cfg
    vocab = trainer.corpus.vocab
    batches = batchify(ids, cfg.train.batch_size, cfg.train.bptt)[:n_batches]
    state = None
    gen_state = None
    rows = []
    batch_means = []
    with ad.no_grad():
        for bi, batch in enumerate(batches):
            x = embed(trainer.model, batch.inputs)
            pb, gen_state = mc_perturb(x.data, trainer.gen, cfg.adversarial, ad.site_rng(cfg.train.seed, bi, "inspect"), gen_state)
            clean, new_state = forward_embedded(trainer.model, x, state, False)
            pert, _ = forward_embedded(trainer.model, ad.add(x, pb.r), state, False)
            state = new_state
            steps, b, v = clean.shape
            flat_t = batch.targets.reshape(-1)
            l_clean = ad.softmax_cross_entropy(ad.reshape(clean, (steps * b, v)), flat_t, "none").data.reshape(steps, b)
            l_pert = ad.softmax_cross_entropy(ad.reshape(pert, (steps * b, v)), flat_t, "none").data.reshape(steps, b)
            ratios = pb.ratios()
            x_norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(-1))
            batch_means.append(mean_norm_ratio(pb))
            for t in range(steps):
                for j in range(b):
                    rows.append(
                        {
                            "batch": bi,
                            "t": t,
                            "lane": j,
                            "token": vocab.itos[int(batch.inputs[t, j])],
                            "x_norm": float(x_norms[t, j]),
                            "r_norm": float(pb.norms[t, j]),
                            "ratio": float(ratios[t, j]),
                            "delta_loss": float(l_pert[t, j]) - float(l_clean[t, j]),
                        }
                    )
    return rows, batch_means


def cmd_inspect(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    if trainer.gen is None:
        raise NoGeneratorInCheckpoint(f"{args.checkpoint} has no generator (trained with mode != generator)")
    ids = _checkpoint_corpus(trainer, args.split, args.data)
    rows, _ = inspect_rows(trainer, ids, args.batches)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "perturbations.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    ratios = np.array([r["ratio"] for r in rows])
    finite = ratios[np.isfinite(ratios)]
    counts, _ = np.histogram(finite, bins=RATIO_BINS) if finite.size else (np.zeros(len(RATIO_BINS) - 1, int), None)
    summary = {
        "split": args.split,
        "tokens": len(rows),
        "bins": [str(b) for b in RATIO_BINS],
        "counts": counts.tolist(),
        "mean_ratio": float(finite.mean()) if finite.size else None,
        "p50_ratio": float(np.percentile(finite, 50)) if finite.size else None,
        "p95_ratio": float(np.percentile(finite, 95)) if finite.size else None,
        "max_ratio": float(finite.max()) if finite.size else None,
    }
    (out / "ratio_histogram.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(json.dumps(summary))
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve(args)
    corpus = load_corpus(cfg)
    reports = []
    if args.self_compare:
        rep = bench_overhead(cfg, corpus, adv_mode="none")
        reports.append(rep)
    ks = [int(k) for k in args.k_values.split(",")] if args.k_values else [int(cfg.adversarial.K)]
    for k in ks:
        kcfg = cfg.copy()
        kcfg.adversarial.K = k
        runs = [bench_overhead(kcfg, corpus) for _ in range(args.repeats)]
        runs.sort(key=lambda r: r.ratio)
        reports.append(runs[len(runs) // 2])
    out = Path(cfg.train.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(dump_config(cfg), encoding="utf-8")
    with open(out / "overhead.jsonl", "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(rep.to_json() + "\n")
            print(rep.to_json())
            print(f"{rep.mode} K={rep.K}: ratio {rep.ratio:.3f}", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    paths = write_synthetic_corpus(args.out, args.tokens, args.vocab, args.seed)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advlm", description="LSTM language models with generator-based adversarial training")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="config file (section.key = value)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="perplexity of a checkpoint on a split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="valid", choices=["train", "valid", "test"])
    sp.add_argument("--data", help="evaluate this file instead of the configured split")
    sp.add_argument("--batch-size", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="per-token perturbation report")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="valid", choices=["train", "valid", "test"])
    sp.add_argument("--data")
    sp.add_argument("--batches", type=int, default=4)
    sp.add_argument("--out", default="inspect")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("bench", help="step-time overhead of adversarial training")
    common(sp)
    sp.add_argument("--k-values", help="comma-separated K sweep, e.g. 1,2,4")
    sp.add_argument("--repeats", type=int, default=1, help="runs per K; the median-ratio run is reported")
    sp.add_argument("--self-compare", action="store_true", help="also time baseline against itself")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("synth", help="write a synthetic train/valid/test corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tokens", type=int, default=100_000)
    sp.add_argument("--vocab", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigInvalid as e:
        _err(f"invalid config: {e}")
        return EXIT_CONFIG
    except (CorpusTooSmall, EmptyCorpus) as e:
        # The data cannot fill the configured batch shape; a config fix (batch size, bptt, paths) resolves it.
        _err(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG
    except IoFailure as e:
        _err(str(e))
        return EXIT_IO
    except NonFiniteLoss as e:
        _err(str(e))
        return EXIT_NONFINITE
    except (VersionMismatch, CorruptCheckpoint, NoGeneratorInCheckpoint) as e:
        _err(f"{type(e).__name__}: {e}")
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
