"""Command-line entry point: ``rovit <subcommand> ...`` (or ``python -m rovit``).

Exit codes: 0 success, 1 check failure or diverged training, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys


from . import kernels
from .config import ConfigError, RunConfig, load_config
from .encoders import load_checkpoint

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def _ckpt(path):
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _write(path, text):
    if path:
        d = os.path.dirname(path)
        if d:
            os.makedirs(d, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text)


def cmd_pretrain(args):
    from .ablation import final_loss
    from .evaluate import eval_retrieval
    from .train import TrainingDiverged, pretrain

    cfg = _config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(run__steps=args.steps)
    if args.seed is not None:
        cfg = cfg.replace(run__seed=args.seed)
    try:
        res = pretrain(cfg, args.out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    report = eval_retrieval(res.model, cfg.run.eval_pairs, (1, 5), seed=cfg.run.eval_seed)
    _write(os.path.join(args.out, "retrieval.csv"), report.to_csv())
    start = res.losses[0] if res.losses else float("nan")
    print(f"pretrain: pe_mode={cfg.vit.pe_mode} loss={cfg.loss.kind} steps={cfg.run.steps} "
          f"seconds={res.seconds:.1f}")
    print(f"loss: step0={start:.4f} final(mean of last 50)={final_loss(res.losses):.4f}")
    print(report.summary())
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.rovt')}")
    return EXIT_OK


def cmd_eval_retrieval(args):
    from .evaluate import eval_retrieval

    model = _ckpt(args.ckpt)
    try:
        ks = tuple(int(k) for k in args.k.split(",") if k.strip())
    except ValueError:
        raise UsageError(f"--k must be a comma-separated list of integers, got {args.k!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k needs positive integers")
    if args.n < max(ks):
        raise UsageError(f"--n {args.n} is smaller than the largest K {max(ks)}")
    report = eval_retrieval(model, args.n, ks, seed=args.seed)
    csv_text = report.to_csv()
    _write(args.out, csv_text)
    sys.stdout.write(csv_text)
    print(report.summary())
    return EXIT_OK


def cmd_eval_region(args):
    from .evaluate import eval_region_retrieval, region_score_config, region_tasks
    from .train import finetune_detector

    model = _ckpt(args.ckpt)
    cfg = _config(args.config)
    cfg = cfg.replace(vit=model.vit, text=model.text, cpe=model.cpe)
    score_cfg = region_score_config(cfg)
    head = None
    if cfg.region.use_detector:
        model, head, _ = finetune_detector(model, cfg)
    report = eval_region_retrieval(model, region_tasks(cfg), score_cfg, head=head,
                                   samples=cfg.region.samples,
                                bins=cfg.region.bins)
    csv_text = report.to_csv()
    if args.out:
        _write(os.path.join(args.out, "region.csv"), csv_text)
    sys.stdout.write(csv_text)
    print(report.summary())
    return EXIT_OK


def cmd_score(args):
    from .scoring import score_csv

    cfg = _config(args.config).score
    if not os.path.exists(args.input):
        raise UsageError(f"input CSV not found: {args.input}")
    with open(args.input) as fh:
        out = score_csv(fh.read(), cfg)
    if args.out:
        _write(args.out, out)
    else:
        sys.stdout.write(out)
    n = out.count("\n") - 1
    print(f"scored {n} regions (alpha={cfg.alpha}, beta={cfg.beta}, delta={cfg.delta})",
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_viz_pe(args):
    from .viz import export_pe_viz

    model = _ckpt(args.ckpt)
    csv_path, pgm_path, sim = export_pe_viz(model, args.out)
    h, w = sim.shape[:2]
    print(f"PE similarity {h}x{w} tiles -> {csv_path}, {pgm_path}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import format_table, gradcheck_all

    results, seconds = gradcheck_all(seed=args.seed)
    table = format_table(results)
    _write(args.out, table)
    sys.stdout.write(table)
    trials = sum(r.trials for r in results)
    failed = [r for r in results if not r.passed]
    print(f"{len(results)} checks, {trials} trials, {seconds:.1f}s, kernels={kernels.BACKEND}: "
          f"{'FAIL' if failed else 'PASS'}")
    for r in failed:
        print(f"  FAILED {r.name}: rel err {r.max_rel_err:.3e} at input {r.worst_input} "
              f"coordinate {r.worst_coord}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_ablate(args):
    from .ablation import ABLATION_MODES, format_table, run_ablation
    from .losses import LOSS_KINDS

    cfg = _config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(run__steps=args.steps)
    modes = tuple(args.modes.split(",")) if args.modes else ABLATION_MODES
    kinds = tuple(args.losses.split(",")) if args.losses else LOSS_KINDS
    for k in kinds:
        if k not in LOSS_KINDS:
            raise UsageError(f"unknown loss kind {k!r}")
    os.makedirs(args.out, exist_ok=True)
    rows = run_ablation(cfg, modes, kinds, args.out)
    print(format_table(rows))
    print(f"table: {os.path.join(args.out, 'ablation.csv')}")
    return EXIT_OK


def cmd_corpus(args):
    from .synthetic import corpus_csv

    text = corpus_csv(range(args.start, args.start + args.n))
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="rovit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="contrastive pretraining on the synthetic corpus")
    s.add_argument("--config", help="key = value config file (defaults if omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval-retrieval", help="zero-shot image-text retrieval recall@K")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--k", default="1,5")
    s.add_argument("--seed", type=int, default=9_000_000, help="first held-out pair seed")
    s.add_argument("--out", help="CSV path")
    s.set_defaults(func=cmd_eval_retrieval)

    s = sub.add_parser("eval-region", help="region-level open-vocabulary evaluation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_eval_region)

    s = sub.add_parser("score", help="fuse z/p/objectness CSV into final scores")
    s.add_argument("--input", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("viz-pe", help="export positional-embedding similarity tiles")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_viz_pe)

    s = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="PE mode x loss comparison table")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--modes", help="comma list (default: learnable,none,sincos,feat_crop_resize,cpe)")
    s.add_argument("--losses", help="comma list (default: softmax,focal)")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("corpus", help="dump synthetic pair records as CSV")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_corpus)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"rovit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        print(f"rovit {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
