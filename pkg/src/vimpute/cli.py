"""``vimpute`` command line: synth, mask, train, impute, evaluate, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as config_io
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Corpus, attach_truth, load_corpus, read_truth, write_corpus, write_truth
from .errors import ContractError, DataError, NumericError
from .evaluation import (
    MetricTable,
    PosteriorPredictive,
    compare_runs,
    locf_impute,
    mean_impute,
    nrmse_all,
    point_impute,
    posterior_predict,
)
from .model import VARIANTS
from .preprocessing import MaskPlan, apply_mask
from .report import render_report
from .synthetic import generate_synthetic
from .training import TrainConfig, train

logger = logging.getLogger("vimpute")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
POSTERIOR_FILE = "posterior.npz"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# ------------------------------------------------------------------ helpers


def _settings(args) -> tuple:
    """Config file values, then command-line flags on top."""
    train_cfg, plan = (config_io.load(args.config) if getattr(args, "config", None) else (TrainConfig(), MaskPlan()))
    tkw, mkw = {}, {}
    if getattr(args, "seed", None) is not None:
        tkw["seed"] = mkw["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        tkw["variant"] = args.variant
    if getattr(args, "epochs", None) is not None:
        tkw["n_epoch"] = args.epochs
    for flag, attr in (("mask_mode", "mode"), ("mask_rate", "rate"), ("mask_len", "length")):
        if getattr(args, flag, None) is not None:
            mkw[attr] = getattr(args, flag)
    if mkw.get("mode") == "individual" and "length" not in mkw:
        mkw["length"] = 1
    return dataclasses.replace(train_cfg, **tkw), dataclasses.replace(plan, **mkw)


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"--out {out}: cannot create directory ({exc.strerror})") from None
    return out


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _imputed_sets(corpus_dirs: Sequence[str]) -> list:
    """For each ``--imputed`` directory: ``(corpus, posterior samples by id or None)``."""
    out = []
    for d in corpus_dirs:
        d = Path(d)
        manifest = d / "manifest.json" if d.is_dir() else d
        imp = load_corpus(manifest)
        post = None
        npz = manifest.parent / POSTERIOR_FILE
        if npz.exists():
            with np.load(npz) as data:
                post = {k: data[k] for k in data.files}
        out.append((imp, post))
    return out


def _scored_panels(args) -> tuple:
    corpus = load_corpus(args.corpus)
    truth = read_truth(args.truth)
    panels = attach_truth(corpus.panels, truth)
    return corpus, {p.panel_id: p for p in panels}


def _score_rows(panels_by_id: dict, imputed: Corpus, posterior: Optional[dict]) -> np.ndarray:
    """One nRMSE row per posterior sample, or a single row for a point imputation."""
    ids = [p.panel_id for p in imputed.panels]
    missing = [i for i in ids if i not in panels_by_id]
    if missing:
        raise DataError(f"imputed panels {missing} are not in the masked corpus")
    ref = [panels_by_id[i] for i in ids]
    truths = [p.ground_truth() for p in ref]
    masks = [p.eval_mask for p in ref]
    if posterior is None:
        return nrmse_all(truths, [p.values for p in imputed.panels], masks)[None, :]
    S = posterior[ids[0]].shape[0]
    return np.array([nrmse_all(truths, [posterior[i][s] for i in ids], masks) for s in range(S)])


# ------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    seed = _seed(args)
    n = args.n_train + args.n_test
    panels = generate_synthetic(n, args.length, args.features, seed=seed, noise_level=args.noise)
    splits = {p.panel_id: ("train" if i < args.n_train else "test") for i, p in enumerate(panels)}
    note = f"synthetic: seed={seed} T={args.length} F={args.features} noise={args.noise}"
    write_corpus(Corpus(panels, splits, panels[0].analytes, notes=note), out)
    print(f"wrote {n} panels to {out}")
    return EXIT_OK


def cmd_mask(args) -> int:
    _, plan = _settings(args)
    corpus = load_corpus(args.corpus)
    out = _out_dir(args)
    streams = np.random.SeedSequence(plan.seed).spawn(len(corpus.panels))
    masked = [apply_mask(p, plan, np.random.default_rng(s)) for p, s in zip(corpus.panels, streams)]
    notes = f"{corpus.notes}; masked {plan.mode} rate={plan.rate} len={plan.run_length} seed={plan.seed}".lstrip("; ")
    write_corpus(Corpus(masked, corpus.splits, corpus.analytes, corpus.timestamp_policy, notes), out)
    write_truth(masked, out / "truth.csv")
    n_eval = sum(int(p.eval_mask.sum()) for p in masked)
    print(f"masked {n_eval} cells; corpus and truth.csv written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, plan = _settings(args)
    corpus = load_corpus(args.corpus)
    panels = corpus.select(args.split)
    if len(panels) < 2:
        raise DataError(f"--corpus {args.corpus}: need at least 2 '{args.split}' panels, found {len(panels)}")
    out = _out_dir(args)
    (out / "config.txt").write_text(config_io.serialize(cfg, plan))

    def progress(rec):
        logger.info("epoch %d train %.6f val %.6f kl %.4g", rec.epoch, rec.train_likelihood,
                    rec.validation_likelihood, rec.complexity)

    model, history = train(panels, cfg, metrics_path=out / "metrics.jsonl", progress=progress)
    save_checkpoint(model, out / "checkpoint.json", cfg, cfg.seed)
    print(f"trained {cfg.variant} for {len(history)} epochs; checkpoint in {out}")
    return EXIT_OK


def cmd_impute(args) -> int:
    model = load_checkpoint(args.checkpoint, args.variant)
    corpus = load_corpus(args.corpus)
    panels = corpus.select(args.split)
    if not panels:
        raise DataError(f"--corpus {args.corpus}: no '{args.split}' panels")
    out = _out_dir(args)
    point = point_impute(model, panels)
    values = {p.panel_id: v for p, v in zip(panels, point)}
    if args.samples is not None:
        preds = posterior_predict(model, panels, S=args.samples, seed=_seed(args))
        np.savez(out / POSTERIOR_FILE, **{pp.panel_id: pp.samples for pp in preds})
    sub = Corpus(panels, {p.panel_id: corpus.splits[p.panel_id] for p in panels}, corpus.analytes,
                 corpus.timestamp_policy, f"imputed by {model.cfg.variant}")
    write_corpus(sub, out, values=values)
    print(f"imputed {len(panels)} panels into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not args.imputed:
        raise UsageError("evaluate: at least one --imputed directory is required")
    corpus, by_id = _scored_panels(args)
    out = _out_dir(args)
    sets = _imputed_sets(args.imputed)
    rows = np.vstack([_score_rows(by_id, imp, post) for imp, post in sets])
    table = MetricTable.from_scores(corpus.analytes, rows)
    (out / "metrics.csv").write_text(table.to_csv())
    ref = [by_id[p.panel_id] for p in sets[0][0].panels]
    truths = [p.ground_truth() for p in ref]
    masks = [p.eval_mask for p in ref]
    for name, fn in (("mean", mean_impute), ("locf", locf_impute)):
        scores = nrmse_all(truths, [fn(p) for p in ref], masks)
        (out / f"baseline_{name}.csv").write_text(MetricTable.from_scores(corpus.analytes, scores).to_csv())
    if args.baseline:
        try:
            base = MetricTable.from_csv(Path(args.baseline).read_text())
        except FileNotFoundError:
            raise DataError(f"--baseline {args.baseline}: file not found") from None
        (out / "comparison.csv").write_text(compare_runs(table, base).to_csv())
    print(f"mean-of-mean nRMSE {table.mean_of_mean:.4f} over {rows.shape[0]} run(s); tables in {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.imputed:
        raise UsageError("report: --imputed is required")
    _, by_id = _scored_panels(args)
    out = _out_dir(args)
    table = None
    if args.metrics:
        try:
            table = MetricTable.from_csv(Path(args.metrics).read_text())
        except FileNotFoundError:
            raise DataError(f"--metrics {args.metrics}: file not found") from None
    imp, post = _imputed_sets(args.imputed[:1])[0]
    pairs = []
    for p in imp.panels:
        samples = post[p.panel_id] if post is not None else p.values[None]
        pairs.append((by_id[p.panel_id], PosteriorPredictive(p.panel_id, samples)))
    written = render_report(table, pairs, out)
    for notice in written["notices"]:
        print(notice)
    print(f"wrote {len(written['overlays'])} overlays and {len(written['histograms'])} histograms to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vimpute", description="Variational time-series imputation toolchain.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--seed", type=int, help="random seed (overrides the config file)")
        p.add_argument("--config", help="flat key = value configuration file")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        return p

    s = common(sub.add_parser("synth", help="generate a synthetic corpus"))
    s.add_argument("--n-train", type=int, default=20)
    s.add_argument("--n-test", type=int, default=10)
    s.add_argument("--length", type=int, default=200, help="time steps per panel")
    s.add_argument("--features", type=int, default=4)
    s.add_argument("--noise", type=float, default=0.05)
    s.set_defaults(func=cmd_synth)

    s = common(sub.add_parser("mask", help="hide observed cells for evaluation"))
    s.add_argument("--corpus", required=True, help="manifest.json of the input corpus")
    s.add_argument("--mask-mode", choices=("individual", "consecutive"))
    s.add_argument("--mask-len", type=int)
    s.add_argument("--mask-rate", type=float)
    s.set_defaults(func=cmd_mask)

    s = common(sub.add_parser("train", help="train a model on the train split"))
    s.add_argument("--corpus", required=True)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--epochs", type=int)
    s.add_argument("--split", choices=("train", "test", "all"), default="train")
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("impute", help="impute panels from a checkpoint"))
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--variant", choices=VARIANTS, help="reject checkpoints of another variant")
    s.add_argument("--samples", type=int, help="also draw S posterior samples")
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.set_defaults(func=cmd_impute)

    s = common(sub.add_parser("evaluate", help="score imputations against the truth sidecar"))
    s.add_argument("--corpus", required=True, help="masked corpus manifest")
    s.add_argument("--truth", required=True)
    s.add_argument("--imputed", action="append", default=[], help="imputed corpus directory (repeatable)")
    s.add_argument("--baseline", help="metric table to compare against")
    s.set_defaults(func=cmd_evaluate)

    s = common(sub.add_parser("report", help="metric table and SVG plots"))
    s.add_argument("--corpus", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--imputed", action="append", default=[])
    s.add_argument("--metrics", help="metric table to include")
    s.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError) as exc:
        sys.stderr.write(f"vimpute {args.command}: {exc}\n")
        return EXIT_USAGE
    except NumericError as exc:
        sys.stderr.write(f"vimpute {args.command}: numeric failure: {exc}\n")
        return EXIT_NUMERIC
    except DataError as exc:
        sys.stderr.write(f"vimpute {args.command}: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
