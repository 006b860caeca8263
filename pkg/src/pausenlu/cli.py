"""Command-line entry point: ``pausenlu <subcommand> ...``."""

from __future__ import annotations

import argparse
import contextvars
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from . import numcore as nc
from .corpus import CorpusError, read_corpus, write_corpus
from .encoder import EncoderConfig, EncoderModel, pretrain
from .generator import GeneratorConfig, default_config, generate
from .metrics import EvalReport, compare, comparison_tsv, evaluate, format_comparison
from .pausestats import HistogramSpec
from .tagger import TaggerConfig, TaggerModel, tag_corpus, train_tagger

log = logging.getLogger("pausenlu")
_stage: contextvars.ContextVar[str] = contextvars.ContextVar("stage", default="main")


class _StageFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        record.stage = _stage.get()
        return True


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.addFilter(_StageFilter())
    handler.setFormatter(logging.Formatter("%(asctime)s [%(stage)s] %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _load_json(path: str | None) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8")) if path else {}


def cmd_generate(args: argparse.Namespace) -> None:
    if args.config:
        cfg = GeneratorConfig.load(args.config)
    else:
        cfg = default_config(n_utterances=args.n_utterances)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.n_utterances is not None and args.config:
        cfg.n_utterances = args.n_utterances
    corpus = generate(cfg)
    write_corpus(corpus, args.out)
    if args.dump_config:
        cfg.save(args.dump_config)
    log.info("wrote %d utterances to %s", len(corpus), args.out)


def cmd_analyze(args: argparse.Namespace) -> None:
    corpus = read_corpus(args.corpus)
    spec = HistogramSpec(args.bin_width, args.clip_sd, not args.raw_counts)
    summary = ex.analyze(corpus, args.out_dir, args.domain, spec, args.threshold, args.pooled)
    for k, g in summary["groups"].items():
        print(f"{k:<7} mean={g['mean']:.2f}ms sd={g['sd']:.2f} n={g['n']}")
    for k, t in summary["tests"].items():
        print(f"{k}: t={t['t_statistic']:.3f} df={t['degrees_of_freedom']:.1f} p={t['p_value']:.3e}")


def cmd_pretrain(args: argparse.Namespace) -> None:
    d = _load_json(args.config)
    d["mode"] = args.mode
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = EncoderConfig.from_dict(d)
    nc.configure(cfg.seed, cfg.torch_dtype)
    result = pretrain(read_corpus(args.corpus), cfg)
    result.model.save(args.out, {"epoch_losses": result.epoch_losses})
    ex.append_loss_log(Path(args.loss_log or f"{args.out}.losses.tsv"), cfg.mode, cfg.seed, result.epoch_losses)


def cmd_train_parser(args: argparse.Namespace) -> None:
    d = _load_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = TaggerConfig.from_dict(d)
    nc.configure(cfg.seed, cfg.torch_dtype)
    encoder = EncoderModel.load(args.encoder)
    res = train_tagger(read_corpus(args.corpus), read_corpus(args.dev), encoder, cfg)
    res.model.save(args.out, {"history": res.history, "best_epoch": res.best_epoch})
    log.info("best dev EER %.4f at epoch %d", res.best_dev_eer, res.best_epoch)


def cmd_tag(args: argparse.Namespace) -> None:
    encoder = EncoderModel.load(args.encoder)
    parser = TaggerModel.load(args.parser)
    corpus = read_corpus(args.corpus)
    preds = tag_corpus(parser, encoder, corpus)
    with open(args.out, "w", encoding="utf-8") as fh:
        for utt, labels in zip(corpus, preds):
            fh.write(json.dumps({"id": utt.id, "labels": labels}) + "\n")


def read_predictions(path: str | Path) -> dict[str, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rec = json.loads(line)
                    out[str(rec["id"])] = list(rec["labels"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CorpusError(f"{path} line {lineno}: malformed prediction ({exc})") from None
    return out


def cmd_evaluate(args: argparse.Namespace) -> None:
    report = evaluate(read_corpus(args.gold), read_predictions(args.pred),
                      ter_entities_only=args.ter_entities_only, exact_spans=args.exact_spans)
    report.save(args.out)
    print(f"EER={report.eer:.4f} TER={report.ter:.4f} UER={report.uer:.4f}")


def cmd_compare(args: argparse.Namespace) -> None:
    baseline = EvalReport.load(args.baseline)
    names = args.names or [Path(p).stem.upper() for p in args.variant]
    if len(names) != len(args.variant):
        raise SystemExit("--names must match the number of --variant reports")
    variants = {n: EvalReport.load(p) for n, p in zip(names, args.variant)}
    rows = compare(baseline, variants, args.domain)
    text = format_comparison(rows)
    Path(args.out).write_text(text + "\n", encoding="utf-8")
    Path(args.out).with_suffix(".tsv").write_text(comparison_tsv(rows), encoding="utf-8")
    print(text)


def cmd_run_experiment(args: argparse.Namespace) -> None:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.seeds is not None:
        cfg.seeds = list(range(args.seeds))
    if args.seed is not None:
        cfg.split_seed = args.seed
    report = ex.run_experiment(cfg, threads=args.threads)
    print(report.text)
    print(f"artifacts: {cfg.root}")
    if report.failures:
        log.error("%d cells failed", len(report.failures))
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out-dir", default=None)
    common.add_argument("--threads", type=int, default=1, help="parallel experiment workers")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pausenlu", parents=[common],
                                description="Pause-grounded embeddings and shallow parsing toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-utterances", type=int, default=None)
    g.add_argument("--dump-config", default=None, help="also write the effective generator config")
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("analyze", parents=[common], help="pause statistics around entity spans")
    a.add_argument("--corpus", required=True)
    a.add_argument("--domain", default=None)
    a.add_argument("--bin-width", type=float, default=10.0)
    a.add_argument("--clip-sd", type=float, default=3.0)
    a.add_argument("--threshold", type=float, default=60.0)
    a.add_argument("--raw-counts", action="store_true", help="histogram counts without ln(1+x)")
    a.add_argument("--pooled", action="store_true", help="pooled-variance t-test instead of Welch")
    a.set_defaults(func=cmd_analyze)

    pt = sub.add_parser("pretrain", parents=[common], help="pretrain an encoder")
    pt.add_argument("--mode", choices=["baseline", "hbc", "nlr"], required=True)
    pt.add_argument("--corpus", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--loss-log", default=None)
    pt.set_defaults(func=cmd_pretrain)

    tp = sub.add_parser("train-parser", parents=[common], help="train the BiLSTM-CRF parser")
    tp.add_argument("--corpus", required=True)
    tp.add_argument("--dev", required=True)
    tp.add_argument("--encoder", required=True)
    tp.add_argument("--out", required=True)
    tp.set_defaults(func=cmd_train_parser)

    t = sub.add_parser("tag", parents=[common], help="label a corpus")
    t.add_argument("--encoder", required=True)
    t.add_argument("--parser", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tag)

    e = sub.add_parser("evaluate", parents=[common], help="EER/TER/UER of predictions")
    e.add_argument("--gold", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ter-entities-only", action="store_true")
    e.add_argument("--exact-spans", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", parents=[common], help="relative change vs a baseline report")
    c.add_argument("--baseline", required=True)
    c.add_argument("--variant", nargs="+", required=True)
    c.add_argument("--names", nargs="+", default=None)
    c.add_argument("--domain", default="all")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("run-experiment", parents=[common], help="full seeded pipeline")
    r.add_argument("--seeds", type=int, default=None, help="use seeds 0..N-1")
    r.set_defaults(func=cmd_run_experiment)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    token = _stage.set(args.command)
    try:
        if args.command == "analyze" and args.out_dir is None:
            raise SystemExit("analyze requires --out-dir")
        args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        log.error("%s", exc)
        return 1
    finally:
        _stage.reset(token)
    return 0


if __name__ == "__main__":
    sys.exit(main())
