"""Seeded experiment runner: generate, analyze, pretrain, train parsers, evaluate, compare.

All artifacts live under ``<out_dir>/<config hash>/`` at paths fixed by the
cell coordinates, and a stage whose output already exists is skipped, so an
interrupted run resumes where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch

from . import numcore as nc
from . import pausestats as ps
from .corpus import CorpusError, Utterance, corpus_stats, read_corpus, write_corpus
from .encoder import EncoderConfig, EncoderModel, embed_batch, pretrain
from .generator import GeneratorConfig, default_config, generate, split
from .metrics import METRICS, ComparisonRow, EvalReport, comparison_tsv, evaluate, format_comparison
from .tagger import LabelAlphabet, TaggerConfig, TaggerModel, decode_features, train_tagger_on_features

log = logging.getLogger(__name__)


def _default_encoder() -> dict:
    return {"epochs": 10, "dtype": "float32", "head_prior_init": True}


def _default_tagger() -> dict:
    return {"dtype": "float32"}


@dataclass
class ExperimentConfig:
    """Defaults: 3 synthetic domains, 3 modes, 10 seeds, 5k utterances, tiny models.

    The encoder pretrains on the whole train split (text and pauses, no
    labels); each domain's parser trains on the first ``labeled_fraction``
    of that domain's train utterances.
    """

    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    modes: list[str] = field(default_factory=lambda: ["baseline", "hbc", "nlr"])
    domains: list[str] | None = None
    generator: dict = field(default_factory=lambda: default_config(seed=0, n_utterances=5000).to_dict())
    encoder: dict = field(default_factory=_default_encoder)
    tagger: dict = field(default_factory=_default_tagger)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    labeled_fraction: float = 0.25
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if "baseline" not in self.modes:
            raise ValueError("the baseline mode is required for comparison")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        self.split_fractions = tuple(self.split_fractions)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        base = cls()
        merged = {k: d.get(k, getattr(base, k)) for k in cls.__dataclass_fields__}
        return cls(**merged)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def root(self) -> Path:
        return Path(self.out_dir) / self.config_hash()

    def gen_config(self) -> GeneratorConfig:
        return GeneratorConfig.from_dict(self.generator)

    def domain_list(self) -> list[str]:
        return list(self.domains) if self.domains else sorted(self.gen_config().domain_profiles)

    def encoder_config(self, seed: int, mode: str) -> EncoderConfig:
        return EncoderConfig.from_dict({**self.encoder, "seed": seed, "mode": mode})

    def tagger_config(self, seed: int) -> TaggerConfig:
        return TaggerConfig.from_dict({**self.tagger, "seed": seed})


# -- paths -----------------------------------------------------------------

def encoder_path(cfg: ExperimentConfig, seed: int, mode: str) -> Path:
    return cfg.root / "encoders" / f"seed{seed}_{mode}.ckpt"


def parser_path(cfg: ExperimentConfig, seed: int, mode: str, domain: str) -> Path:
    return cfg.root / "parsers" / f"seed{seed}_{mode}_{domain}.ckpt"


def report_path(cfg: ExperimentConfig, seed: int, mode: str, domain: str) -> Path:
    return cfg.root / "reports" / f"seed{seed}_{mode}_{domain}.json"


# -- stages ----------------------------------------------------------------

def prepare_data(cfg: ExperimentConfig) -> dict[str, list[Utterance]]:
    root = cfg.root
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    names = ("corpus", "train", "dev", "test")
    paths = {n: root / f"{n}.jsonl" for n in names}
    if all(p.exists() for p in paths.values()):
        return {n: read_corpus(p) for n, p in paths.items()}
    corpus = generate(cfg.gen_config())
    tr, dv, te = split(corpus, cfg.split_fractions, cfg.split_seed)
    data = {"corpus": corpus, "train": tr, "dev": dv, "test": te}
    for n in names:
        write_corpus(data[n], paths[n])
    log.info("generated %d utterances (train %d, dev %d, test %d)", len(corpus), len(tr), len(dv), len(te))
    return data


def labeled_subset(train: Sequence[Utterance], domain: str, fraction: float) -> list[Utterance]:
    rows = [u for u in train if u.domain == domain]
    return rows[: max(1, math.ceil(fraction * len(rows)))]


def analyze(corpus: Sequence[Utterance], out_dir: str | Path, domain: str | None = None,
            spec: ps.HistogramSpec = ps.HistogramSpec(), threshold_ms: float = 60.0,
            equal_var: bool = False) -> dict:
    """Write pause summaries, t-tests, histograms and long-pause frequencies; return the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [u for u in corpus if domain is None or u.domain == domain]
    samples = ps.extract_pairs(rows)
    summary: dict = {"domain": domain or "all", "n_utterances": len(rows), "n_pairs": len(samples)}
    stats = corpus_stats(rows)
    summary["corpus_stats"] = asdict(stats)
    groups = ps.group_summaries(samples)
    summary["groups"] = {k: asdict(v) for k, v in groups.items()}
    summary["tests"] = {k: asdict(v) for k, v in ps.boundary_tests(samples, equal_var).items()}
    present = [p for p in ps.PAIR_TYPES if ps.durations(samples, [p])]
    freq = ps.long_pause_frequency(samples, threshold_ms, present)
    summary["long_pause_pct"] = {str(k): v for k, v in freq.items()}

    with open(out / "summaries.tsv", "w", encoding="utf-8") as fh:
        fh.write("group\tmean_ms\tsd_ms\tn\n")
        for k, g in groups.items():
            fh.write(f"{k}\t{g.mean:.4f}\t{g.sd:.4f}\t{g.n}\n")
        for k, t in summary["tests"].items():
            fh.write(f"# {k}: t={t['t_statistic']:.4f} df={t['degrees_of_freedom']:.2f} p={t['p_value']:.3e}\n")
    with open(out / "long_pause_frequency.tsv", "w", encoding="utf-8") as fh:
        fh.write("pair\tpercent\n")
        for k, v in summary["long_pause_pct"].items():
            fh.write(f"{k}\t{v:.4f}\n")
    for name, pairs in ps.GROUPS.items():
        xs = ps.durations(samples, pairs)
        with open(out / f"histogram_{name}.tsv", "w", encoding="utf-8") as fh:
            fh.write("bin_ms\tvalue\n")
            for lo, v in ps.histogram(xs, spec):
                fh.write(f"{lo:g}\t{v:.6f}\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return summary


def append_loss_log(path: Path, mode: str, seed: int, epoch_losses: Sequence[dict]) -> None:
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write("mode\tseed\tepoch\tl_bert\tl_aux\ttotal\n")
        for row in epoch_losses:
            fh.write(f"{mode}\t{seed}\t{row['epoch']}\t{row['l_bert']:.6f}\t{row['l_aux']:.6f}\t{row['total']:.6f}\n")


def run_pretrain_cell(cfg: ExperimentConfig, seed: int, mode: str, train: Sequence[Utterance]) -> EncoderModel:
    path = encoder_path(cfg, seed, mode)
    if path.exists():
        return EncoderModel.load(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ecfg = cfg.encoder_config(seed, mode)
    nc.configure(seed, ecfg.torch_dtype)
    result = pretrain(train, ecfg)
    append_loss_log(cfg.root / "encoders" / "losses.tsv", mode, seed, result.epoch_losses)
    tmp = path.with_suffix(".tmp")
    result.model.save(tmp, {"epoch_losses": result.epoch_losses})
    tmp.replace(path)
    return result.model


def run_parser_cell(cfg: ExperimentConfig, seed: int, mode: str, domain: str, encoder: EncoderModel,
                    data: Mapping[str, Sequence[Utterance]]) -> EvalReport:
    rpath = report_path(cfg, seed, mode, domain)
    if rpath.exists() and parser_path(cfg, seed, mode, domain).exists():
        return EvalReport.load(rpath)
    tcfg = cfg.tagger_config(seed)
    nc.configure(seed, tcfg.torch_dtype)
    train = labeled_subset(data["train"], domain, cfg.labeled_fraction)
    dev = [u for u in data["dev"] if u.domain == domain]
    test = [u for u in data["test"] if u.domain == domain]
    alphabet = LabelAlphabet.from_corpus(train, dev)
    res = train_tagger_on_features(train, embed_batch(encoder, train), dev, embed_batch(encoder, dev),
                                   tcfg, alphabet)
    preds = decode_features(res.model, embed_batch(encoder, test))
    report = evaluate(test, preds)
    ppath = parser_path(cfg, seed, mode, domain)
    ppath.parent.mkdir(parents=True, exist_ok=True)
    res.model.save(ppath, {"history": res.history, "best_epoch": res.best_epoch})
    rpath.parent.mkdir(parents=True, exist_ok=True)
    report.save(rpath)
    return report


def run_seed(cfg: ExperimentConfig, seed: int) -> tuple[dict, list[dict]]:
    """All (mode, domain) cells for one seed. Failures are recorded, not raised."""
    data = prepare_data(cfg)
    results: dict = {}
    failures: list[dict] = []
    for mode in cfg.modes:
        try:
            encoder = run_pretrain_cell(cfg, seed, mode, data["train"])
        except Exception as exc:  # noqa: BLE001 - one failed cell must not stop the others
            log.error("pretrain seed=%d mode=%s failed: %s", seed, mode, exc)
            failures.append({"seed": seed, "mode": mode, "domain": None, "error": str(exc)})
            continue
        before = {k: v.clone() for k, v in encoder.state_dict().items()}
        for domain in cfg.domain_list():
            try:
                rep = run_parser_cell(cfg, seed, mode, domain, encoder, data)
                results[(mode, domain)] = rep
                log.info("seed=%d mode=%s domain=%s eer=%.4f ter=%.4f uer=%.4f",
                         seed, mode, domain, rep.eer, rep.ter, rep.uer)
            except Exception as exc:  # noqa: BLE001
                log.error("parser seed=%d mode=%s domain=%s failed: %s", seed, mode, domain, exc)
                failures.append({"seed": seed, "mode": mode, "domain": domain, "error": str(exc)})
        after = encoder.state_dict()
        if any(not torch.equal(before[k], after[k]) for k in before):
            raise AssertionError("encoder parameters changed during parser training")
    return results, failures


@dataclass
class ExperimentReport:
    per_seed: dict                  # seed -> {(mode, domain): EvalReport}
    failures: list[dict]
    analysis: dict
    table1: dict
    means: dict                     # (mode, domain) -> {metric: mean}
    rows: list[ComparisonRow]
    text: str


def aggregate(per_seed: Mapping[int, Mapping[tuple[str, str], EvalReport]], modes: Sequence[str],
              domains: Sequence[str]) -> dict:
    means = {}
    for mode in modes:
        for domain in domains:
            reps = [cells[(mode, domain)] for cells in per_seed.values() if (mode, domain) in cells]
            if reps:
                means[(mode, domain)] = {
                    **{m: statistics.fmean(getattr(r, m) for r in reps) for m in METRICS},
                    **{f"{m}_sd": statistics.stdev(getattr(r, m) for r in reps) if len(reps) > 1 else 0.0
                       for m in METRICS},
                    "n_runs": len(reps),
                }
    return means


def comparison_rows(means: Mapping, modes: Sequence[str], domains: Sequence[str]) -> list[ComparisonRow]:
    from .metrics import relative_change
    rows = []
    for mode in modes:
        if mode == "baseline":
            continue
        for domain in domains:
            base, var = means.get(("baseline", domain)), means.get((mode, domain))
            if base is None or var is None:
                rows.append(ComparisonRow(mode.upper(), domain, None, None, None))
            else:
                rows.append(ComparisonRow(mode.upper(), domain,
                                          *(relative_change(base[m], var[m]) for m in METRICS)))
    return rows


def report_render(means: Mapping, rows: Sequence[ComparisonRow], table1: Mapping[str, Mapping] | None = None,
                  modes: Sequence[str] = (), domains: Sequence[str] = ()) -> tuple[str, dict[str, str]]:
    """Human-readable report plus delimited tables (name -> TSV text)."""
    parts = []
    tsv: dict[str, str] = {}
    if table1:
        head = f"{'Domain':<10} {'#utt':>7} {'tok/utt':>8} {'entity%':>8} {'pause/tok':>10}"
        lines = [head, "-" * len(head)]
        t1 = ["domain\tn_utterances\tavg_tokens\tentity_token_fraction\tavg_pause_ms"]
        for d, s in table1.items():
            lines.append(f"{d:<10} {s['n_utterances']:>7} {s['avg_tokens_per_utterance']:>8.2f} "
                         f"{100 * s['entity_token_fraction']:>7.2f}% {s['avg_pause_per_token_ms']:>8.2f}ms")
            t1.append(f"{d}\t{s['n_utterances']}\t{s['avg_tokens_per_utterance']:.4f}\t"
                      f"{s['entity_token_fraction']:.4f}\t{s['avg_pause_per_token_ms']:.4f}")
        parts.append("Corpus statistics\n" + "\n".join(lines))
        tsv["table1.tsv"] = "\n".join(t1) + "\n"
    if modes and domains:
        head = f"{'Model':<9} {'Domain':<10} {'runs':>4} " + " ".join(f"{m.upper():>16}" for m in METRICS)
        lines = [head, "-" * len(head)]
        ab = ["model\tdomain\tn_runs\t" + "\t".join(f"{m}\t{m}_sd" for m in METRICS)]
        for mode in modes:
            for d in domains:
                s = means.get((mode, d))
                if s is None:
                    lines.append(f"{mode:<9} {d:<10} {'N/A':>4}")
                    ab.append(f"{mode}\t{d}\t0" + "\tNA\tNA" * len(METRICS))
                    continue
                cells = " ".join(f"{s[m]:>8.4f}±{s[m + '_sd']:<7.4f}" for m in METRICS)
                lines.append(f"{mode:<9} {d:<10} {s['n_runs']:>4} {cells}")
                ab.append(f"{mode}\t{d}\t{s['n_runs']}\t" + "\t".join(f"{s[m]:.6f}\t{s[m + '_sd']:.6f}" for m in METRICS))
        parts.append("Mean error rates over seeds\n" + "\n".join(lines))
        tsv["error_rates.tsv"] = "\n".join(ab) + "\n"
    parts.append("Relative change vs baseline (negative = fewer errors, * = best)\n" + format_comparison(rows))
    tsv["comparison.tsv"] = comparison_tsv(rows)
    return "\n\n".join(parts) + "\n", tsv


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    data = prepare_data(cfg)
    domains = cfg.domain_list()
    analysis = {"all": analyze(data["corpus"], cfg.root / "analysis" / "all")}
    for d in domains:
        try:
            analysis[d] = analyze(data["corpus"], cfg.root / "analysis" / d, domain=d)
        except (ps.StatsError, CorpusError) as exc:
            log.warning("analysis for domain %s skipped: %s", d, exc)
    table1 = {}
    for d in domains:
        rows = [u for u in data["corpus"] if u.domain == d]
        if rows:
            table1[d] = asdict(corpus_stats(rows))
    table1["all"] = asdict(corpus_stats(data["corpus"]))

    per_seed: dict = {}
    failures: list[dict] = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        outs = [run_seed(cfg, s) for s in cfg.seeds]
    for seed, (res, fail) in zip(cfg.seeds, outs):
        per_seed[seed] = res
        failures.extend(fail)

    means = aggregate(per_seed, cfg.modes, domains)
    rows = comparison_rows(means, cfg.modes, domains)
    text, tsv = report_render(means, rows, table1, cfg.modes, domains)
    for name, body in tsv.items():
        (cfg.root / name).write_text(body, encoding="utf-8")
    (cfg.root / "report.txt").write_text(text, encoding="utf-8")
    summary = {
        "config_hash": cfg.config_hash(),
        "means": {f"{m}/{d}": v for (m, d), v in means.items()},
        "comparison": [asdict(r) for r in rows],
        "failures": failures,
        "per_seed": {str(s): {f"{m}/{d}": r.to_dict() for (m, d), r in cells.items()}
                     for s, cells in per_seed.items()},
    }
    (cfg.root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return ExperimentReport(per_seed, failures, analysis, table1, means, rows, text)
