"""Entity, token and utterance error rates, and relative change against a baseline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import Utterance, entity_spans, spans_from_labels

METRICS = ("eer", "ter", "uer")


class MetricsError(ValueError):
    pass


@dataclass
class EvalReport:
    eer: float
    ter: float
    uer: float
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["eer"], d["ter"], d["uer"], dict(d.get("counts", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _rate(wrong: int, total: int) -> float:
    return wrong / total if total else 0.0


def evaluate(gold: Sequence[Utterance], predictions: Sequence[Sequence[str]] | Mapping[str, Sequence[str]],
             ter_entities_only: bool = False, exact_spans: bool = False) -> EvalReport:
    """Score predicted joint labels against gold utterances.

    An entity is a gold span; it is wrong when any of its tokens carries a
    predicted label different from gold (``exact_spans``: when the
    predicted labels do not contain exactly that span and type). TER counts
    every mislabeled token unless ``ter_entities_only``. UER counts
    utterances with at least one wrong entity, so errors on non-entity
    tokens alone leave it unchanged. Predictions are scored as given, BIO
    violations included.
    """
    if isinstance(predictions, Mapping):
        try:
            predictions = [predictions[u.id] for u in gold]
        except KeyError as exc:
            raise MetricsError(f"no prediction for utterance {exc.args[0]!r}") from None
    if len(predictions) != len(gold):
        raise MetricsError(f"{len(predictions)} predictions for {len(gold)} utterances")
    ent_total = ent_wrong = tok_total = tok_wrong = utt_wrong = 0
    for utt, pred in zip(gold, predictions):
        pred = list(pred)
        if len(pred) != len(utt):
            raise MetricsError(f"utterance {utt.id!r}: {len(pred)} predicted labels for {len(utt)} tokens")
        labels = utt.labels
        tok_total += len(labels)
        tok_wrong += sum(1 for g, p in zip(labels, pred) if g != p and (not ter_entities_only or g != "O"))
        spans = entity_spans(utt)
        pred_spans = set(spans_from_labels(pred)) if exact_spans else None
        wrong_here = 0
        for s, e, typ in spans:
            if exact_spans:
                bad = (s, e, typ) not in pred_spans
            else:
                bad = any(labels[i] != pred[i] for i in range(s, e + 1))
            wrong_here += bad
        ent_total += len(spans)
        ent_wrong += wrong_here
        utt_wrong += wrong_here > 0
    counts = {
        "entities_total": ent_total, "entities_wrong": ent_wrong,
        "tokens_total": tok_total, "tokens_wrong": tok_wrong,
        "utterances_total": len(gold), "utterances_wrong": utt_wrong,
    }
    return EvalReport(_rate(ent_wrong, ent_total), _rate(tok_wrong, tok_total),
                      _rate(utt_wrong, len(gold)), counts)


def span_prf(gold: Sequence[Utterance], predictions: Sequence[Sequence[str]]) -> dict[str, float]:
    """Exact-match span precision / recall / F1 (comparison only)."""
    tp = n_gold = n_pred = 0
    for utt, pred in zip(gold, predictions):
        g = set(entity_spans(utt))
        p = set(spans_from_labels(list(pred)))
        tp += len(g & p)
        n_gold += len(g)
        n_pred += len(p)
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_gold if n_gold else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"precision": prec, "recall": rec, "f1": f1}


@dataclass
class ComparisonRow:
    model: str
    domain: str
    delta_eer: float | None
    delta_ter: float | None
    delta_uer: float | None

    def delta(self, metric: str) -> float | None:
        return getattr(self, f"delta_{metric}")


def relative_change(baseline: float, variant: float) -> float | None:
    """Signed percent change; None when the baseline rate is zero."""
    if baseline <= 0:
        return None
    return 100.0 * (variant - baseline) / baseline


def compare(baseline: EvalReport, variants: Mapping[str, EvalReport], domain: str) -> list[ComparisonRow]:
    return [
        ComparisonRow(name, domain,
                      *(relative_change(getattr(baseline, m), getattr(rep, m)) for m in METRICS))
        for name, rep in variants.items()
    ]


def best_flags(rows: Sequence[ComparisonRow]) -> set[tuple[int, str]]:
    """``(row index, metric)`` pairs holding the lowest delta within their domain; ties all flagged."""
    flags = set()
    for domain in dict.fromkeys(r.domain for r in rows):
        idx = [i for i, r in enumerate(rows) if r.domain == domain]
        for m in METRICS:
            vals = [(i, rows[i].delta(m)) for i in idx if rows[i].delta(m) is not None]
            if not vals:
                continue
            best = min(round(v, 2) for _, v in vals)
            flags.update((i, m) for i, v in vals if round(v, 2) == best)
    return flags


def _fmt(x: float | None) -> str:
    return "N/A" if x is None else f"{x:+.2f}%"


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    """Model x domain table of relative changes; ``*`` marks the best value per domain and metric."""
    flags = best_flags(rows)
    header = f"{'Model':<8} {'Domain':<10} {'EER':>10} {'TER':>10} {'UER':>10}"
    lines = [header, "-" * len(header)]
    prev = None
    for i, r in enumerate(rows):
        cells = []
        for m in METRICS:
            cell = _fmt(r.delta(m)) + ("*" if (i, m) in flags else "")
            cells.append(f"{cell:>10}")
        model = r.model if r.model != prev else ""
        prev = r.model
        lines.append(f"{model:<8} {r.domain:<10} " + " ".join(cells))
    return "\n".join(lines)


def comparison_tsv(rows: Sequence[ComparisonRow]) -> str:
    flags = best_flags(rows)
    out = ["model\tdomain\tdelta_eer\tdelta_ter\tdelta_uer\tbest"]
    for i, r in enumerate(rows):
        vals = ["NA" if r.delta(m) is None else f"{r.delta(m):.4f}" for m in METRICS]
        best = ",".join(m for m in METRICS if (i, m) in flags)
        out.append("\t".join([r.model, r.domain, *vals, best]))
    return "\n".join(out) + "\n"
