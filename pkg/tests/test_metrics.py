import random

import pytest
from hypothesis import given, settings, strategies as st

from _reference_deltas import EXPECTED_TEXT, REFERENCE_DELTAS
from pausenlu.corpus import make_utterance
from pausenlu.metrics import (
    ComparisonRow, EvalReport, MetricsError, best_flags, compare, comparison_tsv, evaluate,
    format_comparison, relative_change, span_prf,
)


def _utt(uid, labels):
    return make_utterance(uid, "d", [(f"w{i}", lab, 0) for i, lab in enumerate(labels)])


def test_perfect_predictions():
    gold = [_utt("a", ["O", "B-S", "I-S"]), _utt("b", ["B-A", "O"])]
    r = evaluate(gold, [u.labels for u in gold])
    assert (r.eer, r.ter, r.uer) == (0.0, 0.0, 0.0)
    assert r.counts["entities_total"] == 2


def test_truncated_entity_hand_count():
    r = evaluate([_utt("a", ["O", "B-S", "I-S"])], [["O", "B-S", "O"]])
    assert r.eer == 1.0
    assert r.ter == 1 / 3
    assert r.uer == 1.0
    assert r.counts == {"entities_total": 1, "entities_wrong": 1, "tokens_total": 3, "tokens_wrong": 1,
                        "utterances_total": 1, "utterances_wrong": 1}


def test_non_entity_error_leaves_uer():
    gold = [_utt("a", ["O", "B-S"]), _utt("b", ["O", "O", "B-S"])]
    r = evaluate(gold, [["O", "B-S"], ["B-S", "O", "B-S"]])
    assert r.uer == 0.0
    assert r.eer == 0.0
    assert r.ter == 1 / 5


def test_ter_entities_only_flag():
    gold = [_utt("a", ["O", "B-S", "I-S", "O"])]
    pred = [["B-S", "B-S", "O", "O"]]
    assert evaluate(gold, pred).ter == 2 / 4
    assert evaluate(gold, pred, ter_entities_only=True).ter == 1 / 4


def test_exact_span_flag_differs_from_gold_span_rule():
    # gold span labels all correct, but the prediction extends it by one token
    gold = [_utt("a", ["B-S", "O"])]
    pred = [["B-S", "I-S"]]
    assert evaluate(gold, pred).eer == 0.0
    assert evaluate(gold, pred, exact_spans=True).eer == 1.0


def test_bio_invalid_predictions_scored_as_is():
    r = evaluate([_utt("a", ["O", "B-S", "I-S"])], [["I-S", "I-S", "I-S"]])
    assert r.counts["tokens_wrong"] == 2
    assert r.eer == 1.0


def test_mapping_predictions_and_errors():
    gold = [_utt("a", ["O"]), _utt("b", ["B-X"])]
    assert evaluate(gold, {"b": ["B-X"], "a": ["O"]}).eer == 0.0
    with pytest.raises(MetricsError, match="'b'"):
        evaluate(gold, {"a": ["O"]})
    with pytest.raises(MetricsError, match="'a'"):
        evaluate(gold, [["O", "O"], ["B-X"]])
    with pytest.raises(MetricsError):
        evaluate(gold, [["O"]])


def test_no_entities_gives_zero_eer():
    assert evaluate([_utt("a", ["O", "O"])], [["O", "O"]]).eer == 0.0


LABELS = ["O", "B-X", "I-X", "B-Y", "I-Y"]


@st.composite
def gold_and_pred(draw):
    n_utt = draw(st.integers(1, 6))
    gold, pred = [], []
    for u in range(n_utt):
        n = draw(st.integers(1, 6))
        labels, prev = [], "O"
        for _ in range(n):
            choices = ["O", "B-X", "B-Y"] + ([f"I-{prev[2:]}"] if prev != "O" else [])
            prev = draw(st.sampled_from(choices))
            labels.append(prev)
        gold.append(_utt(f"u{u}", labels))
        pred.append(draw(st.lists(st.sampled_from(LABELS), min_size=n, max_size=n)))
    return gold, pred


@given(gold_and_pred(), st.randoms())
@settings(max_examples=150, deadline=None)
def test_metric_invariants(data, rnd):
    gold, pred = data
    r = evaluate(gold, pred)
    c = r.counts
    assert 0 <= r.eer <= 1 and 0 <= r.ter <= 1 and 0 <= r.uer <= 1
    if c["entities_wrong"]:
        assert c["tokens_wrong"] >= 1
        assert r.uer >= 1 / c["utterances_total"]
    else:
        assert r.uer == 0
    order = list(range(len(gold)))
    rnd.shuffle(order)
    shuffled = evaluate([gold[i] for i in order], [pred[i] for i in order])
    assert shuffled.counts == c


def test_span_prf():
    gold = [_utt("a", ["B-X", "I-X", "O", "B-Y"])]
    out = span_prf(gold, [["B-X", "I-X", "O", "O"]])
    assert out == {"precision": 1.0, "recall": 0.5, "f1": pytest.approx(2 / 3)}


def test_report_round_trip(tmp_path):
    r = evaluate([_utt("a", ["O", "B-S", "I-S"])], [["O", "B-S", "O"]])
    r.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == r


# relative change and comparison tables

def test_relative_change_fixtures():
    assert relative_change(0.10, 0.09) == pytest.approx(-10.0, abs=1e-12)
    assert f"{relative_change(0.10, 0.09):+.1f}%" == "-10.0%"
    assert relative_change(0.25, 0.25) == 0.0
    assert relative_change(0.0, 0.1) is None


def test_compare_and_undefined_row():
    base = EvalReport(0.10, 0.0, 0.20, {})
    rows = compare(base, {"NLR": EvalReport(0.09, 0.01, 0.20, {})}, "Movies")
    assert rows[0].delta_eer == pytest.approx(-10.0)
    assert rows[0].delta_ter is None
    assert rows[0].delta_uer == 0.0
    text = format_comparison(rows)
    assert "N/A" in text and "-10.00%*" in text


def test_layout_from_published_deltas():
    rows = [ComparisonRow(*r) for r in REFERENCE_DELTAS]
    assert format_comparison(rows) == EXPECTED_TEXT
    flags = best_flags(rows)
    assert flags == {(i, m) for i in range(3, 6) for m in ("eer", "ter", "uer")}


def test_published_deltas_through_compare():
    # baseline rates chosen so the published deltas come back out of compare()
    rows = []
    for model, domain, *deltas in REFERENCE_DELTAS:
        base = EvalReport(0.2, 0.1, 0.4, {})
        variant = EvalReport(*(b * (1 + d / 100) for b, d in zip((0.2, 0.1, 0.4), deltas)), {})
        rows += compare(base, {model: variant}, domain)
    assert format_comparison(rows) == EXPECTED_TEXT
    for row, (_, _, *deltas) in zip(rows, REFERENCE_DELTAS):
        assert [row.delta_eer, row.delta_ter, row.delta_uer] == pytest.approx(deltas, abs=1e-9)


def test_ties_flag_both():
    rows = [ComparisonRow("HBC", "M", -1.0, 0.0, 0.0), ComparisonRow("NLR", "M", -1.0, 1.0, 0.0)]
    flags = best_flags(rows)
    assert {(0, "eer"), (1, "eer"), (0, "uer"), (1, "uer"), (0, "ter")} == flags


def test_comparison_tsv():
    rows = [ComparisonRow("NLR", "Movies", -8.32, -8.51, None)]
    lines = comparison_tsv(rows).splitlines()
    assert lines[0].split("\t") == ["model", "domain", "delta_eer", "delta_ter", "delta_uer", "best"]
    assert lines[1].split("\t") == ["NLR", "Movies", "-8.3200", "-8.5100", "NA", "eer,ter"]


def test_format_is_deterministic():
    rng = random.Random(0)
    rows = [ComparisonRow(m, d, rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5))
            for m in ("HBC", "NLR") for d in ("a", "b")]
    assert format_comparison(rows) == format_comparison(list(rows))
