import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from pausenlu import numcore as nc
from pausenlu.corpus import make_utterance
from pausenlu.encoder import (
    ABSENT, PRESENT, BinningScheme, EncoderConfig, EncoderError, EncoderModel, Vocabulary,
    _collate, bin_pause, build_vocabulary, embed, embed_batch, init_head_priors, joint_loss, loss_bert,
    loss_hbc, loss_nlr, make_example, make_pretrain_examples, n_pause_positions, normalize_pause, pretrain,
    tertile_scheme,
)
from pausenlu.generator import default_config, generate


def _utt(words, pauses=None, uid="u"):
    pauses = pauses or [0.0] * len(words)
    return make_utterance(uid, "d", [(w, "O", p) for w, p in zip(words, pauses)])


@pytest.fixture(scope="module")
def small_corpus():
    return generate(default_config(seed=3, n_utterances=500))


# vocabulary

def test_vocab_keeps_most_frequent():
    v = build_vocabulary([_utt(["a", "a", "b"])], max_size=5)
    assert "a" in v and "b" not in v
    assert len(v) == 5


def test_vocab_tie_is_lexicographic():
    v = build_vocabulary([_utt(["y", "x"])], max_size=5)
    assert "x" in v and "y" not in v


def test_vocab_specials_dense_and_distinct():
    v = build_vocabulary([_utt(["a"])], max_size=10)
    assert v.itos[:4] == ["[PAD]", "[UNK]", "[MASK]", "[CLS]"]
    assert sorted(v.stoi.values()) == list(range(len(v)))
    assert v.encode(["a", "zzz"]) == [4, v.unk_id]


def test_vocab_too_small():
    with pytest.raises(EncoderError):
        build_vocabulary([_utt(["a"])], max_size=3)
    with pytest.raises(EncoderError):
        build_vocabulary([], max_size=10)


def test_vocab_coverage_matches_count_oracle():
    corpus = generate(default_config(seed=0, n_utterances=5000))
    v = build_vocabulary(corpus, 100)
    counts = Counter()
    for u in corpus:
        counts.update(u.texts)
    kept = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:96]]
    expected = sum(counts[w] for w in kept) / sum(counts.values())
    assert v.coverage(corpus) == pytest.approx(expected, abs=1e-15)
    assert 0 < expected < 1


# binning and normalization

@pytest.mark.parametrize("d,expected", [
    (0, (ABSENT, None)), (59, (PRESENT, "S")), (60, (PRESENT, "M")),
    (310, (PRESENT, "M")), (311, (PRESENT, "L")), (10000, (PRESENT, "L")),
])
def test_bin_pause_boundaries(d, expected):
    assert bin_pause(d) == expected


def test_normalize_fixtures():
    assert normalize_pause(0) == 0.0
    assert normalize_pause(10000) == 1.0
    assert normalize_pause(55.04) == pytest.approx(0.005504, abs=1e-15)


def test_negative_pause_rejected():
    with pytest.raises(EncoderError):
        bin_pause(-1)
    with pytest.raises(EncoderError):
        normalize_pause(-0.5)


def test_binning_scheme_validation():
    with pytest.raises(EncoderError):
        BinningScheme(310, 60)
    with pytest.raises(EncoderError):
        BinningScheme(norm_divisor_ms=0)


@given(st.floats(0, 10_000, allow_subnormal=False))  # subnormal ms underflow after division
def test_bin_and_normalize_agree_on_zero(d):
    coarse, fine = bin_pause(d)
    assert 0.0 <= normalize_pause(d) <= 1.0
    assert (coarse == ABSENT) == (normalize_pause(d) == 0.0) == (fine is None)


def test_tertile_scheme_splits_nonzero():
    s = tertile_scheme([0, 0, 10, 20, 30, 40, 50, 60])
    assert (s.s_upper_ms, s.m_upper_ms) == (30, 50)


# pretraining examples

def test_pause_position_counts():
    assert n_pause_positions(4) == 1
    assert n_pause_positions(30) == 3
    assert n_pause_positions(1) == 1
    assert n_pause_positions(10) == 2  # 1.5 rounds up


def test_example_sizes_and_nonzero_guarantee():
    v = build_vocabulary([_utt(list("abcdefghij"))], 50)
    words = list("abcdefghij") * 3
    pauses = [0.0] * 30
    pauses[17] = 80.0
    for seed in range(20):
        ex = make_example(_utt(words, pauses), v, BinningScheme(), seed)
        assert len(ex.pause_positions) == 3
        assert 17 in ex.pause_positions
        assert len(set(ex.pause_positions)) == 3
        assert set(ex.mlm_positions) <= set(range(30))


def test_example_all_zero_pauses_still_sampled():
    v = build_vocabulary([_utt(list("abcd"))], 50)
    ex = make_example(_utt(list("abcd")), v, BinningScheme(), 0)
    assert len(ex.pause_positions) == 1


def test_noise_pause_excluded_from_targets():
    v = build_vocabulary([_utt(list("ab"))], 50)
    for seed in range(10):
        ex = make_example(_utt(["a", "b"], [20000.0, 0.0]), v, BinningScheme(), seed)
        assert ex.pause_positions == [1]


def test_example_deterministic_and_corruption_recorded():
    v = build_vocabulary([_utt(list("abcdefgh"))], 50)
    u = _utt(list("abcdefgh"), [1.0] * 8)
    a, b = make_example(u, v, BinningScheme(), 4), make_example(u, v, BinningScheme(), 4)
    assert a == b
    assert a.original_ids == v.encode(u.texts)
    changed = [i for i, (x, y) in enumerate(zip(a.input_ids, a.original_ids)) if x != y]
    assert set(changed) <= set(a.mlm_positions)


def test_long_utterance_truncated(caplog):
    v = build_vocabulary([_utt(["a"])], 10)
    ex = make_example(_utt(["a"] * 40), v, BinningScheme(), 0, max_tokens=31)
    assert len(ex.input_ids) == 31
    assert "truncated" in caplog.text


def test_mlm_corruption_rates():
    corpus = generate(default_config(seed=1, n_utterances=3000))
    v = build_vocabulary(corpus, 500)
    total = masked = kept = 0
    for ex in make_pretrain_examples(corpus, v, seed=0):
        for i in ex.mlm_positions:
            total += 1
            masked += ex.input_ids[i] == v.mask_id
            kept += ex.input_ids[i] == ex.original_ids[i]
    assert masked / total == pytest.approx(0.8, abs=0.03)
    assert kept / total == pytest.approx(0.1, abs=0.03)


# loss fixtures

def test_loss_bert_uniform_is_ln10():
    lp = torch.full((1, 10), -math.log(10), dtype=torch.float64)
    assert abs(loss_bert(lp, torch.tensor([3])).item() - math.log(10)) < 1e-10


def test_loss_bert_perfect_is_zero():
    lp = torch.log(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64))
    assert loss_bert(lp, torch.tensor([0])).item() == 0.0


def test_loss_bert_two_positions_ln8():
    p = torch.tensor([[0.5, 0.5, 0.0], [0.25, 0.25, 0.5]], dtype=torch.float64)
    assert abs(loss_bert(torch.log(p), torch.tensor([0, 1])).item() - math.log(8)) < 1e-10


def test_loss_bert_clamps_zero_probability(caplog):
    lp = torch.log(torch.tensor([[1.0, 0.0]], dtype=torch.float64))
    assert loss_bert(lp, torch.tensor([1])).item() == pytest.approx(-math.log(1e-12))
    assert "clamped" in caplog.text


def test_loss_hbc_absent_certain_is_zero():
    coarse = torch.log(torch.tensor([[1.0, 0.0]], dtype=torch.float64))
    fine = torch.log(torch.full((1, 3), 1 / 3, dtype=torch.float64))
    assert loss_hbc(coarse, fine, torch.tensor([False]), torch.tensor([0])).item() == 0.0


def test_loss_hbc_present_half_half_ln4():
    coarse = torch.log(torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    fine = torch.log(torch.tensor([[0.25, 0.5, 0.25]], dtype=torch.float64))
    got = loss_hbc(coarse, fine, torch.tensor([True]), torch.tensor([1])).item()
    assert abs(got - math.log(4)) < 1e-10


def test_loss_hbc_absent_positions_give_fine_no_gradient():
    coarse = torch.log_softmax(torch.randn(3, 2, dtype=torch.float64), -1)
    fine_logits = torch.randn(3, 3, dtype=torch.float64, requires_grad=True)
    loss = loss_hbc(coarse, torch.log_softmax(fine_logits, -1), torch.tensor([False] * 3), torch.tensor([0, 1, 2]))
    expected = -coarse[:, 0].sum()
    assert abs(loss.item() - expected.item()) < 1e-12
    [g] = nc.backward(loss, [fine_logits])
    assert torch.equal(g, torch.zeros_like(g))


def test_loss_nlr_fixtures():
    assert abs(loss_nlr(torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.2], dtype=torch.float64)).item()
               - 0.09) < 1e-10
    x = torch.tensor([0.1, 0.7], dtype=torch.float64)
    assert loss_nlr(x, x.clone()).item() == 0.0
    with pytest.raises(nc.ShapeError):
        loss_nlr(torch.zeros(2), torch.zeros(3))


def _heads_model(mode):
    cfg = EncoderConfig(mode=mode, layers=1, heads=2, hidden=8, ffn=16, vocab_size=20)
    vocab = Vocabulary([f"w{i}" for i in range(10)])
    return EncoderModel(cfg, vocab)


def test_loss_gradients_wrt_heads_match_finite_differences():
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for k in range(10):
        h = torch.randn(5, 8, generator=gen, dtype=torch.float64)
        m = _heads_model("hbc")
        present = torch.tensor([True, False, True, True, False])
        fine_t = torch.randint(0, 3, (5,), generator=gen)
        params = [m.coarse.weight, m.coarse.bias, m.fine.weight, m.fine.bias]
        worst = max(worst, nc.gradient_check(lambda: loss_hbc(*m.hbc_log_probs(h), present, fine_t), params))

        r = _heads_model("nlr")
        targets = torch.rand(5, generator=gen, dtype=torch.float64)
        worst = max(worst, nc.gradient_check(lambda: loss_nlr(r.nlr_predict(h), targets),
                                             [r.regress.weight, r.regress.bias]))

        t = torch.randint(0, len(m.vocab), (5,), generator=gen)
        mlm_params = [m.mlm_transform.weight, m.mlm_out.weight, m.mlm_out.bias]
        worst = max(worst, nc.gradient_check(lambda: loss_bert(m.mlm_log_probs(h), t), mlm_params))
    assert worst < 1e-4


# model and training

def test_mode_heads():
    assert _heads_model("baseline").pause_head_names() == []
    assert set(_heads_model("hbc").pause_head_names()) == {"coarse.weight", "coarse.bias", "fine.weight", "fine.bias"}
    assert set(_heads_model("nlr").pause_head_names()) == {"regress.weight", "regress.bias"}


def test_trunk_init_independent_of_mode():
    a, b = _heads_model("baseline"), _heads_model("nlr")
    for name, p in a.named_parameters():
        assert torch.equal(p, dict(b.named_parameters())[name])


def test_bad_config():
    with pytest.raises(EncoderError):
        EncoderConfig(mode="xyz")
    with pytest.raises(EncoderError):
        EncoderConfig(hidden=10, heads=4)


def _tiny_cfg(mode, **kw):
    base = dict(mode=mode, layers=2, heads=2, hidden=32, ffn=64, epochs=2, batch_size=32, lr=2e-3, seed=0)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.mark.parametrize("mode", ["baseline", "hbc", "nlr"])
def test_tiny_pretrain_loss_decreases(small_corpus, mode):
    res = pretrain(small_corpus, _tiny_cfg(mode))
    totals = [row["total"] for row in res.epoch_losses]
    assert len(totals) == 2
    assert totals[1] < totals[0]


def test_joint_loss_identity_every_step(small_corpus):
    res = pretrain(small_corpus[:100], _tiny_cfg("hbc", epochs=1, lam=0.7), log_steps=True)
    assert res.steps
    for s in res.steps:
        assert s.total == s.l_bert + 0.7 * s.l_aux
        assert math.isfinite(s.total) and s.l_bert >= 0


def test_baseline_reports_zero_aux(small_corpus):
    res = pretrain(small_corpus[:100], _tiny_cfg("baseline", epochs=1), log_steps=True)
    assert all(s.l_aux == 0.0 for s in res.steps)
    assert res.model.pause_head_names() == []


def test_lambda_zero_hbc_matches_baseline(small_corpus):
    data = small_corpus[:200]
    base = pretrain(data, _tiny_cfg("baseline"), log_steps=True)
    hbc = pretrain(data, _tiny_cfg("hbc", lam=0.0), log_steps=True)
    assert [s.l_bert for s in base.steps] == [s.l_bert for s in hbc.steps]
    heads = set(hbc.model.pause_head_names())
    fresh = EncoderModel(hbc.model.cfg, hbc.model.vocab)
    init_head_priors(fresh, data)
    trained = dict(hbc.model.named_parameters())
    for name, p in fresh.named_parameters():
        if name in heads:
            assert torch.equal(p, trained[name])


def test_head_priors_match_target_frequencies():
    v = Vocabulary(["a"])
    # two absent, two M, one L; the 50000 ms pause is noise and ignored
    u = make_utterance("u", "d", [("a", "O", p) for p in (0, 0, 300, 300, 1200, 50000)])
    hbc = EncoderModel(_tiny_cfg("hbc"), v)
    out = init_head_priors(hbc, [u])
    assert out["coarse.bias"] == pytest.approx([math.log(0.4), math.log(0.6)])
    probs = torch.softmax(hbc.fine.bias, 0).tolist()
    assert probs == pytest.approx([0.25, 0.5, 0.25])  # empty S bin floored at one count
    nlr = EncoderModel(_tiny_cfg("nlr"), v)
    init_head_priors(nlr, [u])
    assert torch.sigmoid(nlr.regress.bias).item() == pytest.approx((300 + 300 + 1200) / 5 / 10000)
    assert init_head_priors(EncoderModel(_tiny_cfg("baseline"), v), [u]) == {}


def test_pretrain_deterministic(small_corpus, tmp_path):
    a = pretrain(small_corpus[:100], _tiny_cfg("nlr", epochs=1))
    b = pretrain(small_corpus[:100], _tiny_cfg("nlr", epochs=1))
    a.model.save(tmp_path / "a")
    b.model.save(tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_round_trip(small_corpus, tmp_path):
    res = pretrain(small_corpus[:50], _tiny_cfg("hbc", epochs=1))
    res.model.save(tmp_path / "m")
    back = EncoderModel.load(tmp_path / "m")
    assert back.vocab.itos == res.model.vocab.itos
    assert np.array_equal(embed(back, small_corpus[0]), embed(res.model, small_corpus[0]))


def test_collate_targets():
    v = Vocabulary(["a", "b"])
    u = _utt(["a", "b", "a"], [0.0, 70.0, 400.0])
    ex = make_example(u, v, BinningScheme(), 0)
    ex.pause_positions = [0, 1, 2]
    b = _collate([ex], v, BinningScheme(), torch.float64)
    assert b.ids[0, 0].item() == v.cls_id
    assert b.present.tolist() == [False, True, True]
    assert b.fine.tolist()[1:] == [1, 2]
    assert b.norm.tolist() == [0.0, 0.007, 0.04]


# embeddings

def test_embed_contracts(small_corpus):
    model = pretrain(small_corpus[:50], _tiny_cfg("baseline", epochs=1)).model
    before = {k: v.clone() for k, v in model.state_dict().items()}
    u = small_corpus[0]
    e1 = embed(model, u)
    e2 = embed(model, list(u.texts))
    assert e1.shape == (len(u.tokens), 32)
    assert np.array_equal(e1, e2)
    assert embed(model, ["never-seen-token"]).shape == (1, 32)
    batch = embed_batch(model, small_corpus[:5])
    # padding changes reduction order, so batched output agrees to rounding only
    assert all(np.allclose(b, embed(model, x), atol=1e-12) for b, x in zip(batch, small_corpus[:5]))
    long = embed(model, ["a"] * 70)
    assert long.shape == (70, 32)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_embed_ignores_pauses(small_corpus):
    model = pretrain(small_corpus[:50], _tiny_cfg("nlr", epochs=1)).model
    u = small_corpus[1]
    silent = make_utterance(u.id, u.domain, [(t.text, t.tag.label, 0.0) for t in u.tokens])
    assert np.array_equal(embed(model, u), embed(model, silent))


def test_joint_loss_lambda_override(small_corpus):
    model = _heads_model("nlr")
    v = model.vocab
    exs = [make_example(u, v, BinningScheme(), 0) for u in small_corpus[:4]]
    b = _collate(exs, v, BinningScheme(), torch.float64)
    total, parts = joint_loss(model, b, None, lam=2.0)
    assert parts.total == parts.l_bert + 2.0 * parts.l_aux
    assert total.item() == parts.total
