"""Joint utterance encoder: a small BERT-style transformer with optional pause-prediction heads.

Three modes share one trunk:

* ``baseline``: masked-LM loss only.
* ``hbc``: masked-LM plus hierarchical bin classification of the pause after
  a token (present/absent, then short/medium/long).
* ``nlr``: masked-LM plus regression of the pause scaled into [0, 1].

The joint objective is ``l_bert + lam * l_aux``; every loss is a sum over
its sampled positions, so it scales with batch size.
"""

from __future__ import annotations

import logging
import math
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from . import numcore as nc
from .corpus import Utterance

log = logging.getLogger(__name__)

PAD, UNK, MASK, CLS = "[PAD]", "[UNK]", "[MASK]", "[CLS]"
SPECIALS = (PAD, UNK, MASK, CLS)
MODES = ("baseline", "hbc", "nlr")
ABSENT, PRESENT = 0, 1
FINE_LABELS = ("S", "M", "L")
PROB_FLOOR = 1e-12


class EncoderError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


# -- vocabulary ------------------------------------------------------------

class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    pad_id, unk_id, mask_id, cls_id = range(4)
    n_special = len(SPECIALS)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in tokens]

    def coverage(self, corpus: Iterable[Utterance]) -> float:
        """Fraction of running tokens that are not UNK."""
        total = known = 0
        for u in corpus:
            for t in u.texts:
                total += 1
                known += t in self.stoi
        return known / total if total else 0.0


def build_vocabulary(corpus: Sequence[Utterance], max_size: int) -> Vocabulary:
    """Most frequent tokens first, ties lexicographic; ``max_size`` counts the specials."""
    if max_size < len(SPECIALS):
        raise EncoderError(f"max_size {max_size} is smaller than the {len(SPECIALS)} special tokens")
    if not corpus:
        raise EncoderError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for u in corpus for t in u.texts)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ranked[: max_size - len(SPECIALS)]])


# -- pause targets ---------------------------------------------------------

@dataclass(frozen=True)
class BinningScheme:
    s_upper_ms: float = 60.0
    m_upper_ms: float = 310.0
    noise_cutoff_ms: float = 10_000.0
    norm_divisor_ms: float = 10_000.0

    def __post_init__(self) -> None:
        if not 0 < self.s_upper_ms < self.m_upper_ms < self.noise_cutoff_ms:
            raise EncoderError("need 0 < s_upper < m_upper < noise_cutoff")
        if not self.norm_divisor_ms > 0:
            raise EncoderError("norm_divisor must be positive")


def bin_pause(duration_ms: float, scheme: BinningScheme = BinningScheme()) -> tuple[int, str | None]:
    """``(ABSENT, None)`` for a zero pause, else ``(PRESENT, S|M|L)``.

    S is ``(0, s_upper)``, M is ``[s_upper, m_upper]``, L is above ``m_upper``.
    """
    if duration_ms < 0:
        raise EncoderError(f"negative pause {duration_ms}")
    if duration_ms == 0:
        return ABSENT, None
    if duration_ms < scheme.s_upper_ms:
        return PRESENT, "S"
    if duration_ms <= scheme.m_upper_ms:
        return PRESENT, "M"
    return PRESENT, "L"


def normalize_pause(duration_ms: float, scheme: BinningScheme = BinningScheme()) -> float:
    if duration_ms < 0:
        raise EncoderError(f"negative pause {duration_ms}")
    return duration_ms / scheme.norm_divisor_ms


def tertile_scheme(pauses: Iterable[float], base: BinningScheme = BinningScheme()) -> BinningScheme:
    """Recompute S/M boundaries by splitting the sorted nonzero pauses into three equal parts."""
    xs = sorted(p for p in pauses if 0 < p <= base.noise_cutoff_ms)
    if len(xs) < 3:
        raise EncoderError("need at least 3 nonzero pauses for tertile boundaries")
    n = len(xs)
    lo, hi = xs[n // 3], xs[(2 * n) // 3]
    if not 0 < lo < hi:
        raise EncoderError(f"degenerate tertile boundaries {lo}, {hi}")
    return BinningScheme(lo, hi, base.noise_cutoff_ms, base.norm_divisor_ms)


# -- pretraining examples --------------------------------------------------

@dataclass
class PretrainExample:
    uid: str
    input_ids: list[int]          # corrupted token ids, without CLS
    original_ids: list[int]
    mlm_positions: list[int]      # T_b
    pause_targets_ms: list[float]
    pause_positions: list[int]    # T_s


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def n_pause_positions(n_tokens: int, frac: float = 0.15, cap: int = 3) -> int:
    return max(1, min(cap, round_half_up(frac * n_tokens)))


def _stream(seed: int, uid: str, epoch: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(uid.encode("utf-8")), epoch, purpose])


def make_example(utt: Utterance, vocab: Vocabulary, scheme: BinningScheme, seed: int,
                 epoch: int = 0, max_tokens: int = 31, mlm_prob: float = 0.15,
                 pause_frac: float = 0.15, pause_cap: int = 3) -> PretrainExample:
    texts, pauses = utt.texts, utt.pauses
    if len(texts) > max_tokens:
        log.warning("utterance %s truncated from %d to %d tokens", utt.id, len(texts), max_tokens)
        texts, pauses = texts[:max_tokens], pauses[:max_tokens]
    n = len(texts)
    original = vocab.encode(texts)

    rng = _stream(seed, utt.id, epoch, 0)
    n_mask = max(1, round_half_up(mlm_prob * n))
    mlm_pos = sorted(int(i) for i in rng.choice(n, size=n_mask, replace=False))
    corrupted = list(original)
    for i in mlm_pos:
        r = rng.random()
        if r < 0.8:
            corrupted[i] = vocab.mask_id
        elif r < 0.9:
            corrupted[i] = int(rng.integers(vocab.n_special, max(len(vocab), vocab.n_special + 1)))

    prng = _stream(seed, utt.id, epoch, 1)
    eligible = [i for i in range(n) if pauses[i] <= scheme.noise_cutoff_ms]
    pause_pos: list[int] = []
    if eligible:
        k = min(n_pause_positions(n, pause_frac, pause_cap), len(eligible))
        nonzero = [i for i in eligible if pauses[i] > 0]
        if nonzero:
            first = nonzero[int(prng.integers(len(nonzero)))]
            rest = [i for i in eligible if i != first]
            pause_pos = [first] + [rest[int(j)] for j in prng.choice(len(rest), size=k - 1, replace=False)]
        else:
            pause_pos = [eligible[int(j)] for j in prng.choice(len(eligible), size=k, replace=False)]
    return PretrainExample(utt.id, corrupted, original, mlm_pos, list(pauses), sorted(pause_pos))


def make_pretrain_examples(corpus: Iterable[Utterance], vocab: Vocabulary,
                           scheme: BinningScheme = BinningScheme(), seed: int = 0,
                           epoch: int = 0, **kw) -> Iterable[PretrainExample]:
    for utt in corpus:
        yield make_example(utt, vocab, scheme, seed, epoch, **kw)


# -- losses ----------------------------------------------------------------

def _clamped_log(log_probs: torch.Tensor, what: str) -> torch.Tensor:
    floor = math.log(PROB_FLOOR)
    if bool((log_probs < floor).any()):
        log.warning("%s: %d probabilities below %.0e clamped", what, int((log_probs < floor).sum()), PROB_FLOOR)
        return torch.clamp(log_probs, min=floor)
    return log_probs


def loss_bert(log_probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """``-sum log p(true token)`` over the masked positions.

    ``log_probs`` is ``[m, V]`` (log-softmax over the vocabulary) and
    ``targets`` holds the original ids at those positions.
    """
    picked = log_probs.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    return -_clamped_log(picked, "loss_bert").sum()


def loss_hbc(coarse_log_probs: torch.Tensor, fine_log_probs: torch.Tensor,
             present: torch.Tensor, fine_targets: torch.Tensor) -> torch.Tensor:
    """``-sum (log p(coarse) + [present] log p(fine))`` over the pause positions."""
    present = present.bool()
    coarse_t = present.long()
    lc = _clamped_log(coarse_log_probs.gather(-1, coarse_t.unsqueeze(-1)).squeeze(-1), "loss_hbc")
    lf = _clamped_log(fine_log_probs.gather(-1, fine_targets.long().clamp(min=0).unsqueeze(-1)).squeeze(-1),
                      "loss_hbc")
    lf = torch.where(present, lf, torch.zeros_like(lf))
    return -(lc + lf).sum()


def loss_nlr(predicted: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Sum of squared errors between predicted and normalized pauses."""
    if predicted.shape != targets.shape:
        raise nc.ShapeError(f"loss_nlr: shapes {tuple(predicted.shape)} and {tuple(targets.shape)}")
    return ((targets - predicted) ** 2).sum()


@dataclass
class LossBreakdown:
    l_bert: float
    l_aux: float
    lam: float
    total: float
    n_mlm: int = 0
    n_pause: int = 0


# -- model -----------------------------------------------------------------

@dataclass
class EncoderConfig:
    mode: str = "baseline"
    seed: int = 0
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn: int = 128
    max_len: int = 32
    vocab_size: int = 2000
    dropout: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lam: float = 1.0
    mlm_prob: float = 0.15
    pause_frac: float = 0.15
    pause_cap: int = 3
    dtype: str = "float64"
    head_prior_init: bool = True
    binning: BinningScheme = field(default_factory=BinningScheme)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise EncoderError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.hidden % self.heads:
            raise EncoderError("hidden size must be divisible by the number of heads")
        if isinstance(self.binning, dict):
            self.binning = BinningScheme(**self.binning)
        self.betas = tuple(self.betas)

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _normal(gen: torch.Generator, dtype: torch.dtype, *shape: int, std: float = 0.02) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=gen, dtype=dtype) * std)


def _zeros(dtype: torch.dtype, *shape: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=dtype))


def _ones(dtype: torch.dtype, *shape: int) -> nn.Parameter:
    return nn.Parameter(torch.ones(*shape, dtype=dtype))


class _Linear(nn.Module):
    def __init__(self, gen: torch.Generator, dtype: torch.dtype, n_in: int, n_out: int):
        super().__init__()
        self.weight = _normal(gen, dtype, n_in, n_out)
        self.bias = _zeros(dtype, n_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nc.add(nc.matmul(x, self.weight), self.bias)


class _LayerNorm(nn.Module):
    def __init__(self, dtype: torch.dtype, n: int):
        super().__init__()
        self.gain = _ones(dtype, n)
        self.bias = _zeros(dtype, n)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nc.layer_norm(x, self.gain, self.bias)


class _Block(nn.Module):
    def __init__(self, gen: torch.Generator, cfg: EncoderConfig):
        super().__init__()
        dt, h = cfg.torch_dtype, cfg.hidden
        self.n_heads = cfg.heads
        self.qkv = _Linear(gen, dt, h, 3 * h)
        self.out = _Linear(gen, dt, h, h)
        self.ln1 = _LayerNorm(dt, h)
        self.ff1 = _Linear(gen, dt, h, cfg.ffn)
        self.ff2 = _Linear(gen, dt, cfg.ffn, h)
        self.ln2 = _LayerNorm(dt, h)

    def forward(self, x: torch.Tensor, key_bias: torch.Tensor, drop) -> torch.Tensor:
        b, t, h = x.shape
        d = h // self.n_heads
        q, k, v = self.qkv(x).view(b, t, 3, self.n_heads, d).permute(2, 0, 3, 1, 4)
        scores = nc.matmul(q, k.transpose(-1, -2)) / math.sqrt(d) + key_bias
        ctx = nc.matmul(nc.softmax(scores, -1), v).transpose(1, 2).reshape(b, t, h)
        x = self.ln1(x + drop(self.out(ctx)))
        return self.ln2(x + drop(self.ff2(nc.gelu(self.ff1(x)))))


class EncoderModel(nn.Module):
    """Trunk plus the heads its mode trains.

    Trunk and MLM head are initialised from ``seed``; pause heads from a
    separate stream, so the trunk start point does not depend on the mode.
    """

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        dt, h, v = cfg.torch_dtype, cfg.hidden, len(vocab)
        gen = torch.Generator().manual_seed(cfg.seed)
        self.tok_emb = _normal(gen, dt, v, h)
        self.pos_emb = _normal(gen, dt, cfg.max_len, h)
        self.emb_ln = _LayerNorm(dt, h)
        self.blocks = nn.ModuleList(_Block(gen, cfg) for _ in range(cfg.layers))
        self.mlm_transform = _Linear(gen, dt, h, h)
        self.mlm_ln = _LayerNorm(dt, h)
        self.mlm_out = _Linear(gen, dt, h, v)
        head_gen = torch.Generator().manual_seed(cfg.seed + 7919)
        if cfg.mode == "hbc":
            self.coarse = _Linear(head_gen, dt, h, 2)
            self.fine = _Linear(head_gen, dt, h, 3)
        elif cfg.mode == "nlr":
            self.regress = _Linear(head_gen, dt, h, 1)

    @property
    def hidden_size(self) -> int:
        return self.cfg.hidden

    def pause_head_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.split(".")[0] in ("coarse", "fine", "regress")]

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor, gen: torch.Generator | None = None) -> torch.Tensor:
        """Hidden states ``[B, T, H]`` for CLS-prefixed ``ids``; dropout iff ``gen`` is given."""
        b, t = ids.shape
        if t > self.cfg.max_len:
            raise nc.ShapeError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        p = self.cfg.dropout

        def drop(x: torch.Tensor) -> torch.Tensor:
            if gen is None or p == 0.0:
                return x
            mask = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p).to(x.dtype)
            return nc.dropout(x, mask, p)

        pad = torch.arange(t).unsqueeze(0) >= lengths.unsqueeze(1)
        key_bias = torch.zeros(b, 1, 1, t, dtype=self.tok_emb.dtype).masked_fill(pad[:, None, None, :], -1e9)
        x = nc.embedding_lookup(self.tok_emb, ids) + self.pos_emb[:t]
        x = drop(self.emb_ln(x))
        for blk in self.blocks:
            x = blk(x, key_bias, drop)
        return x

    def mlm_log_probs(self, h: torch.Tensor) -> torch.Tensor:
        return nc.log_softmax(self.mlm_out(self.mlm_ln(nc.gelu(self.mlm_transform(h)))), -1)

    def hbc_log_probs(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return nc.log_softmax(self.coarse(h), -1), nc.log_softmax(self.fine(h), -1)

    def nlr_predict(self, h: torch.Tensor) -> torch.Tensor:
        return nc.sigmoid(self.regress(h)).squeeze(-1)

    # checkpoints
    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"kind": "encoder", "config": self.cfg.to_dict(), "vocab": self.vocab.itos}
        meta.update(extra or {})
        nc.save_checkpoint(path, dict(self.state_dict()), meta)

    @classmethod
    def load(cls, path: str | Path) -> "EncoderModel":
        tensors, meta = nc.load_checkpoint(path)
        if meta.get("kind") != "encoder":
            raise EncoderError(f"{path} is not an encoder checkpoint")
        vocab = Vocabulary(meta["vocab"][len(SPECIALS):])
        model = cls(EncoderConfig.from_dict(meta["config"]), vocab)
        model.load_state_dict(tensors)
        return model


# -- batching --------------------------------------------------------------

@dataclass
class _Batch:
    ids: torch.Tensor
    lengths: torch.Tensor
    mlm_b: torch.Tensor
    mlm_p: torch.Tensor
    mlm_t: torch.Tensor
    ps_b: torch.Tensor
    ps_p: torch.Tensor
    present: torch.Tensor
    fine: torch.Tensor
    norm: torch.Tensor


def _collate(examples: Sequence[PretrainExample], vocab: Vocabulary, scheme: BinningScheme,
             dtype: torch.dtype) -> _Batch:
    t = 1 + max(len(e.input_ids) for e in examples)
    ids = torch.full((len(examples), t), vocab.pad_id, dtype=torch.long)
    lengths = torch.zeros(len(examples), dtype=torch.long)
    mb, mp, mt, sb, sp, pres, fine, norm = [], [], [], [], [], [], [], []
    for b, e in enumerate(examples):
        ids[b, 0] = vocab.cls_id
        ids[b, 1:1 + len(e.input_ids)] = torch.tensor(e.input_ids, dtype=torch.long)
        lengths[b] = 1 + len(e.input_ids)
        for i in e.mlm_positions:
            mb.append(b), mp.append(i + 1), mt.append(e.original_ids[i])
        for i in e.pause_positions:
            d = e.pause_targets_ms[i]
            coarse, f = bin_pause(d, scheme)
            sb.append(b), sp.append(i + 1), pres.append(coarse == PRESENT)
            fine.append(FINE_LABELS.index(f) if f else 0)
            norm.append(normalize_pause(d, scheme))
    lt = lambda xs: torch.tensor(xs, dtype=torch.long)  # noqa: E731
    return _Batch(ids, lengths, lt(mb), lt(mp), lt(mt), lt(sb), lt(sp),
                  torch.tensor(pres, dtype=torch.bool), lt(fine), torch.tensor(norm, dtype=dtype))


def init_head_priors(model: EncoderModel, corpus: Sequence[Utterance]) -> dict[str, list[float]]:
    """Set pause-head output biases to the training-set target prior.

    Avoids a large early gradient from heads that start far from the data
    (a sigmoid at 0.5 against targets near 0.004, say).
    """
    scheme = model.cfg.binning
    pauses = [p for u in corpus for p in u.pauses if p <= scheme.noise_cutoff_ms]
    if not pauses or model.cfg.mode == "baseline":
        return {}
    with torch.no_grad():
        if model.cfg.mode == "nlr":
            m = min(max(math.fsum(normalize_pause(p, scheme) for p in pauses) / len(pauses), 1e-6), 1 - 1e-6)
            model.regress.bias.fill_(math.log(m / (1 - m)))
            return {"regress.bias": [model.regress.bias.item()]}
        present = [bin_pause(p, scheme)[1] for p in pauses if p > 0]
        p_present = min(max(len(present) / len(pauses), 1e-6), 1 - 1e-6)
        coarse = [math.log(1 - p_present), math.log(p_present)]
        fine = [math.log(max(present.count(lab), 1) / max(len(present), 1)) for lab in FINE_LABELS]
        model.coarse.bias.copy_(torch.tensor(coarse, dtype=model.coarse.bias.dtype))
        model.fine.bias.copy_(torch.tensor(fine, dtype=model.fine.bias.dtype))
        return {"coarse.bias": coarse, "fine.bias": fine}


def joint_loss(model: EncoderModel, batch: _Batch, gen: torch.Generator | None,
               lam: float | None = None) -> tuple[torch.Tensor, LossBreakdown]:
    lam = model.cfg.lam if lam is None else lam
    h = model(batch.ids, batch.lengths, gen)
    lb = loss_bert(model.mlm_log_probs(h[batch.mlm_b, batch.mlm_p]), batch.mlm_t)
    hs = h[batch.ps_b, batch.ps_p]
    if model.cfg.mode == "hbc":
        coarse, fine = model.hbc_log_probs(hs)
        la = loss_hbc(coarse, fine, batch.present, batch.fine)
    elif model.cfg.mode == "nlr":
        la = loss_nlr(model.nlr_predict(hs), batch.norm)
    else:
        la = torch.zeros((), dtype=lb.dtype)
    total = lb + lam * la
    return total, LossBreakdown(lb.item(), la.item(), lam, total.item(), len(batch.mlm_t), len(batch.ps_p))


# -- training --------------------------------------------------------------

@dataclass
class PretrainResult:
    model: EncoderModel
    epoch_losses: list[dict] = field(default_factory=list)
    steps: list[LossBreakdown] = field(default_factory=list)


def pretrain(corpus: Sequence[Utterance], cfg: EncoderConfig, vocab: Vocabulary | None = None,
             log_steps: bool = False) -> PretrainResult:
    """Train the encoder; deterministic for a fixed ``cfg.seed`` on one thread."""
    if not corpus:
        raise EncoderError("empty pretraining corpus")
    vocab = vocab or build_vocabulary(corpus, cfg.vocab_size)
    model = EncoderModel(cfg, vocab)
    if cfg.head_prior_init:
        init_head_priors(model, corpus)
    opt = nc.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    drop_gen = torch.Generator().manual_seed(cfg.seed + 1)
    result = PretrainResult(model)
    max_tokens = cfg.max_len - 1
    for epoch in range(cfg.epochs):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch, 17]).permutation(len(corpus))
        examples = [make_example(corpus[int(i)], vocab, cfg.binning, cfg.seed, epoch, max_tokens,
                                 cfg.mlm_prob, cfg.pause_frac, cfg.pause_cap) for i in order]
        sums = {"l_bert": 0.0, "l_aux": 0.0, "total": 0.0}
        n_steps = 0
        for start in range(0, len(examples), cfg.batch_size):
            batch = _collate(examples[start:start + cfg.batch_size], vocab, cfg.binning, cfg.torch_dtype)
            opt.zero_grad()
            loss, parts = joint_loss(model, batch, drop_gen)
            if not math.isfinite(parts.total):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch} step {n_steps}: "
                    f"l_bert={parts.l_bert} l_aux={parts.l_aux} lam={parts.lam}")
            nc.backward(loss)
            opt.step()
            for k in sums:
                sums[k] += getattr(parts, k)
            n_steps += 1
            if log_steps:
                result.steps.append(parts)
        row = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
        result.epoch_losses.append(row)
        log.info("pretrain[%s] epoch %d l_bert=%.4f l_aux=%.4f total=%.4f",
                 cfg.mode, epoch, row["l_bert"], row["l_aux"], row["total"])
    model.eval()
    return result


# -- inference -------------------------------------------------------------

@torch.no_grad()
def embed_batch(model: EncoderModel, utterances: Sequence[Utterance | Sequence[str]],
                batch_size: int = 256) -> list[np.ndarray]:
    """Final-layer states per token; no masking, no dropout, no pause input."""
    was_training = model.training
    model.eval()
    window = model.cfg.max_len - 1
    pieces: list[tuple[int, list[str]]] = []
    for k, u in enumerate(utterances):
        texts = u.texts if isinstance(u, Utterance) else list(u)
        for s in range(0, len(texts), window):
            pieces.append((k, texts[s:s + window]))
    out: list[list[np.ndarray]] = [[] for _ in utterances]
    for start in range(0, len(pieces), batch_size):
        chunk = pieces[start:start + batch_size]
        t = 1 + max(len(p) for _, p in chunk)
        ids = torch.full((len(chunk), t), model.vocab.pad_id, dtype=torch.long)
        lengths = torch.zeros(len(chunk), dtype=torch.long)
        for b, (_, texts) in enumerate(chunk):
            ids[b, 0] = model.vocab.cls_id
            ids[b, 1:1 + len(texts)] = torch.tensor(model.vocab.encode(texts), dtype=torch.long)
            lengths[b] = 1 + len(texts)
        h = model(ids, lengths).numpy()
        for b, (k, texts) in enumerate(chunk):
            out[k].append(h[b, 1:1 + len(texts)].copy())
    model.train(was_training)
    return [np.concatenate(parts, axis=0) for parts in out]


def embed(model: EncoderModel, utterance: Utterance | Sequence[str]) -> np.ndarray:
    return embed_batch(model, [utterance])[0]
