"""Shallow parser: one-layer BiLSTM over frozen encoder states, linear-chain CRF on top.

CRF convention: with ``K`` labels the transition matrix is ``(K+2) x (K+2)``;
index ``K`` is START and ``K+1`` is STOP, and ``transitions[i, j]`` scores
moving from ``i`` to ``j``. A path ``y`` over ``n`` tokens scores::

    T[START, y0] + sum_t E[t, y_t] + sum_t T[y_{t-1}, y_t] + T[y_{n-1}, STOP]

so an all-zero lattice has log-partition exactly ``n * ln K``.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numcore as nc
from .corpus import Utterance
from .encoder import EncoderModel, embed_batch
from .metrics import evaluate

log = logging.getLogger(__name__)

FORBIDDEN = -1e4


class TaggerError(ValueError):
    pass


class LabelAlphabet:
    """Joint labels with dense ids; O is always id 0, the rest sorted."""

    def __init__(self, labels: Sequence[str]):
        rest = sorted(set(labels) - {"O"})
        self.labels = ["O"] + rest
        self.index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def start(self) -> int:
        return len(self.labels)

    @property
    def stop(self) -> int:
        return len(self.labels) + 1

    def encode(self, labels: Sequence[str]) -> list[int]:
        try:
            return [self.index[lab] for lab in labels]
        except KeyError as exc:
            raise TaggerError(f"label {exc.args[0]!r} not in alphabet") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.labels[i] for i in ids]

    @classmethod
    def from_corpus(cls, *corpora: Sequence[Utterance]) -> "LabelAlphabet":
        return cls([lab for c in corpora for u in c for lab in u.labels])


def bio_transition_mask(alphabet: LabelAlphabet) -> torch.Tensor:
    """Additive mask forbidding O->I-x, B-x/I-x->I-y (y != x) and START->I-x."""
    k = len(alphabet)
    mask = torch.zeros(k + 2, k + 2, dtype=torch.float64)
    for j, lab in enumerate(alphabet.labels):
        if not lab.startswith("I-"):
            continue
        typ = lab[2:]
        mask[alphabet.start, j] = FORBIDDEN
        for i, prev in enumerate(alphabet.labels):
            if prev[2:] != typ or prev == "O":
                mask[i, j] = FORBIDDEN
    return mask


# -- CRF -------------------------------------------------------------------

def _check_lattice(emissions: torch.Tensor, transitions: torch.Tensor) -> int:
    if emissions.dim() != 2 or emissions.shape[0] < 1:
        raise nc.ShapeError(f"emissions must be [n>=1, K], got {tuple(emissions.shape)}")
    k = emissions.shape[1]
    if transitions.shape != (k + 2, k + 2):
        raise nc.ShapeError(f"transitions must be {(k + 2, k + 2)}, got {tuple(transitions.shape)}")
    return k


def crf_log_partition_batch(emissions: torch.Tensor, mask: torch.Tensor, transitions: torch.Tensor) -> torch.Tensor:
    """Forward algorithm in log space. ``emissions`` is ``[B, T, K]``, ``mask`` ``[B, T]`` bool, left-aligned."""
    b, t, k = emissions.shape
    start, stop = k, k + 1
    inner = transitions[:k, :k]
    alpha = transitions[start, :k] + emissions[:, 0]
    for i in range(1, t):
        nxt = nc.logsumexp(alpha.unsqueeze(2) + inner.unsqueeze(0), dim=1) + emissions[:, i]
        alpha = torch.where(mask[:, i].unsqueeze(1), nxt, alpha)
    return nc.logsumexp(alpha + transitions[:k, stop], dim=1)


def crf_path_score_batch(emissions: torch.Tensor, mask: torch.Tensor, transitions: torch.Tensor,
                         tags: torch.Tensor) -> torch.Tensor:
    b, t, k = emissions.shape
    start, stop = k, k + 1
    m = mask.to(emissions.dtype)
    em = emissions.gather(2, tags.unsqueeze(2)).squeeze(2)
    score = transitions[start, tags[:, 0]] + (em * m).sum(1)
    if t > 1:
        score = score + (transitions[tags[:, :-1], tags[:, 1:]] * m[:, 1:]).sum(1)
    last = tags.gather(1, (mask.long().sum(1) - 1).unsqueeze(1)).squeeze(1)
    return score + transitions[last, stop]


def crf_nll_batch(emissions: torch.Tensor, mask: torch.Tensor, transitions: torch.Tensor,
                  tags: torch.Tensor) -> torch.Tensor:
    """Per-sequence negative log-likelihood ``[B]``."""
    k = emissions.shape[2]
    if tags.numel() and (int(tags.min()) < 0 or int(tags.max()) >= k):
        raise TaggerError(f"gold label ids must lie in [0, {k})")
    return (crf_log_partition_batch(emissions, mask, transitions)
            - crf_path_score_batch(emissions, mask, transitions, tags))


def crf_log_partition(emissions: torch.Tensor, transitions: torch.Tensor) -> torch.Tensor:
    _check_lattice(emissions, transitions)
    mask = torch.ones(1, emissions.shape[0], dtype=torch.bool)
    return crf_log_partition_batch(emissions.unsqueeze(0), mask, transitions)[0]


def crf_nll(emissions: torch.Tensor, transitions: torch.Tensor, gold: Sequence[int]) -> torch.Tensor:
    _check_lattice(emissions, transitions)
    if len(gold) != emissions.shape[0]:
        raise TaggerError(f"{len(gold)} gold labels for {emissions.shape[0]} tokens")
    tags = torch.as_tensor(list(gold), dtype=torch.long).unsqueeze(0)
    mask = torch.ones_like(tags, dtype=torch.bool)
    return crf_nll_batch(emissions.unsqueeze(0), mask, transitions, tags)[0]


def viterbi_decode(emissions, transitions) -> tuple[list[int], float]:
    """Best path and its score; among equal scores the lowest label id wins at each backtrack step."""
    em = np.asarray(emissions.detach() if isinstance(emissions, torch.Tensor) else emissions, dtype=np.float64)
    tr = np.asarray(transitions.detach() if isinstance(transitions, torch.Tensor) else transitions,
                    dtype=np.float64)
    n, k = em.shape
    if tr.shape != (k + 2, k + 2):
        raise nc.ShapeError(f"transitions must be {(k + 2, k + 2)}, got {tr.shape}")
    inner = tr[:k, :k]
    score = tr[k, :k] + em[0]
    back = np.zeros((n, k), dtype=np.int64)
    for i in range(1, n):
        cand = score[:, None] + inner
        back[i] = np.argmax(cand, axis=0)  # first max = lowest id
        score = cand[back[i], np.arange(k)] + em[i]
    final = score + tr[:k, k + 1]
    best = int(np.argmax(final))
    path = [best]
    for i in range(n - 1, 0, -1):
        path.append(int(back[i, path[-1]]))
    path.reverse()
    return path, float(final[best])


# -- model -----------------------------------------------------------------

@dataclass
class TaggerConfig:
    seed: int = 0
    hidden: int = 64
    epochs: int = 50
    patience: int = 5
    batch_size: int = 32
    lr: float = 5e-3
    bio_constraints: bool = False
    dtype: str = "float64"

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaggerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class _LSTMDirection(nn.Module):
    def __init__(self, gen: torch.Generator, dtype: torch.dtype, n_in: int, hidden: int):
        super().__init__()
        bound = 1.0 / math.sqrt(hidden)

        def uniform(*shape):
            return nn.Parameter((torch.rand(*shape, generator=gen, dtype=dtype) * 2 - 1) * bound)

        self.w_in = uniform(n_in, 4 * hidden)
        self.w_rec = uniform(hidden, 4 * hidden)
        bias = torch.zeros(4 * hidden, dtype=dtype)
        bias[hidden:2 * hidden] = 1.0  # forget gate
        self.bias = nn.Parameter(bias)
        self.hidden = hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        hsz = self.hidden
        pre = nc.matmul(x, self.w_in) + self.bias
        h = x.new_zeros(b, hsz)
        c = x.new_zeros(b, hsz)
        outs = []
        for i in range(t):
            gates = pre[:, i] + nc.matmul(h, self.w_rec)
            ig = nc.sigmoid(nc.slice_(gates, 0, hsz))
            fg = nc.sigmoid(nc.slice_(gates, hsz, 2 * hsz))
            gg = nc.tanh(nc.slice_(gates, 2 * hsz, 3 * hsz))
            og = nc.sigmoid(nc.slice_(gates, 3 * hsz, 4 * hsz))
            c = fg * c + ig * gg
            h = og * nc.tanh(c)
            outs.append(h)
        return torch.stack(outs, dim=1)


def _reverse_index(lengths: torch.Tensor, t: int) -> torch.Tensor:
    pos = torch.arange(t).unsqueeze(0).expand(len(lengths), t)
    rev = lengths.unsqueeze(1) - 1 - pos
    return torch.where(rev >= 0, rev, pos)


class TaggerModel(nn.Module):
    def __init__(self, cfg: TaggerConfig, alphabet: LabelAlphabet, n_in: int):
        super().__init__()
        self.cfg = cfg
        self.alphabet = alphabet
        self.n_in = n_in
        dt, k = cfg.torch_dtype, len(alphabet)
        gen = torch.Generator().manual_seed(cfg.seed)
        self.fwd = _LSTMDirection(gen, dt, n_in, cfg.hidden)
        self.bwd = _LSTMDirection(gen, dt, n_in, cfg.hidden)
        bound = 1.0 / math.sqrt(2 * cfg.hidden)
        self.w_emit = nn.Parameter((torch.rand(2 * cfg.hidden, k, generator=gen, dtype=dt) * 2 - 1) * bound)
        self.b_emit = nn.Parameter(torch.zeros(k, dtype=dt))
        self.transitions = nn.Parameter(torch.zeros(k + 2, k + 2, dtype=dt))
        mask = bio_transition_mask(alphabet).to(dt) if cfg.bio_constraints else torch.zeros(k + 2, k + 2, dtype=dt)
        self.register_buffer("transition_mask", mask, persistent=False)

    def effective_transitions(self) -> torch.Tensor:
        return self.transitions + self.transition_mask

    def emissions(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        t = x.shape[1]
        rev = _reverse_index(lengths, t)
        gather = rev.unsqueeze(2).expand(-1, -1, x.shape[2])
        hf = self.fwd(x)
        hb = self.bwd(x.gather(1, gather))
        hb = hb.gather(1, rev.unsqueeze(2).expand(-1, -1, hb.shape[2]))
        return nc.matmul(nc.concat([hf, hb], -1), self.w_emit) + self.b_emit

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"kind": "tagger", "config": self.cfg.to_dict(), "labels": self.alphabet.labels, "n_in": self.n_in}
        meta.update(extra or {})
        nc.save_checkpoint(path, dict(self.state_dict()), meta)

    @classmethod
    def load(cls, path: str | Path) -> "TaggerModel":
        tensors, meta = nc.load_checkpoint(path)
        if meta.get("kind") != "tagger":
            raise TaggerError(f"{path} is not a tagger checkpoint")
        model = cls(TaggerConfig.from_dict(meta["config"]), LabelAlphabet(meta["labels"]), meta["n_in"])
        model.load_state_dict(tensors)
        return model


def _pad(features: Sequence[np.ndarray], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(f) for f in features], dtype=torch.long)
    t, d = int(lengths.max()), features[0].shape[1]
    x = torch.zeros(len(features), t, d, dtype=dtype)
    for i, f in enumerate(features):
        x[i, :len(f)] = torch.from_numpy(np.asarray(f)).to(dtype)
    mask = torch.arange(t).unsqueeze(0) < lengths.unsqueeze(1)
    return x, lengths, mask


@torch.no_grad()
def decode_features(model: TaggerModel, features: Sequence[np.ndarray], batch_size: int = 256) -> list[list[str]]:
    out = []
    trans = model.effective_transitions().detach().numpy()
    for s in range(0, len(features), batch_size):
        chunk = features[s:s + batch_size]
        x, lengths, _ = _pad(chunk, model.cfg.torch_dtype)
        em = model.emissions(x, lengths).numpy()
        for i, n in enumerate(lengths.tolist()):
            path, _ = viterbi_decode(em[i, :n], trans)
            out.append(model.alphabet.decode(path))
    return out


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    model: TaggerModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_dev_eer: float = float("inf")


def train_tagger_on_features(train: Sequence[Utterance], train_feats: Sequence[np.ndarray],
                             dev: Sequence[Utterance], dev_feats: Sequence[np.ndarray],
                             cfg: TaggerConfig, alphabet: LabelAlphabet | None = None) -> TrainResult:
    """Minimize mean CRF NLL; keep the parameters with the lowest dev EER (patience-based stop)."""
    if not train:
        raise TaggerError("empty training corpus")
    alphabet = alphabet or LabelAlphabet.from_corpus(train, dev)
    model = TaggerModel(cfg, alphabet, train_feats[0].shape[1])
    opt = nc.Adam(model.parameters(), lr=cfg.lr, clip_norm=5.0)
    gold = [torch.tensor(alphabet.encode(u.labels), dtype=torch.long) for u in train]
    result = TrainResult(model)
    best_state, stale = None, 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, 29]).permutation(len(train))
        total, n_seq = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = [int(i) for i in order[s:s + cfg.batch_size]]
            x, lengths, mask = _pad([train_feats[i] for i in idx], cfg.torch_dtype)
            tags = torch.zeros(len(idx), x.shape[1], dtype=torch.long)
            for r, i in enumerate(idx):
                tags[r, :len(gold[i])] = gold[i]
            opt.zero_grad()
            nll = crf_nll_batch(model.emissions(x, lengths), mask, model.effective_transitions(), tags)
            loss = nll.mean()
            if not math.isfinite(loss.item()):
                raise TaggerError(f"non-finite tagger loss at epoch {epoch}, batch starting {s}")
            nc.backward(loss)
            opt.step()
            total += nll.sum().item()
            n_seq += len(idx)
        dev_eer = evaluate(dev, decode_features(model, dev_feats)).eer if dev else float("nan")
        result.history.append({"epoch": epoch, "train_nll": total / n_seq, "dev_eer": dev_eer})
        log.info("tagger epoch %d nll=%.4f dev_eer=%.4f", epoch, total / n_seq, dev_eer)
        if not dev or dev_eer < result.best_dev_eer:
            result.best_dev_eer, result.best_epoch = dev_eer, epoch
            best_state, stale = copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return result


def train_tagger(train: Sequence[Utterance], dev: Sequence[Utterance], encoder: EncoderModel,
                 cfg: TaggerConfig) -> TrainResult:
    """Embeddings come from the frozen encoder only; pauses never reach the parser."""
    return train_tagger_on_features(train, embed_batch(encoder, train), dev, embed_batch(encoder, dev), cfg)


def tag(model: TaggerModel, encoder: EncoderModel, utterance: Utterance | Sequence[str]) -> list[str]:
    return decode_features(model, embed_batch(encoder, [utterance]))[0]


def tag_corpus(model: TaggerModel, encoder: EncoderModel, corpus: Sequence[Utterance]) -> list[list[str]]:
    return decode_features(model, embed_batch(encoder, corpus))
