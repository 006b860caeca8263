"""Pause durations around entity spans: pair extraction, summaries, Welch t-tests, histograms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .corpus import Utterance


class PairType(str, Enum):
    O_B = "O-B"
    B_I = "B-I"
    I_I = "I-I"
    B_O = "B-O"
    I_O = "I-O"

    def __str__(self) -> str:
        return self.value


PAIR_TYPES = tuple(PairType)

GROUPS: dict[str, tuple[PairType, ...]] = {
    "before": (PairType.O_B,),
    "within": (PairType.B_I, PairType.I_I),
    "after": (PairType.B_O, PairType.I_O),
}


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class PausePairSample:
    pair: PairType
    duration_ms: float
    domain: str = ""


@dataclass(frozen=True)
class GroupSummary:
    mean: float
    sd: float
    n: int


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int


@dataclass(frozen=True)
class HistogramSpec:
    bin_width_ms: float = 10.0
    clip_sd: float = 3.0
    log_normalized: bool = True

    def __post_init__(self) -> None:
        if not self.bin_width_ms > 0:
            raise StatsError("bin_width_ms must be positive")
        if not self.clip_sd > 0:
            raise StatsError("clip_sd must be positive")


def extract_pairs(corpus: Iterable[Utterance]) -> list[PausePairSample]:
    """One sample per adjacent token pair whose BIO positions form a known pair type.

    The duration is the pause after the first token of the pair. O-O, I-B and
    B-B pairs are skipped; the last token of an utterance contributes nothing.
    """
    out = []
    for utt in corpus:
        toks = utt.tokens
        for cur, nxt in zip(toks, toks[1:]):
            key = f"{cur.tag.position}-{nxt.tag.position}"
            try:
                pair = PairType(key)
            except ValueError:
                continue
            out.append(PausePairSample(pair, cur.pause_after_ms, utt.domain))
    return out


def durations(samples: Iterable[PausePairSample], pairs: Iterable[PairType]) -> list[float]:
    wanted = set(pairs)
    return [s.duration_ms for s in samples if s.pair in wanted]


def mean_sd(xs: Sequence[float]) -> tuple[float, float]:
    n = len(xs)
    m = math.fsum(xs) / n
    var = math.fsum((x - m) ** 2 for x in xs) / (n - 1)
    return m, math.sqrt(var)


def group_summaries(samples: Sequence[PausePairSample]) -> dict[str, GroupSummary]:
    """Mean and sample SD for the before / within / after groups (raw samples pooled)."""
    out = {}
    for name, pairs in GROUPS.items():
        xs = durations(samples, pairs)
        if len(xs) < 2:
            raise StatsError(f"group {name!r} has {len(xs)} samples; need at least 2")
        m, sd = mean_sd(xs)
        out[name] = GroupSummary(m, sd, len(xs))
    return out


# Student-t tail via the regularized incomplete beta function.

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    if math.isnan(t):
        return float("nan")
    if t == 0.0:
        return 1.0
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, max(0.0, betainc_regularized(df / 2.0, 0.5, x)))


def welch_t_test(a: Sequence[float], b: Sequence[float], equal_var: bool = False) -> TTestResult:
    """Two-sample t-test, two-sided. Welch by default; ``equal_var=True`` pools variances."""
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise StatsError(f"t-test needs at least 2 samples per group, got {na} and {nb}")
    ma, sa = mean_sd(a)
    mb, sb = mean_sd(b)
    va, vb = sa * sa, sb * sb
    if equal_var:
        df = na + nb - 2.0
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = pooled * (1.0 / na + 1.0 / nb)
    else:
        qa, qb = va / na, vb / nb
        se2 = qa + qb
        denom = qa * qa / (na - 1) + qb * qb / (nb - 1)
        df = se2 * se2 / denom if denom > 0 else float(na + nb - 2)
    diff = ma - mb
    if se2 == 0:
        t = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    else:
        t = diff / math.sqrt(se2)
    return TTestResult(t, df, student_t_two_sided_p(t, df), ma, mb, na, nb)


def histogram(samples: Sequence[float], spec: HistogramSpec = HistogramSpec()) -> list[tuple[float, float]]:
    """Counts over ``[0, mean + clip_sd*sd]``, through the last occupied bin.

    With ``log_normalized`` each value is ``ln(1 + count)``.
    """
    xs = [float(getattr(s, "duration_ms", s)) for s in samples]
    if not xs:
        raise StatsError("histogram of empty sample")
    m, sd = mean_sd(xs) if len(xs) > 1 else (xs[0], 0.0)
    upper = m + spec.clip_sd * sd
    kept = [x for x in xs if x <= upper]
    n_bins = int(max(kept) // spec.bin_width_ms) + 1
    counts = [0] * n_bins
    for x in kept:
        counts[int(x // spec.bin_width_ms)] += 1
    tf = math.log1p if spec.log_normalized else float
    return [(k * spec.bin_width_ms, tf(c)) for k, c in enumerate(counts)]


def long_pause_frequency(samples: Sequence[PausePairSample], threshold_ms: float = 60.0,
                         pairs: Iterable[PairType] = PAIR_TYPES) -> dict[PairType, float]:
    """Percentage of samples with duration >= threshold, per pair type."""
    out = {}
    for pair in pairs:
        xs = durations(samples, (pair,))
        if not xs:
            raise StatsError(f"no samples for pair type {pair}")
        out[pair] = 100.0 * sum(1 for x in xs if x >= threshold_ms) / len(xs)
    return out


def boundary_tests(samples: Sequence[PausePairSample], equal_var: bool = False) -> dict[str, TTestResult]:
    """Before-vs-within and after-vs-within comparisons."""
    within = durations(samples, GROUPS["within"])
    return {
        "before_vs_within": welch_t_test(durations(samples, GROUPS["before"]), within, equal_var),
        "after_vs_within": welch_t_test(durations(samples, GROUPS["after"]), within, equal_var),
    }
