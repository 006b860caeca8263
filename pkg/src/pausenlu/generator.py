"""Synthetic pause-annotated corpora with controllable boundary/within pause statistics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import BioTag, Token, Utterance

MAX_PAUSE_MS = 10_000.0

# French means for pauses before / within / after an entity span.
FRENCH_BEFORE_MS = 55.04
FRENCH_WITHIN_MS = 18.17
FRENCH_AFTER_MS = 63.86


class ConfigError(ValueError):
    pass


@dataclass
class DomainProfile:
    """Lexicon, carrier templates and pause law for one domain.

    ``entity_lexicon`` maps an entity type to whitespace-tokenized names.
    Each carrier template holds exactly one ``<E>`` slot. Pause means are
    means of the zero-inflated mixture, zeros included.
    """

    entity_lexicon: dict[str, list[str]]
    carrier_templates: list[str]
    boundary_pause_mean_ms: float = FRENCH_BEFORE_MS
    within_pause_mean_ms: float = FRENCH_WITHIN_MS
    after_pause_mean_ms: float | None = FRENCH_AFTER_MS
    other_pause_mean_ms: float = 30.0
    zero_pause_prob: float = 0.5
    noise_sd_ms: float = 60.0

    def validate(self, name: str) -> None:
        if not self.entity_lexicon or not any(self.entity_lexicon.values()):
            raise ConfigError(f"domain {name!r}: empty entity lexicon")
        if not self.carrier_templates:
            raise ConfigError(f"domain {name!r}: no carrier templates")
        for tpl in self.carrier_templates:
            if tpl.split().count(SLOT) != 1:
                raise ConfigError(f"domain {name!r}: template {tpl!r} needs exactly one {SLOT} slot")
        for etype, names in self.entity_lexicon.items():
            if any(not n.split() for n in names):
                raise ConfigError(f"domain {name!r}: empty name in lexicon {etype!r}")
        if not 0.0 <= self.zero_pause_prob < 1.0:
            raise ConfigError(f"domain {name!r}: zero_pause_prob must lie in [0, 1)")
        means = [self.boundary_pause_mean_ms, self.within_pause_mean_ms,
                 self.after_mean, self.other_pause_mean_ms]
        if any(m < 0 for m in means) or self.noise_sd_ms < 0:
            raise ConfigError(f"domain {name!r}: pause means and sd must be >= 0")
        if not (self.boundary_pause_mean_ms > self.within_pause_mean_ms
                and self.after_mean > self.within_pause_mean_ms):
            raise ConfigError(f"domain {name!r}: boundary pause mean must exceed within-span mean")

    @property
    def after_mean(self) -> float:
        return self.boundary_pause_mean_ms if self.after_pause_mean_ms is None else self.after_pause_mean_ms


SLOT = "<E>"


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_utterances: int = 1000
    domain_profiles: dict[str, DomainProfile] = field(default_factory=dict)

    def validate(self) -> None:
        if self.n_utterances < 0:
            raise ConfigError("n_utterances must be >= 0")
        if not self.domain_profiles:
            raise ConfigError("at least one domain profile is required")
        for name, prof in self.domain_profiles.items():
            prof.validate(name)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        profiles = {k: DomainProfile(**v) for k, v in d.get("domain_profiles", {}).items()}
        return cls(seed=int(d.get("seed", 0)), n_utterances=int(d.get("n_utterances", 1000)),
                   domain_profiles=profiles)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# Shared word pool: entity names are built from words that also occur in
# carrier phrases, so whether a token belongs to an entity depends on context.
_WORDS = """
thank you next love night day the time my heart life world fire blue star dream
home way light back rain summer city girl boy king queen road river moon wild
gold black white red one two lost dark sun storm ocean stone silver ghost angel
little big high young free true now again tonight today more all for with me
game show home last first
""".split()

_PEOPLE = """
alma nova rex zola kiro milo luna vega oscar leon nina remi sasha yuri ines
jade theo lou eva max noe mila hugo lina tom zoe
""".split()

_TEAMS = """
lyon paris nantes lille monaco brest reims lens nice metz rennes toulouse
marseille bordeaux auxerre angers
""".split()

_MUSIC_TEMPLATES = [
    "play <E>", "play <E> next", "play <E> now", "play <E> again", "play <E> tonight",
    "play <E> please", "play <E> one more time", "put on <E> for me", "play my <E>",
    "play the song <E>", "<E> please", "play <E> all day", "play me <E> now",
    "i want <E> again", "play some <E> tonight", "queue <E> next",
]
_MOVIE_TEMPLATES = [
    "show <E>", "watch <E> tonight", "play <E> now", "find the movie <E>",
    "show me <E> again", "watch <E> with me", "<E> show times today", "play <E>",
    "i want to watch <E> tonight", "who is in <E>", "rent <E> for me", "watch <E> again",
    "play the movie <E> now", "find <E>", "show <E> please", "movies with <E>",
]
_SPORT_TEMPLATES = [
    "score of <E>", "did <E> win", "<E> score today", "show <E> game now",
    "is <E> playing tonight", "follow <E> please", "when does <E> play again", "<E> last game",
    "news about <E> today", "play <E> highlights", "how is <E> doing now", "next game for <E>",
    "show me <E> now", "<E> tonight", "<E> game", "did <E> play today",
]


def _make_names(rng: np.random.Generator, pool: list[str], n: int,
                lengths: list[int], probs: list[float]) -> list[str]:
    names: list[str] = []
    seen = set()
    while len(names) < n:
        k = int(rng.choice(lengths, p=probs))
        words = [pool[int(i)] for i in rng.choice(len(pool), size=k, replace=False)]
        name = " ".join(words)
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def default_config(seed: int = 0, n_utterances: int = 5000, lexicon_seed: int = 12345,
                   names_per_type: int = 150) -> GeneratorConfig:
    """Three French-default domains differing mainly in entity span length.

    Mean span length is about 2.5 tokens for movies, 1.6 for music and
    1.25 for sports. All domains use the French before/within/after means.
    """
    rng = np.random.default_rng(lexicon_seed)
    half = names_per_type // 2
    music = DomainProfile(
        entity_lexicon={
            "Song": _make_names(rng, _WORDS, names_per_type, [1, 2, 3], [0.5, 0.35, 0.15]),
            "Artist": _make_names(rng, _PEOPLE, half, [1, 2], [0.4, 0.6]),
        },
        carrier_templates=list(_MUSIC_TEMPLATES),
    )
    movies = DomainProfile(
        entity_lexicon={
            "Title": _make_names(rng, _WORDS, names_per_type, [1, 2, 3, 4], [0.1, 0.4, 0.35, 0.15]),
            "Actor": _make_names(rng, _PEOPLE, half, [2, 3], [0.6, 0.4]),
        },
        carrier_templates=list(_MOVIE_TEMPLATES),
    )
    sports = DomainProfile(
        entity_lexicon={
            "Team": _make_names(rng, _TEAMS + _WORDS, names_per_type, [1, 2], [0.8, 0.2]),
            "Player": _make_names(rng, _PEOPLE, half, [1, 2], [0.4, 0.6]),
        },
        carrier_templates=list(_SPORT_TEMPLATES),
    )
    return GeneratorConfig(seed=seed, n_utterances=n_utterances,
                           domain_profiles={"music": music, "movies": movies, "sports": sports})


def _lognormal_params(mean: float, sd: float) -> tuple[float, float]:
    s2 = math.log1p((sd / mean) ** 2)
    return math.log(mean) - s2 / 2.0, math.sqrt(s2)


def _draw_pause(rng: np.random.Generator, mean: float, prof: DomainProfile) -> float:
    """Zero-inflated log-normal draw whose overall mean is ``mean``."""
    if rng.random() < prof.zero_pause_prob or mean <= 0:
        return 0.0
    comp_mean = mean / (1.0 - prof.zero_pause_prob)
    if prof.noise_sd_ms == 0:
        return min(comp_mean, MAX_PAUSE_MS)
    mu, sigma = _lognormal_params(comp_mean, prof.noise_sd_ms)
    return float(min(max(rng.lognormal(mu, sigma), 0.0), MAX_PAUSE_MS))


def _pause_mean(cur: BioTag, nxt: BioTag | None, prof: DomainProfile) -> float:
    if nxt is None:
        return prof.other_pause_mean_ms
    if cur.position == "O":
        return prof.boundary_pause_mean_ms if nxt.position == "B" else prof.other_pause_mean_ms
    if nxt.position == "I":
        return prof.within_pause_mean_ms
    # span-final: followed by O or by a new span
    return prof.after_mean


def generate_utterance(config: GeneratorConfig, index: int) -> Utterance:
    rng = np.random.default_rng([config.seed, index])
    domains = sorted(config.domain_profiles)
    domain = domains[int(rng.integers(len(domains)))]
    prof = config.domain_profiles[domain]
    template = prof.carrier_templates[int(rng.integers(len(prof.carrier_templates)))]
    etypes = sorted(t for t, names in prof.entity_lexicon.items() if names)
    etype = etypes[int(rng.integers(len(etypes)))]
    names = prof.entity_lexicon[etype]
    name = names[int(rng.integers(len(names)))].split()

    words: list[tuple[str, BioTag]] = []
    for w in template.split():
        if w == SLOT:
            words.extend((nw, BioTag("B" if j == 0 else "I", etype)) for j, nw in enumerate(name))
        else:
            words.append((w, BioTag("O")))
    toks = []
    for i, (w, tag) in enumerate(words):
        nxt = words[i + 1][1] if i + 1 < len(words) else None
        toks.append(Token(w, round(_draw_pause(rng, _pause_mean(tag, nxt, prof), prof), 3), tag))
    return Utterance(f"{domain}-{index:06d}", domain, tuple(toks))


def generate(config: GeneratorConfig) -> list[Utterance]:
    """Deterministic corpus; utterance ``i`` depends only on ``(seed, i)``."""
    config.validate()
    return [generate_utterance(config, i) for i in range(config.n_utterances)]


def split_sizes(n: int, fractions: tuple[float, ...]) -> list[int]:
    """Floor each share, then hand leftovers to the largest fractional parts (ties: earlier part)."""
    if not fractions or any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    raw = [f * n for f in fractions]
    sizes = [math.floor(r) for r in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def split(corpus: list[Utterance], fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> tuple[list[Utterance], list[Utterance], list[Utterance]]:
    sizes = split_sizes(len(corpus), tuple(fractions))
    perm = np.random.default_rng(seed).permutation(len(corpus))
    parts, start = [], 0
    for s in sizes:
        idx = sorted(int(i) for i in perm[start:start + s])
        parts.append([corpus[i] for i in idx])
        start += s
    return parts[0], parts[1], parts[2]
