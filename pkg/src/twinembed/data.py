"""Vocabulary, tokenization, batching, STS files and the synthetic corpus."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ArtifactIOError, ConfigError, DataError

PAD, CLS, SEP, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise DataError("vocab must start with the reserved tokens")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        if len(self.index) != len(self.tokens):
            raise DataError("vocab tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def split_words(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(corpus: Iterable[str], cap: int = 2048) -> Vocab:
    """Frequency-ranked vocabulary; ties broken lexicographically."""
    if cap < 5:
        raise ConfigError(f"vocab cap must be >= 5, got {cap}")
    counts = Counter()
    for line in corpus:
        counts.update(split_words(line))
    for tok in RESERVED:
        counts.pop(tok.lower(), None)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[: cap - len(RESERVED)]]
    return Vocab(RESERVED + tuple(words))


def tokenize(vocab: Vocab, text: str, max_len: int) -> list[int]:
    if max_len < 3:
        raise ConfigError(f"max_len must be >= 3, got {max_len}")
    ids = [vocab.id_of(w) for w in split_words(text)][: max_len - 2]
    return [CLS, *ids, SEP]


@dataclass
class Batch:
    token_ids: np.ndarray  # int64 [B, n]
    attention_mask: np.ndarray  # float64 {0,1} [B, n]

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]

    def lengths(self) -> np.ndarray:
        return self.attention_mask.sum(axis=1).astype(np.int64)


def pad_batch(rows: list[list[int]]) -> Batch:
    n = max(len(r) for r in rows)
    ids = np.full((len(rows), n), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), n), dtype=np.float64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return Batch(ids, mask)


def encode_batch(vocab: Vocab, sentences: list[str], max_len: int) -> Batch:
    return pad_batch([tokenize(vocab, s, max_len) for s in sentences])


def make_batches(
    sentences: list[str], vocab: Vocab, batch_size: int, max_len: int, seed: int
) -> Iterator[Batch]:
    """One shuffled epoch; the trailing short batch is dropped."""
    if batch_size < 2:
        raise ConfigError(f"batch size must be >= 2 for in-batch negatives, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(sentences))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        yield encode_batch(vocab, [sentences[i] for i in order[start : start + batch_size]], max_len)


# ---------------------------------------------------------------- files

@dataclass(frozen=True)
class STSExample:
    sentence_a: str
    sentence_b: str
    gold: float

    def __post_init__(self):
        if not 0.0 <= self.gold <= 5.0:
            raise DataError(f"gold score {self.gold} outside [0, 5]")


def _read_text(path) -> str:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc


def read_corpus(path) -> list[str]:
    lines = [ln.strip() for ln in _read_text(path).splitlines()]
    return [ln for ln in lines if ln]


def write_corpus(path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{ln}\n" for ln in lines), encoding="utf-8")


def read_sts(path) -> list[STSExample]:
    out = []
    for lineno, line in enumerate(_read_text(path).splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}")
        try:
            gold = float(cols[2])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad gold score {cols[2]!r}") from exc
        out.append(STSExample(cols[0], cols[1], gold))
    return out


def write_sts(path, examples: Iterable[STSExample]) -> None:
    Path(path).write_text(
        "".join(f"{ex.sentence_a}\t{ex.sentence_b}\t{ex.gold:g}\n" for ex in examples), encoding="utf-8"
    )


# ---------------------------------------------------------------- synthetic corpus

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_FUNCTION_WORDS = (
    "the", "a", "of", "to", "in", "with", "and", "was", "by", "on", "at", "for", "from",
    "near", "after", "before", "while", "over", "under", "again",
)
SLOT_KINDS = ("noun", "verb", "adj")
_SLOT_PATTERNS = (
    ("adj", "noun", "verb", "noun"),
    ("noun", "verb", "adj", "noun"),
    ("noun", "verb", "noun"),
    ("adj", "noun", "verb"),
    ("noun", "adj", "verb", "noun"),
)


@dataclass(frozen=True)
class Template:
    family: int
    tid: int
    parts: tuple[str, ...]  # literal words and "{kind}" slot markers

    @property
    def slot_kinds(self) -> tuple[str, ...]:
        return tuple(p[1:-1] for p in self.parts if p.startswith("{"))


@dataclass(frozen=True)
class SynthSentence:
    template: Template
    slots: tuple[str, ...]
    noise: tuple[tuple[int, str], ...] = ()  # (insert position, filler word); meaning-neutral

    def words(self) -> list[str]:
        it = iter(self.slots)
        out = [next(it) if p.startswith("{") else p for p in self.template.parts]
        for pos, w in self.noise:
            out.insert(min(pos, len(out)), w)
        return out

    def text(self) -> str:
        return " ".join(self.words())


def grade(a: SynthSentence, b: SynthSentence) -> float:
    """Gold similarity from shared structure; symmetric in its arguments."""
    if a.template.family != b.template.family:
        return 0.0
    if a.template.tid != b.template.tid:
        return 2.0
    changed = sum(x != y for x, y in zip(a.slots, b.slots))
    return {0: 5.0, 1: 4.0, 2: 3.0}.get(changed, 2.0)


class SynthGrammar:
    """Families of templates, each family with its own disjoint slot lexicons."""

    def __init__(
        self, seed: int, n_templates: int, words_per_kind: int = 12, n_noise: tuple[int, int] = (0, 0), noise_pool: int = 0
    ):
        if n_templates < 4:
            raise ConfigError(f"need at least 4 templates, got {n_templates}")
        if words_per_kind < 3:
            raise ConfigError(f"words_per_kind must be >= 3, got {words_per_kind}")
        if not 0 <= n_noise[0] <= n_noise[1] or (n_noise[1] > 0 and noise_pool < 1):
            raise ConfigError(f"bad filler settings n_noise={n_noise}, noise_pool={noise_pool}")
        rng = np.random.default_rng([seed, 0x5EED])
        n_families = n_templates // 2
        used: set[str] = set(_FUNCTION_WORDS)
        self.lexicon: list[dict[str, list[str]]] = []
        for _ in range(n_families):
            lex = {kind: [self._fresh_word(rng, used) for _ in range(words_per_kind)] for kind in SLOT_KINDS}
            self.lexicon.append(lex)
        self.templates: list[Template] = []
        for tid in range(n_templates):
            family = tid % n_families
            pattern = _SLOT_PATTERNS[int(rng.integers(len(_SLOT_PATTERNS)))]
            parts: list[str] = []
            for kind in pattern:
                n_fill = int(rng.integers(0, 3))
                parts.extend(rng.choice(_FUNCTION_WORDS, size=n_fill, replace=True).tolist())
                parts.append("{" + kind + "}")
            parts.extend(rng.choice(_FUNCTION_WORDS, size=int(rng.integers(0, 2))).tolist())
            self.templates.append(Template(family, tid, tuple(parts)))
        self.by_family = [[t for t in self.templates if t.family == f] for f in range(n_families)]
        self.n_noise = n_noise
        self.noise_words = [self._fresh_word(rng, used) for _ in range(noise_pool)]

    def _noise(self, rng, length: int) -> tuple[tuple[int, str], ...]:
        lo, hi = self.n_noise
        k = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
        if k == 0:
            return ()
        word = str(rng.choice(self.noise_words))
        return tuple((int(rng.integers(length + 1)), word) for _ in range(k))

    def renoise(self, rng, s: "SynthSentence") -> "SynthSentence":
        return SynthSentence(s.template, s.slots, self._noise(rng, len(s.template.parts)))

    @staticmethod
    def _fresh_word(rng, used: set[str]) -> str:
        while True:
            n_syl = int(rng.integers(2, 4))
            w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(n_syl))
            if w not in used:
                used.add(w)
                return w

    def sample(self, rng, template: Template | None = None) -> SynthSentence:
        if template is None:
            template = self.templates[int(rng.integers(len(self.templates)))]
        lex = self.lexicon[template.family]
        slots = tuple(str(rng.choice(lex[k])) for k in template.slot_kinds)
        return SynthSentence(template, slots, self._noise(rng, len(template.parts)))

    def perturb(self, rng, s: SynthSentence, n_changes: int) -> SynthSentence:
        lex = self.lexicon[s.template.family]
        slots = list(s.slots)
        for pos in rng.choice(len(slots), size=n_changes, replace=False):
            kind = s.template.slot_kinds[pos]
            choices = [w for w in lex[kind] if w != slots[pos]]
            slots[pos] = choices[int(rng.integers(len(choices)))]
        return SynthSentence(s.template, tuple(slots), self._noise(rng, len(s.template.parts)))

    def pair(self, rng, level: float) -> tuple[SynthSentence, SynthSentence]:
        a = self.sample(rng)
        if level == 5.0:
            return a, self.renoise(rng, a)
        if level in (4.0, 3.0):
            return a, self.perturb(rng, a, 1 if level == 4.0 else 2)
        if level == 2.0:
            sibs = [t for t in self.by_family[a.template.family] if t.tid != a.template.tid]
            return a, self.sample(rng, sibs[int(rng.integers(len(sibs)))])
        others = [t for t in self.templates if t.family != a.template.family]
        return a, self.sample(rng, others[int(rng.integers(len(others)))])


GOLD_LEVELS = (0.0, 2.0, 3.0, 4.0, 5.0)
# one filler word per sentence, repeated this many times, drawn from a pool this big
SYNTH_NOISE = (8, 10)
SYNTH_NOISE_POOL = 3


def synth_pairs(grammar: SynthGrammar, rng: np.random.Generator, n_pairs: int) -> list[STSExample]:
    """Graded pairs cycling through the gold levels, randomly ordered and swapped."""
    pairs = []
    for i in range(n_pairs):
        a, b = grammar.pair(rng, GOLD_LEVELS[i % len(GOLD_LEVELS)])
        if rng.random() < 0.5:
            a, b = b, a
        pairs.append(STSExample(a.text(), b.text(), grade(a, b)))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def synth_corpus(
    seed: int,
    n_templates: int,
    n_sentences: int,
    n_pairs: int = 500,
    *,
    words_per_kind: int = 12,
    n_noise: tuple[int, int] = SYNTH_NOISE,
    noise_pool: int = SYNTH_NOISE_POOL,
    pair_stream: int = 2,
) -> tuple[list[str], list[STSExample]]:
    """Training lines plus graded STS pairs, balanced across gold levels.

    Sentences carry a meaning-neutral filler word repeated several times; gold
    ignores it. ``pair_stream`` selects an independent pair sample over the same
    grammar (2 for dev, 3 for test by convention).
    """
    grammar = SynthGrammar(seed, n_templates, words_per_kind, n_noise, noise_pool)
    rng = np.random.default_rng([seed, 1])
    lines = [grammar.sample(rng).text() for _ in range(n_sentences)]
    return lines, synth_pairs(grammar, np.random.default_rng([seed, pair_stream]), n_pairs)
