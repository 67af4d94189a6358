"""Corpus readers, label sets and maps, vocabulary, and support sampling.

Tags use the IO scheme throughout: "O" or "I-<class>".  BIO input is
normalized at ingest (B-X becomes I-X).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .rngutil import make_rng

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)

O_TAG = "O"
DEFAULT_O_PHRASE = "other"


class DataError(ValueError):
    """Malformed input data (file contents, constraint violations)."""


def normalize_tag(tag: str) -> str:
    """BIO -> IO: B-X and I-X both become I-X; O stays O."""
    if tag == O_TAG:
        return O_TAG
    if tag.startswith(("B-", "I-")):
        cls = tag[2:]
        if not cls:
            raise DataError(f"tag {tag!r} has an empty class name")
        return "I-" + cls
    raise DataError(f"unrecognized tag {tag!r} (expected O, B-cls, or I-cls)")


def tag_class(tag: str) -> Optional[str]:
    """Entity class of an IO tag, or None for O."""
    return None if tag == O_TAG else tag[2:]


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags) or len(self.tokens) == 0:
            raise DataError(
                f"sentence needs equal, non-zero token/tag counts "
                f"({len(self.tokens)} vs {len(self.tags)})")

    def entity_classes(self) -> set[str]:
        return {c for c in (tag_class(t) for t in self.tags) if c is not None}

    def entity_span_counts(self) -> Counter:
        """Number of maximal same-class I-runs, per class."""
        counts: Counter = Counter()
        prev = O_TAG
        for tag in self.tags:
            cls = tag_class(tag)
            if cls is not None and tag != prev:
                counts[cls] += 1
            prev = tag
        return counts


@dataclass(frozen=True)
class LabelSet:
    """Ordered entity class names; O is implicit and always last."""

    classes: tuple[str, ...]
    role: str = "source"  # "source" or "target"; disjointness is the caller's contract

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise DataError("duplicate class names in label set")
        if O_TAG in self.classes:
            raise DataError("O must not be listed among entity classes")

    @property
    def with_o(self) -> tuple[str, ...]:
        return self.classes + (O_TAG,)

    def __len__(self):
        return len(self.classes)


@dataclass(frozen=True)
class LabelMap:
    """class name -> natural-language phrase, O included."""

    phrases: dict[str, str] = field(default_factory=dict)

    def phrase(self, cls: str) -> str:
        return self.phrases[cls]

    def check_covers(self, label_set: LabelSet) -> None:
        missing = [c for c in label_set.with_o if c not in self.phrases]
        if missing:
            raise DataError(f"label map is missing phrases for: {', '.join(missing)}")


@dataclass
class Episode:
    support: list[Sentence]
    query: list[Sentence]
    n_way: int
    k_shot: int

    def __post_init__(self):
        support_classes = set()
        for s in self.support:
            support_classes |= s.entity_classes()
        if len(support_classes) != self.n_way:
            raise DataError(
                f"support has {len(support_classes)} entity classes, declared N={self.n_way}")
        for s in self.query:
            extra = s.entity_classes() - support_classes
            if extra:
                raise DataError(f"query uses classes absent from support: {sorted(extra)}")
        self.classes = tuple(sorted(support_classes))


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, self.token_to_id[UNK])

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id


def read_conll(path: str) -> list[Sentence]:
    """Read `token<sep>tag` lines (tab or space separated), blank line = new sentence."""
    sentences: list[Sentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                if tokens:
                    sentences.append(Sentence(tuple(tokens), tuple(tags)))
                    tokens, tags = [], []
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected `token<sep>tag`, got {line!r}")
            try:
                tag = normalize_tag(parts[1])
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            tokens.append(parts[0])
            tags.append(tag)
    if tokens:
        sentences.append(Sentence(tuple(tokens), tuple(tags)))
    return sentences


def write_conll(sentences: Iterable[Sentence], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sent in sentences:
            for tok, tag in zip(sent.tokens, sent.tags):
                f.write(f"{tok}\t{tag}\n")
            f.write("\n")


def _label_to_io(label: str) -> str:
    if label == O_TAG:
        return O_TAG
    if label.startswith(("B-", "I-")):
        return normalize_tag(label)
    return "I-" + label  # bare class names, as in episode files


def _record_sentences(words: list[list[str]], labels: list[list[str]]) -> list[Sentence]:
    return [Sentence(tuple(w), tuple(_label_to_io(t) for t in l))
            for w, l in zip(words, labels)]


def read_fewnerd_episodes(path: str) -> list[Episode]:
    """One JSON record per line: support/query word+label arrays plus `types`."""
    episodes: list[Episode] = []
    with open(path, encoding="utf-8") as f:
        for idx, raw in enumerate(f):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                support = _record_sentences(rec["support"]["word"], rec["support"]["label"])
                query = _record_sentences(rec["query"]["word"], rec["query"]["label"])
                types = rec["types"]
            except (KeyError, json.JSONDecodeError, TypeError) as e:
                raise DataError(f"{path}: episode {idx}: malformed record ({e})") from None
            k = rec.get("K", 0)
            try:
                ep = Episode(support, query, n_way=len(types), k_shot=k)
            except DataError as e:
                raise DataError(f"{path}: episode {idx}: {e}") from None
            if set(ep.classes) != set(types):
                raise DataError(
                    f"{path}: episode {idx}: support classes {sorted(ep.classes)} "
                    f"do not match declared types {sorted(types)}")
            episodes.append(ep)
    return episodes


def load_label_map(path: str, label_set: Optional[LabelSet] = None) -> LabelMap:
    """Parse `class = phrase` lines; `#` starts a comment; O defaults to "other"."""
    phrases: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected `class = phrase`, got {line!r}")
            cls, phrase = (part.strip() for part in line.split("=", 1))
            if not cls or not phrase:
                raise DataError(f"{path}:{lineno}: empty class or phrase")
            phrases[cls] = phrase
    phrases.setdefault(O_TAG, DEFAULT_O_PHRASE)
    label_map = LabelMap(phrases)
    if label_set is not None:
        label_map.check_covers(label_set)
    return label_map


@dataclass
class SupportSample:
    sentences: list[Sentence]
    counts: dict[str, int]
    overshoot: dict[str, int]  # classes pushed past the bound, and by how much


def greedy_sample_support(sentences: list[Sentence], label_set: LabelSet,
                          n_way: int, k_shot: int, seed: int,
                          strict_k: bool = False) -> SupportSample:
    """Greedy N-way K-shot support sampling over a seed-shuffled corpus.

    Entity mentions (maximal I-runs) are counted per class.  A sentence is
    taken only when some contained class still needs shots and no contained
    class would exceed the bound (2K, or K with strict_k).  If the corpus
    cannot satisfy the bound, minimal overshoot is allowed and reported.
    """
    rng = make_rng(seed, "support_sampler")
    if len(label_set) < n_way:
        raise DataError(f"label set has {len(label_set)} classes, need N={n_way}")
    classes = (set(label_set.classes) if len(label_set) == n_way
               else set(rng.choice(list(label_set.classes), size=n_way, replace=False)))

    # only sentences whose entity classes fall inside the episode label set
    candidates = [s for s in sentences if s.entity_classes() and s.entity_classes() <= classes]
    order = [candidates[i] for i in rng.permutation(len(candidates))]

    bound = k_shot if strict_k else 2 * k_shot
    counts: Counter = Counter({c: 0 for c in classes})
    selected: list[Sentence] = []
    taken = [False] * len(order)
    overshoot: dict[str, int] = {}

    def deficient():
        return [c for c in classes if counts[c] < k_shot]

    while deficient():
        progress = False
        for i, sent in enumerate(order):
            if taken[i]:
                continue
            spans = sent.entity_span_counts()
            if not any(counts[c] < k_shot for c in spans):
                continue
            if any(counts[c] + n > bound for c, n in spans.items()):
                continue
            taken[i] = True
            selected.append(sent)
            counts.update(spans)
            progress = True
            if not deficient():
                break
        if not deficient():
            break
        if not progress:
            # relaxation pass: take the sentence helping a deficient class
            # with the smallest total overshoot past the bound
            best = None
            for i, sent in enumerate(order):
                if taken[i]:
                    continue
                spans = sent.entity_span_counts()
                if not any(counts[c] < k_shot for c in spans):
                    continue
                over = sum(max(0, counts[c] + n - bound) for c, n in spans.items())
                if best is None or over < best[0]:
                    best = (over, i, sent, spans)
            if best is None:
                missing = ", ".join(sorted(deficient()))
                raise DataError(f"cannot reach K={k_shot} shots for class(es): {missing}")
            _, i, sent, spans = best
            taken[i] = True
            selected.append(sent)
            counts.update(spans)
            for c, n in spans.items():
                if counts[c] > bound:
                    overshoot[c] = counts[c] - bound

    return SupportSample(sentences=selected, counts=dict(counts), overshoot=overshoot)


def build_vocab(sentences: Iterable[Sentence], min_count: int = 1,
                label_map: Optional[LabelMap] = None) -> Vocabulary:
    """Frequency-thresholded vocabulary; label phrase words are always kept."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    freq: Counter = Counter()
    for sent in sentences:
        freq.update(sent.tokens)
    token_to_id = {tok: i for i, tok in enumerate(RESERVED)}
    if label_map is not None:
        for phrase in label_map.phrases.values():
            for word in phrase.split():
                if word not in token_to_id:
                    token_to_id[word] = len(token_to_id)
    for tok, n in sorted(freq.items()):
        if n >= min_count and tok not in token_to_id:
            token_to_id[tok] = len(token_to_id)
    return Vocabulary(token_to_id)
