"""Synthetic corpora for behavioral tests.

`separable_corpus` gives each entity class its own disjoint vocabulary, so
a token's surface form fully determines its class.  `contextual_corpus`
shares entity surface forms across classes and disambiguates only through a
class-specific context marker word, forcing the encoder to use context.
"""

from __future__ import annotations

import numpy as np

from fewtag.data import LabelMap, LabelSet, Sentence


def _o_words(prefix, n):
    return [f"{prefix}{i}" for i in range(n)]


def separable_corpus(classes=("A", "B"), n_sentences=20, seed=0,
                     class_vocab_size=6, o_vocab_size=8):
    rng = np.random.default_rng(seed)
    vocab = {c: [f"{c.lower()}ent{i}" for i in range(class_vocab_size)] for c in classes}
    o_vocab = _o_words("filler", o_vocab_size)
    sentences = []
    for s in range(n_sentences):
        cls = classes[s % len(classes)]
        ent_len = int(rng.integers(1, 3))
        ents = [str(rng.choice(vocab[cls])) for _ in range(ent_len)]
        lead = [str(rng.choice(o_vocab))]
        tail = [str(rng.choice(o_vocab))]
        tokens = lead + ents + tail
        tags = ["O"] + [f"I-{cls}"] * ent_len + ["O"]
        sentences.append(Sentence(tuple(tokens), tuple(tags)))
    return sentences


def contextual_corpus(classes=("X", "Y"), n_sentences=20, seed=0,
                      shared_vocab_size=6, o_vocab_size=8):
    """Entity words are shared; only a marker word reveals the class."""
    rng = np.random.default_rng(seed)
    shared = [f"ent{i}" for i in range(shared_vocab_size)]
    markers = {c: [f"{c.lower()}mark{i}" for i in range(3)] for c in classes}
    o_vocab = _o_words("pad", o_vocab_size)
    sentences = []
    for s in range(n_sentences):
        cls = classes[s % len(classes)]
        ent = str(rng.choice(shared))
        marker = str(rng.choice(markers[cls]))
        filler = str(rng.choice(o_vocab))
        tokens = (marker, ent, filler)
        tags = ("O", f"I-{cls}", "O")
        sentences.append(Sentence(tokens, tags))
    return sentences


def label_setup(classes):
    label_set = LabelSet(tuple(classes))
    label_map = LabelMap({c: f"type {c.lower()}" for c in classes} | {"O": "other"})
    return label_set, label_map


def all_phrase_words(*label_maps):
    words = []
    for lm in label_maps:
        for phrase in lm.phrases.values():
            words.extend(phrase.split())
    return words
