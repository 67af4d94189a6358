"""Nearest-neighbor decoding, span extraction, micro-F1, and the two
evaluation protocols (episode evaluation and low-resource evaluation).

Decoding runs on raw encoder hidden states; the projection heads are not
used at inference time.  Each query token takes the tag of its nearest
support token under squared Euclidean distance, ties broken by the lowest
bank row index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import (DataError, Episode, LabelSet, Sentence, greedy_sample_support,
                   tag_class)
from .encoder import encode
from .gaussian import project
from .prompt import assemble_input, build_label_prompt
from .training import Checkpoint, TrainConfig, finetune


@dataclass
class SupportBank:
    vectors: np.ndarray                       # (n, d) support token representations
    tags: tuple[str, ...]                     # parallel IO tags
    provenance: tuple[tuple[int, int], ...]   # (sentence index, token position)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.tags):
            raise DataError("support bank rows and tags must align")
        if len(self.tags) == 0:
            raise DataError("support bank is empty")


@dataclass(frozen=True)
class Span:
    start: int
    end: int  # inclusive
    cls: str

    def __post_init__(self):
        if not (0 <= self.start <= self.end) or self.cls == "O":
            raise DataError(f"invalid span ({self.start}, {self.end}, {self.cls})")


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    per_run: list[float] = field(default_factory=list)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_run)) if self.per_run else self.f1

    @property
    def std(self) -> float:
        # sample standard deviation over runs
        return float(np.std(self.per_run, ddof=1)) if len(self.per_run) > 1 else 0.0

    def summary(self) -> dict:
        out = {"tp": self.tp, "fp": self.fp, "fn": self.fn,
               "precision": self.precision, "recall": self.recall, "f1": self.f1}
        if self.per_run:
            out.update({"per_run": self.per_run, "mean": self.mean, "std": self.std})
        return out


def _context_hidden(ckpt: Checkpoint, sentence: Sentence, max_len: int,
                    use_projection: bool = False) -> tuple[np.ndarray, tuple[str, ...]]:
    prompt = build_label_prompt(ckpt.label_set, ckpt.label_map)
    seq = assemble_input(sentence, prompt, ckpt.vocab, max_len=max_len)
    h = encode(ckpt.params, ckpt.encoder_config, seq, train_mode=False)
    rows = h.data[seq.context_positions()]
    if use_projection:
        from . import autodiff as ad
        rows = project(ckpt.params, ad.Tensor(rows)).mu.data
    return rows, seq.gold_tags


def build_support_bank(ckpt: Checkpoint, support: list[Sentence],
                       max_len: int = 128, use_projection: bool = False) -> SupportBank:
    """Eval-mode hidden states of every valid support context token."""
    vectors: list[np.ndarray] = []
    tags: list[str] = []
    provenance: list[tuple[int, int]] = []
    for si, sent in enumerate(support):
        rows, gold = _context_hidden(ckpt, sent, max_len, use_projection)
        for pos, (row, tag) in enumerate(zip(rows, gold)):
            vectors.append(row)
            tags.append(tag)
            provenance.append((si, pos))
    if not vectors:
        raise DataError("support set produced no context tokens")
    return SupportBank(vectors=np.stack(vectors), tags=tuple(tags),
                       provenance=tuple(provenance))


def nn_decode(query_hidden: np.ndarray, bank: SupportBank) -> list[str]:
    """Tag of the globally nearest support token, per query row."""
    query_hidden = np.atleast_2d(np.asarray(query_hidden, dtype=np.float64))
    if query_hidden.shape[1] != bank.vectors.shape[1]:
        raise DataError(
            f"query dim {query_hidden.shape[1]} != bank dim {bank.vectors.shape[1]}")
    out = []
    for q in query_hidden:
        dists = ((bank.vectors - q) ** 2).sum(axis=1)
        out.append(bank.tags[int(np.argmin(dists))])  # argmin takes the first minimum
    return out


def decode_sentence(ckpt: Checkpoint, sentence: Sentence, bank: SupportBank,
                    max_len: int = 128, use_projection: bool = False) -> list[str]:
    """Predicted IO tags for a sentence; truncated positions default to O."""
    rows, _ = _context_hidden(ckpt, sentence, max_len, use_projection)
    tags = nn_decode(rows, bank)
    return tags + ["O"] * (len(sentence.tokens) - len(tags))


def extract_spans(tags) -> list[Span]:
    """Maximal runs of identical I-class tags; a class change starts a new span."""
    tags = list(tags)
    spans: list[Span] = []
    start = None
    current = None
    for i, tag in enumerate(tags):
        cls = tag_class(tag)
        if cls != current:
            if current is not None:
                spans.append(Span(start, i - 1, current))
            start, current = (i, cls) if cls is not None else (None, None)
    if current is not None:
        spans.append(Span(start, len(tags) - 1, current))
    return spans


def span_counts(gold: list[list[Span]], pred: list[list[Span]]) -> tuple[int, int, int]:
    if len(gold) != len(pred):
        raise DataError("gold and predicted sentence lists must align")
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        gs, ps = set(g), set(p)
        tp += len(gs & ps)
        fp += len(ps - gs)
        fn += len(gs - ps)
    return tp, fp, fn


def micro_f1(gold: list[list[Span]], pred: list[list[Span]]) -> EvalReport:
    """Exact-match (start, end, class) span scoring, pooled over sentences."""
    tp, fp, fn = span_counts(gold, pred)
    return EvalReport(tp=tp, fp=fp, fn=fn)


def evaluate_episodes(checkpoint: Checkpoint, episodes: list[Episode],
                      config: TrainConfig) -> EvalReport:
    """Per episode: re-start from the source checkpoint, fine-tune on the
    support, decode the queries; counts are pooled over all episodes before
    F1 is computed."""
    if not episodes:
        raise DataError("no episodes to evaluate")
    tp = fp = fn = 0
    for idx, ep in enumerate(episodes):
        try:
            label_set = LabelSet(tuple(ep.classes), role="target")
            tuned, _ = finetune(checkpoint, ep.support, label_set,
                                checkpoint.label_map, config)
            bank = build_support_bank(tuned, ep.support, max_len=config.max_len)
            gold = [extract_spans(s.tags) for s in ep.query]
            pred = [extract_spans(decode_sentence(tuned, s, bank, max_len=config.max_len))
                    for s in ep.query]
            a, b, c = span_counts(gold, pred)
        except Exception as e:
            raise type(e)(f"episode {idx}: {e}") from e
        tp, fp, fn = tp + a, fp + b, fn + c
    return EvalReport(tp=tp, fp=fp, fn=fn)


def low_resource_eval(checkpoint: Checkpoint, target_label_set: LabelSet,
                      support_corpus: list[Sentence], test_corpus: list[Sentence],
                      n_way: int, k_shot: int, seeds: list[int],
                      config: TrainConfig, strict_k: bool = False,
                      skip_failed_runs: bool = False) -> EvalReport:
    """T sampled supports; fine-tune on each and score the full test corpus.

    Reports per-run F1 plus mean and sample standard deviation.  A sampling
    failure aborts unless skip_failed_runs is set, in which case the run is
    recorded as excluded.
    """
    if not seeds:
        raise DataError("low-resource evaluation needs at least one seed")
    per_run: list[float] = []
    pooled = [0, 0, 0]
    for seed in seeds:
        try:
            sample = greedy_sample_support(support_corpus, target_label_set,
                                           n_way, k_shot, seed=seed, strict_k=strict_k)
        except DataError:
            if skip_failed_runs:
                continue
            raise
        run_config = TrainConfig(**{**config.__dict__, "seed": seed})
        tuned, _ = finetune(checkpoint, sample.sentences, target_label_set,
                            checkpoint.label_map, run_config)
        bank = build_support_bank(tuned, sample.sentences, max_len=config.max_len)
        gold = [extract_spans(s.tags) for s in test_corpus]
        pred = [extract_spans(decode_sentence(tuned, s, bank, max_len=config.max_len))
                for s in test_corpus]
        report = micro_f1(gold, pred)
        per_run.append(report.f1)
        pooled = [pooled[0] + report.tp, pooled[1] + report.fp, pooled[2] + report.fn]
    return EvalReport(tp=pooled[0], fp=pooled[1], fn=pooled[2], per_run=per_run)


def dump_embeddings(checkpoint: Checkpoint, sentences: list[Sentence], path: str,
                    max_len: int = 128) -> int:
    """Tab-separated dump: token, gold tag, hidden-state components.

    Returns the number of data rows written.
    """
    d = checkpoint.encoder_config.d
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write("token\ttag\t" + "\t".join(f"h{i}" for i in range(d)) + "\n")
        for sent in sentences:
            rows, gold = _context_hidden(checkpoint, sent, max_len)
            for tok, tag, row in zip(sent.tokens, gold, rows):
                comps = "\t".join(f"{v:.10g}" for v in row)
                f.write(f"{tok}\t{tag}\t{comps}\n")
                n += 1
    return n
