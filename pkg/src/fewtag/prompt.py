"""Label suffix prompt construction and full model input assembly.

The model input is laid out as

    [CLS] context-tokens [SEP] prompt-tokens [SEP] [PAD]...

where the prompt lists every class (entity classes in label-set order, O
last) as a [CLS] marker followed by the class's natural-language phrase.
The [CLS] marker position is the class's representative token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CLS, DataError, LabelMap, LabelSet, PAD, SEP, Sentence, Vocabulary


@dataclass(frozen=True)
class LabelPrompt:
    tokens: tuple[str, ...]
    # class -> offset of its [CLS] marker within `tokens`
    rep_offsets: dict[str, int]
    class_order: tuple[str, ...]

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class InputSequence:
    token_ids: np.ndarray            # (max_len,) int
    context_mask: np.ndarray         # (max_len,) bool, true at valid context tokens
    label_rep_index: dict[str, int]  # class -> absolute position of its [CLS] marker
    gold_tags: tuple[str, ...]       # per context position, aligned with context_mask
    class_order: tuple[str, ...]
    max_len: int
    n_occupied: int  # positions before padding starts

    @property
    def n_context(self) -> int:
        return int(self.context_mask.sum())

    def context_positions(self) -> np.ndarray:
        return np.nonzero(self.context_mask)[0]


def build_label_prompt(label_set: LabelSet, label_map: LabelMap) -> LabelPrompt:
    """Per class: [CLS] then the phrase words; the [CLS] is the representative."""
    if len(label_set) == 0:
        raise DataError("label set has no entity classes")
    label_map.check_covers(label_set)
    tokens: list[str] = []
    rep_offsets: dict[str, int] = {}
    class_order = label_set.with_o
    for cls in class_order:
        rep_offsets[cls] = len(tokens)
        tokens.append(CLS)
        tokens.extend(label_map.phrase(cls).split())
    return LabelPrompt(tuple(tokens), rep_offsets, class_order)


def assemble_input(sentence: Sentence, prompt: LabelPrompt, vocab: Vocabulary,
                   max_len: int = 128) -> InputSequence:
    """Concatenate context and prompt with specials, pad to max_len.

    Context is truncated from the right when over budget; the prompt is
    never truncated.
    """
    budget = max_len - len(prompt) - 3  # leading [CLS], two [SEP]
    if budget < 1:
        raise DataError(
            f"prompt of {len(prompt)} tokens leaves no context room at max_len={max_len}")
    n_ctx = min(len(sentence.tokens), budget)

    words = [CLS] + list(sentence.tokens[:n_ctx]) + [SEP] + list(prompt.tokens) + [SEP]
    ids = np.full(max_len, vocab.id(PAD), dtype=np.int64)
    ids[:len(words)] = [vocab.id(w) for w in words]

    context_mask = np.zeros(max_len, dtype=bool)
    context_mask[1:1 + n_ctx] = True

    prompt_start = 1 + n_ctx + 1
    rep_index = {cls: prompt_start + off for cls, off in prompt.rep_offsets.items()}

    gold = sentence.tags[:n_ctx]
    for tag in gold:
        cls = tag if tag == "O" else tag[2:]
        if cls not in rep_index:
            raise DataError(f"gold tag class {cls!r} has no label representative")

    return InputSequence(token_ids=ids, context_mask=context_mask,
                         label_rep_index=rep_index, gold_tags=gold,
                         class_order=prompt.class_order, max_len=max_len,
                         n_occupied=len(words))
