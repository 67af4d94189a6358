import numpy as np
import pytest

from fewtag.data import DataError, LabelMap, LabelSet, Sentence, build_vocab
from fewtag.prompt import assemble_input, build_label_prompt


LM = LabelMap({"person": "person", "location": "location", "O": "other",
               "creative-work": "creative work"})


def test_prompt_layout_and_representatives():
    prompt = build_label_prompt(LabelSet(("person", "location")), LM)
    assert prompt.tokens == ("[CLS]", "person", "[CLS]", "location", "[CLS]", "other")
    assert prompt.rep_offsets == {"person": 0, "location": 2, "O": 4}
    assert prompt.class_order == ("person", "location", "O")


def test_multiword_phrase_single_representative():
    prompt = build_label_prompt(LabelSet(("creative-work",)), LM)
    assert prompt.tokens[:3] == ("[CLS]", "creative", "work")
    assert prompt.rep_offsets["creative-work"] == 0


def test_empty_label_set_rejected():
    with pytest.raises(DataError):
        build_label_prompt(LabelSet(()), LM)


def test_uncovered_class_rejected():
    with pytest.raises(DataError, match="group"):
        build_label_prompt(LabelSet(("group",)), LM)


def fixture():
    sent = Sentence(("alice", "went", "home"), ("I-person", "O", "O"))
    prompt = build_label_prompt(LabelSet(("person", "location")), LM)
    vocab = build_vocab([sent], label_map=LM)
    return sent, prompt, vocab


def test_assemble_layout_arithmetic():
    sent, prompt, vocab = fixture()
    seq = assemble_input(sent, prompt, vocab, max_len=16)
    assert seq.token_ids.shape == (16,)
    # [CLS] a w h [SEP] prompt(6) [SEP] = 12 occupied, 4 pad
    assert np.sum(seq.token_ids != vocab.id("[PAD]")) == 12
    assert seq.n_context == 3
    np.testing.assert_array_equal(seq.context_positions(), [1, 2, 3])
    assert seq.gold_tags == ("I-person", "O", "O")


def test_representatives_carry_cls_id():
    sent, prompt, vocab = fixture()
    seq = assemble_input(sent, prompt, vocab, max_len=16)
    for cls, pos in seq.label_rep_index.items():
        assert seq.token_ids[pos] == vocab.id("[CLS]")
    assert seq.label_rep_index == {"person": 5, "location": 7, "O": 9}


def test_context_mask_false_outside_context():
    sent, prompt, vocab = fixture()
    seq = assemble_input(sent, prompt, vocab, max_len=16)
    assert not seq.context_mask[0]
    assert not seq.context_mask[4:].any()


def test_truncation_aligns_gold_tags():
    sent = Sentence(tuple("abcdefgh"), ("I-person",) * 8)
    prompt = build_label_prompt(LabelSet(("person",)), LM)
    vocab = build_vocab([sent], label_map=LM)
    seq = assemble_input(sent, prompt, vocab, max_len=12)
    # budget = 12 - 4 - 3 = 5
    assert seq.n_context == 5
    assert seq.gold_tags == ("I-person",) * 5


def test_prompt_too_long_rejected():
    sent, prompt, vocab = fixture()
    with pytest.raises(DataError):
        assemble_input(sent, prompt, vocab, max_len=8)


def test_assembly_pure():
    sent, prompt, vocab = fixture()
    a = assemble_input(sent, prompt, vocab, max_len=20)
    b = assemble_input(sent, prompt, vocab, max_len=20)
    np.testing.assert_array_equal(a.token_ids, b.token_ids)
    np.testing.assert_array_equal(a.context_mask, b.context_mask)
    assert a.label_rep_index == b.label_rep_index
