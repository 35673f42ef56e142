import pytest

from mever.tokenizer import SPECIAL_TOKENS, Vocabulary


def test_build_sorts_and_caps():
    vocab = Vocabulary.build(["b a", "c a"], max_size=8)
    assert vocab.tokens[:6] == list(SPECIAL_TOKENS)
    assert vocab.tokens[6:] == ["a", "b"]  # capped at 8, lexicographic


def test_encode_decode_round_trip():
    vocab = Vocabulary.build(["the chart rises sharply"], max_size=20)
    ids = vocab.encode("The chart RISES")
    assert vocab.decode(ids) == "the chart rises"


def test_unknown_words_map_to_unk():
    vocab = Vocabulary.build(["alpha beta"], max_size=10)
    assert vocab.encode("gamma") == [vocab.unk_id]


def test_decode_skips_specials_and_out_of_range():
    vocab = Vocabulary.build(["alpha"], max_size=10)
    ids = [vocab.cls_id, vocab.index["alpha"], vocab.eos_id, 999]
    assert vocab.decode(ids) == "alpha"


def test_too_small_vocab_rejected():
    with pytest.raises(ValueError):
        Vocabulary.build(["x"], max_size=6)
