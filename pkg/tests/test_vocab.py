import numpy as np
import pytest

from stylediff.errors import VocabularyError
from stylediff.utils.vocab import Vocabulary, strip_style, style_suffix, stylize, tokenize


def test_stylize_and_strip():
    prompt = tokenize("A person is walking")
    assert stylize(prompt, ["chicken"]) == ("a", "person", "is", "walking", "in", "<chicken>", "style")
    mixed = stylize(prompt, ["chicken", "proud"])
    assert mixed[-7:] == ("in", "<chicken>", "style", "and", "in", "<proud>", "style")
    assert strip_style(mixed) == prompt
    # plain words that happen to read "in place" survive
    assert strip_style(("stands", "in", "place")) == ("stands", "in", "place")
    assert style_suffix("<robot>") == ("in", "<robot>", "style")


def test_base_ids_come_before_style_ids():
    vocab = Vocabulary.build(style_slots=3)
    assert vocab.pad_id == 0 and vocab.null_id == 1
    first = vocab.add_style("chicken")
    second = vocab.add_style("proud")
    assert (first, second) == (vocab.n_base, vocab.n_base + 1)
    assert vocab.style_slot("proud") == 1
    assert vocab.size == vocab.n_base + 3


def test_style_token_errors():
    vocab = Vocabulary.build(style_slots=1)
    vocab.add_style("chicken")
    with pytest.raises(VocabularyError):
        vocab.add_style("chicken")
    with pytest.raises(VocabularyError):
        vocab.add_style("proud")
    with pytest.raises(VocabularyError):
        vocab.style_id("robot")
    with pytest.raises(VocabularyError):
        Vocabulary(["<sneaky>"])


def test_encode_and_batch():
    vocab = Vocabulary.build()
    with pytest.raises(VocabularyError):
        vocab.encode(("a", "person", "moonwalks"))
    assert vocab.encode(()).tolist() == [vocab.null_id]
    ids, mask = vocab.batch([("a", "person"), ("someone",)])
    assert ids.shape == (2, 2)
    assert mask.tolist() == [[True, True], [True, False]]
    assert ids[1, 1] == vocab.pad_id
    assert vocab.decode(ids[1]) == ("someone",)
    with pytest.raises(VocabularyError):
        vocab.batch([("a", "person", "is")], length=2)
    null_ids, null_mask = vocab.null_batch(3)
    assert np.all(null_ids == vocab.null_id) and null_mask.all()


def test_style_limit_per_prompt():
    vocab = Vocabulary.build(style_slots=4)
    vocab.max_styles_per_prompt = 1
    for name in ("chicken", "proud"):
        vocab.add_style(name)
    vocab.encode(stylize(("a", "person"), ["chicken"]))
    with pytest.raises(VocabularyError):
        vocab.encode(stylize(("a", "person"), ["chicken", "proud"]))


def test_dict_round_trip():
    vocab = Vocabulary.build(["chicken"], style_slots=4)
    vocab.add_style("chicken")
    restored = Vocabulary.from_dict(vocab.to_dict())
    assert restored.base_words == vocab.base_words
    assert restored.style_id("chicken") == vocab.style_id("chicken")
    assert restored.size == vocab.size
